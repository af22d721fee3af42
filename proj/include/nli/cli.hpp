#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "nli/checkpoint.hpp"
#include "nli/corpus.hpp"
#include "nli/eval.hpp"
#include "nli/model.hpp"
#include "nli/train.hpp"

namespace nli::cli {

/// Everything a run needs, resolved from defaults, then an optional
/// --config file, then command-line flags (later sources win).
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string train_path, dev_path, data_path;
  std::string emb_path;
  std::string checkpoint, checkpoint_b;
  std::string preds_a, preds_b;
  std::string dump_path;
  std::string out_dir;
  std::string config_path;
  std::size_t analyze_index = 0;
  bool with_oracle = false;
  bool with_ttest = false;

  RunConfig() {
    if (const char* env = std::getenv("NLI_OUT_DIR")) out_dir = env;
    if (out_dir.empty()) out_dir = "nli_out";
  }
};

namespace detail {

template <class T>
void get_into(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

inline void apply_config_json(const nlohmann::json& j, RunConfig& rc) {
  if (j.contains("model")) {
    const auto& m = j.at("model");
    std::string s;
    if (m.contains("model")) rc.model.kind = model_kind_from(m.at("model").get<std::string>());
    if (m.contains("encoder")) rc.model.encoder = feed_kind_from(m.at("encoder").get<std::string>());
    if (m.contains("composition"))
      rc.model.composition = feed_kind_from(m.at("composition").get<std::string>());
    if (m.contains("pooling")) rc.model.pooling = pool_mode_from(m.at("pooling").get<std::string>());
    get_into(m, "diff_prod", rc.model.diff_prod);
    get_into(m, "premise_attn", rc.model.premise_attn);
    get_into(m, "hypothesis_attn", rc.model.hypothesis_attn);
    get_into(m, "tied_forget", rc.model.tied_forget);
    get_into(m, "use_bias", rc.model.use_bias);
    get_into(m, "embed_dim", rc.model.embed_dim);
    get_into(m, "hidden", rc.model.hidden);
    get_into(m, "mlp_hidden", rc.model.mlp_hidden);
    get_into(m, "dropout", rc.model.dropout);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    get_into(t, "batch_size", rc.train.batch_size);
    get_into(t, "max_epochs", rc.train.max_epochs);
    get_into(t, "patience", rc.train.patience);
    get_into(t, "stop_dev_accuracy", rc.train.stop_dev_accuracy);
    get_into(t, "lr", rc.train.adam.lr);
    get_into(t, "clip_norm", rc.train.adam.clip_norm);
    get_into(t, "seed", rc.train.seed);
  }
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    get_into(p, "train", rc.train_path);
    get_into(p, "dev", rc.dev_path);
    get_into(p, "data", rc.data_path);
    get_into(p, "emb", rc.emb_path);
    get_into(p, "checkpoint", rc.checkpoint);
    get_into(p, "checkpoint_b", rc.checkpoint_b);
    get_into(p, "preds_a", rc.preds_a);
    get_into(p, "preds_b", rc.preds_b);
    get_into(p, "dump", rc.dump_path);
    get_into(p, "out", rc.out_dir);
  }
  if (j.contains("ensemble")) {
    get_into(j.at("ensemble"), "oracle", rc.with_oracle);
    get_into(j.at("ensemble"), "ttest", rc.with_ttest);
  }
  if (j.contains("analyze")) get_into(j.at("analyze"), "index", rc.analyze_index);
}

inline nlohmann::json echo_json(const RunConfig& rc, const std::string& sub) {
  nlohmann::json j;
  j["subcommand"] = sub;
  j["model"] = config_to_json(rc.model);
  j["train"] = {{"batch_size", rc.train.batch_size},
                {"max_epochs", rc.train.max_epochs},
                {"patience", rc.train.patience},
                {"stop_dev_accuracy", rc.train.stop_dev_accuracy},
                {"lr", rc.train.adam.lr},
                {"clip_norm", rc.train.adam.clip_norm},
                {"seed", rc.train.seed}};
  j["paths"] = {{"train", rc.train_path},   {"dev", rc.dev_path},
                {"data", rc.data_path},     {"emb", rc.emb_path},
                {"checkpoint", rc.checkpoint}, {"checkpoint_b", rc.checkpoint_b},
                {"preds_a", rc.preds_a},    {"preds_b", rc.preds_b},
                {"dump", rc.dump_path},     {"out", rc.out_dir}};
  j["ensemble"] = {{"oracle", rc.with_oracle}, {"ttest", rc.with_ttest}};
  j["analyze"] = {{"index", rc.analyze_index}};
  return j;
}

inline void write_echo(const RunConfig& rc, const std::string& sub) {
  std::filesystem::create_directories(rc.out_dir);
  const std::string path = rc.out_dir + "/resolved_config.json";
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << echo_json(rc, sub).dump(2) << '\n';
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline CorpusLoad load_corpus_any(const std::string& path) {
  if (ends_with(path, ".tsv") || ends_with(path, ".txt")) return load_tsv(path);
  return load_jsonl(path);
}

inline std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

inline std::vector<PredictionRecord> load_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read predictions " + path);
  std::vector<PredictionRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      PredictionRecord r;
      r.id = j.at("id").get<std::size_t>();
      auto gold = label_from(j.at("gold").get<std::string>());
      auto pred = label_from(j.at("predicted").get<std::string>());
      if (!gold || !pred) throw DataError("unknown label name");
      r.gold = static_cast<int>(*gold);
      r.predicted = static_cast<int>(*pred);
      const auto& p = j.at("probs");
      if (p.size() != 3) throw DataError("probs must have three entries");
      for (int k = 0; k < 3; ++k) r.probs[k] = p.at(k).get<double>();
      out.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (out.empty()) throw DataError("no prediction records in " + path);
  return out;
}

struct LoadedModel {
  Model model;
  Vocabulary vocab;
};

inline LoadedModel load_model(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  Model model = restore_model(ck);
  Vocabulary vocab = vocab_from_checkpoint(ck, model);
  return {std::move(model), std::move(vocab)};
}

inline std::vector<std::string> tokens_of(const CorpusLoad& a, const CorpusLoad& b) {
  std::vector<SentencePair> all = a.pairs;
  all.insert(all.end(), b.pairs.begin(), b.pairs.end());
  return collect_tokens(all);
}

// --- subcommand bodies (validated config; may touch the filesystem) ---

inline int cmd_train(const RunConfig& rc, std::ostream& out) {
  write_echo(rc, "train");
  CorpusLoad train_corpus = load_corpus_any(rc.train_path);
  CorpusLoad dev_corpus = load_corpus_any(rc.dev_path);
  if (train_corpus.pairs.empty() || dev_corpus.pairs.empty())
    throw DataError("train and dev sets must be nonempty");

  Rng rng(rc.train.seed);
  Vocabulary vocab = load_embeddings(rc.emb_path, rc.model.embed_dim,
                                     tokens_of(train_corpus, dev_corpus), rng);
  Model model = Model::create(rc.model, vocab.embeddings, rng);
  auto train_data = prepare(train_corpus.pairs, vocab, rc.model.kind);
  auto dev_data = prepare(dev_corpus.pairs, vocab, rc.model.kind);

  const std::string log_path = rc.out_dir + "/train_log.jsonl";
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw IoError("cannot write " + log_path);
  TrainResult res = train_loop(model, train_data, dev_data, rc.train, &log);

  save_checkpoint(rc.out_dir + "/final.ckpt", model, vocab.tokens);
  restore_snapshot(model.params, res.best);
  save_checkpoint(rc.out_dir + "/best.ckpt", model, vocab.tokens);
  out << "epochs " << res.log.size() << " best_epoch " << res.best_epoch
      << " best_dev " << fixed4(res.best_dev < 0 ? 0.0 : res.best_dev) << '\n';
  return 0;
}

inline int cmd_eval(const RunConfig& rc, std::ostream& out) {
  write_echo(rc, "eval");
  LoadedModel lm = load_model(rc.checkpoint);
  CorpusLoad corpus = load_corpus_any(rc.data_path);
  auto data = prepare(corpus.pairs, lm.vocab, lm.model.cfg.kind);
  EvalResult res = evaluate(lm.model, data);
  out << "accuracy " << fixed4(res.accuracy) << '\n';
  if (!rc.dump_path.empty()) dump_predictions(res.records, rc.dump_path);
  return 0;
}

inline int cmd_predict(const RunConfig& rc, std::ostream& out) {
  write_echo(rc, "predict");
  LoadedModel lm = load_model(rc.checkpoint);
  CorpusLoad corpus = load_corpus_any(rc.data_path);
  auto data = prepare(corpus.pairs, lm.vocab, lm.model.cfg.kind);
  EvalResult res = evaluate(lm.model, data);
  if (rc.dump_path.empty())
    dump_predictions(res.records, out);
  else
    dump_predictions(res.records, rc.dump_path);
  return 0;
}

inline int cmd_ensemble(const RunConfig& rc, std::ostream& out) {
  write_echo(rc, "ensemble");
  std::vector<PredictionRecord> ra, rb;
  if (!rc.preds_a.empty()) {
    ra = load_predictions(rc.preds_a);
    rb = load_predictions(rc.preds_b);
  } else {
    LoadedModel a = load_model(rc.checkpoint);
    LoadedModel b = load_model(rc.checkpoint_b);
    CorpusLoad corpus = load_corpus_any(rc.data_path);
    ra = evaluate(a.model, prepare(corpus.pairs, a.vocab, a.model.cfg.kind)).records;
    rb = evaluate(b.model, prepare(corpus.pairs, b.vocab, b.model.cfg.kind)).records;
  }
  try {
    auto him = ensemble_records(ra, rb);
    out << "him_accuracy " << fixed4(accuracy_of(him)) << '\n';
    if (!rc.dump_path.empty()) dump_predictions(him, rc.dump_path);
    if (rc.with_oracle) out << "oracle_accuracy " << fixed4(oracle_accuracy(ra, rb)) << '\n';
    if (rc.with_ttest) {
      TTestResult t = paired_significance(ra, rb);
      char buf[128];
      std::snprintf(buf, sizeof(buf), "t %.6f dof %zu p %.6g%s", t.t, t.dof, t.p,
                    t.degenerate ? " degenerate" : "");
      out << buf << '\n';
    }
  } catch (const ContractError& e) {
    throw DataError(e.what());  // misaligned input files are a data problem
  }
  return 0;
}

inline int cmd_analyze(const RunConfig& rc, std::ostream& out) {
  write_echo(rc, "analyze");
  LoadedModel lm = load_model(rc.checkpoint);
  CorpusLoad corpus = load_corpus_any(rc.data_path);
  if (rc.analyze_index >= corpus.pairs.size())
    throw DataError("example index " + std::to_string(rc.analyze_index) +
                    " out of range; dataset has " + std::to_string(corpus.pairs.size()) +
                    " pairs");
  std::filesystem::create_directories(rc.out_dir);
  AnalysisFiles files =
      export_analysis(lm.model, corpus.pairs[rc.analyze_index], lm.vocab, rc.out_dir);
  out << files.attention << '\n'
      << files.gates_premise << '\n'
      << files.gates_hypothesis << '\n';
  return 0;
}

}  // namespace detail

/// Full command-line entry point; returns the process exit code.
/// 0 success, 2 usage error, 3 data/input error, 4 runtime error.
inline int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  RunConfig rc;

  // The config file loads first so flags can override it.
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string value;
    if (args[i] == "--config" && i + 1 < args.size())
      value = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0)
      value = args[i].substr(9);
    if (!value.empty()) {
      std::ifstream in(value);
      if (!in) {
        err << "data error: cannot read config " << value << '\n';
        return 3;
      }
      try {
        detail::apply_config_json(nlohmann::json::parse(in), rc);
      } catch (const nlohmann::json::exception& e) {
        err << "data error: bad config " << value << ": " << e.what() << '\n';
        return 3;
      } catch (const Error& e) {
        err << "data error: bad config " << value << ": " << e.what() << '\n';
        return 3;
      }
      rc.config_path = value;
      break;
    }
  }

  CLI::App app{"ESIM / tree-LSTM natural language inference"};
  app.require_subcommand(1);

  std::string kind_str = to_string(rc.model.kind);
  std::string encoder_str = to_string(rc.model.encoder);
  std::string composition_str = to_string(rc.model.composition);
  std::string pooling_str = to_string(rc.model.pooling);

  auto add_common = [&](CLI::App* sub) {
    // Repeated flags take the last value, mirroring config-over-default
    // precedence within one command line.
    auto opt = [&](const std::string& name, auto& var, const std::string& desc) {
      return sub->add_option(name, var, desc)
          ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    };
    opt("--config", rc.config_path, "JSON config file (loaded before flags)");
    opt("--out", rc.out_dir, "output directory");
    opt("--seed", rc.train.seed, "global random seed");

    opt("--model", kind_str, "model kind")
        ->check(CLI::IsMember({"esim", "tree", "fulltree"}));
    opt("--encoder", encoder_str, "input encoder (sequential model)")
        ->check(CLI::IsMember({"bilstm", "ff"}));
    opt("--composition", composition_str, "composition layer (sequential model)")
        ->check(CLI::IsMember({"bilstm", "ff"}));
    opt("--pooling", pooling_str, "pooling mode")
        ->check(CLI::IsMember({"avemax", "sum"}));
    sub->add_flag("--diff-prod,!--no-diff-prod", rc.model.diff_prod,
                  "difference and product enhancement features");
    sub->add_flag("--premise-attn,!--no-premise-attn", rc.model.premise_attn,
                  "premise-side attention");
    sub->add_flag("--hypothesis-attn,!--no-hypothesis-attn", rc.model.hypothesis_attn,
                  "hypothesis-side attention");
    sub->add_flag("--tied-forget,!--untied-forget", rc.model.tied_forget,
                  "share the tree-LSTM forget weights across children");
    opt("--embed-dim", rc.model.embed_dim, "embedding width");
    opt("--hidden", rc.model.hidden, "recurrent hidden width");
    opt("--mlp-hidden", rc.model.mlp_hidden, "classifier hidden width");
    opt("--dropout", rc.model.dropout, "dropout rate");

    opt("--train", rc.train_path, "training data (jsonl or tsv)");
    opt("--dev", rc.dev_path, "development data");
    opt("--data", rc.data_path, "evaluation data");
    opt("--emb", rc.emb_path, "pretrained embeddings (empty = random)");
    opt("--checkpoint", rc.checkpoint, "model checkpoint");
    opt("--checkpoint-b", rc.checkpoint_b, "second checkpoint (ensemble)");
    opt("--preds-a", rc.preds_a, "first prediction dump (ensemble)");
    opt("--preds-b", rc.preds_b, "second prediction dump (ensemble)");
    opt("--dump", rc.dump_path, "prediction dump output path");

    opt("--batch-size", rc.train.batch_size, "examples per batch");
    opt("--epochs", rc.train.max_epochs, "maximum training epochs");
    opt("--patience", rc.train.patience, "early-stopping patience");
    opt("--stop-dev-acc", rc.train.stop_dev_accuracy,
        "stop once dev accuracy reaches this value");
    opt("--lr", rc.train.adam.lr, "Adam learning rate");
    opt("--clip-norm", rc.train.adam.clip_norm,
        "global gradient norm clip (0 disables)");

    opt("--index", rc.analyze_index, "example index (analyze)");
    sub->add_flag("--oracle", rc.with_oracle, "report oracle accuracy (ensemble)");
    sub->add_flag("--ttest", rc.with_ttest, "report the paired t test (ensemble)");
  };

  CLI::App* train_cmd = app.add_subcommand("train", "train a model");
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  CLI::App* predict_cmd = app.add_subcommand("predict", "dump predictions");
  CLI::App* ensemble_cmd = app.add_subcommand("ensemble", "average two models");
  CLI::App* analyze_cmd = app.add_subcommand("analyze", "export attention and gate norms");
  for (CLI::App* sub : {train_cmd, eval_cmd, predict_cmd, ensemble_cmd, analyze_cmd})
    add_common(sub);

  try {
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  }

  // Flag validation happens before any input file is touched.
  try {
    rc.model.kind = model_kind_from(kind_str);
    rc.model.encoder = feed_kind_from(encoder_str);
    rc.model.composition = feed_kind_from(composition_str);
    rc.model.pooling = pool_mode_from(pooling_str);
    rc.model.validate();
    auto need = [&](const std::string& v, const char* what) {
      if (v.empty()) throw ContractError(std::string("missing required option ") + what);
    };
    if (app.got_subcommand(train_cmd)) {
      need(rc.train_path, "--train");
      need(rc.dev_path, "--dev");
    } else if (app.got_subcommand(eval_cmd) || app.got_subcommand(predict_cmd)) {
      need(rc.checkpoint, "--checkpoint");
      need(rc.data_path, "--data");
    } else if (app.got_subcommand(ensemble_cmd)) {
      const bool from_preds = !rc.preds_a.empty() || !rc.preds_b.empty();
      const bool from_ckpts = !rc.checkpoint.empty() || !rc.checkpoint_b.empty();
      if (from_preds && from_ckpts)
        throw ContractError("pass either two prediction dumps or two checkpoints, not both");
      if (from_preds) {
        need(rc.preds_a, "--preds-a");
        need(rc.preds_b, "--preds-b");
      } else {
        need(rc.checkpoint, "--checkpoint");
        need(rc.checkpoint_b, "--checkpoint-b");
        need(rc.data_path, "--data");
      }
    } else if (app.got_subcommand(analyze_cmd)) {
      need(rc.checkpoint, "--checkpoint");
      need(rc.data_path, "--data");
    }
  } catch (const Error& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (app.got_subcommand(train_cmd)) return detail::cmd_train(rc, out);
    if (app.got_subcommand(eval_cmd)) return detail::cmd_eval(rc, out);
    if (app.got_subcommand(predict_cmd)) return detail::cmd_predict(rc, out);
    if (app.got_subcommand(ensemble_cmd)) return detail::cmd_ensemble(rc, out);
    return detail::cmd_analyze(rc, out);
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return 3;
  } catch (const nli::ParseError& e) {
    err << "data error: " << e.what() << '\n';
    return 3;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 4;
  }
}

}  // namespace nli::cli
