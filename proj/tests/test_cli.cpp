#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "nli/cli.hpp"

namespace fs = std::filesystem;
using nli::cli::run_cli;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(std::move(args), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

// Twelve separable pairs in SNLI-style JSONL, binarized parses included.
void write_micro_jsonl(const std::string& path) {
  const char* kw[3] = {"yes", "no", "maybe"};
  const char* names[3] = {"entailment", "contradiction", "neutral"};
  const char* filler[4] = {"red", "blue", "green", "gray"};
  std::ofstream out(path);
  REQUIRE(out.good());
  for (int y = 0; y < 3; ++y)
    for (int r = 0; r < 4; ++r) {
      std::string p1 = filler[r], p2 = filler[(r + 1) % 4];
      std::string h1 = kw[y], h2 = filler[(r + 2) % 4];
      nlohmann::json j;
      j["gold_label"] = names[y];
      j["sentence1"] = p1 + " " + p2;
      j["sentence2"] = h1 + " " + h2;
      j["sentence1_binary_parse"] = "( " + p1 + " " + p2 + " )";
      j["sentence2_binary_parse"] = "( " + h1 + " " + h2 + " )";
      out << j.dump() << '\n';
    }
}

void write_micro_tsv(const std::string& path) {
  std::ofstream out(path);
  REQUIRE(out.good());
  out << "entailment\tred blue\tyes green\n";
  out << "contradiction\tblue green\tno gray\n";
  out << "neutral\tgreen gray\tmaybe red\n";
}

std::vector<std::string> train_args(const std::string& data, const std::string& dir,
                                    std::vector<std::string> extra = {}) {
  std::vector<std::string> args = {"train",        "--train",      data,
                                   "--dev",        data,           "--out",
                                   dir,            "--embed-dim",  "4",
                                   "--hidden",     "3",            "--mlp-hidden",
                                   "5",            "--dropout",    "0",
                                   "--epochs",     "2",            "--batch-size",
                                   "4",            "--seed",       "7"};
  args.insert(args.end(), extra.begin(), extra.end());
  return args;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Epoch log lines with the wall time stripped, for determinism comparisons.
std::vector<nlohmann::json> log_without_wall(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    j.erase("wall_ms");
    out.push_back(j);
  }
  return out;
}

struct TmpDir {
  std::string path;
  explicit TmpDir(std::string p) : path(std::move(p)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TmpDir() { fs::remove_all(path); }
  std::string operator/(const std::string& child) const { return path + "/" + child; }
};

}  // namespace

TEST_CASE("usage errors exit 2 before any input is read") {
  CHECK_EQ(cli({}).code, 2);
  CHECK_EQ(cli({"train"}).code, 2);  // missing --train/--dev

  auto bad_model = cli({"train", "--train", "no_such_file.jsonl", "--dev",
                        "no_such_file.jsonl", "--model", "cnn"});
  CHECK_EQ(bad_model.code, 2);

  // Invalid combination wins over the nonexistent data file: flags are
  // validated before any I/O happens.
  auto combo = cli({"train", "--train", "no_such_file.jsonl", "--dev", "no_such_file.jsonl",
                    "--model", "tree", "--composition", "ff"});
  CHECK_EQ(combo.code, 2);
  CHECK_NE(combo.err.find("usage error"), std::string::npos);

  auto both = cli({"ensemble", "--preds-a", "x.jsonl", "--preds-b", "y.jsonl",
                   "--checkpoint", "a.ckpt", "--checkpoint-b", "b.ckpt", "--data", "d.jsonl"});
  CHECK_EQ(both.code, 2);

  auto help = cli({"--help"});
  CHECK_EQ(help.code, 0);
  CHECK_NE(help.out.find("train"), std::string::npos);
}

TEST_CASE("train writes checkpoints a log and the resolved config") {
  TmpDir dir("cli_tmp_train");
  const std::string data = dir / "data.jsonl";
  write_micro_jsonl(data);

  auto r = cli(train_args(data, dir / "run"));
  CAPTURE(r.err);
  REQUIRE_EQ(r.code, 0);
  CHECK_NE(r.out.find("best_dev"), std::string::npos);
  CHECK(fs::exists(dir / "run/best.ckpt"));
  CHECK(fs::exists(dir / "run/final.ckpt"));
  CHECK(fs::exists(dir / "run/resolved_config.json"));
  CHECK_EQ(log_without_wall(dir / "run/train_log.jsonl").size(), 2);

  auto echo = nlohmann::json::parse(slurp(dir / "run/resolved_config.json"));
  CHECK_EQ(echo["subcommand"], "train");
  CHECK_EQ(echo["model"]["model"], "esim");
  CHECK_EQ(echo["model"]["embed_dim"], 4);
  CHECK_EQ(echo["train"]["seed"], 7);

  // The pooling ablation is recorded in the echo.
  auto r2 = cli(train_args(data, dir / "run_sum", {"--pooling", "sum", "--epochs", "1"}));
  CAPTURE(r2.err);
  REQUIRE_EQ(r2.code, 0);
  auto echo2 = nlohmann::json::parse(slurp(dir / "run_sum/resolved_config.json"));
  CHECK_EQ(echo2["model"]["pooling"], "sum");
}

TEST_CASE("the resolved config echo drives an identical rerun") {
  TmpDir dir("cli_tmp_cfg");
  const std::string data = dir / "data.jsonl";
  write_micro_jsonl(data);

  REQUIRE_EQ(cli(train_args(data, dir / "a")).code, 0);
  // Round trip: the echo is a valid --config; only the output dir moves.
  auto r = cli({"train", "--config", dir / "a/resolved_config.json", "--out", dir / "b"});
  CAPTURE(r.err);
  REQUIRE_EQ(r.code, 0);

  CHECK_EQ(log_without_wall(dir / "a/train_log.jsonl"),
           log_without_wall(dir / "b/train_log.jsonl"));
  CHECK_EQ(slurp(dir / "a/best.ckpt"), slurp(dir / "b/best.ckpt"));
  CHECK_EQ(slurp(dir / "a/final.ckpt"), slurp(dir / "b/final.ckpt"));

  auto ea = nlohmann::json::parse(slurp(dir / "a/resolved_config.json"));
  auto eb = nlohmann::json::parse(slurp(dir / "b/resolved_config.json"));
  ea["paths"].erase("out");
  eb["paths"].erase("out");
  CHECK_EQ(ea, eb);

  // Flags override the config file.
  auto r2 = cli({"train", "--config", dir / "a/resolved_config.json", "--out", dir / "c",
                 "--epochs", "1"});
  REQUIRE_EQ(r2.code, 0);
  CHECK_EQ(log_without_wall(dir / "c/train_log.jsonl").size(), 1);
}

TEST_CASE("eval prints accuracy and honors dump") {
  TmpDir dir("cli_tmp_eval");
  const std::string data = dir / "data.jsonl";
  write_micro_jsonl(data);
  REQUIRE_EQ(cli(train_args(data, dir / "run")).code, 0);

  auto r = cli({"eval", "--checkpoint", dir / "run/best.ckpt", "--data", data, "--dump",
                dir / "preds.jsonl", "--out", dir / "eval_out"});
  CAPTURE(r.err);
  REQUIRE_EQ(r.code, 0);
  CHECK_EQ(r.out.rfind("accuracy 0", 0), 0);  // "accuracy 0.xxxx" for a 2-epoch run
  CHECK(fs::exists(dir / "eval_out/resolved_config.json"));

  std::ifstream preds(dir / "preds.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(preds, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j.contains("predicted"));
    ++lines;
  }
  CHECK_EQ(lines, 12);

  auto missing = cli({"eval", "--checkpoint", dir / "nope.ckpt", "--data", data,
                      "--out", dir / "eval_out2"});
  CHECK_EQ(missing.code, 3);
  CHECK_NE(missing.err.find("nope.ckpt"), std::string::npos);
}

TEST_CASE("predict streams one json line per pair") {
  TmpDir dir("cli_tmp_predict");
  const std::string data = dir / "data.jsonl";
  write_micro_jsonl(data);
  REQUIRE_EQ(cli(train_args(data, dir / "run")).code, 0);

  auto r = cli({"predict", "--checkpoint", dir / "run/best.ckpt", "--data", data,
                "--out", dir / "pred_out"});
  REQUIRE_EQ(r.code, 0);
  std::istringstream in(r.out);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK_EQ(j["id"], lines);
    ++lines;
  }
  CHECK_EQ(lines, 12);
}

TEST_CASE("ensemble combines checkpoints or prediction dumps") {
  TmpDir dir("cli_tmp_ensemble");
  const std::string data = dir / "data.jsonl";
  write_micro_jsonl(data);
  REQUIRE_EQ(cli(train_args(data, dir / "esim")).code, 0);
  REQUIRE_EQ(cli(train_args(data, dir / "tree", {"--model", "tree", "--seed", "11"})).code, 0);

  auto r = cli({"ensemble", "--checkpoint", dir / "esim/best.ckpt", "--checkpoint-b",
                dir / "tree/best.ckpt", "--data", data, "--oracle", "--ttest",
                "--out", dir / "him_out"});
  CAPTURE(r.err);
  REQUIRE_EQ(r.code, 0);
  CHECK_NE(r.out.find("him_accuracy "), std::string::npos);
  CHECK_NE(r.out.find("oracle_accuracy "), std::string::npos);
  CHECK_NE(r.out.find("t "), std::string::npos);
  CHECK_NE(r.out.find("dof "), std::string::npos);
  CHECK_NE(r.out.find("p "), std::string::npos);

  // Self-ensemble leaves the accuracy unchanged.
  auto ev = cli({"eval", "--checkpoint", dir / "esim/best.ckpt", "--data", data,
                 "--out", dir / "ev_out"});
  REQUIRE_EQ(ev.code, 0);
  auto self = cli({"ensemble", "--checkpoint", dir / "esim/best.ckpt", "--checkpoint-b",
                   dir / "esim/best.ckpt", "--data", data, "--out", dir / "self_out"});
  REQUIRE_EQ(self.code, 0);
  const std::string want = "him_" + ev.out;  // "accuracy X" -> "him_accuracy X"
  CHECK_EQ(self.out.substr(0, want.size()), want);

  // The prediction-dump route agrees with the checkpoint route.
  REQUIRE_EQ(cli({"predict", "--checkpoint", dir / "esim/best.ckpt", "--data", data,
                  "--dump", dir / "pa.jsonl", "--out", dir / "pa_out"})
                 .code,
             0);
  REQUIRE_EQ(cli({"predict", "--checkpoint", dir / "tree/best.ckpt", "--data", data,
                  "--dump", dir / "pb.jsonl", "--out", dir / "pb_out"})
                 .code,
             0);
  auto viadumps = cli({"ensemble", "--preds-a", dir / "pa.jsonl", "--preds-b",
                       dir / "pb.jsonl", "--out", dir / "him2_out"});
  REQUIRE_EQ(viadumps.code, 0);
  CHECK_EQ(viadumps.out.substr(0, r.out.find('\n')),
           r.out.substr(0, r.out.find('\n')));

  // Misaligned dumps are a data error naming the offender.
  std::string pa = slurp(dir / "pa.jsonl");
  std::ofstream trunc(dir / "pa_short.jsonl", std::ios::trunc);
  trunc << pa.substr(0, pa.find('\n') + 1);
  trunc.close();
  auto bad = cli({"ensemble", "--preds-a", dir / "pa_short.jsonl", "--preds-b",
                  dir / "pb.jsonl", "--out", dir / "him3_out"});
  CHECK_EQ(bad.code, 3);
}

TEST_CASE("analyze exports attention and gate norms") {
  TmpDir dir("cli_tmp_analyze");
  const std::string data = dir / "data.jsonl";
  write_micro_jsonl(data);
  REQUIRE_EQ(cli(train_args(data, dir / "tree", {"--model", "tree"})).code, 0);

  auto r = cli({"analyze", "--checkpoint", dir / "tree/best.ckpt", "--data", data,
                "--index", "2", "--out", dir / "analysis"});
  CAPTURE(r.err);
  REQUIRE_EQ(r.code, 0);
  CHECK(fs::exists(dir / "analysis/attention.csv"));
  CHECK(fs::exists(dir / "analysis/gates_premise.csv"));
  CHECK(fs::exists(dir / "analysis/gates_hypothesis.csv"));
  const std::string att = slurp(dir / "analysis/attention.csv");
  CHECK_EQ(att.rfind(",1:-", 0), 0);  // header starts with the root node label

  auto oob = cli({"analyze", "--checkpoint", dir / "tree/best.ckpt", "--data", data,
                  "--index", "99", "--out", dir / "analysis2"});
  CHECK_EQ(oob.code, 3);
  CHECK_NE(oob.err.find("out of range"), std::string::npos);
}

TEST_CASE("a tree model rejects parse free tsv input before training") {
  TmpDir dir("cli_tmp_tsv");
  const std::string data = dir / "data.tsv";
  write_micro_tsv(data);

  auto r = cli(train_args(data, dir / "run", {"--model", "tree"}));
  CHECK_EQ(r.code, 3);
  CHECK_NE(r.err.find("sentence1_binary_parse"), std::string::npos);
  // Validation failed after reading data but before any training artifact.
  CHECK_FALSE(fs::exists(dir / "run/best.ckpt"));

  // The sequential model trains fine from the same TSV.
  auto ok = cli(train_args(data, dir / "seq", {"--epochs", "1", "--batch-size", "3"}));
  CAPTURE(ok.err);
  CHECK_EQ(ok.code, 0);
}

TEST_CASE("the default output dir honors the environment variable") {
  TmpDir dir("cli_tmp_env");
  const std::string data = dir / "data.jsonl";
  write_micro_jsonl(data);
  std::vector<std::string> args = {"train",       "--train", data, "--dev", data,
                                   "--embed-dim", "4",       "--hidden", "3",
                                   "--mlp-hidden", "5",      "--dropout", "0",
                                   "--epochs",    "1",       "--batch-size", "4"};
  setenv("NLI_OUT_DIR", (dir / "env_out").c_str(), 1);
  auto r2 = cli(args);
  unsetenv("NLI_OUT_DIR");
  CAPTURE(r2.err);
  REQUIRE_EQ(r2.code, 0);
  CHECK(fs::exists(dir / "env_out/resolved_config.json"));
}
