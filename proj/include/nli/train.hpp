#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "nli/common.hpp"
#include "nli/corpus.hpp"
#include "nli/model.hpp"

namespace nli {

struct AdamConfig {
  double lr = 0.0004;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // global-norm gradient clipping; 0 disables
};

/// Bias-corrected Adam over a ParamSet. Rows registered via freeze_row (the
/// embedding padding row) have their gradients cleared before every update,
/// so their moments and values never move.
class Adam {
 public:
  Adam(AdamConfig cfg, const ParamSet& params) : cfg_(cfg) {
    for (const auto& [name, t] : params.named) {
      m_.emplace_back(t.size(), 0.0);
      v_.emplace_back(t.size(), 0.0);
    }
  }

  void freeze_row(const Tensor& t, std::size_t row) {
    if (t.rank() != 2 || row >= t.rows()) throw ContractError("freeze_row needs a valid matrix row");
    frozen_.emplace_back(t, row);
  }

  std::size_t steps() const { return t_; }

  void step(ParamSet& params) {
    if (params.named.size() != m_.size())
      throw ContractError("optimizer state does not match the parameter set");
    for (auto& [t, row] : frozen_) {
      auto& g = t.grad_ref();
      if (!g.empty())
        std::fill(g.begin() + row * t.cols(), g.begin() + (row + 1) * t.cols(), 0.0);
    }
    if (cfg_.clip_norm > 0.0) {
      double sq = 0.0;
      for (auto& [name, t] : params.named)
        for (double g : t.grad()) sq += g * g;
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) {
        const double scale = cfg_.clip_norm / norm;
        for (auto& [name, t] : params.named)
          for (auto& g : t.grad_ref()) g *= scale;
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.named.size(); ++i) {
      auto& [name, t] = params.named[i];
      const auto g = t.grad();
      if (g.empty()) throw ContractError("parameter " + name + " has no gradient");
      if (g.size() != m_[i].size())
        throw ContractError("gradient size changed for parameter " + name);
      for (std::size_t j = 0; j < g.size(); ++j) {
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g[j];
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        const double mhat = m_[i][j] / bc1;
        const double vhat = v_[i][j] / bc2;
        t.data()[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<std::pair<Tensor, std::size_t>> frozen_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Dataset preparation and batching

/// A sentence pair mapped onto the vocabulary for one model kind. Sequential
/// models use the token rows; tree models own their trees plus the embedding
/// rows of the non-pad leaves.
struct PreparedPair {
  std::vector<std::size_t> a_rows, b_rows;
  ParseTree a_tree, b_tree;
  std::vector<std::size_t> a_leaf_rows, b_leaf_rows;
  int label = 0;
};

inline PreparedPair prepare_pair(const SentencePair& p, const Vocabulary& vocab,
                                 ModelKind kind) {
  PreparedPair out;
  out.label = static_cast<int>(p.label);
  auto rows_of = [&](const std::vector<std::string>& toks) {
    std::vector<std::size_t> rows;
    rows.reserve(toks.size());
    for (const auto& t : toks) rows.push_back(vocab.lookup(t));
    return rows;
  };
  switch (kind) {
    case ModelKind::esim:
      out.a_rows = rows_of(p.premise);
      out.b_rows = rows_of(p.hypothesis);
      break;
    case ModelKind::tree:
      if (!p.premise_tree)
        throw DataError("the tree model needs sentence1_binary_parse for every pair");
      if (!p.hypothesis_tree)
        throw DataError("the tree model needs sentence2_binary_parse for every pair");
      out.a_tree = *p.premise_tree;
      out.b_tree = *p.hypothesis_tree;
      out.a_leaf_rows = rows_of(out.a_tree.leaf_tokens());
      out.b_leaf_rows = rows_of(out.b_tree.leaf_tokens());
      break;
    case ModelKind::fulltree:
      out.a_tree = build_full_binary_tree(p.premise);
      out.b_tree = build_full_binary_tree(p.hypothesis);
      out.a_leaf_rows = rows_of(p.premise);
      out.b_leaf_rows = rows_of(p.hypothesis);
      break;
  }
  return out;
}

inline std::vector<PreparedPair> prepare(const std::vector<SentencePair>& pairs,
                                         const Vocabulary& vocab, ModelKind kind) {
  std::vector<PreparedPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(prepare_pair(p, vocab, kind));
  return out;
}

/// Index batches over n examples; pass an Rng to shuffle (one epoch's order),
/// nullptr to keep dataset order.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch,
                                                          Rng* rng) {
  if (n == 0) throw ContractError("cannot batch an empty dataset");
  if (batch == 0) throw ContractError("batch size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (rng) rng->shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t at = 0; at < n; at += batch) {
    out.emplace_back(order.begin() + at, order.begin() + std::min(at + batch, n));
  }
  return out;
}

inline BatchInput assemble(const std::vector<PreparedPair>& data,
                           const std::vector<std::size_t>& idx, ModelKind kind,
                           bool with_labels = true) {
  BatchInput b;
  for (std::size_t i : idx) {
    const PreparedPair& p = data.at(i);
    if (kind == ModelKind::esim) {
      b.a_tokens.push_back(p.a_rows);
      b.b_tokens.push_back(p.b_rows);
    } else {
      b.a_trees.push_back(&p.a_tree);
      b.b_trees.push_back(&p.b_tree);
      b.a_leaf_rows.push_back(p.a_leaf_rows);
      b.b_leaf_rows.push_back(p.b_leaf_rows);
    }
    if (with_labels) b.labels.push_back(p.label);
  }
  return b;
}

inline double dataset_accuracy(const Model& model, const std::vector<PreparedPair>& data,
                               std::size_t batch_size = 32) {
  if (data.empty()) throw ContractError("cannot evaluate an empty dataset");
  std::size_t correct = 0;
  for (const auto& idx : make_batches(data.size(), batch_size, nullptr)) {
    Graph g(false);
    BatchInput b = assemble(data, idx, model.cfg.kind, /*with_labels=*/false);
    auto r = model.forward(g, b);
    for (std::size_t k = 0; k < idx.size(); ++k)
      correct += r.predicted[k] == data[idx[k]].label;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t max_epochs = 10;
  std::size_t patience = 5;        // epochs without dev improvement
  double stop_dev_accuracy = 2.0;  // stop early when reached; >1 disables
  std::uint64_t seed = 1;
  AdamConfig adam;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  std::size_t step = 0;   // optimizer steps taken so far
  double loss = 0.0;      // mean batch loss of the epoch
  double dev_accuracy = 0.0;
  std::int64_t wall_ms = 0;
};

inline nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"step", r.step},
          {"loss", r.loss},
          {"dev_accuracy", r.dev_accuracy},
          {"wall_ms", r.wall_ms}};
}

struct ParamSnapshot {
  std::vector<std::vector<double>> values;  // aligned with ParamSet::named
};

inline ParamSnapshot take_snapshot(const ParamSet& ps) {
  ParamSnapshot s;
  for (const auto& [name, t] : ps.named)
    s.values.emplace_back(t.data(), t.data() + t.size());
  return s;
}

inline void restore_snapshot(ParamSet& ps, const ParamSnapshot& s) {
  if (s.values.size() != ps.named.size())
    throw ContractError("snapshot does not match the parameter set");
  for (std::size_t i = 0; i < s.values.size(); ++i) {
    Tensor& t = ps.named[i].second;
    if (s.values[i].size() != t.size())
      throw ContractError("snapshot size mismatch for " + ps.named[i].first);
    std::copy(s.values[i].begin(), s.values[i].end(), t.data());
  }
}

struct TrainResult {
  std::vector<EpochRecord> log;
  double best_dev = -1.0;
  std::size_t best_epoch = 0;  // 0 means the initialization snapshot
  ParamSnapshot best;
};

/// Epoch-driven training with dev-set model selection: shuffled batches,
/// dropout-enabled forward, Adam updates with the padding row frozen, one
/// JSONL record per epoch, early stopping on dev stagnation.
inline TrainResult train_loop(Model& model, const std::vector<PreparedPair>& train_data,
                              const std::vector<PreparedPair>& dev_data,
                              const TrainConfig& tc, std::ostream* log_out = nullptr) {
  if (train_data.empty() || dev_data.empty())
    throw ContractError("training needs nonempty train and dev sets");
  Adam opt(tc.adam, model.params);
  opt.freeze_row(model.embeddings, Vocabulary::pad_index);
  Rng shuffle_rng(tc.seed);
  Rng drop_rng(tc.seed ^ 0x9e3779b97f4a7c15ull);

  TrainResult res;
  res.best = take_snapshot(model.params);
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (const auto& idx : make_batches(train_data.size(), tc.batch_size, &shuffle_rng)) {
      Graph g;
      BatchInput b = assemble(train_data, idx, model.cfg.kind);
      model.params.zero_grads();
      auto r = model.forward(g, b, /*train=*/true, &drop_rng);
      g.backward(r.loss);
      opt.step(model.params);
      loss_sum += r.loss.value();
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.step = opt.steps();
    rec.loss = loss_sum / static_cast<double>(batches);
    rec.dev_accuracy = dataset_accuracy(model, dev_data, tc.batch_size);
    rec.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    res.log.push_back(rec);
    if (log_out) *log_out << to_json(rec).dump() << '\n';
    if (rec.dev_accuracy > res.best_dev) {
      res.best_dev = rec.dev_accuracy;
      res.best_epoch = epoch;
      res.best = take_snapshot(model.params);
    }
    if (rec.dev_accuracy >= tc.stop_dev_accuracy) break;
    if (epoch - res.best_epoch >= tc.patience) break;
  }
  return res;
}

}  // namespace nli
