#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "nli/model.hpp"
#include "nli/train.hpp"

namespace nli {

struct PredictionRecord {
  std::size_t id = 0;  // input-order index
  std::array<double, 3> probs{};
  int predicted = 0;
  int gold = 0;

  bool correct() const { return predicted == gold; }
};

struct EvalResult {
  double accuracy = 0.0;
  std::vector<PredictionRecord> records;
};

namespace detail {

inline void check_distribution(const std::array<double, 3>& p) {
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !(v <= 1.0 + 1e-9))
      throw ContractError("probability outside [0, 1]");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-4)
    throw ContractError("probabilities sum to " + std::to_string(sum) + ", not 1");
}

inline int argmax3(const std::array<double, 3>& p) {
  int best = 0;
  for (int k = 1; k < 3; ++k)
    if (p[k] > p[best]) best = k;  // strict: ties keep the lowest index
  return best;
}

inline void check_aligned(const std::vector<PredictionRecord>& a,
                          const std::vector<PredictionRecord>& b) {
  if (a.size() != b.size())
    throw ContractError("prediction lists have different lengths");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].id != b[i].id)
      throw ContractError("prediction ids diverge at position " + std::to_string(i));
    if (a[i].gold != b[i].gold)
      throw ContractError("gold labels diverge at example " + std::to_string(a[i].id));
  }
}

}  // namespace detail

inline double accuracy_of(const std::vector<PredictionRecord>& records) {
  if (records.empty()) throw ContractError("no prediction records");
  std::size_t correct = 0;
  for (const auto& r : records) correct += r.correct();
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

/// Batched whole-dataset evaluation; records come back in input order.
inline EvalResult evaluate(const Model& model, const std::vector<PreparedPair>& data,
                           std::size_t batch_size = 32) {
  if (data.empty()) throw ContractError("cannot evaluate an empty dataset");
  const std::size_t vocab_rows = model.embeddings.rows();
  for (const auto& p : data) {
    for (const auto& rows : {p.a_rows, p.b_rows, p.a_leaf_rows, p.b_leaf_rows})
      for (std::size_t r : rows)
        if (r >= vocab_rows)
          throw DataError("token row " + std::to_string(r) +
                          " is outside the model vocabulary");
  }
  EvalResult out;
  out.records.resize(data.size());
  std::size_t correct = 0;
  for (const auto& idx : make_batches(data.size(), batch_size, nullptr)) {
    Graph g(false);
    BatchInput b = assemble(data, idx, model.cfg.kind, /*with_labels=*/false);
    auto r = model.forward(g, b);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      PredictionRecord& rec = out.records[idx[k]];
      rec.id = idx[k];
      for (int c = 0; c < 3; ++c) rec.probs[c] = r.probs.at(k, static_cast<std::size_t>(c));
      rec.predicted = r.predicted[k];
      rec.gold = data[idx[k]].label;
      correct += rec.correct();
    }
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return out;
}

// ---------------------------------------------------------------------------
// Ensembling

struct Ensembled {
  std::array<double, 3> probs{};
  int label = 0;
};

/// Probability-averaging ensemble of the sequential and the tree model.
inline Ensembled ensemble_him(const std::array<double, 3>& p_esim,
                              const std::array<double, 3>& p_tree) {
  detail::check_distribution(p_esim);
  detail::check_distribution(p_tree);
  Ensembled out;
  for (int k = 0; k < 3; ++k) out.probs[k] = 0.5 * (p_esim[k] + p_tree[k]);
  out.label = detail::argmax3(out.probs);
  return out;
}

inline std::vector<PredictionRecord> ensemble_records(
    const std::vector<PredictionRecord>& a, const std::vector<PredictionRecord>& b) {
  detail::check_aligned(a, b);
  std::vector<PredictionRecord> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    Ensembled e = ensemble_him(a[i].probs, b[i].probs);
    out[i].id = a[i].id;
    out[i].probs = e.probs;
    out[i].predicted = e.label;
    out[i].gold = a[i].gold;
  }
  return out;
}

/// Fraction of examples where at least one of the two models is right.
inline double oracle_accuracy(const std::vector<PredictionRecord>& a,
                              const std::vector<PredictionRecord>& b) {
  detail::check_aligned(a, b);
  if (a.empty()) throw ContractError("no prediction records");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < a.size(); ++i) hit += a[i].correct() || b[i].correct();
  return static_cast<double>(hit) / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------
// Paired significance test

namespace detail {

inline double beta_cont_frac(double a, double b, double x) {
  const double eps = 3e-16, tiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 300; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) break;
  }
  return h;
}

/// Regularized incomplete beta I_x(a, b).
inline double inc_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_bt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                       a * std::log(x) + b * std::log1p(-x);
  const double bt = std::exp(ln_bt);
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * beta_cont_frac(a, b, x) / a;
  return 1.0 - bt * beta_cont_frac(b, a, 1.0 - x) / b;
}

}  // namespace detail

/// P(T > t) for Student's t with dof degrees of freedom.
inline double student_t_upper_tail(double t, std::size_t dof) {
  if (dof == 0) throw ContractError("t distribution needs dof >= 1");
  const double v = static_cast<double>(dof);
  const double half = 0.5 * detail::inc_beta(v / 2.0, 0.5, v / (v + t * t));
  return t >= 0.0 ? half : 1.0 - half;
}

struct TTestResult {
  double t = 0.0;
  std::size_t dof = 0;
  double p = 1.0;
  bool degenerate = false;  // zero variance of the paired differences
};

/// One-tailed paired t-test over per-example 0/1 correctness, testing whether
/// model a beats model b. Zero-variance differences are reported as
/// degenerate with the limiting p (0 when a always wins, 0.5 when the
/// correctness vectors are identical, 1 when b always wins).
inline TTestResult paired_significance(const std::vector<PredictionRecord>& a,
                                       const std::vector<PredictionRecord>& b) {
  detail::check_aligned(a, b);
  const std::size_t n = a.size();
  if (n < 2) throw ContractError("paired test needs at least two examples");
  double mean = 0.0;
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    d[i] = static_cast<double>(a[i].correct()) - static_cast<double>(b[i].correct());
    mean += d[i];
  }
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double di : d) var += (di - mean) * (di - mean);
  var /= static_cast<double>(n - 1);

  TTestResult r;
  r.dof = n - 1;
  if (var == 0.0) {
    r.degenerate = true;
    if (mean > 0.0) {
      r.t = std::numeric_limits<double>::infinity();
      r.p = 0.0;
    } else if (mean < 0.0) {
      r.t = -std::numeric_limits<double>::infinity();
      r.p = 1.0;
    } else {
      r.t = 0.0;
      r.p = 0.5;
    }
    return r;
  }
  r.t = mean / std::sqrt(var / static_cast<double>(n));
  r.p = student_t_upper_tail(r.t, r.dof);
  return r;
}

// ---------------------------------------------------------------------------
// Analysis exports

namespace detail {

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

/// Figure-style labels: "id:token" for leaves and positions, "id:-" for
/// non-leaf or padding nodes; ids count from 1 in preorder.
inline std::vector<std::string> node_labels(const ParseTree& tree) {
  std::vector<std::string> out;
  out.reserve(tree.node_count());
  for (std::size_t i = 0; i < tree.node_count(); ++i) {
    const ParseNode& n = tree.nodes[i];
    const std::string text = n.leaf() && !n.pad ? n.token : std::string("-");
    out.push_back(std::to_string(i + 1) + ":" + text);
  }
  return out;
}

inline std::vector<std::string> token_labels(const std::vector<std::string>& toks) {
  std::vector<std::string> out;
  out.reserve(toks.size());
  for (std::size_t i = 0; i < toks.size(); ++i)
    out.push_back(std::to_string(i + 1) + ":" + toks[i]);
  return out;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  return out;
}

}  // namespace detail

struct AnalysisFiles {
  std::string attention;         // hypothesis rows over premise columns
  std::string gates_premise;     // composition input-gate norms, premise side
  std::string gates_hypothesis;  // same for the hypothesis side
};

/// Figure-style exports for one pair: the normalized attention matrix of the
/// hypothesis over the premise (labeled rows and columns), plus the
/// composition-layer input-gate norms of both sides. Tree models emit one
/// norm per preorder node; sequential models emit 2*len rows, the forward
/// positions 1..len followed by the backward positions len+1..2*len.
inline AnalysisFiles export_analysis(const Model& model, const SentencePair& sp,
                                     const Vocabulary& vocab, const std::string& dir) {
  PreparedPair pair = prepare_pair(sp, vocab, model.cfg.kind);
  Graph g(false);
  std::vector<PreparedPair> one = {pair};
  BatchInput b = assemble(one, {0}, model.cfg.kind, /*with_labels=*/false);
  ForwardCapture cap;
  (void)model.forward(g, b, /*train=*/false, nullptr, &cap);

  std::vector<std::string> a_labels, b_labels;
  if (model.cfg.sequential()) {
    a_labels = detail::token_labels(sp.premise);
    b_labels = detail::token_labels(sp.hypothesis);
  } else {
    a_labels = detail::node_labels(pair.a_tree);
    b_labels = detail::node_labels(pair.b_tree);
  }

  AnalysisFiles files;
  files.attention = dir + "/attention.csv";
  files.gates_premise = dir + "/gates_premise.csv";
  files.gates_hypothesis = dir + "/gates_hypothesis.csv";

  {
    auto out = detail::open_out(files.attention);
    const Tensor& w = cap.attn_ba[0];  // [len_b x len_a]
    if (w.rows() != b_labels.size() || w.cols() != a_labels.size())
      throw ContractError("attention shape does not match the pair");
    for (const auto& lab : a_labels) out << ',' << detail::csv_escape(lab);
    out << '\n';
    for (std::size_t i = 0; i < w.rows(); ++i) {
      out << detail::csv_escape(b_labels[i]);
      for (std::size_t j = 0; j < w.cols(); ++j) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.10g", w.at(i, j));
        out << ',' << buf;
      }
      out << '\n';
    }
    if (!out) throw IoError("short write on " + files.attention);
  }

  auto write_gates = [](const std::string& path, const std::vector<double>& norms) {
    auto out = detail::open_out(path);
    out << "id,norm\n";
    for (std::size_t i = 0; i < norms.size(); ++i) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.10g", norms[i]);
      out << (i + 1) << ',' << buf << '\n';
    }
    if (!out) throw IoError("short write on " + path);
  };
  write_gates(files.gates_premise, cap.gate_norms_a[0]);
  write_gates(files.gates_hypothesis, cap.gate_norms_b[0]);
  return files;
}

// ---------------------------------------------------------------------------
// Prediction dump

inline nlohmann::json to_json(const PredictionRecord& r) {
  return {{"id", r.id},
          {"gold", label_name(static_cast<Label>(r.gold))},
          {"predicted", label_name(static_cast<Label>(r.predicted))},
          {"probs", r.probs}};
}

inline void dump_predictions(const std::vector<PredictionRecord>& records,
                             std::ostream& out) {
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

inline void dump_predictions(const std::vector<PredictionRecord>& records,
                             const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  dump_predictions(records, out);
  if (!out) throw IoError("short write on " + path);
}

}  // namespace nli
