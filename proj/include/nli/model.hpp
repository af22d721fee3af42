#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nli/attention.hpp"
#include "nli/common.hpp"
#include "nli/corpus.hpp"
#include "nli/encoder.hpp"
#include "nli/params.hpp"
#include "nli/tensor.hpp"
#include "nli/tree_lstm.hpp"

namespace nli {

enum class ModelKind { esim, tree, fulltree };
enum class PoolMode { ave_max, sum };
enum class FeedKind { bilstm, ff };

inline const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::esim: return "esim";
    case ModelKind::tree: return "tree";
    default: return "fulltree";
  }
}
inline const char* to_string(PoolMode m) { return m == PoolMode::ave_max ? "avemax" : "sum"; }
inline const char* to_string(FeedKind k) { return k == FeedKind::bilstm ? "bilstm" : "ff"; }

inline ModelKind model_kind_from(const std::string& s) {
  if (s == "esim") return ModelKind::esim;
  if (s == "tree") return ModelKind::tree;
  if (s == "fulltree") return ModelKind::fulltree;
  throw ContractError("unknown model kind '" + s + "'");
}
inline PoolMode pool_mode_from(const std::string& s) {
  if (s == "avemax") return PoolMode::ave_max;
  if (s == "sum") return PoolMode::sum;
  throw ContractError("unknown pooling mode '" + s + "'");
}
inline FeedKind feed_kind_from(const std::string& s) {
  if (s == "bilstm") return FeedKind::bilstm;
  if (s == "ff") return FeedKind::ff;
  throw ContractError("unknown encoder kind '" + s + "'");
}

/// Architecture switches. The defaults are the full sequential model; the
/// other values cover the tree variants and the structural ablations.
struct ModelConfig {
  ModelKind kind = ModelKind::esim;
  FeedKind encoder = FeedKind::bilstm;      // sequential encoding layer
  FeedKind composition = FeedKind::bilstm;  // sequential composition layer
  PoolMode pooling = PoolMode::ave_max;
  bool diff_prod = true;       // keep difference/product enhancement blocks
  bool premise_attn = true;    // premise rows attend over hypothesis
  bool hypothesis_attn = true; // hypothesis rows attend over premise
  bool tied_forget = true;
  bool use_bias = true;
  std::size_t embed_dim = 300;
  std::size_t hidden = 300;
  std::size_t mlp_hidden = 300;
  double dropout = 0.5;

  bool sequential() const { return kind == ModelKind::esim; }
  bool tree_based() const { return !sequential(); }

  std::size_t enc_width() const { return sequential() ? 2 * hidden : hidden; }
  std::size_t m_width() const { return (diff_prod ? 4 : 2) * enc_width(); }
  std::size_t comp_width() const { return sequential() ? 2 * hidden : hidden; }
  std::size_t pooled_width() const {
    if (pooling == PoolMode::sum) return 2 * comp_width();
    return sequential() ? 4 * comp_width() : 6 * comp_width();
  }

  void validate() const {
    if (embed_dim == 0 || hidden == 0 || mlp_hidden == 0)
      throw ContractError("model dimensions must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ContractError("dropout rate must be in [0,1)");
    if (tree_based() && (encoder == FeedKind::ff || composition == FeedKind::ff))
      throw ContractError("feedforward substitution applies to the sequential model only");
  }
};

/// One prepared batch. Sequential models read token embedding rows; tree
/// models read parse trees plus embedding rows for their non-pad leaves.
/// Labels may be left empty for unlabeled prediction.
struct BatchInput {
  std::vector<std::vector<std::size_t>> a_tokens, b_tokens;
  std::vector<const ParseTree*> a_trees, b_trees;
  std::vector<std::vector<std::size_t>> a_leaf_rows, b_leaf_rows;
  std::vector<int> labels;
};

struct ForwardResult {
  Tensor logits;               // [B x 3]
  Tensor probs;                // [B x 3]
  Tensor loss;                 // rank 0; defined only when labels were given
  std::vector<int> predicted;  // argmax, lowest index on ties
};

/// Optional analysis hooks filled during forward: per-example normalized
/// attention matrices, composition states feeding the pooling layer (padding
/// nodes already dropped), the pooled batch, and composition-layer input-gate
/// l2 norms (sequential: forward-direction norms for positions 1..l, then
/// backward; tree: one norm per node in preorder).
struct ForwardCapture {
  std::vector<Tensor> attn_ab, attn_ba;
  std::vector<Tensor> composed_a, composed_b;
  Tensor pooled;  // [B x pooled_width]
  std::vector<std::vector<double>> gate_norms_a, gate_norms_b;
};

/// Inverted dropout: in train mode elements are dropped with probability
/// `rate` and survivors are scaled by 1/(1-rate); eval mode is an identity.
inline Tensor apply_dropout(Graph& g, const Tensor& x, double rate, bool train, Rng* rng) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout rate must be in [0,1)");
  if (!train || rate == 0.0) return x;
  if (!rng) throw ContractError("training-mode dropout needs a random source");
  const double keep = 1.0 - rate;
  Tensor mask = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < mask.size(); ++i)
    mask.data()[i] = rng->bernoulli(keep) ? 1.0 / keep : 0.0;
  return g.mul(x, mask);
}

namespace detail {

/// Rebuild per-timestep batched inputs from per-example row matrices,
/// reusing the lengths/masks of an earlier embedding pass. Padded slots
/// read a shared zero row.
inline StepInputs rebuild_steps(Graph& g, const std::vector<Tensor>& per_example,
                                const StepInputs& like) {
  StepInputs out;
  out.batch = like.batch;
  out.lengths = like.lengths;
  out.masks = like.masks;
  std::vector<Tensor> sources = {Tensor::zeros({1, per_example.front().cols()})};
  sources.insert(sources.end(), per_example.begin(), per_example.end());
  for (std::size_t t = 0; t < like.masks.size(); ++t) {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> refs;
    refs.reserve(like.batch);
    for (std::size_t e = 0; e < like.batch; ++e) {
      const bool valid = t < like.lengths[e];
      refs.emplace_back(valid ? static_cast<std::uint32_t>(e + 1) : 0u,
                        valid ? static_cast<std::uint32_t>(t) : 0u);
    }
    out.xs.push_back(g.gather_multi(sources, refs));
  }
  return out;
}

/// Validity column for attention over tree nodes: 1 everywhere except the
/// padding leaves of full-binary trees.
inline Tensor node_mask(const ParseTree& tree) {
  Tensor m = Tensor::zeros({tree.node_count()});
  for (std::size_t i = 0; i < tree.node_count(); ++i)
    m.data()[i] = tree.nodes[i].pad ? 0.0 : 1.0;
  return m;
}

inline std::vector<std::size_t> non_pad_rows(const ParseTree& tree) {
  std::vector<std::size_t> idx;
  idx.reserve(tree.node_count());
  for (std::size_t i = 0; i < tree.node_count(); ++i)
    if (!tree.nodes[i].pad) idx.push_back(i);
  return idx;
}

/// Single row of a matrix as a 1-D vector (summing a 1-row slice keeps the
/// operation differentiable without a dedicated flatten op).
inline Tensor row_vec(Graph& g, const Tensor& m, std::size_t row) {
  return g.reduce(g.slice(m, 0, row, row + 1), Reduce::sum, 0);
}

inline double row_l2(const Tensor& m, std::size_t row) {
  double s = 0.0;
  for (std::size_t j = 0; j < m.cols(); ++j) s += m.at(row, j) * m.at(row, j);
  return std::sqrt(s);
}

}  // namespace detail

class Model {
 public:
  ModelConfig cfg;
  ParamSet params;
  Tensor embeddings;
  LstmParams enc_fwd, enc_bwd, comp_fwd, comp_bwd;
  FfEncoderParams enc_ff, comp_ff;
  TreeLstmParams enc_tree, comp_tree;
  FfEncoderParams f_map;  // the shared projection applied to enhanced rows
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;

  static Model create(const ModelConfig& cfg, Tensor embedding_matrix, Rng& rng) {
    cfg.validate();
    if (embedding_matrix.rank() != 2 || embedding_matrix.cols() != cfg.embed_dim)
      throw ShapeError("embedding matrix " + shape_str(embedding_matrix.shape()) +
                       " does not match embed_dim " + std::to_string(cfg.embed_dim));
    Model m;
    m.cfg = cfg;
    m.embeddings = m.params.add("embed", embedding_matrix);
    if (cfg.sequential()) {
      if (cfg.encoder == FeedKind::bilstm) {
        m.enc_fwd = LstmParams::create(m.params, "enc/fwd", cfg.embed_dim, cfg.hidden, rng);
        m.enc_bwd = LstmParams::create(m.params, "enc/bwd", cfg.embed_dim, cfg.hidden, rng);
      } else {
        m.enc_ff = FfEncoderParams::create(m.params, "enc/ff", cfg.embed_dim,
                                           cfg.enc_width(), rng);
      }
    } else {
      m.enc_tree = TreeLstmParams::create(m.params, "enc/tree", cfg.embed_dim, cfg.hidden,
                                          rng, cfg.tied_forget);
    }
    m.f_map = FfEncoderParams::create(m.params, "f", cfg.m_width(), cfg.hidden, rng);
    if (cfg.sequential()) {
      if (cfg.composition == FeedKind::bilstm) {
        m.comp_fwd = LstmParams::create(m.params, "comp/fwd", cfg.hidden, cfg.hidden, rng);
        m.comp_bwd = LstmParams::create(m.params, "comp/bwd", cfg.hidden, cfg.hidden, rng);
      } else {
        m.comp_ff = FfEncoderParams::create(m.params, "comp/ff", cfg.hidden,
                                            cfg.comp_width(), rng);
      }
    } else {
      m.comp_tree = TreeLstmParams::create(m.params, "comp/tree", cfg.hidden, cfg.hidden,
                                           rng, cfg.tied_forget, /*with_x_prime=*/false);
    }
    m.mlp_w1 = m.params.glorot("mlp/W1", cfg.pooled_width(), cfg.mlp_hidden, rng);
    m.mlp_b1 = m.params.zero_vec("mlp/b1", cfg.mlp_hidden);
    m.mlp_w2 = m.params.glorot("mlp/W2", cfg.mlp_hidden, kNumClasses, rng);
    m.mlp_b2 = m.params.zero_vec("mlp/b2", kNumClasses);
    return m;
  }

  ForwardResult forward(Graph& g, const BatchInput& batch, bool train = false,
                        Rng* drop_rng = nullptr, ForwardCapture* cap = nullptr) const {
    const bool seq = cfg.sequential();
    const std::size_t B = seq ? batch.a_tokens.size() : batch.a_trees.size();
    if (B == 0) throw ContractError("empty batch");
    if (seq && batch.b_tokens.size() != B)
      throw ContractError("premise/hypothesis batch sizes differ");
    if (!seq && (batch.b_trees.size() != B || batch.a_leaf_rows.size() != B ||
                 batch.b_leaf_rows.size() != B))
      throw ContractError("tree batch needs trees and leaf rows for both sides");
    if (!batch.labels.empty() && batch.labels.size() != B)
      throw ContractError("label count does not match batch size");

    // 1) input encoding
    EncodedBatch ea, eb;
    std::vector<Tensor> mask_a(B), mask_b(B);
    StepInputs in_a, in_b;
    TreeBatchPlan plan_a, plan_b;
    if (seq) {
      in_a = embed_steps(g, embeddings, batch.a_tokens);
      in_b = embed_steps(g, embeddings, batch.b_tokens);
      if (cfg.encoder == FeedKind::bilstm) {
        ea = bilstm_encode(g, enc_fwd, enc_bwd, in_a, cfg.use_bias);
        eb = bilstm_encode(g, enc_fwd, enc_bwd, in_b, cfg.use_bias);
      } else {
        ea = ff_encode(g, enc_ff, in_a);
        eb = ff_encode(g, enc_ff, in_b);
      }
      for (std::size_t e = 0; e < B; ++e) {
        mask_a[e] = ones_mask(ea.lengths[e]);
        mask_b[e] = ones_mask(eb.lengths[e]);
      }
    } else {
      plan_a = TreeBatchPlan::build(batch.a_trees);
      plan_b = TreeBatchPlan::build(batch.b_trees);
      ea = tree_encode(g, enc_tree, plan_a, embeddings, batch.a_leaf_rows, cfg.use_bias);
      eb = tree_encode(g, enc_tree, plan_b, embeddings, batch.b_leaf_rows, cfg.use_bias);
      for (std::size_t e = 0; e < B; ++e) {
        mask_a[e] = detail::node_mask(*batch.a_trees[e]);
        mask_b[e] = detail::node_mask(*batch.b_trees[e]);
      }
    }

    // 2) soft alignment and enhancement, one sentence pair at a time
    std::vector<Tensor> ma(B), mb(B);
    for (std::size_t e = 0; e < B; ++e) {
      AttentionResult r = attend(g, ea.states[e], eb.states[e], mask_a[e], mask_b[e],
                                 cfg.premise_attn, cfg.hypothesis_attn);
      if (cap) {
        cap->attn_ab.push_back(r.weights_ab);
        cap->attn_ba.push_back(r.weights_ba);
      }
      ma[e] = enhance(g, ea.states[e], r.aligned_a, cfg.diff_prod);
      mb[e] = enhance(g, eb.states[e], r.aligned_b, cfg.diff_prod);
    }

    // 3) shared projection F over every enhanced row at once
    std::vector<Tensor> all = ma;
    all.insert(all.end(), mb.begin(), mb.end());
    Tensor m_all = apply_dropout(g, g.concat(all, 0), cfg.dropout, train, drop_rng);
    Tensor fm = g.relu(g.add_bias(g.matmul(m_all, f_map.W), f_map.b));
    std::vector<Tensor> fa(B), fb(B);
    {
      std::size_t off = 0;
      for (std::size_t e = 0; e < B; ++e) {
        fa[e] = g.slice(fm, 0, off, off + ea.lengths[e]);
        off += ea.lengths[e];
      }
      for (std::size_t e = 0; e < B; ++e) {
        fb[e] = g.slice(fm, 0, off, off + eb.lengths[e]);
        off += eb.lengths[e];
      }
    }

    // 4) inference composition
    EncodedBatch ca, cb;
    std::vector<Tensor> gates_fwd_a, gates_bwd_a, gates_fwd_b, gates_bwd_b;
    std::vector<Tensor> gates_tree_a, gates_tree_b;
    if (seq) {
      StepInputs comp_a = detail::rebuild_steps(g, fa, in_a);
      StepInputs comp_b = detail::rebuild_steps(g, fb, in_b);
      if (cfg.composition == FeedKind::bilstm) {
        ca = bilstm_encode(g, comp_fwd, comp_bwd, comp_a, cfg.use_bias,
                           cap ? &gates_fwd_a : nullptr, cap ? &gates_bwd_a : nullptr);
        cb = bilstm_encode(g, comp_fwd, comp_bwd, comp_b, cfg.use_bias,
                           cap ? &gates_fwd_b : nullptr, cap ? &gates_bwd_b : nullptr);
      } else {
        ca = ff_encode(g, comp_ff, comp_a);
        cb = ff_encode(g, comp_ff, comp_b);
      }
    } else {
      auto feed = [&g](const std::vector<Tensor>& rows) {
        return [&g, &rows](std::size_t,
                           const std::vector<std::pair<std::uint32_t, std::uint32_t>>& nodes) {
          return g.gather_multi(rows, nodes);
        };
      };
      auto la = run_tree_levels(g, comp_tree, plan_a, feed(fa), cfg.use_bias,
                                cap ? &gates_tree_a : nullptr);
      auto lb = run_tree_levels(g, comp_tree, plan_b, feed(fb), cfg.use_bias,
                                cap ? &gates_tree_b : nullptr);
      ca = collect_tree_states(g, plan_a, la);
      cb = collect_tree_states(g, plan_b, lb);
    }

    // 5) pooling into one fixed-width vector per pair
    std::vector<Tensor> pooled(B);
    for (std::size_t e = 0; e < B; ++e) {
      Tensor sa = ca.states[e];
      Tensor sb = cb.states[e];
      if (!seq) {
        auto va = detail::non_pad_rows(*batch.a_trees[e]);
        auto vb = detail::non_pad_rows(*batch.b_trees[e]);
        if (va.size() < sa.rows()) sa = g.gather_rows(sa, va);
        if (vb.size() < sb.rows()) sb = g.gather_rows(sb, vb);
      }
      if (cap) {
        cap->composed_a.push_back(sa);
        cap->composed_b.push_back(sb);
      }
      std::vector<Tensor> parts;
      if (cfg.pooling == PoolMode::ave_max) {
        parts = {g.reduce(sa, Reduce::mean, 0), g.reduce(sa, Reduce::max, 0),
                 g.reduce(sb, Reduce::mean, 0), g.reduce(sb, Reduce::max, 0)};
        if (!seq) {
          parts.push_back(detail::row_vec(g, ca.states[e], 0));  // root state
          parts.push_back(detail::row_vec(g, cb.states[e], 0));
        }
      } else {
        parts = {g.reduce(sa, Reduce::sum, 0), g.reduce(sb, Reduce::sum, 0)};
      }
      pooled[e] = g.concat(parts, 0);
    }
    Tensor v = g.stack_rows(pooled);
    if (cap) cap->pooled = v;

    // 6) MLP classifier
    Tensor vd = apply_dropout(g, v, cfg.dropout, train, drop_rng);
    Tensor hid = g.tanh(g.add_bias(g.matmul(vd, mlp_w1), mlp_b1));
    hid = apply_dropout(g, hid, cfg.dropout, train, drop_rng);
    ForwardResult out;
    out.logits = g.add_bias(g.matmul(hid, mlp_w2), mlp_b2);
    out.probs = g.softmax_rows(out.logits);
    out.predicted.resize(B);
    for (std::size_t e = 0; e < B; ++e) {
      int best = 0;
      for (int k = 1; k < static_cast<int>(kNumClasses); ++k)
        if (out.probs.at(e, static_cast<std::size_t>(k)) >
            out.probs.at(e, static_cast<std::size_t>(best)))
          best = k;
      out.predicted[e] = best;
    }
    if (!batch.labels.empty()) out.loss = g.softmax_cross_entropy(out.logits, batch.labels);

    // 7) analysis: composition input-gate norms
    if (cap) {
      cap->gate_norms_a.assign(B, {});
      cap->gate_norms_b.assign(B, {});
      if (seq && cfg.composition == FeedKind::bilstm) {
        auto collect = [&](const std::vector<Tensor>& fg, const std::vector<Tensor>& bg,
                           const std::vector<std::size_t>& lengths,
                           std::vector<std::vector<double>>& dst) {
          for (std::size_t e = 0; e < B; ++e) {
            for (std::size_t t = 0; t < lengths[e]; ++t)
              dst[e].push_back(detail::row_l2(fg[t], e));
            for (std::size_t t = 0; t < lengths[e]; ++t)
              dst[e].push_back(detail::row_l2(bg[t], e));
          }
        };
        collect(gates_fwd_a, gates_bwd_a, ca.lengths, cap->gate_norms_a);
        collect(gates_fwd_b, gates_bwd_b, cb.lengths, cap->gate_norms_b);
      } else if (!seq) {
        auto collect = [&](const TreeBatchPlan& plan, const std::vector<Tensor>& gates,
                           std::vector<std::vector<double>>& dst) {
          for (std::size_t e = 0; e < plan.trees.size(); ++e)
            for (std::size_t i = 0; i < plan.trees[e]->node_count(); ++i) {
              const auto place = plan.where[e][i];
              dst[e].push_back(detail::row_l2(gates[place.level], place.pos));
            }
        };
        collect(plan_a, gates_tree_a, cap->gate_norms_a);
        collect(plan_b, gates_tree_b, cap->gate_norms_b);
      }
    }
    return out;
  }
};

}  // namespace nli
