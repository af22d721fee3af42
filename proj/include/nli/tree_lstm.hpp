#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nli/common.hpp"
#include "nli/corpus.hpp"
#include "nli/encoder.hpp"
#include "nli/params.hpp"
#include "nli/tensor.hpp"

namespace nli {

/// Binary tree-LSTM block. W_f is shared by both forget gates in the tied
/// variant; untying adds a separate right-gate input weight. Ten recurrent
/// matrices in total.
struct TreeLstmParams {
  std::size_t in_dim = 0;
  std::size_t hidden = 0;
  bool tied_forget = true;

  Tensor Wi, Wo, Wc, Wf;  // [l x d]
  Tensor WfR;             // untied variant only
  Tensor Ui_L, Ui_R, Uo_L, Uo_R, Uc_L, Uc_R;      // [d x d]
  Tensor Uf_LL, Uf_LR, Uf_RL, Uf_RR;              // [d x d]
  Tensor b_i, b_o, b_c, b_fL, b_fR;               // [d]
  Tensor x_prime;  // [l], the shared input of non-leaf nodes in encoding

  static TreeLstmParams create(ParamSet& ps, const std::string& prefix, std::size_t l,
                               std::size_t d, Rng& rng, bool tied_forget = true,
                               bool with_x_prime = true) {
    TreeLstmParams p;
    p.in_dim = l;
    p.hidden = d;
    p.tied_forget = tied_forget;
    p.Wi = ps.glorot(prefix + "/Wi", l, d, rng);
    p.Wo = ps.glorot(prefix + "/Wo", l, d, rng);
    p.Wc = ps.glorot(prefix + "/Wc", l, d, rng);
    p.Wf = ps.glorot(prefix + "/Wf", l, d, rng);
    if (!tied_forget) p.WfR = ps.glorot(prefix + "/WfR", l, d, rng);
    p.Ui_L = ps.glorot(prefix + "/Ui_L", d, d, rng);
    p.Ui_R = ps.glorot(prefix + "/Ui_R", d, d, rng);
    p.Uo_L = ps.glorot(prefix + "/Uo_L", d, d, rng);
    p.Uo_R = ps.glorot(prefix + "/Uo_R", d, d, rng);
    p.Uc_L = ps.glorot(prefix + "/Uc_L", d, d, rng);
    p.Uc_R = ps.glorot(prefix + "/Uc_R", d, d, rng);
    p.Uf_LL = ps.glorot(prefix + "/Uf_LL", d, d, rng);
    p.Uf_LR = ps.glorot(prefix + "/Uf_LR", d, d, rng);
    p.Uf_RL = ps.glorot(prefix + "/Uf_RL", d, d, rng);
    p.Uf_RR = ps.glorot(prefix + "/Uf_RR", d, d, rng);
    p.b_i = ps.zero_vec(prefix + "/b_i", d);
    p.b_o = ps.zero_vec(prefix + "/b_o", d);
    p.b_c = ps.zero_vec(prefix + "/b_c", d);
    p.b_fL = ps.zero_vec(prefix + "/b_fL", d);
    p.b_fR = ps.zero_vec(prefix + "/b_fR", d);
    // composition-layer blocks feed real inputs at every node and skip x'
    if (with_x_prime) p.x_prime = ps.unk_like_vec(prefix + "/x_prime", l, rng);
    return p;
  }
};

struct TreeStates {
  Tensor h, c;  // [N x d] each
};

/// Batched node update over N nodes at once:
///   i = sig(x Wi + hL Ui_L + hR Ui_R)      o = sig(x Wo + hL Uo_L + hR Uo_R)
///   fL = sig(x Wf + hL Uf_LL + hR Uf_LR)   fR = sig(x Wf + hL Uf_RL + hR Uf_RR)
///   u = tanh(x Wc + hL Uc_L + hR Uc_R)
///   c = fL.cL + fR.cR + i.u                h = o.tanh(c)
inline TreeStates tree_lstm_step(Graph& g, const TreeLstmParams& p, const Tensor& x,
                                 const Tensor& hL, const Tensor& hR, const Tensor& cL,
                                 const Tensor& cR, bool use_bias = true,
                                 Tensor* i_gate = nullptr) {
  if (x.cols() != p.in_dim || hL.cols() != p.hidden || hR.cols() != p.hidden)
    throw ShapeError("tree_lstm_step: input " + shape_str(x.shape()) + " vs l=" +
                     std::to_string(p.in_dim) + ", d=" + std::to_string(p.hidden));
  auto gate = [&](const Tensor& W, const Tensor& UL, const Tensor& UR, const Tensor& b) {
    Tensor pre = g.add(g.matmul(x, W), g.add(g.matmul(hL, UL), g.matmul(hR, UR)));
    return use_bias ? g.add_bias(pre, b) : pre;
  };
  Tensor i = g.sigmoid(gate(p.Wi, p.Ui_L, p.Ui_R, p.b_i));
  if (i_gate) *i_gate = i;
  Tensor o = g.sigmoid(gate(p.Wo, p.Uo_L, p.Uo_R, p.b_o));
  Tensor fL = g.sigmoid(gate(p.Wf, p.Uf_LL, p.Uf_LR, p.b_fL));
  Tensor fR = g.sigmoid(gate(p.tied_forget ? p.Wf : p.WfR, p.Uf_RL, p.Uf_RR, p.b_fR));
  Tensor u = g.tanh(gate(p.Wc, p.Uc_L, p.Uc_R, p.b_c));
  Tensor c = g.add(g.add(g.mul(fL, cL), g.mul(fR, cR)), g.mul(i, u));
  Tensor h = g.mul(o, g.tanh(c));
  return {h, c};
}

/// Level schedule for evaluating a batch of trees bottom-up: level k holds
/// every node whose children live strictly below. Children of leaves are a
/// shared all-zero state.
struct TreeBatchPlan {
  struct Place {
    std::uint32_t level = 0;
    std::uint32_t pos = 0;
  };
  // levels[k] lists (tree, node) pairs evaluated together
  std::vector<std::vector<std::pair<std::uint32_t, std::uint32_t>>> levels;
  std::vector<std::vector<Place>> where;       // [tree][node]
  std::vector<std::vector<int>> leaf_ordinal;  // [tree][node], -1 for internal
  std::vector<const ParseTree*> trees;

  static TreeBatchPlan build(std::vector<const ParseTree*> trees_in) {
    TreeBatchPlan plan;
    plan.trees = std::move(trees_in);
    if (plan.trees.empty()) throw ContractError("empty tree batch");
    std::size_t max_h = 0;
    std::vector<std::vector<std::uint32_t>> heights(plan.trees.size());
    for (std::size_t e = 0; e < plan.trees.size(); ++e) {
      const ParseTree& tree = *plan.trees[e];
      if (tree.empty()) throw ContractError("empty tree in batch");
      const std::size_t n = tree.node_count();
      heights[e].assign(n, 0);
      plan.leaf_ordinal.emplace_back(n, -1);
      // nodes are stored in preorder, so children follow their parent:
      // a reverse scan sees children before parents.
      for (std::size_t i = n; i-- > 0;) {
        const ParseNode& node = tree.nodes[i];
        if (node.leaf()) continue;
        heights[e][i] = 1 + std::max(heights[e][node.left], heights[e][node.right]);
        max_h = std::max<std::size_t>(max_h, heights[e][i]);
      }
      int ord = 0;  // sentence-order position among non-pad leaves
      assign_leaf_ordinals(tree, 0, plan.leaf_ordinal[e], ord);
    }
    plan.levels.resize(max_h + 1);
    for (std::size_t e = 0; e < plan.trees.size(); ++e) {
      plan.where.emplace_back(plan.trees[e]->node_count());
      for (std::size_t i = 0; i < plan.trees[e]->node_count(); ++i) {
        auto& level = plan.levels[heights[e][i]];
        plan.where[e][i] = {static_cast<std::uint32_t>(heights[e][i]),
                            static_cast<std::uint32_t>(level.size())};
        level.emplace_back(static_cast<std::uint32_t>(e), static_cast<std::uint32_t>(i));
      }
    }
    return plan;
  }

 private:
  static void assign_leaf_ordinals(const ParseTree& tree, int at, std::vector<int>& out,
                                   int& ord) {
    const ParseNode& n = tree.nodes[at];
    if (n.leaf()) {
      if (!n.pad) out[at] = ord++;
      return;
    }
    assign_leaf_ordinals(tree, n.left, out, ord);
    assign_leaf_ordinals(tree, n.right, out, ord);
  }
};

/// Evaluate every level bottom-up. `level_input` must return the [N_k x l]
/// input rows for level k's node list. Returns per-level states.
template <class InputFn>
std::vector<TreeStates> run_tree_levels(Graph& g, const TreeLstmParams& p,
                                        const TreeBatchPlan& plan, InputFn&& level_input,
                                        bool use_bias = true,
                                        std::vector<Tensor>* gates = nullptr) {
  std::vector<TreeStates> per_level;
  if (gates) gates->resize(plan.levels.size());
  Tensor zero_row = Tensor::zeros({1, p.hidden});
  for (std::size_t k = 0; k < plan.levels.size(); ++k) {
    const auto& nodes = plan.levels[k];
    if (nodes.empty()) {
      per_level.push_back({});
      continue;
    }
    Tensor x = level_input(k, nodes);

    // gather children states from earlier levels; leaves read the zero row
    std::vector<Tensor> h_sources = {zero_row};
    std::vector<Tensor> c_sources = {zero_row};
    for (std::size_t j = 0; j < k; ++j) {
      if (!per_level[j].h.defined()) continue;
      h_sources.push_back(per_level[j].h);
      c_sources.push_back(per_level[j].c);
    }
    std::vector<std::uint32_t> level_to_source(k + 1, 0);
    {
      std::uint32_t s = 1;
      for (std::size_t j = 0; j < k; ++j)
        if (per_level[j].h.defined()) level_to_source[j] = s++;
    }
    auto child_refs = [&](bool left) {
      std::vector<std::pair<std::uint32_t, std::uint32_t>> refs;
      refs.reserve(nodes.size());
      for (const auto& [e, i] : nodes) {
        const ParseNode& node = plan.trees[e]->nodes[i];
        if (node.leaf()) {
          refs.emplace_back(0, 0);
        } else {
          const auto place = plan.where[e][left ? node.left : node.right];
          refs.emplace_back(level_to_source[place.level], place.pos);
        }
      }
      return refs;
    };
    Tensor hL = g.gather_multi(h_sources, child_refs(true));
    Tensor hR = g.gather_multi(h_sources, child_refs(false));
    Tensor cL = g.gather_multi(c_sources, child_refs(true));
    Tensor cR = g.gather_multi(c_sources, child_refs(false));
    Tensor i_gate;
    per_level.push_back(
        tree_lstm_step(g, p, x, hL, hR, cL, cR, use_bias, gates ? &i_gate : nullptr));
    if (gates) (*gates)[k] = i_gate;
  }
  return per_level;
}

/// Collect per-tree node-state matrices (preorder rows) from level outputs.
inline EncodedBatch collect_tree_states(Graph& g, const TreeBatchPlan& plan,
                                        const std::vector<TreeStates>& per_level) {
  std::vector<Tensor> h_sources;
  std::vector<std::uint32_t> level_to_source(per_level.size(), 0);
  for (std::size_t j = 0; j < per_level.size(); ++j) {
    if (!per_level[j].h.defined()) continue;
    level_to_source[j] = static_cast<std::uint32_t>(h_sources.size());
    h_sources.push_back(per_level[j].h);
  }
  EncodedBatch out;
  for (std::size_t e = 0; e < plan.trees.size(); ++e) {
    const std::size_t n = plan.trees[e]->node_count();
    std::vector<std::pair<std::uint32_t, std::uint32_t>> refs;
    refs.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto place = plan.where[e][i];
      refs.emplace_back(level_to_source[place.level], place.pos);
    }
    out.states.push_back(g.gather_multi(h_sources, refs));
    out.lengths.push_back(n);
  }
  return out;
}

/// Encoding-layer tree pass: leaves read their embedding rows (padding
/// leaves read the zero padding row), internal nodes all share the trained
/// x' input vector.
inline EncodedBatch tree_encode(Graph& g, const TreeLstmParams& p,
                                const TreeBatchPlan& plan, const Tensor& embeddings,
                                const std::vector<std::vector<std::size_t>>& leaf_rows,
                                bool use_bias = true, std::size_t pad_row = 0) {
  auto level_input = [&](std::size_t,
                         const std::vector<std::pair<std::uint32_t, std::uint32_t>>& nodes) {
    bool any_leaf = false, any_internal = false;
    for (const auto& [e, i] : nodes)
      (plan.trees[e]->nodes[i].leaf() ? any_leaf : any_internal) = true;
    if (any_leaf && any_internal)
      throw ContractError("mixed leaf/internal level in encoding pass");
    if (any_internal) return g.repeat_row(p.x_prime, nodes.size());
    std::vector<std::size_t> rows;
    rows.reserve(nodes.size());
    for (const auto& [e, i] : nodes) {
      const ParseNode& node = plan.trees[e]->nodes[i];
      rows.push_back(node.pad ? pad_row : leaf_rows[e][plan.leaf_ordinal[e][i]]);
    }
    return g.gather_rows(embeddings, rows);
  };
  auto per_level = run_tree_levels(g, p, plan, level_input, use_bias);
  return collect_tree_states(g, plan, per_level);
}

}  // namespace nli
