#pragma once

#include <cstddef>

#include "nli/common.hpp"
#include "nli/tensor.hpp"

namespace nli {

inline Tensor ones_mask(std::size_t n) { return Tensor::full({n}, 1.0); }

namespace detail {

/// Constant [rows x cols] matrix carrying (valid_j - 1) * 1e9 in column j:
/// zero where valid, a large negative number where masked. Added to scores
/// before softmax so masked targets get exactly zero weight.
inline Tensor additive_col_mask(std::size_t rows, const Tensor& col_valid) {
  const std::size_t cols = col_valid.size();
  Tensor m = Tensor::zeros({rows, cols});
  for (std::size_t j = 0; j < cols; ++j) {
    const double v = (col_valid.data()[j] - 1.0) * 1e9;
    if (v == 0.0) continue;
    for (std::size_t i = 0; i < rows; ++i) m.data()[i * cols + j] = v;
  }
  return m;
}

}  // namespace detail

/// Soft alignment between two encoded sides.
struct AttentionResult {
  Tensor scores;      // e [la x lb], plain dot products
  Tensor weights_ab;  // rows: premise positions, softmax over hypothesis
  Tensor weights_ba;  // rows: hypothesis positions, softmax over premise
  Tensor aligned_a;   // a~ [la x w]
  Tensor aligned_b;   // b~ [lb x w]
};

/// e_ij is the raw dot product of the two encoded states (no mapping is
/// applied first). Masked positions are pushed to -1e9 before normalization
/// and the corresponding weight rows are zeroed. Disabling one side's
/// attention replaces its aligned vectors by zeros, keeping shapes.
inline AttentionResult attend(Graph& g, const Tensor& a_states, const Tensor& b_states,
                              const Tensor& a_mask, const Tensor& b_mask,
                              bool premise_attn = true, bool hypothesis_attn = true) {
  if (a_states.cols() != b_states.cols())
    throw ShapeError("attention over mismatched widths: " + shape_str(a_states.shape()) +
                     " vs " + shape_str(b_states.shape()));
  if (a_mask.size() != a_states.rows() || b_mask.size() != b_states.rows())
    throw ShapeError("attention masks do not match state rows");

  AttentionResult out;
  out.scores = g.matmul(a_states, b_states, false, true);

  if (premise_attn) {
    Tensor masked = g.add(out.scores, detail::additive_col_mask(a_states.rows(), b_mask));
    out.weights_ab = g.scale_rows(g.softmax_rows(masked), a_mask);
    out.aligned_a = g.matmul(out.weights_ab, b_states);
  } else {
    out.weights_ab = Tensor::zeros({a_states.rows(), b_states.rows()});
    out.aligned_a = Tensor::zeros({a_states.rows(), a_states.cols()});
  }

  if (hypothesis_attn) {
    Tensor et = g.transpose(out.scores);
    Tensor masked = g.add(et, detail::additive_col_mask(b_states.rows(), a_mask));
    out.weights_ba = g.scale_rows(g.softmax_rows(masked), b_mask);
    out.aligned_b = g.matmul(out.weights_ba, a_states);
  } else {
    out.weights_ba = Tensor::zeros({b_states.rows(), a_states.rows()});
    out.aligned_b = Tensor::zeros({b_states.rows(), b_states.cols()});
  }
  return out;
}

/// Local inference enhancement: [x; x~; x - x~; x . x~], or just [x; x~]
/// under the difference/product ablation.
inline Tensor enhance(Graph& g, const Tensor& x, const Tensor& aligned, bool diff_prod = true) {
  if (x.shape() != aligned.shape())
    throw ShapeError("enhance needs equal shapes: " + shape_str(x.shape()) + " vs " +
                     shape_str(aligned.shape()));
  if (!diff_prod) return g.concat({x, aligned}, 1);
  return g.concat({x, aligned, g.sub(x, aligned), g.mul(x, aligned)}, 1);
}

}  // namespace nli
