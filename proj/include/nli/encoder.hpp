#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "nli/common.hpp"
#include "nli/params.hpp"
#include "nli/tensor.hpp"

namespace nli {

/// Chain LSTM parameters with the four gate blocks fused: columns of W, U
/// and entries of b are laid out as [input | forget | output | candidate].
struct LstmParams {
  std::size_t in_dim = 0;
  std::size_t hidden = 0;
  Tensor W;  // [l x 4d]
  Tensor U;  // [d x 4d]
  Tensor b;  // [4d]

  static LstmParams create(ParamSet& ps, const std::string& prefix, std::size_t l,
                           std::size_t d, Rng& rng) {
    LstmParams p;
    p.in_dim = l;
    p.hidden = d;
    p.W = ps.glorot(prefix + "/W", l, 4 * d, rng);
    p.U = ps.glorot(prefix + "/U", d, 4 * d, rng);
    p.b = ps.zero_vec(prefix + "/b", 4 * d);
    return p;
  }
};

/// One batched cell update: x [B x l], h_prev/c_prev [B x d] -> (h, c).
/// Gates: i, f, o = sigmoid, u = tanh; c = f*c_prev + i*u; h = o*tanh(c).
inline std::pair<Tensor, Tensor> lstm_step(Graph& g, const LstmParams& p, const Tensor& x,
                                           const Tensor& h_prev, const Tensor& c_prev,
                                           bool use_bias = true, Tensor* i_gate = nullptr) {
  if (x.cols() != p.in_dim || h_prev.cols() != p.hidden || c_prev.cols() != p.hidden)
    throw ShapeError("lstm_step: input " + shape_str(x.shape()) + ", state " +
                     shape_str(h_prev.shape()) + " vs l=" + std::to_string(p.in_dim) +
                     ", d=" + std::to_string(p.hidden));
  const std::size_t d = p.hidden;
  Tensor pre = g.add(g.matmul(x, p.W), g.matmul(h_prev, p.U));
  if (use_bias) pre = g.add_bias(pre, p.b);
  Tensor i = g.sigmoid(g.slice(pre, 1, 0, d));
  if (i_gate) *i_gate = i;
  Tensor f = g.sigmoid(g.slice(pre, 1, d, 2 * d));
  Tensor o = g.sigmoid(g.slice(pre, 1, 2 * d, 3 * d));
  Tensor u = g.tanh(g.slice(pre, 1, 3 * d, 4 * d));
  Tensor c = g.add(g.mul(f, c_prev), g.mul(i, u));
  Tensor h = g.mul(o, g.tanh(c));
  return {h, c};
}

/// Per-example encoded states plus their valid lengths (sequence positions
/// for chain encoders, node counts for tree encoders).
struct EncodedBatch {
  std::vector<Tensor> states;        // [len_e x width] each
  std::vector<std::size_t> lengths;
};

/// Per-timestep batched inputs for right-padded sequences. xs[t] is [B x l];
/// masks[t] is a constant 0/1 column of validity flags.
struct StepInputs {
  std::vector<Tensor> xs;
  std::vector<Tensor> masks;
  std::vector<std::size_t> lengths;
  std::size_t batch = 0;
};

/// Embed token rows position by position; padded slots read the all-zero
/// padding row.
inline StepInputs embed_steps(Graph& g, const Tensor& embeddings,
                              const std::vector<std::vector<std::size_t>>& ids,
                              std::size_t pad_row = 0) {
  if (ids.empty()) throw ContractError("empty batch");
  StepInputs out;
  out.batch = ids.size();
  std::size_t max_len = 0;
  for (const auto& seq : ids) {
    if (seq.empty()) throw ContractError("empty sequence in batch");
    out.lengths.push_back(seq.size());
    max_len = std::max(max_len, seq.size());
  }
  for (std::size_t t = 0; t < max_len; ++t) {
    std::vector<std::size_t> rows(ids.size());
    Tensor mask = Tensor::zeros({ids.size()});
    for (std::size_t e = 0; e < ids.size(); ++e) {
      const bool valid = t < ids[e].size();
      rows[e] = valid ? ids[e][t] : pad_row;
      mask.data()[e] = valid ? 1.0 : 0.0;
    }
    out.xs.push_back(g.gather_rows(embeddings, rows));
    out.masks.push_back(mask);
  }
  return out;
}

namespace detail {

/// Run one LSTM direction over padded steps. Because states are re-zeroed
/// at masked steps, the recurrence effectively starts at each example's
/// first valid position in iteration order.
inline std::vector<Tensor> lstm_pass(Graph& g, const LstmParams& p, const StepInputs& in,
                                     bool reverse, bool use_bias,
                                     std::vector<Tensor>* gates = nullptr) {
  const std::size_t T = in.xs.size();
  const std::size_t B = in.batch;
  std::vector<Tensor> hs(T);
  if (gates) gates->resize(T);
  Tensor h = Tensor::zeros({B, p.hidden});
  Tensor c = Tensor::zeros({B, p.hidden});
  for (std::size_t step = 0; step < T; ++step) {
    const std::size_t t = reverse ? T - 1 - step : step;
    Tensor i_gate;
    auto [h2, c2] = lstm_step(g, p, in.xs[t], h, c, use_bias, gates ? &i_gate : nullptr);
    if (gates) (*gates)[t] = i_gate;  // time order regardless of direction
    h = g.scale_rows(h2, in.masks[t]);
    c = g.scale_rows(c2, in.masks[t]);
    hs[t] = h;
  }
  return hs;
}

/// Split a [T*B x w] stack of per-step rows into per-example matrices.
inline EncodedBatch split_examples(Graph& g, const std::vector<Tensor>& per_step,
                                   const std::vector<std::size_t>& lengths) {
  EncodedBatch out;
  out.lengths = lengths;
  Tensor big = g.concat(per_step, 0);
  const std::size_t B = lengths.size();
  for (std::size_t e = 0; e < B; ++e) {
    std::vector<std::size_t> rows;
    rows.reserve(lengths[e]);
    for (std::size_t t = 0; t < lengths[e]; ++t) rows.push_back(t * B + e);
    out.states.push_back(g.gather_rows(big, rows));
  }
  return out;
}

}  // namespace detail

/// BiLSTM over a padded batch; per position the forward and backward hidden
/// states are concatenated, so the encoded width is 2d. The backward pass
/// starts from the right end of each example's valid span.
inline EncodedBatch bilstm_encode(Graph& g, const LstmParams& fwd, const LstmParams& bwd,
                                  const StepInputs& in, bool use_bias = true,
                                  std::vector<Tensor>* fwd_gates = nullptr,
                                  std::vector<Tensor>* bwd_gates = nullptr) {
  if (in.xs.empty()) throw ContractError("cannot encode an empty sequence batch");
  std::vector<Tensor> f = detail::lstm_pass(g, fwd, in, false, use_bias, fwd_gates);
  std::vector<Tensor> b = detail::lstm_pass(g, bwd, in, true, use_bias, bwd_gates);
  std::vector<Tensor> joined(f.size());
  for (std::size_t t = 0; t < f.size(); ++t) joined[t] = g.concat({f[t], b[t]}, 1);
  return detail::split_examples(g, joined, in.lengths);
}

/// Single-layer position-wise feedforward encoder (ablation stand-in for the
/// BiLSTM): relu(x W + b) with the same output width 2d.
struct FfEncoderParams {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Tensor W;  // [l x out]
  Tensor b;  // [out]

  static FfEncoderParams create(ParamSet& ps, const std::string& prefix, std::size_t l,
                                std::size_t out, Rng& rng) {
    FfEncoderParams p;
    p.in_dim = l;
    p.out_dim = out;
    p.W = ps.glorot(prefix + "/W", l, out, rng);
    p.b = ps.zero_vec(prefix + "/b", out);
    return p;
  }
};

inline EncodedBatch ff_encode(Graph& g, const FfEncoderParams& p, const StepInputs& in) {
  if (in.xs.empty()) throw ContractError("cannot encode an empty sequence batch");
  std::vector<Tensor> per_step(in.xs.size());
  for (std::size_t t = 0; t < in.xs.size(); ++t) {
    Tensor y = g.relu(g.add_bias(g.matmul(in.xs[t], p.W), p.b));
    per_step[t] = g.scale_rows(y, in.masks[t]);
  }
  return detail::split_examples(g, per_step, in.lengths);
}

}  // namespace nli
