#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "nli/common.hpp"

namespace nli {

namespace detail {

template <class S>
struct TensorImpl {
  Shape shape;
  std::vector<S> data;
  bool requires_grad = false;
  std::vector<S> grad;  // empty until first touched; same length as data afterwards

  std::vector<S>& grad_ref() {
    if (grad.empty()) grad.assign(data.size(), S(0));
    return grad;
  }
};

// C[m x n] += A[m x k] * B[k x n]. Row-major, inner loop streams over n.
template <class S>
void mm_accum(const S* a, const S* b, S* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    S* ci = c + i * n;
    const S* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const S av = ai[p];
      const S* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <class S>
std::vector<S> transpose_copy(const S* src, std::size_t rows, std::size_t cols) {
  std::vector<S> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = src[i * cols + j];
  return out;
}

// C[m x n] += op(A) * op(B) with optional operand transposes. Stored dims are
// given; effective dims after transposition must satisfy m, n, k.
template <class S>
void gemm_accum(const S* a, std::size_t ar, std::size_t ac, bool ta, const S* b, std::size_t br,
                std::size_t bc, bool tb, S* c) {
  const std::size_t m = ta ? ac : ar;
  const std::size_t k = ta ? ar : ac;
  const std::size_t n = tb ? br : bc;
  std::vector<S> abuf, bbuf;
  const S* ae = a;
  const S* be = b;
  if (ta) {
    abuf = transpose_copy(a, ar, ac);
    ae = abuf.data();
  }
  if (tb) {
    bbuf = transpose_copy(b, br, bc);
    be = bbuf.data();
  }
  mm_accum(ae, be, c, m, n, k);
}

}  // namespace detail

/// Dense row-major tensor handle. Copies share the underlying storage;
/// values are immutable once an op has consumed them, only the gradient
/// accumulator is written afterwards.
template <class S>
class TensorT {
 public:
  using Scalar = S;

  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return from(std::move(shape), {}, requires_grad, true);
  }

  static TensorT full(Shape shape, S value) {
    TensorT t = zeros(std::move(shape));
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
  }

  static TensorT scalar(S value) {
    TensorT t;
    t.impl_ = std::make_shared<detail::TensorImpl<S>>();
    t.impl_->shape = {};
    t.impl_->data = {value};
    return t;
  }

  static TensorT vec(std::vector<S> values) {
    TensorT t;
    t.impl_ = std::make_shared<detail::TensorImpl<S>>();
    t.impl_->shape = {values.size()};
    t.impl_->data = std::move(values);
    if (t.impl_->data.empty()) throw ContractError("tensor extents must be positive");
    return t;
  }

  static TensorT matrix(std::initializer_list<std::initializer_list<S>> rows) {
    std::size_t r = rows.size();
    std::size_t c = rows.begin()->size();
    TensorT t = zeros({r, c});
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix initializer");
      for (S v : row) t.impl_->data[i++] = v;
    }
    return t;
  }

  static TensorT from(Shape shape, std::vector<S> values, bool requires_grad = false,
                      bool allow_empty_values = false) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
      if (e == 0) throw ContractError("tensor extents must be positive");
      n *= e;
    }
    TensorT t;
    t.impl_ = std::make_shared<detail::TensorImpl<S>>();
    t.impl_->shape = std::move(shape);
    if (allow_empty_values && values.empty()) values.assign(n, S(0));
    if (values.size() != n)
      throw ShapeError("data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(t.impl_->shape));
    t.impl_->data = std::move(values);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }

  std::size_t rows() const {
    if (rank() != 2) throw ShapeError("rows() on non-matrix " + shape_str(shape()));
    return impl_->shape[0];
  }
  std::size_t cols() const {
    if (rank() != 2) throw ShapeError("cols() on non-matrix " + shape_str(shape()));
    return impl_->shape[1];
  }

  S* data() { return impl_->data.data(); }
  const S* data() const { return impl_->data.data(); }
  std::span<const S> values() const { return {impl_->data.data(), impl_->data.size()}; }

  S value() const {
    if (size() != 1) throw ContractError("value() on non-scalar " + shape_str(shape()));
    return impl_->data[0];
  }
  S at(std::size_t i) const { return impl_->data.at(i); }
  S at(std::size_t i, std::size_t j) const { return impl_->data.at(i * cols() + j); }
  S& at(std::size_t i) { return impl_->data.at(i); }
  S& at(std::size_t i, std::size_t j) { return impl_->data.at(i * cols() + j); }

  bool requires_grad() const { return impl_->requires_grad; }
  TensorT& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  /// Gradient accumulator; empty span until backward has touched it.
  std::span<const S> grad() const { return {impl_->grad.data(), impl_->grad.size()}; }
  std::vector<S>& grad_ref() const { return impl_->grad_ref(); }
  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), S(0)); }

  detail::TensorImpl<S>* impl() const { return impl_.get(); }

 private:
  std::shared_ptr<detail::TensorImpl<S>> impl_;
};

enum class Elementwise { add, sub, mul, sigmoid, tanh, relu, exp, neg };
enum class Reduce { sum, mean, max };

/// Tape of executed operations. Ops append in execution order, which is a
/// topological order of the dataflow; backward replays the tape once in
/// reverse. A non-recording graph computes forward values only.
template <class S>
class GraphT {
 public:
  using Tensor = TensorT<S>;

  explicit GraphT(bool recording = true) : recording_(recording) {}
  GraphT(const GraphT&) = delete;
  GraphT& operator=(const GraphT&) = delete;

  bool recording() const { return recording_; }
  std::size_t op_count() const { return tape_.size(); }
  void clear() {
    tape_.clear();
    outputs_.clear();
  }

  // ---- products ------------------------------------------------------

  Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false) {
    if (a.rank() != 2 || b.rank() != 2)
      throw ShapeError("matmul needs matrices, got " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
    const std::size_t m = trans_a ? a.cols() : a.rows();
    const std::size_t k = trans_a ? a.rows() : a.cols();
    const std::size_t kb = trans_b ? b.cols() : b.rows();
    const std::size_t n = trans_b ? b.rows() : b.cols();
    if (k != kb)
      throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) +
                       (trans_a ? "^T" : "") + " vs " + shape_str(b.shape()) +
                       (trans_b ? "^T" : ""));
    Tensor out = Tensor::zeros({m, n});
    detail::gemm_accum(a.data(), a.rows(), a.cols(), trans_a, b.data(), b.rows(), b.cols(),
                       trans_b, out.data());
    finish(out, a.requires_grad() || b.requires_grad(), [a, b, out, trans_a, trans_b]() mutable {
      const auto& g = out.impl()->grad;
      if (g.empty()) return;
      // dA = G * B^T, dB = A^T * G, transposed into the stored layouts.
      if (a.requires_grad()) {
        auto& ga = a.grad_ref();
        if (!trans_a)
          detail::gemm_accum(g.data(), out.rows(), out.cols(), false, b.data(), b.rows(),
                             b.cols(), !trans_b, ga.data());
        else
          detail::gemm_accum(b.data(), b.rows(), b.cols(), trans_b, g.data(), out.rows(),
                             out.cols(), true, ga.data());
      }
      if (b.requires_grad()) {
        auto& gb = b.grad_ref();
        if (!trans_b)
          detail::gemm_accum(a.data(), a.rows(), a.cols(), !trans_a, g.data(), out.rows(),
                             out.cols(), false, gb.data());
        else
          detail::gemm_accum(g.data(), out.rows(), out.cols(), true, a.data(), a.rows(),
                             a.cols(), trans_a, gb.data());
      }
    });
    return out;
  }

  // ---- elementwise -----------------------------------------------------

  Tensor add(const Tensor& a, const Tensor& b) { return binary(Elementwise::add, a, b); }
  Tensor sub(const Tensor& a, const Tensor& b) { return binary(Elementwise::sub, a, b); }
  Tensor mul(const Tensor& a, const Tensor& b) { return binary(Elementwise::mul, a, b); }
  Tensor sigmoid(const Tensor& x) { return unary(Elementwise::sigmoid, x); }
  Tensor tanh(const Tensor& x) { return unary(Elementwise::tanh, x); }
  Tensor relu(const Tensor& x) { return unary(Elementwise::relu, x); }
  Tensor exp(const Tensor& x) { return unary(Elementwise::exp, x); }
  Tensor neg(const Tensor& x) { return unary(Elementwise::neg, x); }

  /// out = m + bias broadcast over the row axis; the one sanctioned broadcast.
  Tensor add_bias(const Tensor& m, const Tensor& bias) {
    if (m.rank() != 2 || bias.rank() != 1 || bias.size() != m.cols())
      throw ShapeError("add_bias: " + shape_str(m.shape()) + " + " + shape_str(bias.shape()));
    Tensor out = Tensor::zeros(m.shape());
    const std::size_t r = m.rows(), c = m.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out.data()[i * c + j] = m.data()[i * c + j] + bias.data()[j];
    finish(out, m.requires_grad() || bias.requires_grad(), [m, bias, out, r, c]() mutable {
      const auto& g = out.impl()->grad;
      if (g.empty()) return;
      if (m.requires_grad()) {
        auto& gm = m.grad_ref();
        for (std::size_t i = 0; i < g.size(); ++i) gm[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto& gb = bias.grad_ref();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
      }
    });
    return out;
  }

  /// out = c * x for a plain constant c.
  Tensor scale(const Tensor& x, S c) {
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = c * x.data()[i];
    finish(out, x.requires_grad(), [x, out, c]() mutable {
      const auto& g = out.impl()->grad;
      if (g.empty() || !x.requires_grad()) return;
      auto& gx = x.grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
    });
    return out;
  }

  /// Row i of x scaled by s[i]. s is a constant (masks, pooling weights);
  /// no gradient flows into it.
  Tensor scale_rows(const Tensor& x, const Tensor& s) {
    if (x.rank() != 2 || s.rank() != 1 || s.size() != x.rows())
      throw ShapeError("scale_rows: " + shape_str(x.shape()) + " by " + shape_str(s.shape()));
    if (s.requires_grad()) throw ContractError("scale_rows: row weights must be constant");
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t r = x.rows(), c = x.cols();
    for (std::size_t i = 0; i < r; ++i) {
      const S w = s.data()[i];
      for (std::size_t j = 0; j < c; ++j) out.data()[i * c + j] = w * x.data()[i * c + j];
    }
    finish(out, x.requires_grad(), [x, s, out, r, c]() mutable {
      const auto& g = out.impl()->grad;
      if (g.empty() || !x.requires_grad()) return;
      auto& gx = x.grad_ref();
      for (std::size_t i = 0; i < r; ++i) {
        const S w = s.data()[i];
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += w * g[i * c + j];
      }
    });
    return out;
  }

  // ---- softmax and loss -------------------------------------------------

  /// Row-wise softmax with max subtraction.
  Tensor softmax_rows(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("softmax_rows needs a matrix, got " + shape_str(x.shape()));
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < r; ++i) {
      const S* xi = x.data() + i * c;
      S* yi = out.data() + i * c;
      S mx = xi[0];
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
      S sum = 0;
      for (std::size_t j = 0; j < c; ++j) {
        yi[j] = std::exp(xi[j] - mx);
        sum += yi[j];
      }
      for (std::size_t j = 0; j < c; ++j) yi[j] /= sum;
    }
    finish(out, x.requires_grad(), [x, out, r, c]() mutable {
      const auto& g = out.impl()->grad;
      if (g.empty() || !x.requires_grad()) return;
      auto& gx = x.grad_ref();
      for (std::size_t i = 0; i < r; ++i) {
        const S* yi = out.data() + i * c;
        const S* gi = g.data() + i * c;
        S dot = 0;
        for (std::size_t j = 0; j < c; ++j) dot += gi[j] * yi[j];
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += yi[j] * (gi[j] - dot);
      }
    });
    return out;
  }

  /// Mean over rows of -log softmax(logits)[gold]; fused and stable.
  Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& gold) {
    if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy needs a matrix");
    const std::size_t r = logits.rows(), c = logits.cols();
    if (gold.size() != r) throw ContractError("softmax_cross_entropy: one gold class per row");
    for (int y : gold)
      if (y < 0 || static_cast<std::size_t>(y) >= c)
        throw ContractError("gold class " + std::to_string(y) + " out of range");
    std::vector<S> probs(r * c);
    S total = 0;
    for (std::size_t i = 0; i < r; ++i) {
      const S* zi = logits.data() + i * c;
      S mx = zi[0];
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, zi[j]);
      S sum = 0;
      for (std::size_t j = 0; j < c; ++j) {
        probs[i * c + j] = std::exp(zi[j] - mx);
        sum += probs[i * c + j];
      }
      for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= sum;
      total += std::log(sum) + mx - zi[gold[i]];
    }
    Tensor out = Tensor::scalar(total / static_cast<S>(r));
    finish(out, logits.requires_grad(),
           [logits, out, gold, probs = std::move(probs), r, c]() mutable {
             const auto& g = out.impl()->grad;
             if (g.empty() || !logits.requires_grad()) return;
             const S go = g[0] / static_cast<S>(r);
             auto& gz = logits.grad_ref();
             for (std::size_t i = 0; i < r; ++i) {
               for (std::size_t j = 0; j < c; ++j) gz[i * c + j] += go * probs[i * c + j];
               gz[i * c + gold[i]] -= go;
             }
           });
    return out;
  }

  // ---- shape surgery ------------------------------------------------------

  Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat of nothing");
    const std::size_t rk = parts[0].rank();
    if (axis >= std::max<std::size_t>(rk, 1)) throw ShapeError("concat axis out of range");
    bool needs_grad = false;
    for (const auto& p : parts) {
      if (p.rank() != rk) throw ShapeError("concat rank mismatch");
      needs_grad = needs_grad || p.requires_grad();
    }
    Tensor out;
    if (rk == 1) {
      std::size_t n = 0;
      for (const auto& p : parts) n += p.size();
      out = Tensor::zeros({n});
      std::size_t off = 0;
      for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.size(), out.data() + off);
        off += p.size();
      }
      finish(out, needs_grad, [parts, out]() mutable {
        const auto& g = out.impl()->grad;
        if (g.empty()) return;
        std::size_t off = 0;
        for (auto& p : parts) {
          if (p.requires_grad()) {
            auto& gp = p.grad_ref();
            for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g[off + i];
          }
          off += p.size();
        }
      });
      return out;
    }
    if (rk != 2) throw ShapeError("concat supports vectors and matrices");
    if (axis == 0) {
      const std::size_t c = parts[0].cols();
      std::size_t r = 0;
      for (const auto& p : parts) {
        if (p.cols() != c) throw ShapeError("concat column mismatch");
        r += p.rows();
      }
      out = Tensor::zeros({r, c});
      std::size_t off = 0;
      for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.size(), out.data() + off);
        off += p.size();
      }
      finish(out, needs_grad, [parts, out]() mutable {
        const auto& g = out.impl()->grad;
        if (g.empty()) return;
        std::size_t off = 0;
        for (auto& p : parts) {
          if (p.requires_grad()) {
            auto& gp = p.grad_ref();
            for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g[off + i];
          }
          off += p.size();
        }
      });
      return out;
    }
    const std::size_t r = parts[0].rows();
    std::size_t c = 0;
    for (const auto& p : parts) {
      if (p.rows() != r) throw ShapeError("concat row mismatch");
      c += p.cols();
    }
    out = Tensor::zeros({r, c});
    std::size_t coff = 0;
    for (const auto& p : parts) {
      for (std::size_t i = 0; i < r; ++i)
        std::copy(p.data() + i * p.cols(), p.data() + (i + 1) * p.cols(),
                  out.data() + i * c + coff);
      coff += p.cols();
    }
    finish(out, needs_grad, [parts, out, r, c]() mutable {
      const auto& g = out.impl()->grad;
      if (g.empty()) return;
      std::size_t coff = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          auto& gp = p.grad_ref();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) gp[i * p.cols() + j] += g[i * c + coff + j];
        }
        coff += p.cols();
      }
    });
    return out;
  }

  /// Contiguous [begin, end) range along an axis, copied out.
  Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
    if (axis >= std::max<std::size_t>(x.rank(), 1)) throw ShapeError("slice axis out of range");
    if (begin >= end) throw ContractError("empty slice");
    if (x.rank() == 1) {
      if (end > x.size()) throw ShapeError("slice range outside " + shape_str(x.shape()));
      Tensor out = Tensor::zeros({end - begin});
      std::copy(x.data() + begin, x.data() + end, out.data());
      finish(out, x.requires_grad(), [x, out, begin]() mutable {
        const auto& g = out.impl()->grad;
        if (g.empty() || !x.requires_grad()) return;
        auto& gx = x.grad_ref();
        for (std::size_t i = 0; i < g.size(); ++i) gx[begin + i] += g[i];
      });
      return out;
    }
    if (x.rank() != 2) throw ShapeError("slice supports vectors and matrices");
    const std::size_t r = x.rows(), c = x.cols();
    if (axis == 0) {
      if (end > r) throw ShapeError("slice range outside " + shape_str(x.shape()));
      Tensor out = Tensor::zeros({end - begin, c});
      std::copy(x.data() + begin * c, x.data() + end * c, out.data());
      finish(out, x.requires_grad(), [x, out, begin, c]() mutable {
        const auto& g = out.impl()->grad;
        if (g.empty() || !x.requires_grad()) return;
        auto& gx = x.grad_ref();
        for (std::size_t i = 0; i < g.size(); ++i) gx[begin * c + i] += g[i];
      });
      return out;
    }
    if (end > c) throw ShapeError("slice range outside " + shape_str(x.shape()));
    Tensor out = Tensor::zeros({r, end - begin});
    const std::size_t w = end - begin;
    for (std::size_t i = 0; i < r; ++i)
      std::copy(x.data() + i * c + begin, x.data() + i * c + end, out.data() + i * w);
    finish(out, x.requires_grad(), [x, out, begin, r, c, w]() mutable {
      const auto& g = out.impl()->grad;
      if (g.empty() || !x.requires_grad()) return;
      auto& gx = x.grad_ref();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) gx[i * c + begin + j] += g[i * w + j];
    });
    return out;
  }

  /// Collapse a matrix along an axis: axis 0 gives per-column results,
  /// axis 1 per-row. Max ties route the gradient to the lowest index.
  Tensor reduce(const Tensor& x, Reduce kind, std::size_t axis) {
    if (x.rank() != 2) throw ShapeError("reduce needs a matrix, got " + shape_str(x.shape()));
    if (axis > 1) throw ShapeError("reduce axis out of range");
    const std::size_t r = x.rows(), c = x.cols();
    const std::size_t out_n = axis == 0 ? c : r;
    const std::size_t span = axis == 0 ? r : c;
    Tensor out = Tensor::zeros({out_n});
    std::vector<std::size_t> arg(kind == Reduce::max ? out_n : 0);
    for (std::size_t o = 0; o < out_n; ++o) {
      auto elem = [&](std::size_t s) { return axis == 0 ? x.data()[s * c + o] : x.data()[o * c + s]; };
      if (kind == Reduce::max) {
        S best = elem(0);
        std::size_t bi = 0;
        for (std::size_t s = 1; s < span; ++s)
          if (elem(s) > best) {
            best = elem(s);
            bi = s;
          }
        out.data()[o] = best;
        arg[o] = bi;
      } else {
        S sum = 0;
        for (std::size_t s = 0; s < span; ++s) sum += elem(s);
        out.data()[o] = kind == Reduce::mean ? sum / static_cast<S>(span) : sum;
      }
    }
    finish(out, x.requires_grad(),
           [x, out, kind, axis, r, c, span, out_n, arg = std::move(arg)]() mutable {
             const auto& g = out.impl()->grad;
             if (g.empty() || !x.requires_grad()) return;
             auto& gx = x.grad_ref();
             auto slot = [&](std::size_t o, std::size_t s) -> S& {
               return axis == 0 ? gx[s * c + o] : gx[o * c + s];
             };
             for (std::size_t o = 0; o < out_n; ++o) {
               if (kind == Reduce::max) {
                 slot(o, arg[o]) += g[o];
               } else {
                 const S go = kind == Reduce::mean ? g[o] / static_cast<S>(span) : g[o];
                 for (std::size_t s = 0; s < span; ++s) slot(o, s) += go;
               }
             }
           });
    return out;
  }

  Tensor sum_all(const Tensor& x) {
    S total = std::accumulate(x.data(), x.data() + x.size(), S(0));
    Tensor out = Tensor::scalar(total);
    finish(out, x.requires_grad(), [x, out]() mutable {
      const auto& g = out.impl()->grad;
      if (g.empty() || !x.requires_grad()) return;
      auto& gx = x.grad_ref();
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[0];
    });
    return out;
  }

  Tensor transpose(const Tensor& x) {
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out = Tensor::from({c, r}, detail::transpose_copy(x.data(), r, c));
    finish(out, x.requires_grad(), [x, out, r, c]() mutable {
      const auto& g = out.impl()->grad;
      if (g.empty() || !x.requires_grad()) return;
      auto& gx = x.grad_ref();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
    });
    return out;
  }

  /// Copy rows src[idx[0]], src[idx[1]], ... into a new matrix. Backward
  /// scatter-adds, so repeated indices accumulate.
  Tensor gather_rows(const Tensor& src, const std::vector<std::size_t>& idx) {
    const std::size_t c = src.cols();
    for (std::size_t i : idx)
      if (i >= src.rows()) throw ContractError("gather_rows index out of range");
    Tensor out = Tensor::zeros({idx.size(), c});
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy(src.data() + idx[i] * c, src.data() + (idx[i] + 1) * c, out.data() + i * c);
    finish(out, src.requires_grad(), [src, out, idx, c]() mutable {
      const auto& g = out.impl()->grad;
      if (g.empty() || !src.requires_grad()) return;
      auto& gs = src.grad_ref();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) gs[idx[i] * c + j] += g[i * c + j];
    });
    return out;
  }

  /// gather_rows across several source matrices: entry k copies row
  /// idx[k].second of sources[idx[k].first].
  Tensor gather_multi(const std::vector<Tensor>& sources,
                      const std::vector<std::pair<std::uint32_t, std::uint32_t>>& idx) {
    if (sources.empty()) throw ContractError("gather_multi with no sources");
    const std::size_t c = sources[0].cols();
    bool needs_grad = false;
    for (const auto& s : sources) {
      if (s.cols() != c) throw ShapeError("gather_multi column mismatch");
      needs_grad = needs_grad || s.requires_grad();
    }
    Tensor out = Tensor::zeros({idx.size(), c});
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto& s = sources.at(idx[k].first);
      if (idx[k].second >= s.rows()) throw ContractError("gather_multi row out of range");
      std::copy(s.data() + idx[k].second * c, s.data() + (idx[k].second + 1) * c,
                out.data() + k * c);
    }
    finish(out, needs_grad, [sources, out, idx, c]() mutable {
      const auto& g = out.impl()->grad;
      if (g.empty()) return;
      for (std::size_t k = 0; k < idx.size(); ++k) {
        auto& s = sources[idx[k].first];
        if (!s.requires_grad()) continue;
        auto& gs = s.grad_ref();
        for (std::size_t j = 0; j < c; ++j) gs[idx[k].second * c + j] += g[k * c + j];
      }
    });
    return out;
  }

  /// Tile a vector into n identical rows; backward sums the row gradients.
  Tensor repeat_row(const Tensor& v, std::size_t n) {
    if (v.rank() != 1) throw ShapeError("repeat_row needs a vector");
    const std::size_t c = v.size();
    Tensor out = Tensor::zeros({n, c});
    for (std::size_t i = 0; i < n; ++i) std::copy(v.data(), v.data() + c, out.data() + i * c);
    finish(out, v.requires_grad(), [v, out, n, c]() mutable {
      const auto& g = out.impl()->grad;
      if (g.empty() || !v.requires_grad()) return;
      auto& gv = v.grad_ref();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j];
    });
    return out;
  }

  /// Stack 1-D vectors of equal length into a matrix.
  Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw ContractError("stack_rows of nothing");
    const std::size_t c = rows[0].size();
    bool needs_grad = false;
    for (const auto& v : rows) {
      if (v.rank() != 1 || v.size() != c) throw ShapeError("stack_rows length mismatch");
      needs_grad = needs_grad || v.requires_grad();
    }
    Tensor out = Tensor::zeros({rows.size(), c});
    for (std::size_t i = 0; i < rows.size(); ++i)
      std::copy(rows[i].data(), rows[i].data() + c, out.data() + i * c);
    finish(out, needs_grad, [rows, out, c]() mutable {
      const auto& g = out.impl()->grad;
      if (g.empty()) return;
      for (std::size_t i = 0; i < rows.size(); ++i) {
        auto& v = rows[i];
        if (!v.requires_grad()) continue;
        auto& gv = v.grad_ref();
        for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j];
      }
    });
    return out;
  }

  // ---- backward -------------------------------------------------------

  /// Seed d(loss)/d(loss) = 1 and replay the tape in reverse. Grads of op
  /// outputs are per-pass scratch and reset here; leaf grads accumulate
  /// across repeated calls.
  void backward(const Tensor& loss) {
    if (loss.rank() != 0) throw ContractError("backward needs a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) throw ContractError("loss is not connected to the recorded graph");
    for (auto& o : outputs_) o.zero_grad();
    loss.impl()->grad_ref()[0] = S(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
  }

 private:
  bool recording_;
  std::vector<std::function<void()>> tape_;
  std::vector<Tensor> outputs_;

  Tensor binary(Elementwise kind, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
      throw ShapeError("elementwise operands differ: " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    Tensor out = Tensor::from(a.shape(), std::vector<S>(a.size()), false);
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    switch (kind) {
      case Elementwise::add:
        for (std::size_t i = 0; i < a.size(); ++i) po[i] = pa[i] + pb[i];
        break;
      case Elementwise::sub:
        for (std::size_t i = 0; i < a.size(); ++i) po[i] = pa[i] - pb[i];
        break;
      case Elementwise::mul:
        for (std::size_t i = 0; i < a.size(); ++i) po[i] = pa[i] * pb[i];
        break;
      default:
        throw ContractError("not a binary elementwise kind");
    }
    finish(out, a.requires_grad() || b.requires_grad(), [kind, a, b, out]() mutable {
      const auto& g = out.impl()->grad;
      if (g.empty()) return;
      if (a.requires_grad()) {
        auto& ga = a.grad_ref();
        for (std::size_t i = 0; i < g.size(); ++i)
          ga[i] += kind == Elementwise::mul ? g[i] * b.data()[i] : g[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad_ref();
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (kind == Elementwise::mul)
            gb[i] += g[i] * a.data()[i];
          else if (kind == Elementwise::sub)
            gb[i] -= g[i];
          else
            gb[i] += g[i];
        }
      }
    });
    return out;
  }

  Tensor unary(Elementwise kind, const Tensor& x) {
    Tensor out = Tensor::from(x.shape(), std::vector<S>(x.size()), false);
    const S* px = x.data();
    S* po = out.data();
    switch (kind) {
      case Elementwise::sigmoid:
        for (std::size_t i = 0; i < x.size(); ++i) po[i] = S(1) / (S(1) + std::exp(-px[i]));
        break;
      case Elementwise::tanh:
        for (std::size_t i = 0; i < x.size(); ++i) po[i] = std::tanh(px[i]);
        break;
      case Elementwise::relu:
        for (std::size_t i = 0; i < x.size(); ++i) po[i] = px[i] > S(0) ? px[i] : S(0);
        break;
      case Elementwise::exp:
        for (std::size_t i = 0; i < x.size(); ++i) po[i] = std::exp(px[i]);
        break;
      case Elementwise::neg:
        for (std::size_t i = 0; i < x.size(); ++i) po[i] = -px[i];
        break;
      default:
        throw ContractError("not a unary elementwise kind");
    }
    finish(out, x.requires_grad(), [kind, x, out]() mutable {
      const auto& g = out.impl()->grad;
      if (g.empty() || !x.requires_grad()) return;
      auto& gx = x.grad_ref();
      const S* y = out.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        switch (kind) {
          case Elementwise::sigmoid:
            gx[i] += g[i] * y[i] * (S(1) - y[i]);
            break;
          case Elementwise::tanh:
            gx[i] += g[i] * (S(1) - y[i] * y[i]);
            break;
          case Elementwise::relu:
            gx[i] += x.data()[i] > S(0) ? g[i] : S(0);
            break;
          case Elementwise::exp:
            gx[i] += g[i] * y[i];
            break;
          case Elementwise::neg:
            gx[i] -= g[i];
            break;
          default:
            break;
        }
      }
    });
    return out;
  }

  template <class F>
  void finish(Tensor& out, bool needs_grad, F&& backprop) {
    if (recording_ && needs_grad) {
      out.set_requires_grad(true);
      tape_.emplace_back(std::forward<F>(backprop));
      outputs_.push_back(out);
    }
  }
};

using Tensor = TensorT<double>;
using Graph = GraphT<double>;

}  // namespace nli
