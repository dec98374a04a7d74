// Tape-based reverse-mode differentiation over dense tensors.
//
// A Tape records primitive operations in execution order; backward() runs one
// reverse sweep in anti-topological (reverse creation) order, accumulating
// gradients at shared nodes. Gradients of parameters that do not reach the
// loss stay exactly zero. Every primitive validates shapes and raises
// numeric_error as soon as a non-finite value appears.
#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "sdlm/common.hpp"
#include "sdlm/tensor.hpp"

namespace sdlm {

template <typename T = double>
class Tape {
 public:
  using Index = std::size_t;

  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated lazily during backward
    bool requires_grad = false;
    std::function<void(Tape&)> backward;
  };

  Index size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  const Tensor<T>& value(Index i) const { return nodes_[i].value; }

  // Gradient of node i after backward(); zero tensor if the node never
  // received any contribution.
  const Tensor<T>& grad(Index i) {
    touch_grad(i);
    return nodes_[i].grad;
  }

  bool requires_grad(Index i) const { return nodes_[i].requires_grad; }

  // ---- leaves ------------------------------------------------------------

  Index param(const Tensor<T>& t) {
    check_finite_input(t, "param");
    return push(Tensor<T>(t), true, {});
  }

  Index constant(Tensor<T> t) {
    check_finite_input(t, "constant");
    return push(std::move(t), false, {});
  }

  // Extension point for fused operations defined outside this header. The
  // backward callback reads grad(out) and accumulates into grad_buffer(...)
  // of its inputs.
  Index make_node(Tensor<T> value, bool requires,
                  std::function<void(Tape&)> backward_fn) {
    return push(std::move(value), requires,
                requires ? std::move(backward_fn)
                         : std::function<void(Tape&)>{});
  }

  // Raw accumulation buffer for custom backward implementations.
  Tensor<T>& grad_buffer(Index i) {
    touch_grad(i);
    return nodes_[i].grad;
  }

  bool grad_touched(Index i) const { return !nodes_[i].grad.empty(); }

  // ---- elementwise -------------------------------------------------------

  Index add(Index a, Index b) {
    const auto& av = value(a);
    const auto& bv = value(b);
    if (!av.same_shape(bv))
      throw argument_error("add: shape mismatch " + shape_str(av.shape()) +
                           " vs " + shape_str(bv.shape()));
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return finish("add", std::move(out), {a, b}, [a, b](Tape& tp) {
      const auto& g = tp.out_grad();
      if (tp.requires_grad(a)) {
        auto& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (tp.requires_grad(b)) {
        auto& gb = tp.grad_buffer(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }

  // mat (m x n) + row vector (n), broadcast over rows.
  Index add_rowvec(Index m, Index v) {
    const auto& mv = value(m);
    const auto& vv = value(v);
    if (mv.rank() != 2 || vv.size() != mv.cols())
      throw argument_error("add_rowvec: incompatible shapes");
    Tensor<T> out(mv.shape());
    const std::size_t rows = mv.rows(), cols = mv.cols();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        out[r * cols + c] = mv[r * cols + c] + vv[c];
    return finish("add_rowvec", std::move(out), {m, v}, [m, v, rows, cols](Tape& tp) {
      const auto& g = tp.out_grad();
      if (tp.requires_grad(m)) {
        auto& gm = tp.grad_buffer(m);
        for (std::size_t i = 0; i < g.size(); ++i) gm[i] += g[i];
      }
      if (tp.requires_grad(v)) {
        auto& gv = tp.grad_buffer(v);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gv[c] += g[r * cols + c];
      }
    });
  }

  Index mul(Index a, Index b) {
    const auto& av = value(a);
    const auto& bv = value(b);
    if (!av.same_shape(bv))
      throw argument_error("mul: shape mismatch " + shape_str(av.shape()) +
                           " vs " + shape_str(bv.shape()));
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return finish("mul", std::move(out), {a, b}, [a, b](Tape& tp) {
      const auto& g = tp.out_grad();
      const auto& av = tp.value(a);
      const auto& bv = tp.value(b);
      if (tp.requires_grad(a)) {
        auto& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (tp.requires_grad(b)) {
        auto& gb = tp.grad_buffer(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  }

  Index scale(Index a, T c) {
    const auto& av = value(a);
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    return finish("scale", std::move(out), {a}, [a, c](Tape& tp) {
      const auto& g = tp.out_grad();
      if (!tp.requires_grad(a)) return;
      auto& ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
  }

  Index sigmoid(Index a) {
    const auto& av = value(a);
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const T x = av[i];
      // branch keeps exp() argument non-positive for stability
      out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                         : std::exp(x) / (T(1) + std::exp(x));
    }
    return finish("sigmoid", std::move(out), {a}, [a](Tape& tp) {
      const auto& g = tp.out_grad();
      const auto& y = tp.out_value();
      if (!tp.requires_grad(a)) return;
      auto& ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        ga[i] += g[i] * y[i] * (T(1) - y[i]);
    });
  }

  Index tanh(Index a) {
    const auto& av = value(a);
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(av[i]);
    return finish("tanh", std::move(out), {a}, [a](Tape& tp) {
      const auto& g = tp.out_grad();
      const auto& y = tp.out_value();
      if (!tp.requires_grad(a)) return;
      auto& ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        ga[i] += g[i] * (T(1) - y[i] * y[i]);
    });
  }

  // ---- linear algebra ----------------------------------------------------

  // (m x k) * (k x n) -> (m x n)
  Index matmul(Index a, Index b) {
    const auto& av = value(a);
    const auto& bv = value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows())
      throw argument_error("matmul: incompatible shapes " +
                           shape_str(av.shape()) + " * " + shape_str(bv.shape()));
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    Tensor<T> out({m, n});
    gemm(av.data(), bv.data(), out.data(), m, k, n);
    return finish("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape& tp) {
      const auto& g = tp.out_grad();
      const auto& av = tp.value(a);
      const auto& bv = tp.value(b);
      if (tp.requires_grad(a)) {
        // dA += dY * B^T
        auto& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < k; ++j) {
            T acc = 0;
            for (std::size_t c = 0; c < n; ++c)
              acc += g[i * n + c] * bv[j * n + c];
            ga[i * k + j] += acc;
          }
      }
      if (tp.requires_grad(b)) {
        // dB += A^T * dY
        auto& gb = tp.grad_buffer(b);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < k; ++j) {
            const T aij = av[i * k + j];
            for (std::size_t c = 0; c < n; ++c)
              gb[j * n + c] += aij * g[i * n + c];
          }
      }
    });
  }

  // (m x k) * (n x k)^T -> (m x n)
  Index matmul_nt(Index a, Index b) {
    const auto& av = value(a);
    const auto& bv = value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols())
      throw argument_error("matmul_nt: incompatible shapes " +
                           shape_str(av.shape()) + " * " + shape_str(bv.shape()) + "^T");
    const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
    Tensor<T> out({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        T acc = 0;
        for (std::size_t c = 0; c < k; ++c) acc += av[i * k + c] * bv[j * k + c];
        out[i * n + j] = acc;
      }
    return finish("matmul_nt", std::move(out), {a, b}, [a, b, m, k, n](Tape& tp) {
      const auto& g = tp.out_grad();
      const auto& av = tp.value(a);
      const auto& bv = tp.value(b);
      if (tp.requires_grad(a)) {
        // dA += dY * B
        auto& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const T gij = g[i * n + j];
            for (std::size_t c = 0; c < k; ++c)
              ga[i * k + c] += gij * bv[j * k + c];
          }
      }
      if (tp.requires_grad(b)) {
        // dB += dY^T * A
        auto& gb = tp.grad_buffer(b);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const T gij = g[i * n + j];
            for (std::size_t c = 0; c < k; ++c)
              gb[j * k + c] += gij * av[i * k + c];
          }
      }
    });
  }

  // (m x k) * (k) -> (m)
  Index matvec(Index a, Index x) {
    const auto& av = value(a);
    const auto& xv = value(x);
    if (av.rank() != 2 || xv.rank() != 1 || av.cols() != xv.size())
      throw argument_error("matvec: incompatible shapes");
    const std::size_t m = av.rows(), k = av.cols();
    Tensor<T> out({m});
    for (std::size_t i = 0; i < m; ++i) {
      T acc = 0;
      for (std::size_t j = 0; j < k; ++j) acc += av[i * k + j] * xv[j];
      out[i] = acc;
    }
    return finish("matvec", std::move(out), {a, x}, [a, x, m, k](Tape& tp) {
      const auto& g = tp.out_grad();
      const auto& av = tp.value(a);
      const auto& xv = tp.value(x);
      if (tp.requires_grad(a)) {
        auto& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < k; ++j) ga[i * k + j] += g[i] * xv[j];
      }
      if (tp.requires_grad(x)) {
        auto& gx = tp.grad_buffer(x);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < k; ++j) gx[j] += g[i] * av[i * k + j];
      }
    });
  }

  // ---- structure ---------------------------------------------------------

  // Stack matrices with equal column counts along the row dimension.
  Index concat_rows(const std::vector<Index>& parts) {
    if (parts.empty()) throw argument_error("concat_rows: no inputs");
    const std::size_t cols = value(parts[0]).cols();
    std::size_t rows = 0;
    for (Index p : parts) {
      const auto& pv = value(p);
      if (pv.rank() != 2 || pv.cols() != cols)
        throw argument_error("concat_rows: column mismatch");
      rows += pv.rows();
    }
    Tensor<T> out({rows, cols});
    std::size_t r0 = 0;
    for (Index p : parts) {
      const auto& pv = value(p);
      std::copy(pv.data(), pv.data() + pv.size(), out.data() + r0 * cols);
      r0 += pv.rows();
    }
    return finish("concat_rows", std::move(out), parts,
                  [parts = parts, cols](Tape& tp) {
                    const auto& g = tp.out_grad();
                    std::size_t r0 = 0;
                    for (Index p : parts) {
                      const std::size_t pr = tp.value(p).rows();
                      if (tp.requires_grad(p)) {
                        auto& gp = tp.grad_buffer(p);
                        for (std::size_t i = 0; i < pr * cols; ++i)
                          gp[i] += g[r0 * cols + i];
                      }
                      r0 += pr;
                    }
                  });
  }

  // Columns [c0, c1) of a matrix.
  Index slice_cols(Index a, std::size_t c0, std::size_t c1) {
    const auto& av = value(a);
    if (av.rank() != 2 || c0 >= c1 || c1 > av.cols())
      throw argument_error("slice_cols: bad range");
    const std::size_t rows = av.rows(), cols = av.cols(), w = c1 - c0;
    Tensor<T> out({rows, w});
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c)
        out[r * w + c] = av[r * cols + c0 + c];
    return finish("slice_cols", std::move(out), {a},
                  [a, c0, rows, cols, w](Tape& tp) {
                    if (!tp.requires_grad(a)) return;
                    const auto& g = tp.out_grad();
                    auto& ga = tp.grad_buffer(a);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < w; ++c)
                        ga[r * cols + c0 + c] += g[r * w + c];
                  });
  }

  // Rows of an embedding table; backward is scatter-add over the same ids.
  Index gather_rows(Index table, std::vector<std::uint32_t> ids) {
    const auto& tv = value(table);
    if (tv.rank() != 2) throw argument_error("gather_rows: table must be 2-d");
    const std::size_t n = tv.rows(), d = tv.cols();
    for (std::uint32_t id : ids)
      if (id >= n)
        throw argument_error("gather_rows: row id " + std::to_string(id) +
                             " out of range [0," + std::to_string(n) + ")");
    Tensor<T> out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i)
      std::copy(tv.data() + ids[i] * d, tv.data() + (ids[i] + 1) * d,
                out.data() + i * d);
    return finish("gather_rows", std::move(out), {table},
                  [table, ids = std::move(ids), d](Tape& tp) {
                    if (!tp.requires_grad(table)) return;
                    const auto& g = tp.out_grad();
                    auto& gt = tp.grad_buffer(table);
                    for (std::size_t i = 0; i < ids.size(); ++i)
                      for (std::size_t c = 0; c < d; ++c)
                        gt[ids[i] * d + c] += g[i * d + c];
                  });
  }

  // ---- reductions / probabilistic ----------------------------------------

  // Row-wise softmax of a matrix (used for the basis mixture weights).
  Index row_softmax(Index a) {
    const auto& av = value(a);
    if (av.rank() != 2) throw argument_error("row_softmax: input must be 2-d");
    const std::size_t rows = av.rows(), cols = av.cols();
    Tensor<T> out(av.shape());
    for (std::size_t r = 0; r < rows; ++r)
      softmax_row(av.data() + r * cols, out.data() + r * cols, cols);
    return finish("row_softmax", std::move(out), {a}, [a, rows, cols](Tape& tp) {
      if (!tp.requires_grad(a)) return;
      const auto& g = tp.out_grad();
      const auto& y = tp.out_value();
      auto& ga = tp.grad_buffer(a);
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::size_t c = 0; c < cols; ++c)
          dot += g[r * cols + c] * y[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c)
          ga[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
      }
    });
  }

  // log(sum(exp(x))) of a 1-d tensor, max-shifted.
  Index logsumexp(Index a) {
    const auto& av = value(a);
    if (av.rank() != 1 || av.size() == 0)
      throw argument_error("logsumexp: input must be a non-empty vector");
    Tensor<T> out = Tensor<T>::scalar(logsumexp_raw(av.data(), av.size()));
    return finish("logsumexp", std::move(out), {a}, [a](Tape& tp) {
      if (!tp.requires_grad(a)) return;
      const auto& g = tp.out_grad();
      const auto& y = tp.out_value();
      const auto& xv = tp.value(a);
      auto& ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < xv.size(); ++i)
        ga[i] += g[0] * std::exp(xv[i] - y[0]);
    });
  }

  // Per-row -log softmax(logits)[target]; returns a vector of losses.
  Index nll_from_logits(Index logits, std::vector<std::uint32_t> targets) {
    const auto& lv = value(logits);
    if (lv.rank() != 2 || lv.rows() != targets.size())
      throw argument_error("nll_from_logits: logits must be (batch x classes)");
    const std::size_t rows = lv.rows(), cols = lv.cols();
    for (std::uint32_t t : targets)
      if (t >= cols) throw argument_error("nll_from_logits: target out of range");
    Tensor<T> out({rows});
    std::vector<T> lse(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      lse[r] = logsumexp_raw(lv.data() + r * cols, cols);
      out[r] = lse[r] - lv[r * cols + targets[r]];
    }
    return finish("nll_from_logits", std::move(out), {logits},
                  [logits, targets = std::move(targets), lse = std::move(lse),
                   cols](Tape& tp) {
                    if (!tp.requires_grad(logits)) return;
                    const auto& g = tp.out_grad();
                    const auto& lv = tp.value(logits);
                    auto& gl = tp.grad_buffer(logits);
                    for (std::size_t r = 0; r < g.size(); ++r) {
                      for (std::size_t c = 0; c < cols; ++c)
                        gl[r * cols + c] +=
                            g[r] * std::exp(lv[r * cols + c] - lse[r]);
                      gl[r * cols + targets[r]] -= g[r];
                    }
                  });
  }

  Index mean(Index a) {
    const auto& av = value(a);
    if (av.size() == 0) throw argument_error("mean: empty input");
    T acc = 0;
    for (std::size_t i = 0; i < av.size(); ++i) acc += av[i];
    const T inv = T(1) / static_cast<T>(av.size());
    Tensor<T> out = Tensor<T>::scalar(acc * inv);
    return finish("mean", std::move(out), {a}, [a, inv](Tape& tp) {
      if (!tp.requires_grad(a)) return;
      const auto& g = tp.out_grad();
      auto& ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * inv;
    });
  }

  // ---- reverse sweep -----------------------------------------------------

  void backward(Index loss) {
    if (value(loss).size() != 1)
      throw argument_error("backward: loss must be a scalar node");
    if (!nodes_[loss].requires_grad)
      throw argument_error("backward: loss does not depend on any parameter");
    grad_buffer(loss)[0] = T(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      current_ = i;
      n.backward(*this);
    }
  }

  // Value/grad of the node whose backward callback is currently running.
  const Tensor<T>& out_value() const { return nodes_[current_].value; }
  const Tensor<T>& out_grad() const { return nodes_[current_].grad; }

  // ---- shared numeric kernels --------------------------------------------

  static T logsumexp_raw(const T* x, std::size_t n) {
    T mx = x[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += std::exp(x[i] - mx);
    return mx + std::log(acc);
  }

  static void softmax_row(const T* x, T* out, std::size_t n) {
    const T lse = logsumexp_raw(x, n);
    for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(x[i] - lse);
  }

  static void gemm(const T* a, const T* b, T* out, std::size_t m,
                   std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
      T* orow = out + i * n;
      for (std::size_t c = 0; c < k; ++c) {
        const T aic = a[i * k + c];
        const T* brow = b + c * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += aic * brow[j];
      }
    }
  }

 private:
  Index push(Tensor<T> value, bool requires, std::function<void(Tape&)> back) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, requires, std::move(back)});
    return nodes_.size() - 1;
  }

  template <typename Fn>
  Index finish(const char* opname, Tensor<T> out, const std::vector<Index>& parents,
               Fn&& back) {
    if (!out.all_finite())
      throw numeric_error(std::string(opname) + ": produced non-finite value");
    bool req = false;
    for (Index p : parents) req = req || nodes_[p].requires_grad;
    return push(std::move(out), req,
                req ? std::function<void(Tape&)>(std::forward<Fn>(back))
                    : std::function<void(Tape&)>{});
  }

  void touch_grad(Index i) {
    if (nodes_[i].grad.empty())
      nodes_[i].grad = Tensor<T>(nodes_[i].value.shape());
  }

  static void check_finite_input(const Tensor<T>& t, const char* what) {
    if (!t.all_finite())
      throw numeric_error(std::string(what) + ": non-finite input");
  }

  std::vector<Node> nodes_;
  Index current_ = 0;
};

}  // namespace sdlm
