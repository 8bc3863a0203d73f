#pragma once

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "unseg/core/tensor.hpp"

namespace unseg {

/// A named trainable tensor. `reg_index` is assigned when the parameter joins
/// a ParamRegistry; -1 means unregistered (fine for throwaway graphs).
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  int reg_index = -1;

  Param() = default;
  Param(std::string n, Tensor<T> val) : name(std::move(n)), value(std::move(val)) {}
};

template <typename T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid for the tape's lifetime.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;
};

namespace detail {
template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;
}  // namespace detail

/// Reverse-mode autodiff over Tensor<T>. One tape per forward pass; nodes are
/// created in topological order, so backward() is a reverse sweep.
template <typename T>
class Tape {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated lazily in backward()
    std::function<void(Tape&, int)> back;
    bool requires_grad = false;
    Param<T>* param = nullptr;
  };

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    return Var<T>{this, push_impl(std::move(value), requires_grad, nullptr, nullptr)};
  }

  /// Leaf backed by a Param. If `trainable` is false the value still enters the
  /// graph but no gradient is accumulated for it.
  Var<T> param(Param<T>& p, bool trainable = true) {
    return Var<T>{this, push_impl(p.value, trainable, nullptr, trainable ? &p : nullptr)};
  }

  const Tensor<T>& value(Var<T> x) const { return nodes_[static_cast<std::size_t>(x.id)].value; }
  const Tensor<T>& grad(Var<T> x) const { return nodes_[static_cast<std::size_t>(x.id)].grad; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  Tensor<T>& grad_buf(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.numel() == 0) n.grad = Tensor<T>::zeros(n.value.dims);
    return n.grad;
  }
  const Tensor<T>& node_value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  /// Backpropagate from a scalar node (numel == 1).
  void backward(Var<T> root) {
    check(root.tape == this, "backward: var belongs to another tape");
    Node& r = nodes_[static_cast<std::size_t>(root.id)];
    check(r.value.numel() == 1, "backward: root must be scalar");
    grad_buf(root.id).fill(T(1));
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back && n.grad.numel() != 0 && n.requires_grad) n.back(*this, i);
    }
  }

  /// Visit (param, grad) pairs accumulated by the last backward().
  template <typename Fn>
  void for_each_param_grad(Fn&& fn) {
    for (auto& n : nodes_)
      if (n.param && n.grad.numel() != 0) fn(*n.param, n.grad);
  }

  Var<T> make(Tensor<T> value, std::vector<int> parents, std::function<void(Tape&, int)> back) {
    bool rg = false;
    for (int pid : parents) rg = rg || requires_grad(pid);
    int id = push_impl(std::move(value), rg, rg ? std::move(back) : nullptr, nullptr);
    return Var<T>{this, id};
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  int push_impl(Tensor<T> value, bool rg, std::function<void(Tape&, int)> back, Param<T>* p) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = rg;
    n.back = std::move(back);
    n.param = p;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>&A = tp.value(a), &B = tp.value(b);
  check(A.same_shape(B), "add: shape mismatch");
  Tensor<T> out = A;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += B[i];
  int ia = a.id, ib = b.id;
  return tp.make(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_buf(self);
    if (t.requires_grad(ia)) t.grad_buf(ia).add_scaled(g, T(1));
    if (t.requires_grad(ib)) t.grad_buf(ib).add_scaled(g, T(1));
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>&A = tp.value(a), &B = tp.value(b);
  check(A.same_shape(B), "sub: shape mismatch");
  Tensor<T> out = A;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= B[i];
  int ia = a.id, ib = b.id;
  return tp.make(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_buf(self);
    if (t.requires_grad(ia)) t.grad_buf(ia).add_scaled(g, T(1));
    if (t.requires_grad(ib)) t.grad_buf(ib).add_scaled(g, T(-1));
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>&A = tp.value(a), &B = tp.value(b);
  check(A.same_shape(B), "mul: shape mismatch");
  Tensor<T> out = A;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= B[i];
  int ia = a.id, ib = b.id;
  return tp.make(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_buf(self);
    const Tensor<T>&va = t.node_value(ia), &vb = t.node_value(ib);
    if (t.requires_grad(ia)) {
      Tensor<T>& ga = t.grad_buf(ia);
      for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * vb[i];
    }
    if (t.requires_grad(ib)) {
      Tensor<T>& gb = t.grad_buf(ib);
      for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * va[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out = tp.value(a);
  for (auto& x : out.v) x *= s;
  int ia = a.id;
  return tp.make(std::move(out), {ia}, [ia, s](Tape<T>& t, int self) {
    if (t.requires_grad(ia)) t.grad_buf(ia).add_scaled(t.grad_buf(self), s);
  });
}

template <typename T>
Var<T> reshape(Var<T> a, std::vector<std::int64_t> dims) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& A = tp.value(a);
  check(Tensor<T>::count(dims) == A.numel(), "reshape: element count mismatch");
  Tensor<T> out(dims, A.v);
  int ia = a.id;
  return tp.make(std::move(out), {ia}, [ia](Tape<T>& t, int self) {
    if (t.requires_grad(ia)) {
      const Tensor<T>& g = t.grad_buf(self);
      Tensor<T>& ga = t.grad_buf(ia);
      for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Var<T> relu(Var<T> a) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out = tp.value(a);
  for (auto& x : out.v) x = x > T(0) ? x : T(0);
  int ia = a.id;
  return tp.make(std::move(out), {ia}, [ia](Tape<T>& t, int self) {
    if (!t.requires_grad(ia)) return;
    const Tensor<T>& g = t.grad_buf(self);
    const Tensor<T>& x = t.node_value(ia);
    Tensor<T>& ga = t.grad_buf(ia);
    for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += x[i] > T(0) ? g[i] : T(0);
  });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  Tape<T>& tp = *a.tape;
  const T inv_sqrt2 = T(0.7071067811865475);
  const T inv_sqrt2pi = T(0.3989422804014327);
  Tensor<T> out = tp.value(a);
  for (auto& x : out.v) x = x * T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
  int ia = a.id;
  return tp.make(std::move(out), {ia}, [ia, inv_sqrt2, inv_sqrt2pi](Tape<T>& t, int self) {
    if (!t.requires_grad(ia)) return;
    const Tensor<T>& g = t.grad_buf(self);
    const Tensor<T>& x = t.node_value(ia);
    Tensor<T>& ga = t.grad_buf(ia);
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
      T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x[i] * x[i]);
      ga[i] += g[i] * (cdf + x[i] * pdf);
    }
  });
}

/// tanh restricted to the open interval (-1, 1): float tanh can round to
/// exactly +/-1 for large inputs, which would break the strict noise-budget
/// bound, so saturated outputs are nudged one step inward.
template <typename T>
inline T tanh_open_scalar(T x) {
  const T cap = T(1) - (sizeof(T) == 4 ? T(1e-6) : T(1e-12));
  T y = std::tanh(x);
  if (y > cap) y = cap;
  if (y < -cap) y = -cap;
  return y;
}

template <typename T>
Var<T> tanh_open(Var<T> a) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out = tp.value(a);
  for (auto& x : out.v) x = tanh_open_scalar(x);
  int ia = a.id;
  return tp.make(std::move(out), {ia}, [ia](Tape<T>& t, int self) {
    if (!t.requires_grad(ia)) return;
    const Tensor<T>& g = t.grad_buf(self);
    const Tensor<T>& y = t.node_value(self);
    Tensor<T>& ga = t.grad_buf(ia);
    for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * (T(1) - y[i] * y[i]);
  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out = tp.value(a);
  for (auto& x : out.v) x = T(1) / (T(1) + std::exp(-x));
  int ia = a.id;
  return tp.make(std::move(out), {ia}, [ia](Tape<T>& t, int self) {
    if (!t.requires_grad(ia)) return;
    const Tensor<T>& g = t.grad_buf(self);
    const Tensor<T>& y = t.node_value(self);
    Tensor<T>& ga = t.grad_buf(ia);
    for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

/// clamp to [0, 1] with pass-through gradient strictly inside the interval.
template <typename T>
Var<T> clamp01(Var<T> a) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out = tp.value(a);
  for (auto& x : out.v) x = std::min(T(1), std::max(T(0), x));
  int ia = a.id;
  return tp.make(std::move(out), {ia}, [ia](Tape<T>& t, int self) {
    if (!t.requires_grad(ia)) return;
    const Tensor<T>& g = t.grad_buf(self);
    const Tensor<T>& x = t.node_value(ia);
    Tensor<T>& ga = t.grad_buf(ia);
    for (std::int64_t i = 0; i < g.numel(); ++i)
      if (x[i] > T(0) && x[i] < T(1)) ga[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>&A = tp.value(a), &B = tp.value(b);
  check(A.rank() == 2 && B.rank() == 2 && A.dim(1) == B.dim(0), "matmul: bad shapes");
  const std::int64_t n = A.dim(0), k = A.dim(1), m = B.dim(1);
  Tensor<T> out({n, m});
  detail::ECMap<T>(A.data(), n, k);
  detail::EMap<T>(out.data(), n, m).noalias() =
      detail::ECMap<T>(A.data(), n, k) * detail::ECMap<T>(B.data(), k, m);
  int ia = a.id, ib = b.id;
  return tp.make(std::move(out), {ia, ib}, [ia, ib, n, k, m](Tape<T>& t, int self) {
    detail::ECMap<T> g(t.grad_buf(self).data(), n, m);
    if (t.requires_grad(ia)) {
      detail::ECMap<T> B(t.node_value(ib).data(), k, m);
      detail::EMap<T>(t.grad_buf(ia).data(), n, k).noalias() += g * B.transpose();
    }
    if (t.requires_grad(ib)) {
      detail::ECMap<T> A(t.node_value(ia).data(), n, k);
      detail::EMap<T>(t.grad_buf(ib).data(), k, m).noalias() += A.transpose() * g;
    }
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& A = tp.value(a);
  check(A.rank() == 2, "transpose: rank-2 only");
  const std::int64_t n = A.dim(0), m = A.dim(1);
  Tensor<T> out({m, n});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < m; ++j) out.at(j, i) = A.at(i, j);
  int ia = a.id;
  return tp.make(std::move(out), {ia}, [ia, n, m](Tape<T>& t, int self) {
    if (!t.requires_grad(ia)) return;
    const Tensor<T>& g = t.grad_buf(self);
    Tensor<T>& ga = t.grad_buf(ia);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < m; ++j) ga.at(i, j) += g.at(j, i);
  });
}

/// rows [N,C] + bias [C]
template <typename T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>&A = tp.value(a), &B = tp.value(bias);
  check(A.rank() == 2 && B.rank() == 1 && A.dim(1) == B.dim(0), "add_bias: bad shapes");
  const std::int64_t n = A.dim(0), c = A.dim(1);
  Tensor<T> out = A;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < c; ++j) out.at(i, j) += B[j];
  int ia = a.id, ib = bias.id;
  return tp.make(std::move(out), {ia, ib}, [ia, ib, n, c](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_buf(self);
    if (t.requires_grad(ia)) t.grad_buf(ia).add_scaled(g, T(1));
    if (t.requires_grad(ib)) {
      Tensor<T>& gb = t.grad_buf(ib);
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < c; ++j) gb[j] += g.at(i, j);
    }
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, std::int64_t r0, std::int64_t r1) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& A = tp.value(a);
  check(A.rank() == 2 && r0 >= 0 && r1 <= A.dim(0) && r0 < r1, "slice_rows: bad range");
  const std::int64_t c = A.dim(1);
  Tensor<T> out({r1 - r0, c});
  std::copy(A.data() + r0 * c, A.data() + r1 * c, out.data());
  int ia = a.id;
  return tp.make(std::move(out), {ia}, [ia, r0, c](Tape<T>& t, int self) {
    if (!t.requires_grad(ia)) return;
    const Tensor<T>& g = t.grad_buf(self);
    Tensor<T>& ga = t.grad_buf(ia);
    for (std::int64_t i = 0; i < g.numel(); ++i) ga[r0 * c + i] += g[i];
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  check(!parts.empty(), "concat_rows: empty");
  Tape<T>& tp = *parts[0].tape;
  const std::int64_t c = tp.value(parts[0]).dim(1);
  std::int64_t n = 0;
  std::vector<int> ids;
  for (auto p : parts) {
    check(tp.value(p).rank() == 2 && tp.value(p).dim(1) == c, "concat_rows: bad shapes");
    n += tp.value(p).dim(0);
    ids.push_back(p.id);
  }
  Tensor<T> out({n, c});
  std::int64_t off = 0;
  for (auto p : parts) {
    const Tensor<T>& P = tp.value(p);
    std::copy(P.data(), P.data() + P.numel(), out.data() + off);
    off += P.numel();
  }
  return tp.make(std::move(out), ids, [ids, c](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_buf(self);
    std::int64_t off = 0;
    for (int id : ids) {
      const std::int64_t sz = t.node_value(id).numel();
      if (t.requires_grad(id)) {
        Tensor<T>& gp = t.grad_buf(id);
        for (std::int64_t i = 0; i < sz; ++i) gp[i] += g[off + i];
      }
      off += sz;
    }
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, std::int64_t c0, std::int64_t c1) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& A = tp.value(a);
  check(A.rank() == 2 && c0 >= 0 && c1 <= A.dim(1) && c0 < c1, "slice_cols: bad range");
  const std::int64_t n = A.dim(0), c = A.dim(1), w = c1 - c0;
  Tensor<T> out({n, w});
  for (std::int64_t i = 0; i < n; ++i)
    std::copy(A.data() + i * c + c0, A.data() + i * c + c1, out.data() + i * w);
  int ia = a.id;
  return tp.make(std::move(out), {ia}, [ia, n, c, c0, w](Tape<T>& t, int self) {
    if (!t.requires_grad(ia)) return;
    const Tensor<T>& g = t.grad_buf(self);
    Tensor<T>& ga = t.grad_buf(ia);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < w; ++j) ga[i * c + c0 + j] += g[i * w + j];
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  check(!parts.empty(), "concat_cols: empty");
  Tape<T>& tp = *parts[0].tape;
  const std::int64_t n = tp.value(parts[0]).dim(0);
  std::int64_t c = 0;
  std::vector<int> ids;
  std::vector<std::int64_t> widths;
  for (auto p : parts) {
    check(tp.value(p).rank() == 2 && tp.value(p).dim(0) == n, "concat_cols: bad shapes");
    widths.push_back(tp.value(p).dim(1));
    c += widths.back();
    ids.push_back(p.id);
  }
  Tensor<T> out({n, c});
  std::int64_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor<T>& P = tp.value(parts[k]);
    for (std::int64_t i = 0; i < n; ++i)
      std::copy(P.data() + i * widths[k], P.data() + (i + 1) * widths[k], out.data() + i * c + off);
    off += widths[k];
  }
  return tp.make(std::move(out), ids, [ids, widths, n, c](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_buf(self);
    std::int64_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        Tensor<T>& gp = t.grad_buf(ids[k]);
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t j = 0; j < widths[k]; ++j) gp[i * widths[k] + j] += g[i * c + off + j];
      }
      off += widths[k];
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and attention pieces
// ---------------------------------------------------------------------------

/// Layer norm over the last dimension of an [N, C] tensor.
template <typename T>
Var<T> layernorm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x);
  const Tensor<T>&G = tp.value(gamma), &B = tp.value(beta);
  check(X.rank() == 2 && G.dim(0) == X.dim(1) && B.dim(0) == X.dim(1), "layernorm: bad shapes");
  const std::int64_t n = X.dim(0), c = X.dim(1);
  Tensor<T> out({n, c});
  Tensor<T> mean({n}), rstd({n});
  for (std::int64_t i = 0; i < n; ++i) {
    T mu = 0;
    for (std::int64_t j = 0; j < c; ++j) mu += X.at(i, j);
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::int64_t j = 0; j < c; ++j) {
      T d = X.at(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<T>(c);
    T rs = T(1) / std::sqrt(var + eps);
    mean[i] = mu;
    rstd[i] = rs;
    for (std::int64_t j = 0; j < c; ++j) out.at(i, j) = (X.at(i, j) - mu) * rs * G[j] + B[j];
  }
  int ix = x.id, ig = gamma.id, ib = beta.id;
  auto mean_p = std::make_shared<Tensor<T>>(std::move(mean));
  auto rstd_p = std::make_shared<Tensor<T>>(std::move(rstd));
  return tp.make(std::move(out), {ix, ig, ib}, [ix, ig, ib, n, c, mean_p, rstd_p](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_buf(self);
    const Tensor<T>& X = t.node_value(ix);
    const Tensor<T>& G = t.node_value(ig);
    for (std::int64_t i = 0; i < n; ++i) {
      const T mu = (*mean_p)[i], rs = (*rstd_p)[i];
      if (t.requires_grad(ig) || t.requires_grad(ib)) {
        Tensor<T>* gg = t.requires_grad(ig) ? &t.grad_buf(ig) : nullptr;
        Tensor<T>* gb = t.requires_grad(ib) ? &t.grad_buf(ib) : nullptr;
        for (std::int64_t j = 0; j < c; ++j) {
          const T xhat = (X.at(i, j) - mu) * rs;
          if (gg) (*gg)[j] += g.at(i, j) * xhat;
          if (gb) (*gb)[j] += g.at(i, j);
        }
      }
      if (t.requires_grad(ix)) {
        // dx = rs * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        T sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (std::int64_t j = 0; j < c; ++j) {
          const T xhat = (X.at(i, j) - mu) * rs;
          const T dxhat = g.at(i, j) * G[j];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
        }
        const T inv_c = T(1) / static_cast<T>(c);
        Tensor<T>& gx = t.grad_buf(ix);
        for (std::int64_t j = 0; j < c; ++j) {
          const T xhat = (X.at(i, j) - mu) * rs;
          const T dxhat = g.at(i, j) * G[j];
          gx.at(i, j) += rs * (dxhat - sum_dxhat * inv_c - xhat * sum_dxhat_xhat * inv_c);
        }
      }
    }
  });
}

/// Row-wise softmax of an [N, M] tensor.
template <typename T>
Var<T> softmax_rows(Var<T> x) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x);
  check(X.rank() == 2, "softmax_rows: rank-2 only");
  const std::int64_t n = X.dim(0), m = X.dim(1);
  Tensor<T> out({n, m});
  for (std::int64_t i = 0; i < n; ++i) {
    T mx = X.at(i, 0);
    for (std::int64_t j = 1; j < m; ++j) mx = std::max(mx, X.at(i, j));
    T sum = 0;
    for (std::int64_t j = 0; j < m; ++j) {
      out.at(i, j) = std::exp(X.at(i, j) - mx);
      sum += out.at(i, j);
    }
    const T inv = T(1) / sum;
    for (std::int64_t j = 0; j < m; ++j) out.at(i, j) *= inv;
  }
  int ix = x.id;
  return tp.make(std::move(out), {ix}, [ix, n, m](Tape<T>& t, int self) {
    if (!t.requires_grad(ix)) return;
    const Tensor<T>& g = t.grad_buf(self);
    const Tensor<T>& y = t.node_value(self);
    Tensor<T>& gx = t.grad_buf(ix);
    for (std::int64_t i = 0; i < n; ++i) {
      T dot = 0;
      for (std::int64_t j = 0; j < m; ++j) dot += g.at(i, j) * y.at(i, j);
      for (std::int64_t j = 0; j < m; ++j) gx.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution (HWC layout, im2col + GEMM)
// ---------------------------------------------------------------------------

struct ConvSpec {
  int kh = 3, kw = 3;
  int stride = 1;
  int dilation = 1;
  int pad_y = 1, pad_x = 1;

  static ConvSpec same3x3(int dilation = 1) {
    ConvSpec s;
    s.kh = s.kw = 3;
    s.dilation = dilation;
    s.pad_y = s.pad_x = dilation;
    return s;
  }
  static ConvSpec k1x1() {
    ConvSpec s;
    s.kh = s.kw = 1;
    s.pad_y = s.pad_x = 0;
    return s;
  }
  static ConvSpec patchify(int patch) {
    ConvSpec s;
    s.kh = s.kw = patch;
    s.stride = patch;
    s.pad_y = s.pad_x = 0;
    return s;
  }
  static ConvSpec strided3x3(int stride) {
    ConvSpec s;
    s.kh = s.kw = 3;
    s.stride = stride;
    s.pad_y = s.pad_x = 1;
    return s;
  }
};

namespace detail {

template <typename T>
void im2col_hwc(const Tensor<T>& x, const ConvSpec& s, std::int64_t ho, std::int64_t wo, Tensor<T>& cols) {
  const std::int64_t h = x.dim(0), w = x.dim(1), ci = x.dim(2);
  const std::int64_t patch = static_cast<std::int64_t>(s.kh) * s.kw * ci;
  for (std::int64_t oy = 0; oy < ho; ++oy) {
    for (std::int64_t ox = 0; ox < wo; ++ox) {
      T* row = cols.data() + (oy * wo + ox) * patch;
      for (int ky = 0; ky < s.kh; ++ky) {
        const std::int64_t iy = oy * s.stride - s.pad_y + static_cast<std::int64_t>(ky) * s.dilation;
        for (int kx = 0; kx < s.kw; ++kx) {
          const std::int64_t ix = ox * s.stride - s.pad_x + static_cast<std::int64_t>(kx) * s.dilation;
          T* dst = row + (static_cast<std::int64_t>(ky) * s.kw + kx) * ci;
          if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
            std::fill(dst, dst + ci, T(0));
          } else {
            const T* src = x.data() + (iy * w + ix) * ci;
            std::copy(src, src + ci, dst);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_hwc(const Tensor<T>& cols, const ConvSpec& s, std::int64_t ho, std::int64_t wo, Tensor<T>& gx) {
  const std::int64_t h = gx.dim(0), w = gx.dim(1), ci = gx.dim(2);
  for (std::int64_t oy = 0; oy < ho; ++oy) {
    for (std::int64_t ox = 0; ox < wo; ++ox) {
      const T* row = cols.data() + (oy * wo + ox) * (static_cast<std::int64_t>(s.kh) * s.kw * ci);
      for (int ky = 0; ky < s.kh; ++ky) {
        const std::int64_t iy = oy * s.stride - s.pad_y + static_cast<std::int64_t>(ky) * s.dilation;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < s.kw; ++kx) {
          const std::int64_t ix = ox * s.stride - s.pad_x + static_cast<std::int64_t>(kx) * s.dilation;
          if (ix < 0 || ix >= w) continue;
          const T* src = row + (static_cast<std::int64_t>(ky) * s.kw + kx) * ci;
          T* dst = gx.data() + (iy * w + ix) * ci;
          for (std::int64_t c = 0; c < ci; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

}  // namespace detail

/// x: [H, W, Cin], weight: [kh*kw*Cin, Cout], bias: [Cout] -> [Ho, Wo, Cout].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, const ConvSpec& s) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x);
  const Tensor<T>& W = tp.value(weight);
  const Tensor<T>& B = tp.value(bias);
  check(X.rank() == 3, "conv2d: input must be HWC");
  const std::int64_t h = X.dim(0), w = X.dim(1), ci = X.dim(2);
  const std::int64_t patch = static_cast<std::int64_t>(s.kh) * s.kw * ci;
  check(W.rank() == 2 && W.dim(0) == patch, "conv2d: weight shape mismatch");
  const std::int64_t co = W.dim(1);
  check(B.rank() == 1 && B.dim(0) == co, "conv2d: bias shape mismatch");
  const std::int64_t ho = (h + 2 * s.pad_y - (static_cast<std::int64_t>(s.kh) - 1) * s.dilation - 1) / s.stride + 1;
  const std::int64_t wo = (w + 2 * s.pad_x - (static_cast<std::int64_t>(s.kw) - 1) * s.dilation - 1) / s.stride + 1;
  check(ho > 0 && wo > 0, "conv2d: empty output");

  auto cols = std::make_shared<Tensor<T>>(std::vector<std::int64_t>{ho * wo, patch});
  detail::im2col_hwc(X, s, ho, wo, *cols);
  Tensor<T> out({ho, wo, co});
  detail::EMap<T>(out.data(), ho * wo, co).noalias() =
      detail::ECMap<T>(cols->data(), ho * wo, patch) * detail::ECMap<T>(W.data(), patch, co);
  for (std::int64_t i = 0; i < ho * wo; ++i)
    for (std::int64_t c = 0; c < co; ++c) out[i * co + c] += B[c];

  int ix = x.id, iw = weight.id, ib = bias.id;
  return tp.make(std::move(out), {ix, iw, ib}, [ix, iw, ib, s, cols, h, w, ci, ho, wo, co, patch](Tape<T>& t, int self) {
    detail::ECMap<T> g(t.grad_buf(self).data(), ho * wo, co);
    if (t.requires_grad(iw)) {
      detail::EMap<T>(t.grad_buf(iw).data(), patch, co).noalias() +=
          detail::ECMap<T>(cols->data(), ho * wo, patch).transpose() * g;
    }
    if (t.requires_grad(ib)) {
      Tensor<T>& gb = t.grad_buf(ib);
      const Tensor<T>& go = t.grad_buf(self);
      for (std::int64_t i = 0; i < ho * wo; ++i)
        for (std::int64_t c = 0; c < co; ++c) gb[c] += go[i * co + c];
    }
    if (t.requires_grad(ix)) {
      Tensor<T> dcols({ho * wo, patch});
      detail::EMap<T>(dcols.data(), ho * wo, patch).noalias() =
          g * detail::ECMap<T>(t.node_value(iw).data(), patch, co).transpose();
      Tensor<T>& gx = t.grad_buf(ix);
      detail::col2im_hwc(dcols, s, ho, wo, gx);
    }
  });
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

/// Non-overlapping k x k average pooling of [H, W, C].
template <typename T>
Var<T> avgpool2d(Var<T> x, int k) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x);
  check(X.rank() == 3 && X.dim(0) % k == 0 && X.dim(1) % k == 0, "avgpool2d: size must divide");
  const std::int64_t ho = X.dim(0) / k, wo = X.dim(1) / k, c = X.dim(2);
  const T inv = T(1) / static_cast<T>(k * k);
  Tensor<T> out({ho, wo, c});
  for (std::int64_t oy = 0; oy < ho; ++oy)
    for (std::int64_t ox = 0; ox < wo; ++ox)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        T s = 0;
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx) s += X.at(oy * k + dy, ox * k + dx, ch);
        out.at(oy, ox, ch) = s * inv;
      }
  int ix = x.id;
  return tp.make(std::move(out), {ix}, [ix, k, ho, wo, c, inv](Tape<T>& t, int self) {
    if (!t.requires_grad(ix)) return;
    const Tensor<T>& g = t.grad_buf(self);
    Tensor<T>& gx = t.grad_buf(ix);
    for (std::int64_t oy = 0; oy < ho; ++oy)
      for (std::int64_t ox = 0; ox < wo; ++ox)
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T gv = g.at(oy, ox, ch) * inv;
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx) gx.at(oy * k + dy, ox * k + dx, ch) += gv;
        }
  });
}

namespace detail {
struct LinCoef {
  std::int64_t i0, i1;
  double w1;
};
inline std::vector<LinCoef> bilinear_axis(std::int64_t out_n, std::int64_t in_n, int factor) {
  std::vector<LinCoef> cs(static_cast<std::size_t>(out_n));
  for (std::int64_t o = 0; o < out_n; ++o) {
    double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
    double fl = std::floor(src);
    double w1 = src - fl;
    std::int64_t i0 = static_cast<std::int64_t>(fl);
    std::int64_t i1 = i0 + 1;
    if (i0 < 0) i0 = 0;
    if (i1 < 0) i1 = 0;
    if (i0 > in_n - 1) i0 = in_n - 1;
    if (i1 > in_n - 1) i1 = in_n - 1;
    cs[static_cast<std::size_t>(o)] = {i0, i1, w1};
  }
  return cs;
}
}  // namespace detail

/// Bilinear upsampling of [H, W, C] by an integer factor (half-pixel centers).
template <typename T>
Var<T> upsample_bilinear(Var<T> x, int factor) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x);
  check(X.rank() == 3 && factor >= 1, "upsample_bilinear: bad input");
  const std::int64_t h = X.dim(0), w = X.dim(1), c = X.dim(2);
  const std::int64_t ho = h * factor, wo = w * factor;
  auto ys = detail::bilinear_axis(ho, h, factor);
  auto xs = detail::bilinear_axis(wo, w, factor);
  Tensor<T> out({ho, wo, c});
  for (std::int64_t oy = 0; oy < ho; ++oy) {
    const auto& cy = ys[static_cast<std::size_t>(oy)];
    for (std::int64_t ox = 0; ox < wo; ++ox) {
      const auto& cx = xs[static_cast<std::size_t>(ox)];
      const T wy1 = static_cast<T>(cy.w1), wx1 = static_cast<T>(cx.w1);
      const T wy0 = T(1) - wy1, wx0 = T(1) - wx1;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        out.at(oy, ox, ch) = wy0 * wx0 * X.at(cy.i0, cx.i0, ch) + wy0 * wx1 * X.at(cy.i0, cx.i1, ch) +
                             wy1 * wx0 * X.at(cy.i1, cx.i0, ch) + wy1 * wx1 * X.at(cy.i1, cx.i1, ch);
      }
    }
  }
  int ix = x.id;
  return tp.make(std::move(out), {ix}, [ix, ys, xs, ho, wo, c](Tape<T>& t, int self) {
    if (!t.requires_grad(ix)) return;
    const Tensor<T>& g = t.grad_buf(self);
    Tensor<T>& gx = t.grad_buf(ix);
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      const auto& cy = ys[static_cast<std::size_t>(oy)];
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        const auto& cx = xs[static_cast<std::size_t>(ox)];
        const T wy1 = static_cast<T>(cy.w1), wx1 = static_cast<T>(cx.w1);
        const T wy0 = T(1) - wy1, wx0 = T(1) - wx1;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T gv = g.at(oy, ox, ch);
          gx.at(cy.i0, cx.i0, ch) += gv * wy0 * wx0;
          gx.at(cy.i0, cx.i1, ch) += gv * wy0 * wx1;
          gx.at(cy.i1, cx.i0, ch) += gv * wy1 * wx0;
          gx.at(cy.i1, cx.i1, ch) += gv * wy1 * wx1;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Losses and reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> mean_all(Var<T> x) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x);
  const std::int64_t n = X.numel();
  T s = 0;
  for (T v : X.v) s += v;
  Tensor<T> out({1});
  out[0] = s / static_cast<T>(n);
  int ix = x.id;
  return tp.make(std::move(out), {ix}, [ix, n](Tape<T>& t, int self) {
    if (!t.requires_grad(ix)) return;
    const T g = t.grad_buf(self)[0] / static_cast<T>(n);
    Tensor<T>& gx = t.grad_buf(ix);
    for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
  });
}

/// Mean binary cross-entropy with logits against a fixed 0/1 target tensor.
template <typename T>
Var<T> bce_with_logits_mean(Var<T> logits, const Tensor<T>& target) {
  Tape<T>& tp = *logits.tape;
  const Tensor<T>& Z = tp.value(logits);
  check(Z.numel() == target.numel(), "bce: target size mismatch");
  const std::int64_t n = Z.numel();
  double acc = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double z = static_cast<double>(Z[i]);
    const double t = static_cast<double>(target[i]);
    acc += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
  }
  Tensor<T> out({1});
  out[0] = static_cast<T>(acc / static_cast<double>(n));
  int iz = logits.id;
  auto tgt = std::make_shared<Tensor<T>>(target);
  return tp.make(std::move(out), {iz}, [iz, n, tgt](Tape<T>& t, int self) {
    if (!t.requires_grad(iz)) return;
    const T g = t.grad_buf(self)[0] / static_cast<T>(n);
    const Tensor<T>& Z = t.node_value(iz);
    Tensor<T>& gz = t.grad_buf(iz);
    for (std::int64_t i = 0; i < n; ++i) {
      const T p = T(1) / (T(1) + std::exp(-Z[i]));
      gz[i] += g * (p - (*tgt)[i]);
    }
  });
}

/// Mean softmax cross-entropy. logits: [N, K]; labels: [N] integer class ids.
template <typename T>
Var<T> softmax_xent_mean(Var<T> logits, const Tensor<std::int32_t>& labels) {
  Tape<T>& tp = *logits.tape;
  const Tensor<T>& Z = tp.value(logits);
  check(Z.rank() == 2 && Z.dim(0) == labels.numel(), "xent: label size mismatch");
  const std::int64_t n = Z.dim(0), k = Z.dim(1);
  auto probs = std::make_shared<Tensor<T>>(std::vector<std::int64_t>{n, k});
  double acc = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    T mx = Z.at(i, 0);
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, Z.at(i, j));
    double sum = 0;
    for (std::int64_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(Z.at(i, j) - mx));
    const double lse = std::log(sum) + static_cast<double>(mx);
    const std::int32_t y = labels[i];
    check(y >= 0 && y < k, "xent: label out of range");
    acc += lse - static_cast<double>(Z.at(i, y));
    for (std::int64_t j = 0; j < k; ++j)
      probs->at(i, j) = static_cast<T>(std::exp(static_cast<double>(Z.at(i, j)) - lse));
  }
  Tensor<T> out({1});
  out[0] = static_cast<T>(acc / static_cast<double>(n));
  int iz = logits.id;
  auto lab = std::make_shared<Tensor<std::int32_t>>(labels);
  return tp.make(std::move(out), {iz}, [iz, n, k, probs, lab](Tape<T>& t, int self) {
    if (!t.requires_grad(iz)) return;
    const T g = t.grad_buf(self)[0] / static_cast<T>(n);
    Tensor<T>& gz = t.grad_buf(iz);
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < k; ++j) gz.at(i, j) += g * probs->at(i, j);
      gz.at(i, (*lab)[i]) -= g;
    }
  });
}

}  // namespace unseg
