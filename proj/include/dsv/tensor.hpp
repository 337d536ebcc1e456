#pragma once

// Value-semantic f64 tensors with reverse-mode automatic differentiation.
//
// Every operation records a node whose backward rule is itself expressed in
// differentiable operations, so grad() with create_graph=true yields tensors
// that can be differentiated again (second and higher order).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dsv/error.hpp"
#include "dsv/rng.hpp"

namespace dsv {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

class Tensor;
struct TensorImpl;

struct OpNode {
  std::string name;
  std::vector<Tensor> inputs;
  // Maps the output gradient to per-input gradients, built from ops so the
  // result stays differentiable. Entries for inputs without requires_grad
  // may be default (null) tensors.
  std::function<std::vector<Tensor>(const std::vector<Tensor>&, const Tensor&)> vjp;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::shared_ptr<OpNode> producer;  // null for leaves and constants
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor scalar(double v) { return from_data({}, {v}); }

  static Tensor zeros(Shape s) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(shape_numel(s), 0.0);
    impl->shape = std::move(s);
    return Tensor(std::move(impl));
  }

  static Tensor full(Shape s, double v) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(shape_numel(s), v);
    impl->shape = std::move(s);
    return Tensor(std::move(impl));
  }

  static Tensor ones(Shape s) { return full(std::move(s), 1.0); }

  /// Creation from raw data; rejects NaN/Inf and element-count mismatches.
  static Tensor from_data(Shape s, std::vector<double> d) {
    if (shape_numel(s) != d.size())
      throw Error("shape-mismatch", "element count " + std::to_string(d.size()) +
                                        " does not match shape " + shape_str(s));
    for (double v : d)
      if (!std::isfinite(v)) throw Error("non-finite", "non-finite value in tensor data");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(s);
    impl->data = std::move(d);
    return Tensor(std::move(impl));
  }

  static Tensor randn(Shape s, Rng& rng, double mean = 0.0, double stddev = 1.0) {
    std::vector<double> d(shape_numel(s));
    for (double& v : d) v = mean + stddev * rng.normal();
    return from_data(std::move(s), std::move(d));
  }

  /// A differentiable leaf with this tensor's values.
  Tensor with_grad() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = shape();
    impl->data = data();
    impl->requires_grad = true;
    return Tensor(std::move(impl));
  }

  /// Same values, detached from any graph.
  Tensor detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = shape();
    impl->data = data();
    return Tensor(std::move(impl));
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  bool requires_grad() const { return impl_->requires_grad; }
  const std::vector<double>& data() const { return impl_->data; }

  double item() const {
    if (numel() != 1) throw Error("shape-mismatch", "item() on tensor with " + std::to_string(numel()) + " elements");
    return impl_->data[0];
  }

  double at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw Error("shape-mismatch", "index rank mismatch in at()");
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      if (i >= impl_->shape[axis]) throw Error("shape-mismatch", "index out of range in at()");
      flat = flat * impl_->shape[axis] + i;
      ++axis;
    }
    return impl_->data[flat];
  }

  TensorImpl* impl() const { return impl_.get(); }

  // Used by op constructors only; tensors are immutable once published.
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

namespace detail {

using Vjp = std::function<std::vector<Tensor>(const std::vector<Tensor>&, const Tensor&)>;

inline Tensor make_op(const std::string& name, Shape shape, std::vector<double> data,
                      std::vector<Tensor> inputs, Vjp vjp) {
  if (shape_numel(shape) != data.size())
    throw Error("shape-mismatch", "internal: bad op output size in " + name);
  for (double v : data)
    if (!std::isfinite(v)) throw Error("non-finite", "non-finite result in op '" + name + "'");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool rg = false;
  for (const auto& t : inputs) rg = rg || t.requires_grad();
  impl->requires_grad = rg;
  if (rg) {
    auto node = std::make_shared<OpNode>();
    node->name = name;
    node->inputs = std::move(inputs);
    node->vjp = std::move(vjp);
    impl->producer = std::move(node);
  }
  return Tensor(std::move(impl));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw Error("shape-mismatch", std::string(op) + ": shapes " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic (same shape, or scalar broadcast when one side has a
// single element — the only broadcast this library performs)

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor reshape(const Tensor& a, Shape s);
Tensor sum(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor recip(const Tensor& a);
Tensor sqrt(const Tensor& a);

namespace detail {

enum class Ew { add, sub, mul };

inline Tensor ewise(Ew which, const Tensor& a, const Tensor& b, const std::string& name) {
  const bool a_scalar = a.numel() == 1;
  const bool b_scalar = b.numel() == 1;
  const bool same = a.shape() == b.shape();
  if (!same && !a_scalar && !b_scalar)
    throw Error("shape-mismatch", name + ": shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));

  // broadcast the single-element side; when both have one element, keep a's shape
  const Shape out_shape = same ? a.shape() : (b_scalar ? a.shape() : b.shape());
  const std::size_t n = shape_numel(out_shape);
  std::vector<double> out(n);
  const auto& da = a.data();
  const auto& db = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    double x, y;
    if (same) {
      x = da[i];
      y = db[i];
    } else if (b_scalar) {
      x = da[i];
      y = db[0];
    } else {
      x = da[0];
      y = db[i];
    }
    switch (which) {
      case Ew::add: out[i] = x + y; break;
      case Ew::sub: out[i] = x - y; break;
      case Ew::mul: out[i] = x * y; break;
    }
  }

  // reduce a full-shape gradient back to a broadcast scalar operand
  auto to_operand = [](const Tensor& g, const Tensor& operand) {
    if (g.shape() == operand.shape()) return g;
    return reshape(sum(g), operand.shape());
  };

  Vjp vjp;
  switch (which) {
    case Ew::add:
      vjp = [to_operand](const std::vector<Tensor>& in, const Tensor& g) {
        return std::vector<Tensor>{to_operand(g, in[0]), to_operand(g, in[1])};
      };
      break;
    case Ew::sub:
      vjp = [to_operand](const std::vector<Tensor>& in, const Tensor& g) {
        return std::vector<Tensor>{to_operand(g, in[0]),
                                   to_operand(mul(g, Tensor::scalar(-1.0)), in[1])};
      };
      break;
    case Ew::mul:
      vjp = [to_operand](const std::vector<Tensor>& in, const Tensor& g) {
        return std::vector<Tensor>{to_operand(mul(g, in[1]), in[0]),
                                   to_operand(mul(g, in[0]), in[1])};
      };
      break;
  }
  return make_op(name, out_shape, std::move(out), {a, b}, std::move(vjp));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::ewise(detail::Ew::add, a, b, "add"); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::ewise(detail::Ew::sub, a, b, "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::ewise(detail::Ew::mul, a, b, "mul"); }

inline Tensor add(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor sub(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor mul(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor neg(const Tensor& a) { return mul(a, -1.0); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, s); }

// ---------------------------------------------------------------------------
// shape ops

inline Tensor reshape(const Tensor& a, Shape s) {
  if (shape_numel(s) != a.numel())
    throw Error("shape-mismatch", "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(s));
  Shape saved = a.shape();
  return detail::make_op("reshape", std::move(s), a.data(), {a},
                         [saved](const std::vector<Tensor>&, const Tensor& g) {
                           return std::vector<Tensor>{reshape(g, saved)};
                         });
}

/// Stack equally-shaped tensors along a new leading axis.
inline Tensor slice0(const Tensor& a, std::size_t i);
inline Tensor embed0(const Tensor& a, std::size_t i, std::size_t n);

inline Tensor stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw Error("shape-mismatch", "stack: empty input list");
  const Shape& inner = parts[0].shape();
  for (const auto& p : parts) detail::check_same_shape(parts[0], p, "stack");
  Shape out_shape;
  out_shape.push_back(parts.size());
  out_shape.insert(out_shape.end(), inner.begin(), inner.end());
  std::vector<double> out;
  out.reserve(shape_numel(out_shape));
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::make_op("stack", std::move(out_shape), std::move(out), parts,
                         [](const std::vector<Tensor>& in, const Tensor& g) {
                           std::vector<Tensor> parts_g;
                           parts_g.reserve(in.size());
                           for (std::size_t i = 0; i < in.size(); ++i) parts_g.push_back(slice0(g, i));
                           return parts_g;
                         });
}

inline Tensor slice0(const Tensor& a, std::size_t i) {
  if (a.rank() == 0 || i >= a.shape()[0]) throw Error("shape-mismatch", "slice0: index out of range");
  Shape inner(a.shape().begin() + 1, a.shape().end());
  const std::size_t chunk = shape_numel(inner);
  std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(i * chunk),
                          a.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * chunk));
  const std::size_t n = a.shape()[0];
  return detail::make_op("slice0", std::move(inner), std::move(out), {a},
                         [i, n](const std::vector<Tensor>&, const Tensor& g) {
                           return std::vector<Tensor>{embed0(g, i, n)};
                         });
}

inline Tensor embed0(const Tensor& a, std::size_t i, std::size_t n) {
  if (i >= n) throw Error("shape-mismatch", "embed0: index out of range");
  Shape out_shape;
  out_shape.push_back(n);
  out_shape.insert(out_shape.end(), a.shape().begin(), a.shape().end());
  std::vector<double> out(shape_numel(out_shape), 0.0);
  std::copy(a.data().begin(), a.data().end(), out.begin() + static_cast<std::ptrdiff_t>(i * a.numel()));
  return detail::make_op("embed0", std::move(out_shape), std::move(out), {a},
                         [i](const std::vector<Tensor>&, const Tensor& g) {
                           return std::vector<Tensor>{slice0(g, i)};
                         });
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  Shape saved = a.shape();
  return detail::make_op("sum", {}, {acc}, {a},
                         [saved](const std::vector<Tensor>&, const Tensor& g) {
                           return std::vector<Tensor>{mul(Tensor::ones(saved), g)};
                         });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw Error("shape-mismatch", "mean of empty tensor");
  return mul(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// ---------------------------------------------------------------------------
// pointwise nonlinearities

namespace detail {

/// Elementwise multiply by a constant 0/1-style mask derived from the input's
/// forward values; the mask is held fixed in the backward pass.
inline Tensor mask_mul(const Tensor& a, std::vector<double> mask, const std::string& name) {
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto& da = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = da[i] * mask[i];
  auto mask_t = Tensor::from_data(a.shape(), std::move(mask));
  return make_op(name, a.shape(), std::move(out), {a},
                 [mask_t](const std::vector<Tensor>&, const Tensor& g) {
                   return std::vector<Tensor>{mul(g, mask_t)};
                 });
}

}  // namespace detail

/// relu with subgradient 0 at the origin (mask uses strict x > 0).
inline Tensor relu(const Tensor& a) {
  std::vector<double> mask(a.numel());
  for (std::size_t i = 0; i < a.numel(); ++i) mask[i] = a.data()[i] > 0.0 ? 1.0 : 0.0;
  return detail::mask_mul(a, std::move(mask), "relu");
}

/// sum of |x| with subgradient 0 at zero entries (sign mask is 0 there).
inline Tensor l1_norm(const Tensor& a) {
  std::vector<double> sign(a.numel());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double v = a.data()[i];
    sign[i] = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
  }
  return sum(detail::mask_mul(a, std::move(sign), "l1_norm"));
}

inline Tensor l2_norm_sq(const Tensor& a) { return sum(mul(a, a)); }

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = std::exp(a.data()[i]);
  return detail::make_op("exp", a.shape(), std::move(out), {a},
                         [](const std::vector<Tensor>& in, const Tensor& g) {
                           return std::vector<Tensor>{mul(g, exp(in[0]))};
                         });
}

inline Tensor log(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = std::log(a.data()[i]);
  return detail::make_op("log", a.shape(), std::move(out), {a},
                         [](const std::vector<Tensor>& in, const Tensor& g) {
                           return std::vector<Tensor>{mul(g, recip(in[0]))};
                         });
}

inline Tensor recip(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = 1.0 / a.data()[i];
  return detail::make_op("recip", a.shape(), std::move(out), {a},
                         [](const std::vector<Tensor>& in, const Tensor& g) {
                           Tensor r = recip(in[0]);
                           return std::vector<Tensor>{neg(mul(g, mul(r, r)))};
                         });
}

inline Tensor sqrt(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = std::sqrt(a.data()[i]);
  return detail::make_op("sqrt", a.shape(), std::move(out), {a},
                         [](const std::vector<Tensor>& in, const Tensor& g) {
                           return std::vector<Tensor>{mul(g, mul(recip(sqrt(in[0])), 0.5))};
                         });
}

/// Clamp to [0, 1]. Gradient passes through inside the box (inclusive) and is
/// zero outside it.
inline Tensor clip01(const Tensor& a) {
  const std::size_t n = a.numel();
  std::vector<double> in_mask(n), high(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = a.data()[i];
    in_mask[i] = (v >= 0.0 && v <= 1.0) ? 1.0 : 0.0;
    if (v > 1.0) high[i] = 1.0;
  }
  return add(detail::mask_mul(a, std::move(in_mask), "clip01"), Tensor::from_data(a.shape(), std::move(high)));
}

/// sign(x)*sqrt(|x|), smoothed as x / sqrt(|x| + eps) so the derivative stays
/// finite at 0. eps = 1e-12 keeps the value within ~5e-13 of the exact form
/// for |x| >= 1e-6.
inline Tensor signed_sqrt(const Tensor& a) {
  constexpr double eps = 1e-12;
  std::vector<double> sign(a.numel());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double v = a.data()[i];
    sign[i] = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
  }
  Tensor abs_a = detail::mask_mul(a, std::move(sign), "abs");
  return mul(a, recip(sqrt(add(abs_a, eps))));
}

// ---------------------------------------------------------------------------
// matmul and transpose

inline Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) throw Error("shape-mismatch", "transpose2d expects a rank-2 tensor");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  const auto& da = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = da[i * n + j];
  return detail::make_op("transpose2d", {n, m}, std::move(out), {a},
                         [](const std::vector<Tensor>&, const Tensor& g) {
                           return std::vector<Tensor>{transpose2d(g)};
                         });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw Error("shape-mismatch", "matmul expects rank-2 tensors");
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw Error("shape-mismatch", "matmul: inner dimensions " + std::to_string(k) + " vs " + std::to_string(k2));
  std::vector<double> out(m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = pa + i * k;
    double* orow = po + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      const double* brow = pb + kk * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return detail::make_op("matmul", {m, n}, std::move(out), {a, b},
                         [](const std::vector<Tensor>& in, const Tensor& g) {
                           return std::vector<Tensor>{matmul(g, transpose2d(in[1])),
                                                      matmul(transpose2d(in[0]), g)};
                         });
}

// ---------------------------------------------------------------------------
// sparse linear maps: one entry list serves the forward map and (with roles
// swapped) its transpose, which is exactly the backward rule.

struct LinPattern {
  std::string key;
  Shape in_shape, out_shape;
  struct Entry {
    std::uint32_t out, in;
    double w;
  };
  std::vector<Entry> entries;
};

namespace detail {

inline Tensor linear_map(const Tensor& a, std::shared_ptr<const LinPattern> p, bool transposed,
                         const std::string& name) {
  const Shape& want_in = transposed ? p->out_shape : p->in_shape;
  const Shape& want_out = transposed ? p->in_shape : p->out_shape;
  if (a.shape() != want_in)
    throw Error("shape-mismatch", name + ": input " + shape_str(a.shape()) + " expected " + shape_str(want_in));
  std::vector<double> out(shape_numel(want_out), 0.0);
  const auto& da = a.data();
  if (transposed) {
    for (const auto& e : p->entries) out[e.in] += e.w * da[e.out];
  } else {
    for (const auto& e : p->entries) out[e.out] += e.w * da[e.in];
  }
  return make_op(name, want_out, std::move(out), {a},
                 [p, transposed, name](const std::vector<Tensor>&, const Tensor& g) {
                   return std::vector<Tensor>{linear_map(g, p, !transposed, name)};
                 });
}

/// Process-wide cache for geometry-keyed patterns (im2col, resize, ...).
inline std::shared_ptr<const LinPattern> pattern_cache(
    const std::string& key, const std::function<LinPattern()>& build) {
  static std::mutex mu;
  static std::unordered_map<std::string, std::shared_ptr<const LinPattern>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto p = std::make_shared<LinPattern>(build());
  p->key = key;
  cache.emplace(key, p);
  return p;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// row-wise helpers for (B, C) matrices

inline Tensor row_sum(const Tensor& a) {
  if (a.rank() != 2) throw Error("shape-mismatch", "row_sum expects a rank-2 tensor");
  const std::size_t b = a.shape()[0], c = a.shape()[1];
  auto p = detail::pattern_cache("rowsum:" + std::to_string(b) + ":" + std::to_string(c), [&] {
    LinPattern pat;
    pat.in_shape = {b, c};
    pat.out_shape = {b};
    pat.entries.reserve(b * c);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < c; ++j)
        pat.entries.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i * c + j), 1.0});
    return pat;
  });
  return detail::linear_map(a, p, false, "row_sum");
}

/// (B,) -> (B, cols), copying each row value across the row.
inline Tensor row_broadcast(const Tensor& v, std::size_t cols) {
  if (v.rank() != 1) throw Error("shape-mismatch", "row_broadcast expects a rank-1 tensor");
  const std::size_t b = v.shape()[0];
  auto p = detail::pattern_cache("rowsum:" + std::to_string(b) + ":" + std::to_string(cols), [&] {
    LinPattern pat;
    pat.in_shape = {b, cols};
    pat.out_shape = {b};
    pat.entries.reserve(b * cols);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < cols; ++j)
        pat.entries.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i * cols + j), 1.0});
    return pat;
  });
  return detail::linear_map(v, p, true, "row_broadcast");
}

/// Select one column per row: (B, C) with labels (B) -> (B,).
inline Tensor pick_rows(const Tensor& a, const std::vector<int>& labels) {
  if (a.rank() != 2) throw Error("shape-mismatch", "pick_rows expects a rank-2 tensor");
  const std::size_t b = a.shape()[0], c = a.shape()[1];
  if (labels.size() != b) throw Error("shape-mismatch", "pick_rows: label count mismatch");
  auto pat = std::make_shared<LinPattern>();
  pat->in_shape = {b, c};
  pat->out_shape = {b};
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
      throw Error("shape-mismatch", "pick_rows: label out of range");
    pat->entries.push_back({static_cast<std::uint32_t>(i),
                            static_cast<std::uint32_t>(i * c + static_cast<std::size_t>(labels[i])), 1.0});
  }
  return detail::linear_map(a, pat, false, "pick_rows");
}

// ---------------------------------------------------------------------------
// softmax family (numerically stabilized with a constant max shift)

inline Tensor log_sum_exp(const Tensor& a) {
  if (a.numel() == 0) throw Error("shape-mismatch", "log_sum_exp of empty tensor");
  double m = a.data()[0];
  for (double v : a.data()) m = std::max(m, v);
  Tensor shifted = sub(reshape(a, {a.numel()}), m);
  return add(log(sum(exp(shifted))), m);
}

/// Row-wise log-sum-exp: (B, C) -> (B,).
inline Tensor lse_rows(const Tensor& a) {
  if (a.rank() != 2) throw Error("shape-mismatch", "lse_rows expects a rank-2 tensor");
  const std::size_t b = a.shape()[0], c = a.shape()[1];
  std::vector<double> m(b);
  for (std::size_t i = 0; i < b; ++i) {
    double mi = a.data()[i * c];
    for (std::size_t j = 1; j < c; ++j) mi = std::max(mi, a.data()[i * c + j]);
    m[i] = mi;
  }
  Tensor m_rows = Tensor::from_data({b}, m);
  Tensor shifted = sub(a, row_broadcast(m_rows, c));
  return add(log(row_sum(exp(shifted))), m_rows);
}

/// softmax over the last axis of a vector or a (B, C) matrix.
inline Tensor softmax(const Tensor& a) {
  if (a.rank() == 1) {
    return exp(sub(a, log_sum_exp(a)));
  }
  if (a.rank() == 2) {
    return exp(sub(a, row_broadcast(lse_rows(a), a.shape()[1])));
  }
  throw Error("shape-mismatch", "softmax expects rank 1 or 2");
}

/// Per-row cross entropy from logits: (B, C) + labels -> (B,).
inline Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& labels) {
  return sub(lse_rows(logits), pick_rows(logits, labels));
}

// ---------------------------------------------------------------------------
// image ops: conv2d (stride 1, zero pad, odd square kernels), maxpool 2x2,
// bilinear resize, horizontal flip, integer shift with zero fill

namespace detail {

inline std::shared_ptr<const LinPattern> im2col_pattern(std::size_t B, std::size_t C, std::size_t H,
                                                        std::size_t W, std::size_t k) {
  const std::string key = "im2col:" + std::to_string(B) + ":" + std::to_string(C) + ":" +
                          std::to_string(H) + ":" + std::to_string(W) + ":" + std::to_string(k);
  return pattern_cache(key, [&] {
    LinPattern pat;
    pat.in_shape = {B, C, H, W};
    pat.out_shape = {B * H * W, C * k * k};
    const std::size_t pad = (k - 1) / 2;
    const std::size_t cols = C * k * k;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const std::size_t row = (b * H + h) * W + w;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < k; ++i)
              for (std::size_t j = 0; j < k; ++j) {
                const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(h + i) - static_cast<std::ptrdiff_t>(pad);
                const std::ptrdiff_t sw = static_cast<std::ptrdiff_t>(w + j) - static_cast<std::ptrdiff_t>(pad);
                if (sh < 0 || sw < 0 || sh >= static_cast<std::ptrdiff_t>(H) || sw >= static_cast<std::ptrdiff_t>(W))
                  continue;  // zero padding: no entry
                const std::size_t in_idx = ((b * C + c) * H + static_cast<std::size_t>(sh)) * W +
                                           static_cast<std::size_t>(sw);
                const std::size_t out_idx = row * cols + (c * k + i) * k + j;
                pat.entries.push_back({static_cast<std::uint32_t>(out_idx),
                                       static_cast<std::uint32_t>(in_idx), 1.0});
              }
        }
    return pat;
  });
}

// (B*H*W, F) row-major by (b,h,w) -> (B, F, H, W)
inline std::shared_ptr<const LinPattern> bhwf_to_bfhw_pattern(std::size_t B, std::size_t F,
                                                              std::size_t H, std::size_t W) {
  const std::string key = "bhwf:" + std::to_string(B) + ":" + std::to_string(F) + ":" +
                          std::to_string(H) + ":" + std::to_string(W);
  return pattern_cache(key, [&] {
    LinPattern pat;
    pat.in_shape = {B * H * W, F};
    pat.out_shape = {B, F, H, W};
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w)
          for (std::size_t f = 0; f < F; ++f) {
            const std::size_t in_idx = ((b * H + h) * W + w) * F + f;
            const std::size_t out_idx = ((b * F + f) * H + h) * W + w;
            pat.entries.push_back({static_cast<std::uint32_t>(out_idx), static_cast<std::uint32_t>(in_idx), 1.0});
          }
    return pat;
  });
}

}  // namespace detail

/// 2-D convolution, stride 1, zero padding that preserves H and W.
/// x: (B, Cin, H, W), kernel: (F, Cin, k, k) with odd k, bias: (F).
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  if (x.rank() != 4) throw Error("shape-mismatch", "conv2d input must be (B, C, H, W)");
  if (kernel.rank() != 4) throw Error("shape-mismatch", "conv2d kernel must be (F, C, k, k)");
  const std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::size_t F = kernel.shape()[0], kc = kernel.shape()[1], kh = kernel.shape()[2], kw = kernel.shape()[3];
  if (kc != C) throw Error("shape-mismatch", "conv2d: kernel channels do not match input");
  if (kh != kw || kh % 2 == 0) throw Error("shape-mismatch", "conv2d: kernel must be odd and square");
  if (bias.shape() != Shape{F}) throw Error("shape-mismatch", "conv2d: bias must be (F)");

  Tensor patches = detail::linear_map(x, detail::im2col_pattern(B, C, H, W, kh), false, "conv2d.im2col");
  Tensor km = reshape(kernel, {F, C * kh * kw});
  Tensor out2 = matmul(patches, transpose2d(km));                      // (B*H*W, F)
  Tensor biased = add(out2, matmul(Tensor::ones({B * H * W, 1}), reshape(bias, {1, F})));
  return detail::linear_map(biased, detail::bhwf_to_bfhw_pattern(B, F, H, W), false, "conv2d.layout");
}

/// 2x2 max pooling with stride 2. Ties select the first maximal element in
/// window scan order, so the subgradient is deterministic.
inline Tensor maxpool2x2(const Tensor& x) {
  if (x.rank() != 4) throw Error("shape-mismatch", "maxpool2x2 input must be (B, C, H, W)");
  const std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (H % 2 != 0 || W % 2 != 0) throw Error("shape-mismatch", "maxpool2x2 needs even H and W");
  auto pat = std::make_shared<LinPattern>();
  pat->in_shape = {B, C, H, W};
  pat->out_shape = {B, C, H / 2, W / 2};
  const auto& d = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h + 1 < H; h += 2)
        for (std::size_t w = 0; w + 1 < W; w += 2) {
          std::size_t best = ((b * C + c) * H + h) * W + w;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t idx = ((b * C + c) * H + h + static_cast<std::size_t>(dy)) * W + w +
                                      static_cast<std::size_t>(dx);
              if (d[idx] > d[best]) best = idx;
            }
          const std::size_t out_idx = ((b * C + c) * (H / 2) + h / 2) * (W / 2) + w / 2;
          pat->entries.push_back({static_cast<std::uint32_t>(out_idx), static_cast<std::uint32_t>(best), 1.0});
        }
  return detail::linear_map(x, pat, false, "maxpool2x2");
}

/// Bilinear resize of (B, C, H, W) to (B, C, H2, W2); half-pixel centers.
inline Tensor bilinear_resize(const Tensor& x, std::size_t H2, std::size_t W2) {
  if (x.rank() != 4) throw Error("shape-mismatch", "bilinear_resize input must be (B, C, H, W)");
  const std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::string key = "resize:" + std::to_string(B) + ":" + std::to_string(C) + ":" + std::to_string(H) +
                          ":" + std::to_string(W) + ">" + std::to_string(H2) + ":" + std::to_string(W2);
  auto p = detail::pattern_cache(key, [&] {
    LinPattern pat;
    pat.in_shape = {B, C, H, W};
    pat.out_shape = {B, C, H2, W2};
    const double sy = static_cast<double>(H) / static_cast<double>(H2);
    const double sx = static_cast<double>(W) / static_cast<double>(W2);
    for (std::size_t oy = 0; oy < H2; ++oy)
      for (std::size_t ox = 0; ox < W2; ++ox) {
        double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
        double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(H - 1));
        fx = std::min(std::max(fx, 0.0), static_cast<double>(W - 1));
        const std::size_t y0 = static_cast<std::size_t>(fy);
        const std::size_t x0 = static_cast<std::size_t>(fx);
        const std::size_t y1 = std::min(y0 + 1, H - 1);
        const std::size_t x1 = std::min(x0 + 1, W - 1);
        const double wy = fy - static_cast<double>(y0);
        const double wx = fx - static_cast<double>(x0);
        const double w00 = (1 - wy) * (1 - wx), w01 = (1 - wy) * wx, w10 = wy * (1 - wx), w11 = wy * wx;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base_in = (b * C + c) * H * W;
            const std::size_t out_idx = ((b * C + c) * H2 + oy) * W2 + ox;
            auto push = [&](std::size_t yy, std::size_t xx, double w) {
              if (w == 0.0) return;
              pat.entries.push_back({static_cast<std::uint32_t>(out_idx),
                                     static_cast<std::uint32_t>(base_in + yy * W + xx), w});
            };
            push(y0, x0, w00);
            if (x1 != x0) push(y0, x1, w01);
            if (y1 != y0) push(y1, x0, w10);
            if (y1 != y0 && x1 != x0) push(y1, x1, w11);
          }
      }
    return pat;
  });
  return detail::linear_map(x, p, false, "bilinear_resize");
}

/// Flip the last (width) axis of (B, C, H, W).
inline Tensor hflip(const Tensor& x) {
  if (x.rank() != 4) throw Error("shape-mismatch", "hflip input must be (B, C, H, W)");
  const std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::string key = "hflip:" + std::to_string(B) + ":" + std::to_string(C) + ":" + std::to_string(H) +
                          ":" + std::to_string(W);
  auto p = detail::pattern_cache(key, [&] {
    LinPattern pat;
    pat.in_shape = {B, C, H, W};
    pat.out_shape = {B, C, H, W};
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t w = 0; w < W; ++w) {
            const std::size_t base = (b * C + c) * H * W + h * W;
            pat.entries.push_back({static_cast<std::uint32_t>(base + w),
                                   static_cast<std::uint32_t>(base + (W - 1 - w)), 1.0});
          }
    return pat;
  });
  return detail::linear_map(x, p, false, "hflip");
}

/// Shift image content by (dy, dx) pixels, filling vacated pixels with zero.
/// Equivalent to zero-padding then cropping at a fixed offset.
inline Tensor shift2d(const Tensor& x, int dy, int dx) {
  if (x.rank() != 4) throw Error("shape-mismatch", "shift2d input must be (B, C, H, W)");
  const std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::string key = "shift:" + std::to_string(B) + ":" + std::to_string(C) + ":" + std::to_string(H) +
                          ":" + std::to_string(W) + ":" + std::to_string(dy) + ":" + std::to_string(dx);
  auto p = detail::pattern_cache(key, [&] {
    LinPattern pat;
    pat.in_shape = {B, C, H, W};
    pat.out_shape = {B, C, H, W};
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t w = 0; w < W; ++w) {
            const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(h) - dy;
            const std::ptrdiff_t sw = static_cast<std::ptrdiff_t>(w) - dx;
            if (sh < 0 || sw < 0 || sh >= static_cast<std::ptrdiff_t>(H) || sw >= static_cast<std::ptrdiff_t>(W))
              continue;
            const std::size_t base = (b * C + c) * H * W;
            pat.entries.push_back(
                {static_cast<std::uint32_t>(base + h * W + w),
                 static_cast<std::uint32_t>(base + static_cast<std::size_t>(sh) * W + static_cast<std::size_t>(sw)),
                 1.0});
          }
    return pat;
  });
  return detail::linear_map(x, p, false, "shift2d");
}

// ---------------------------------------------------------------------------
// reverse-mode gradient

/// Gradients of a scalar w.r.t. each leaf. With create_graph the results are
/// themselves differentiable (they are built from ops on the saved inputs).
/// A leaf outside the output's graph is an error unless allow_unused, which
/// yields a zero gradient for it instead.
inline std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& leaves,
                                bool create_graph = false, bool allow_unused = false) {
  if (output.numel() != 1)
    throw Error("non-scalar-output", "grad requires a scalar output, got shape " + shape_str(output.shape()));

  // topological order over impls reachable through grad-requiring edges
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  struct Frame {
    TensorImpl* impl;
    std::size_t next_child;
  };
  std::vector<Frame> stack;
  if (output.requires_grad()) {
    stack.push_back({output.impl(), 0});
    seen.insert(output.impl());
  }
  while (!stack.empty()) {
    TensorImpl* cur = stack.back().impl;
    OpNode* node = cur->producer.get();
    const std::size_t n_children = node ? node->inputs.size() : 0;
    bool descended = false;
    while (stack.back().next_child < n_children) {
      const Tensor& child = node->inputs[stack.back().next_child++];
      if (!child.requires_grad()) continue;
      if (seen.insert(child.impl()).second) {
        stack.push_back({child.impl(), 0});
        descended = true;
        break;
      }
    }
    if (!descended) {
      order.push_back(cur);
      stack.pop_back();
    }
  }
  // post-order: children first; reverse gives a consumer-before-producer order
  std::reverse(order.begin(), order.end());

  std::unordered_map<TensorImpl*, Tensor> grads;
  if (output.requires_grad()) grads.emplace(output.impl(), Tensor::ones(output.shape()));

  for (TensorImpl* impl : order) {
    auto it = grads.find(impl);
    if (it == grads.end()) continue;
    OpNode* node = impl->producer.get();
    if (!node) continue;  // leaf
    std::vector<Tensor> parts = node->vjp(node->inputs, it->second);
    if (parts.size() != node->inputs.size())
      throw Error("internal", "vjp arity mismatch in op '" + node->name + "'");
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const Tensor& input = node->inputs[i];
      if (!input.requires_grad()) continue;
      if (!parts[i].defined())
        throw Error("internal", "missing vjp part in op '" + node->name + "'");
      if (parts[i].shape() != input.shape())
        throw Error("internal", "vjp shape mismatch in op '" + node->name + "'");
      auto slot = grads.find(input.impl());
      if (slot == grads.end())
        grads.emplace(input.impl(), parts[i]);
      else
        slot->second = add(slot->second, parts[i]);
    }
  }

  std::vector<Tensor> result;
  result.reserve(leaves.size());
  for (const Tensor& leaf : leaves) {
    auto it = grads.find(leaf.impl());
    if (!leaf.requires_grad() || it == grads.end()) {
      if (allow_unused) {
        result.push_back(Tensor::zeros(leaf.shape()));
        continue;
      }
      throw Error("leaf-not-in-graph", "requested leaf is not part of the output's graph");
    }
    result.push_back(create_graph ? it->second : it->second.detach());
  }
  return result;
}

}  // namespace dsv
