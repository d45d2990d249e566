#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualrd/tensor.hpp"

namespace dualrd {

namespace detail {

template <typename T>
inline bool want_grad(std::initializer_list<const Tensor<T>*> ins) {
  if (!Tape<T>::active().recording()) return false;
  for (const Tensor<T>* p : ins)
    if (p->requires_grad()) return true;
  return false;
}

template <typename T>
inline void mark_output(Tensor<T>& out) {
  out.node().requires_grad = true;
  out.node().grad.assign(out.node().data.size(), T(0));
}

template <typename T>
inline void record(Tensor<T>& out, std::initializer_list<const Tensor<T>*> ins,
                   std::function<void()> fn) {
  std::vector<int64_t> ids;
  for (const Tensor<T>* p : ins) ids.push_back(p->node_id());
  Tape<T>::active().record(out.node_ptr(), std::move(ids), std::move(fn));
}

// Strides of `in` aligned to the (broadcast) output shape; 0 on expanded dims.
inline Shape eff_strides(const Shape& in, const Shape& out) {
  Shape st = row_major_strides(in);
  Shape e(out.size(), 0);
  size_t off = out.size() - in.size();
  for (size_t k = 0; k < in.size(); ++k)
    e[off + k] = (in[k] == 1 && out[off + k] != 1) ? 0 : st[k];
  return e;
}

// Calls f(out_linear, a_offset, b_offset) over every output position.
template <typename F>
inline void bcast_iterate(const Shape& ash, const Shape& bsh, const Shape& osh,
                          F&& f) {
  int64_t n = numel(osh);
  Shape ea = eff_strides(ash, osh), eb = eff_strides(bsh, osh);
  std::vector<int64_t> idx(osh.size(), 0);
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (int k = int(osh.size()) - 1; k >= 0; --k) {
      ++idx[size_t(k)];
      oa += ea[size_t(k)];
      ob += eb[size_t(k)];
      if (idx[size_t(k)] < osh[size_t(k)]) break;
      oa -= ea[size_t(k)] * osh[size_t(k)];
      ob -= eb[size_t(k)] * osh[size_t(k)];
      idx[size_t(k)] = 0;
    }
  }
}

}  // namespace detail

inline Shape broadcast_shape(const Shape& a, const Shape& b,
                             const char* opname) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t k = 0; k < r; ++k) {
    int64_t da = k < r - a.size() ? 1 : a[k - (r - a.size())];
    int64_t db = k < r - b.size() ? 1 : b[k - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument(std::string(opname) + ": shapes " +
                                  shape_str(a) + " and " + shape_str(b) +
                                  " are not broadcastable");
    out[k] = std::max(da, db);
  }
  return out;
}

inline int normalize_axis(int axis, int64_t ndim, const char* opname) {
  int a = axis < 0 ? axis + int(ndim) : axis;
  if (a < 0 || a >= int(ndim))
    throw std::invalid_argument(std::string(opname) + ": axis " +
                                std::to_string(axis) + " out of range for rank " +
                                std::to_string(ndim));
  return a;
}

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

namespace detail {

// FwdF(a,b) -> out; GradA/GradB(g,a,b) -> contribution to that input.
template <typename T, typename FwdF, typename GradA, typename GradB>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b,
                    FwdF f, GradA ga, GradB gb) {
  Shape osh = broadcast_shape(a.shape(), b.shape(), name);
  Tensor<T> out(osh);
  const T* ad = a.data();
  const T* bd = b.data();
  T* od = out.data();
  if (a.shape() == osh && b.shape() == osh) {
    int64_t n = out.size();
    for (int64_t i = 0; i < n; ++i) od[i] = f(ad[i], bd[i]);
  } else {
    bcast_iterate(a.shape(), b.shape(), osh,
                  [&](int64_t i, int64_t oa, int64_t ob) {
                    od[i] = f(ad[oa], bd[ob]);
                  });
  }
  if (want_grad<T>({&a, &b})) {
    mark_output(out);
    auto an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr();
    record(out, {&a, &b}, [an, bn, on, ga, gb]() {
      const T* g = on->grad.data();
      const T* av = an->data.data();
      const T* bv = bn->data.data();
      T* gav = an->requires_grad ? an->grad.data() : nullptr;
      T* gbv = bn->requires_grad ? bn->grad.data() : nullptr;
      if (an->shape == on->shape && bn->shape == on->shape) {
      int64_t n = int64_t(on->data.size());
        for (int64_t i = 0; i < n; ++i) {
          if (gav) gav[i] += ga(g[i], av[i], bv[i]);
          if (gbv) gbv[i] += gb(g[i], av[i], bv[i]);
        }
      } else {
        bcast_iterate(an->shape, bn->shape, on->shape,
                      [&](int64_t i, int64_t oa, int64_t ob) {
                        if (gav) gav[oa] += ga(g[i], av[oa], bv[ob]);
                        if (gbv) gbv[ob] += gb(g[i], av[oa], bv[ob]);
                      });
      }
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T g, T, T) { return g; }, [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T g, T, T y) { return g * y; }, [](T g, T x, T) { return g * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; },
      [](T g, T, T y) { return g / y; },
      [](T g, T x, T y) { return -g * x / (y * y); });
}

// ---------------------------------------------------------------------------
// elementwise unary (including tensor-scalar forms)
// ---------------------------------------------------------------------------

namespace detail {

// DF(g, x, y) where y is the forward output.
template <typename T, typename F, typename DF>
Tensor<T> unary_op(const Tensor<T>& x, F f, DF df) {
  Tensor<T> out(x.shape());
  const T* xd = x.data();
  T* od = out.data();
  int64_t n = x.size();
  for (int64_t i = 0; i < n; ++i) od[i] = f(xd[i]);
  if (want_grad<T>({&x})) {
    mark_output(out);
    auto xn = x.node_ptr(), on = out.node_ptr();
    record(out, {&x}, [xn, on, df]() {
      const T* g = on->grad.data();
      const T* xv = xn->data.data();
      const T* yv = on->data.data();
      T* gx = xn->grad.data();
      int64_t m = int64_t(xn->data.size());
      for (int64_t i = 0; i < m; ++i) gx[i] += df(g[i], xv[i], yv[i]);
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary_op<T>(x, [s](T v) { return v + s; },
                             [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub_scalar(const Tensor<T>& x, T s) {
  return add_scalar(x, -s);
}

template <typename T>
Tensor<T> rsub_scalar(const Tensor<T>& x, T s) {  // s - x
  return detail::unary_op<T>(x, [s](T v) { return s - v; },
                             [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s) {
  return detail::unary_op<T>(x, [s](T v) { return v * s; },
                             [s](T g, T, T) { return g * s; });
}

template <typename T>
Tensor<T> div_scalar(const Tensor<T>& x, T s) {
  return mul_scalar(x, T(1) / s);
}

template <typename T>
Tensor<T> rdiv_scalar(const Tensor<T>& x, T s) {  // s / x
  return detail::unary_op<T>(x, [s](T v) { return s / v; },
                             [s](T g, T x_, T) { return -g * s / (x_ * x_); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return mul_scalar(x, T(-1));
}

template <typename T>
Tensor<T> exp_op(const Tensor<T>& x) {
  return detail::unary_op<T>(x, [](T v) { return std::exp(v); },
                             [](T g, T, T y) { return g * y; });
}

template <typename T>
Tensor<T> log_op(const Tensor<T>& x) {
  return detail::unary_op<T>(x, [](T v) { return std::log(v); },
                             [](T g, T v, T) { return g / v; });
}

template <typename T>
Tensor<T> sqrt_op(const Tensor<T>& x) {
  return detail::unary_op<T>(x, [](T v) { return std::sqrt(v); },
                             [](T g, T, T y) { return g / (T(2) * y); });
}

template <typename T>
Tensor<T> abs_op(const Tensor<T>& x) {
  return detail::unary_op<T>(
      x, [](T v) { return std::abs(v); },
      [](T g, T v, T) { return v > T(0) ? g : (v < T(0) ? -g : T(0)); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary_op<T>(x, [](T v) { return v > T(0) ? v : T(0); },
                             [](T g, T v, T) { return v > T(0) ? g : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(0.7071067811865475244);
  const T inv_sqrt2pi = T(0.3989422804014326779);
  return detail::unary_op<T>(
      x,
      [=](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [=](T g, T v, T) {
        T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
        return g * (cdf + v * pdf);
      });
}

/// max(x, m) elementwise against a constant; gradient passes where x >= m.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& x, T m) {
  return detail::unary_op<T>(x, [m](T v) { return v < m ? m : v; },
                             [m](T g, T v, T) { return v < m ? T(0) : g; });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
using MatMap =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using CMatMap = Eigen::Map<
    const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace detail

/// Batched matrix product [..., m, k] x [..., k, n] -> [..., m, n] with
/// leading batch dimensions broadcast.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() < 2 || b.ndim() < 2)
    throw std::invalid_argument("matmul: inputs must have rank >= 2, got " +
                                shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  int64_t m = a.dim(-2), k = a.dim(-1), kb = b.dim(-2), n = b.dim(-1);
  if (k != kb)
    throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  Shape abatch(a.shape().begin(), a.shape().end() - 2);
  Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  Shape obatch = broadcast_shape(abatch, bbatch, "matmul");
  Shape osh = obatch;
  osh.push_back(m);
  osh.push_back(n);
  Tensor<T> out(osh);

  const int64_t asl = m * k, bsl = k * n, osl = m * n;
  const T* ad = a.data();
  const T* bd = b.data();
  T* od = out.data();
  detail::bcast_iterate(abatch, bbatch, obatch,
                        [&](int64_t i, int64_t oa, int64_t ob) {
                          detail::CMatMap<T> A(ad + oa * asl, m, k);
                          detail::CMatMap<T> B(bd + ob * bsl, k, n);
                          detail::MatMap<T> C(od + i * osl, m, n);
                          C.noalias() = A * B;
                        });

  if (detail::want_grad<T>({&a, &b})) {
    detail::mark_output(out);
    auto an = a.node_ptr(), bn = b.node_ptr(), on = out.node_ptr();
    detail::record(out, {&a, &b},
                   [an, bn, on, abatch, bbatch, obatch, m, k, n]() {
                     const int64_t asl = m * k, bsl = k * n, osl = m * n;
                     const T* g = on->grad.data();
                     const T* ad = an->data.data();
                     const T* bd = bn->data.data();
                     T* ga = an->requires_grad ? an->grad.data() : nullptr;
                     T* gb = bn->requires_grad ? bn->grad.data() : nullptr;
                     detail::bcast_iterate(
                         abatch, bbatch, obatch,
                         [&](int64_t i, int64_t oa, int64_t ob) {
                           detail::CMatMap<T> G(g + i * osl, m, n);
                           if (ga) {
                             detail::CMatMap<T> B(bd + ob * bsl, k, n);
                             detail::MatMap<T> GA(ga + oa * asl, m, k);
                             GA.noalias() += G * B.transpose();
                           }
                           if (gb) {
                             detail::CMatMap<T> A(ad + oa * asl, m, k);
                             detail::MatMap<T> GB(gb + ob * bsl, k, n);
                             GB.noalias() += A.transpose() * G;
                           }
                         });
                   });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

namespace detail {

inline void axis_split(const Shape& s, int axis, int64_t& outer, int64_t& mid,
                       int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[size_t(i)];
  mid = s[size_t(axis)];
  for (size_t i = size_t(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

inline Shape reduced_shape(const Shape& s, int axis, bool keepdims) {
  Shape r;
  for (size_t i = 0; i < s.size(); ++i) {
    if (int(i) == axis) {
      if (keepdims) r.push_back(1);
    } else {
      r.push_back(s[i]);
    }
  }
  return r;
}

}  // namespace detail

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  Tensor<T> out(Shape{});
  T acc = T(0);
  for (int64_t i = 0; i < x.size(); ++i) acc += x.data()[i];
  out.data()[0] = acc;
  if (detail::want_grad<T>({&x})) {
    detail::mark_output(out);
    auto xn = x.node_ptr(), on = out.node_ptr();
    detail::record(out, {&x}, [xn, on]() {
      T g = on->grad[0];
      for (T& gx : xn->grad) gx += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdims = false) {
  int a = normalize_axis(axis, x.ndim(), "sum");
  int64_t outer, mid, inner;
  detail::axis_split(x.shape(), a, outer, mid, inner);
  Tensor<T> out(detail::reduced_shape(x.shape(), a, keepdims));
  const T* xd = x.data();
  T* od = out.data();
  for (int64_t p = 0; p < outer; ++p)
    for (int64_t q = 0; q < inner; ++q) {
      T acc = T(0);
      for (int64_t j = 0; j < mid; ++j) acc += xd[(p * mid + j) * inner + q];
      od[p * inner + q] = acc;
    }
  if (detail::want_grad<T>({&x})) {
    detail::mark_output(out);
    auto xn = x.node_ptr(), on = out.node_ptr();
    detail::record(out, {&x}, [xn, on, outer, mid, inner]() {
      const T* g = on->grad.data();
      T* gx = xn->grad.data();
      for (int64_t p = 0; p < outer; ++p)
        for (int64_t q = 0; q < inner; ++q) {
          T gv = g[p * inner + q];
          for (int64_t j = 0; j < mid; ++j)
            gx[(p * mid + j) * inner + q] += gv;
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return mul_scalar(sum(x), T(1) / T(x.size()));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdims = false) {
  int a = normalize_axis(axis, x.ndim(), "mean");
  return mul_scalar(sum(x, a, keepdims), T(1) / T(x.dim(a)));
}

/// Full max reduction. Gradient routes to the first maximal element in
/// row-major order.
template <typename T>
Tensor<T> max(const Tensor<T>& x) {
  if (x.size() == 0) throw std::invalid_argument("max: empty tensor");
  Tensor<T> out(Shape{});
  int64_t arg = 0;
  const T* xd = x.data();
  for (int64_t i = 1; i < x.size(); ++i)
    if (xd[i] > xd[arg]) arg = i;
  out.data()[0] = xd[arg];
  if (detail::want_grad<T>({&x})) {
    detail::mark_output(out);
    auto xn = x.node_ptr(), on = out.node_ptr();
    detail::record(out, {&x},
                   [xn, on, arg]() { xn->grad[size_t(arg)] += on->grad[0]; });
  }
  return out;
}

template <typename T>
Tensor<T> max(const Tensor<T>& x, int axis, bool keepdims = false) {
  int a = normalize_axis(axis, x.ndim(), "max");
  int64_t outer, mid, inner;
  detail::axis_split(x.shape(), a, outer, mid, inner);
  Tensor<T> out(detail::reduced_shape(x.shape(), a, keepdims));
  std::vector<int64_t> args(size_t(outer * inner));
  const T* xd = x.data();
  T* od = out.data();
  for (int64_t p = 0; p < outer; ++p)
    for (int64_t q = 0; q < inner; ++q) {
      int64_t arg = 0;
      T best = xd[p * mid * inner + q];
      for (int64_t j = 1; j < mid; ++j) {
        T v = xd[(p * mid + j) * inner + q];
        if (v > best) {
          best = v;
          arg = j;
        }
      }
      od[p * inner + q] = best;
      args[size_t(p * inner + q)] = arg;
    }
  if (detail::want_grad<T>({&x})) {
    detail::mark_output(out);
    auto xn = x.node_ptr(), on = out.node_ptr();
    detail::record(out, {&x},
                   [xn, on, args = std::move(args), outer, mid, inner]() {
                     const T* g = on->grad.data();
                     T* gx = xn->grad.data();
                     for (int64_t p = 0; p < outer; ++p)
                       for (int64_t q = 0; q < inner; ++q) {
                         int64_t j = args[size_t(p * inner + q)];
                         gx[(p * mid + j) * inner + q] += g[p * inner + q];
                       }
                   });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  int a = normalize_axis(axis, x.ndim(), "softmax");
  int64_t outer, mid, inner;
  detail::axis_split(x.shape(), a, outer, mid, inner);
  Tensor<T> out(x.shape());
  const T* xd = x.data();
  T* od = out.data();
  for (int64_t p = 0; p < outer; ++p)
    for (int64_t q = 0; q < inner; ++q) {
      T mx = xd[p * mid * inner + q];
      for (int64_t j = 1; j < mid; ++j)
        mx = std::max(mx, xd[(p * mid + j) * inner + q]);
      T s = T(0);
      for (int64_t j = 0; j < mid; ++j) {
        T e = std::exp(xd[(p * mid + j) * inner + q] - mx);
        od[(p * mid + j) * inner + q] = e;
        s += e;
      }
      T invs = T(1) / s;
      for (int64_t j = 0; j < mid; ++j) od[(p * mid + j) * inner + q] *= invs;
    }
  if (detail::want_grad<T>({&x})) {
    detail::mark_output(out);
    auto xn = x.node_ptr(), on = out.node_ptr();
    detail::record(out, {&x}, [xn, on, outer, mid, inner]() {
      const T* g = on->grad.data();
      const T* y = on->data.data();
      T* gx = xn->grad.data();
      for (int64_t p = 0; p < outer; ++p)
        for (int64_t q = 0; q < inner; ++q) {
          T dot = T(0);
          for (int64_t j = 0; j < mid; ++j) {
            int64_t o = (p * mid + j) * inner + q;
            dot += g[o] * y[o];
          }
          for (int64_t j = 0; j < mid; ++j) {
            int64_t o = (p * mid + j) * inner + q;
            gx[o] += (g[o] - dot) * y[o];
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw std::invalid_argument("reshape: cannot view " +
                                shape_str(x.shape()) + " as " +
                                shape_str(shape));
  Tensor<T> out(std::move(shape));
  out.vec() = x.vec();
  if (detail::want_grad<T>({&x})) {
    detail::mark_output(out);
    auto xn = x.node_ptr(), on = out.node_ptr();
    detail::record(out, {&x}, [xn, on]() {
      for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  int64_t nd = x.ndim();
  if (int64_t(perm.size()) != nd)
    throw std::invalid_argument("permute: perm rank mismatch");
  std::vector<char> seen(size_t(nd), 0);
  Shape osh(size_t(nd), 0);
  for (size_t k = 0; k < perm.size(); ++k) {
    int p = perm[k];
    if (p < 0 || p >= nd || seen[size_t(p)])
      throw std::invalid_argument("permute: invalid permutation");
    seen[size_t(p)] = 1;
    osh[k] = x.dim(p);
  }
  Tensor<T> out(osh);
  Shape xst = row_major_strides(x.shape());
  // stride to add in x when the k-th output index increments
  Shape map(size_t(nd));
  for (size_t k = 0; k < perm.size(); ++k) map[k] = xst[size_t(perm[k])];

  const T* xd = x.data();
  T* od = out.data();
  std::vector<int64_t> idx(size_t(nd), 0);
  int64_t xo = 0;
  int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) {
    od[i] = xd[xo];
    for (int k = int(nd) - 1; k >= 0; --k) {
      ++idx[size_t(k)];
      xo += map[size_t(k)];
      if (idx[size_t(k)] < osh[size_t(k)]) break;
      xo -= map[size_t(k)] * osh[size_t(k)];
      idx[size_t(k)] = 0;
    }
  }
  if (detail::want_grad<T>({&x})) {
    detail::mark_output(out);
    auto xn = x.node_ptr(), on = out.node_ptr();
    detail::record(out, {&x}, [xn, on, map, osh, nd]() {
      const T* g = on->grad.data();
      T* gx = xn->grad.data();
      std::vector<int64_t> idx(size_t(nd), 0);
      int64_t xo = 0;
      int64_t n = int64_t(on->data.size());
      for (int64_t i = 0; i < n; ++i) {
        gx[xo] += g[i];
        for (int k = int(nd) - 1; k >= 0; --k) {
          ++idx[size_t(k)];
          xo += map[size_t(k)];
          if (idx[size_t(k)] < osh[size_t(k)]) break;
          xo -= map[size_t(k)] * osh[size_t(k)];
          idx[size_t(k)] = 0;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

/// Layer normalization over `axis` with learnable scale/shift. gamma/beta are
/// 1-d of length dim(axis).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, int axis = -1, T eps = T(1e-5)) {
  int a = normalize_axis(axis, x.ndim(), "layer_norm");
  if (gamma.size() != x.dim(a) || beta.size() != x.dim(a))
    throw std::invalid_argument("layer_norm: scale/shift length mismatch");
  auto mu = mean(x, a, true);
  auto xc = sub(x, mu);
  auto var = mean(mul(xc, xc), a, true);
  auto xhat = div(xc, sqrt_op(add_scalar(var, eps)));
  // align gamma/beta with the normalized axis
  Shape bshape(size_t(x.ndim()), 1);
  bshape[size_t(a)] = x.dim(a);
  return add(mul(xhat, reshape(gamma, bshape)), reshape(beta, bshape));
}

// ---------------------------------------------------------------------------
// cosine distance map
// ---------------------------------------------------------------------------

/// Per-location cosine distance over the channel axis (axis 1):
/// 1 - <a,b> / (|a||b| + eps), shape [b,c,h,w] -> [b,h,w]. Range [0, 2].
template <typename T>
Tensor<T> cosine_map(const Tensor<T>& a, const Tensor<T>& b, T eps = T(1e-8)) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("cosine_map: shapes differ, " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  if (a.ndim() != 4)
    throw std::invalid_argument("cosine_map: expected rank-4 input, got " +
                                shape_str(a.shape()));
  const T floor_sq = T(1e-30);  // keeps sqrt gradient finite at zero vectors
  auto dot = sum(mul(a, b), 1, false);
  auto na = sqrt_op(clamp_min(sum(mul(a, a), 1, false), floor_sq));
  auto nb = sqrt_op(clamp_min(sum(mul(b, b), 1, false), floor_sq));
  return rsub_scalar(div(dot, add_scalar(mul(na, nb), eps)), T(1));
}

// ---------------------------------------------------------------------------
// bilinear resize
// ---------------------------------------------------------------------------

namespace detail {

struct LerpCoef {
  int64_t i0, i1;
  double w0, w1;
};

inline std::vector<LerpCoef> bilinear_axis(int64_t src, int64_t dst) {
  std::vector<LerpCoef> c(size_t(dst));
  double scale = double(src) / double(dst);
  for (int64_t o = 0; o < dst; ++o) {
    double s = (double(o) + 0.5) * scale - 0.5;
    double f = std::floor(s);
    double t = s - f;
    int64_t i0 = int64_t(f), i1 = i0 + 1;
    if (i0 < 0) {
      i0 = 0;
      i1 = 0;
      t = 0.0;
    }
    if (i1 > src - 1) {
      i1 = src - 1;
      if (i0 > src - 1) i0 = src - 1;
      if (i0 == i1) t = 0.0;
    }
    c[size_t(o)] = {i0, i1, 1.0 - t, t};
  }
  return c;
}

}  // namespace detail

/// Bilinear interpolation to (H, W), align-corners=false convention.
/// Input [..., h, w]; leading dimensions are treated as channels.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int64_t H, int64_t W) {
  if (x.ndim() < 2)
    throw std::invalid_argument("bilinear_resize: rank must be >= 2");
  if (H < 1 || W < 1)
    throw std::invalid_argument("bilinear_resize: target dims must be >= 1");
  int64_t h = x.dim(-2), w = x.dim(-1);
  int64_t ch = x.size() / (h * w);
  Shape osh = x.shape();
  osh[osh.size() - 2] = H;
  osh[osh.size() - 1] = W;
  Tensor<T> out(osh);
  auto rows = detail::bilinear_axis(h, H);
  auto cols = detail::bilinear_axis(w, W);
  const T* xd = x.data();
  T* od = out.data();
  for (int64_t c = 0; c < ch; ++c) {
    const T* src = xd + c * h * w;
    T* dst = od + c * H * W;
    for (int64_t r = 0; r < H; ++r) {
      const auto& rc = rows[size_t(r)];
      for (int64_t q = 0; q < W; ++q) {
        const auto& cc = cols[size_t(q)];
        double v = rc.w0 * (cc.w0 * double(src[rc.i0 * w + cc.i0]) +
                            cc.w1 * double(src[rc.i0 * w + cc.i1])) +
                   rc.w1 * (cc.w0 * double(src[rc.i1 * w + cc.i0]) +
                            cc.w1 * double(src[rc.i1 * w + cc.i1]));
        dst[r * W + q] = T(v);
      }
    }
  }
  if (detail::want_grad<T>({&x})) {
    detail::mark_output(out);
    auto xn = x.node_ptr(), on = out.node_ptr();
    detail::record(out, {&x}, [xn, on, rows, cols, ch, h, w, H, W]() {
      const T* g = on->grad.data();
      T* gx = xn->grad.data();
      for (int64_t c = 0; c < ch; ++c) {
        const T* gsrc = g + c * H * W;
        T* gdst = gx + c * h * w;
        for (int64_t r = 0; r < H; ++r) {
          const auto& rc = rows[size_t(r)];
          for (int64_t q = 0; q < W; ++q) {
            const auto& cc = cols[size_t(q)];
            T gv = gsrc[r * W + q];
            gdst[rc.i0 * w + cc.i0] += T(rc.w0 * cc.w0) * gv;
            gdst[rc.i0 * w + cc.i1] += T(rc.w0 * cc.w1) * gv;
            gdst[rc.i1 * w + cc.i0] += T(rc.w1 * cc.w0) * gv;
            gdst[rc.i1 * w + cc.i1] += T(rc.w1 * cc.w1) * gv;
          }
        }
      }
    });
  }
  return out;
}

/// Non-overlapping average pooling of the trailing two axes by integer
/// factors. Built from reshape/mean, so it is differentiable for free.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int64_t fh, int64_t fw) {
  int64_t h = x.dim(-2), w = x.dim(-1);
  if (fh < 1 || fw < 1 || h % fh != 0 || w % fw != 0)
    throw std::invalid_argument(
        "avg_pool2d: factors must divide the spatial dims, " +
        shape_str(x.shape()) + " by " + std::to_string(fh) + "x" +
        std::to_string(fw));
  Shape mid(x.shape().begin(), x.shape().end() - 2);
  mid.push_back(h / fh);
  mid.push_back(fh);
  mid.push_back(w / fw);
  mid.push_back(fw);
  auto r = reshape(x, mid);
  return mean(mean(r, -1, false), -2, false);
}

// ---------------------------------------------------------------------------
// non-differentiable utilities
// ---------------------------------------------------------------------------

/// Constant {0,1} mask of x >= threshold; never carries gradient.
template <typename T>
Tensor<T> ge_mask(const Tensor<T>& x, T threshold) {
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.size(); ++i)
    out.data()[i] = x.data()[i] >= threshold ? T(1) : T(0);
  return out;
}

template <typename T>
Tensor<T> one_hot(const std::vector<int>& labels, int64_t depth) {
  Tensor<T> out(Shape{int64_t(labels.size()), depth});
  for (size_t i = 0; i < labels.size(); ++i) {
    int y = labels[i];
    if (y < 0 || int64_t(y) >= depth)
      throw std::invalid_argument("one_hot: label " + std::to_string(y) +
                                  " out of range [0," + std::to_string(depth) +
                                  ")");
    out.data()[int64_t(i) * depth + y] = T(1);
  }
  return out;
}

// operator sugar -------------------------------------------------------------

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) {
  return div(a, b);
}
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, T s) {
  return add_scalar(a, s);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, T s) {
  return sub_scalar(a, s);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, T s) {
  return mul_scalar(a, s);
}
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, T s) {
  return div_scalar(a, s);
}
template <typename T>
Tensor<T> operator*(T s, const Tensor<T>& a) {
  return mul_scalar(a, s);
}
template <typename T>
Tensor<T> operator-(T s, const Tensor<T>& a) {
  return rsub_scalar(a, s);
}

}  // namespace dualrd
