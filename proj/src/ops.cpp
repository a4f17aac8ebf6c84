#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "ni/autodiff.hpp"
#include "ni/kernels.hpp"

namespace ni::ad {

namespace {

void same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::invalid_argument("operands live on different tapes");
}

void add_into(Array& dst, const double* src) {
  double* d = dst.data();
  const std::size_t n = dst.size();
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) d[i] += src[i];
}

// Strides of an operand indexed by the coordinates of the broadcast shape
// `out`; stretched axes get stride 0.
std::vector<std::size_t> broadcast_strides(const Shape& operand, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> strides(r, 0);
  const std::size_t off = r - operand.size();
  std::size_t s = 1;
  for (std::size_t d = operand.size(); d-- > 0;) {
    strides[d + off] = operand[d] == 1 && out[d + off] != 1 ? 0 : s;
    s *= operand[d];
  }
  return strides;
}

// Calls f(out_offset, a_offset, b_offset, a_step, b_step, len) for every row
// of the broadcast output; a row runs along the last axis.
template <typename F>
void for_each_broadcast_row(const Shape& out, const std::vector<std::size_t>& sa,
                            const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t r = out.size();
  const std::size_t len = out[r - 1];
  const std::size_t rows = shape_size(out) / len;
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0;
  std::size_t ob = 0;
  for (std::size_t row = 0; row < rows; ++row) {
    f(row * len, oa, ob, sa[r - 1], sb[r - 1], len);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * idx[d];
      ob -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
}

// Sums g (shaped like out) into dst, an operand gradient with strides s.
void reduce_broadcast_grad(const Array& g, const Shape& out, const std::vector<std::size_t>& s,
                           Array& dst) {
  if (g.size() == dst.size()) {
    add_into(dst, g.data());
    return;
  }
  const std::vector<std::size_t> unused(out.size(), 0);
  const double* gp = g.data();
  double* dp = dst.data();
  for_each_broadcast_row(out, s, unused,
                         [&](std::size_t o, std::size_t a, std::size_t, std::size_t step,
                             std::size_t, std::size_t len) {
                           if (step == 0) {
                             double acc = 0.0;
                             for (std::size_t j = 0; j < len; ++j) acc += gp[o + j];
                             dp[a] += acc;
                           } else {
                             for (std::size_t j = 0; j < len; ++j) dp[a + j] += gp[o + j];
                           }
                         });
}

struct AxisSplit {
  std::size_t outer;
  std::size_t n;
  std::size_t inner;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  AxisSplit a{1, s[axis], 1};
  for (std::size_t d = 0; d < axis; ++d) a.outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) a.inner *= s[d];
  return a;
}

// Elementwise f(a, b) over the broadcast shape.
template <typename Op>
Array broadcast_apply(const Array& av, const Array& bv, const Shape& out, Op op) {
  Array result(out);
  double* rp = result.data();
  const double* ap = av.data();
  const double* bp = bv.data();
  const std::size_t n = result.size();
  if (av.shape() == bv.shape()) {
#pragma omp simd
    for (std::size_t i = 0; i < n; ++i) rp[i] = op(ap[i], bp[i]);
  } else if (bv.size() == 1 && av.size() == n) {
    const double s = bp[0];
#pragma omp simd
    for (std::size_t i = 0; i < n; ++i) rp[i] = op(ap[i], s);
  } else {
    const auto sa = broadcast_strides(av.shape(), out);
    const auto sb = broadcast_strides(bv.shape(), out);
    for_each_broadcast_row(out, sa, sb,
                           [&](std::size_t o, std::size_t ia, std::size_t ib, std::size_t da,
                               std::size_t db, std::size_t len) {
                             for (std::size_t j = 0; j < len; ++j) {
                               rp[o + j] = op(ap[ia + j * da], bp[ib + j * db]);
                             }
                           });
  }
  return result;
}

// Gradient contribution to one operand of a binary op. `local` maps
// (g, a, b, out) at each broadcast position to d out / d operand * g.
template <typename Local>
void binary_operand_grad(Tape& t, std::size_t self, std::size_t a, std::size_t b,
                         std::size_t target, Local local) {
  const Array& g = t.grad_of(self);
  const Array& av = t.value_of(a);
  const Array& bv = t.value_of(b);
  const Array& ov = t.value_of(self);
  const Shape& out = ov.shape();
  Array contrib(out);
  {
    const auto sa = broadcast_strides(av.shape(), out);
    const auto sb = broadcast_strides(bv.shape(), out);
    const double* gp = g.data();
    const double* ap = av.data();
    const double* bp = bv.data();
    const double* op = ov.data();
    double* cp = contrib.data();
    for_each_broadcast_row(out, sa, sb,
                           [&](std::size_t o, std::size_t ia, std::size_t ib, std::size_t da,
                               std::size_t db, std::size_t len) {
                             for (std::size_t j = 0; j < len; ++j) {
                               cp[o + j] = local(gp[o + j], ap[ia + j * da], bp[ib + j * db],
                                                 op[o + j]);
                             }
                           });
  }
  const Array& tv = t.value_of(target);
  reduce_broadcast_grad(contrib, out, broadcast_strides(tv.shape(), out), t.grad_buffer(target));
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + shape_string(a) + " and " + shape_string(b) +
                       " are not broadcastable");
    }
    out[r - 1 - i] = std::max(da, db);
  }
  return out;
}

// ---------------------------------------------------------------- elementwise

Var add(Var a, Var b) { return elementwise(a, b, BinaryKind::add); }
Var sub(Var a, Var b) { return elementwise(a, b, BinaryKind::sub); }
Var mul(Var a, Var b) { return elementwise(a, b, BinaryKind::mul); }
Var div(Var a, Var b) { return elementwise(a, b, BinaryKind::div); }

Var elementwise(Var a, Var b, BinaryKind kind) {
  same_tape(a, b);
  Tape& t = *a.tape;
  const Array& av = a.value();
  const Array& bv = b.value();
  const Shape out = broadcast_shape(av.shape(), bv.shape());
  const std::size_t ia = a.id;
  const std::size_t ib = b.id;

  switch (kind) {
    case BinaryKind::add:
    case BinaryKind::sub: {
      const double sign = kind == BinaryKind::add ? 1.0 : -1.0;
      Array r = kind == BinaryKind::add
                    ? broadcast_apply(av, bv, out, [](double x, double y) { return x + y; })
                    : broadcast_apply(av, bv, out, [](double x, double y) { return x - y; });
      return t.record(kind == BinaryKind::add ? "add" : "sub", std::move(r), {ia, ib},
                      [ia, ib, sign](Tape& t, std::size_t self) {
                        const Array& g = t.grad_of(self);
                        const Shape& out = t.value_of(self).shape();
                        if (t.needs_grad(ia)) {
                          reduce_broadcast_grad(g, out, broadcast_strides(t.value_of(ia).shape(), out),
                                                t.grad_buffer(ia));
                        }
                        if (t.needs_grad(ib)) {
                          if (sign > 0) {
                            reduce_broadcast_grad(g, out,
                                                  broadcast_strides(t.value_of(ib).shape(), out),
                                                  t.grad_buffer(ib));
                          } else {
                            binary_operand_grad(t, self, ia, ib, ib,
                                                [](double g, double, double, double) { return -g; });
                          }
                        }
                      });
    }
    case BinaryKind::mul: {
      Array r = broadcast_apply(av, bv, out, [](double x, double y) { return x * y; });
      return t.record("mul", std::move(r), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
        if (t.needs_grad(ia)) {
          binary_operand_grad(t, self, ia, ib, ia,
                              [](double g, double, double y, double) { return g * y; });
        }
        if (t.needs_grad(ib)) {
          binary_operand_grad(t, self, ia, ib, ib,
                              [](double g, double x, double, double) { return g * x; });
        }
      });
    }
    case BinaryKind::div: {
      for (double v : bv.values()) {
        if (v == 0.0) throw NumericError("division by exact zero");
      }
      Array r = broadcast_apply(av, bv, out, [](double x, double y) { return x / y; });
      return t.record("div", std::move(r), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
        if (t.needs_grad(ia)) {
          binary_operand_grad(t, self, ia, ib, ia,
                              [](double g, double, double y, double) { return g / y; });
        }
        if (t.needs_grad(ib)) {
          binary_operand_grad(t, self, ia, ib, ib,
                              [](double g, double, double y, double o) { return -g * o / y; });
        }
      });
    }
  }
  throw std::invalid_argument("unknown binary kind");
}

Var add_scalar(Var a, double s) {
  Array r = a.value();
  for (double& v : r.storage()) v += s;
  const std::size_t ia = a.id;
  return a.tape->record("add_scalar", std::move(r), {ia}, [ia](Tape& t, std::size_t self) {
    add_into(t.grad_buffer(ia), t.grad_of(self).data());
  });
}

Var mul_scalar(Var a, double s) {
  Array r = a.value();
  for (double& v : r.storage()) v *= s;
  const std::size_t ia = a.id;
  return a.tape->record("mul_scalar", std::move(r), {ia}, [ia, s](Tape& t, std::size_t self) {
    const Array& g = t.grad_of(self);
    Array& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var exp(Var a) { return elementwise(a, UnaryKind::exp); }
Var neg(Var a) { return elementwise(a, UnaryKind::neg); }

Var elementwise(Var a, UnaryKind kind) {
  if (kind == UnaryKind::neg) return mul_scalar(a, -1.0);
  Array r = a.value();
  for (double& v : r.storage()) v = std::exp(v);
  const std::size_t ia = a.id;
  return a.tape->record("exp", std::move(r), {ia}, [ia](Tape& t, std::size_t self) {
    const Array& g = t.grad_of(self);
    const Array& y = t.value_of(self);
    Array& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  });
}

// ------------------------------------------------------------ linear algebra

Var matmul(Var a, Var b) {
  same_tape(a, b);
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.rank() < 2 || bv.rank() != 2 || av.shape().back() != bv.dim(0)) {
    throw ShapeError("matmul dimension mismatch: " + shape_string(av.shape()) + " x " +
                     shape_string(bv.shape()));
  }
  const std::size_t k = bv.dim(0);
  const std::size_t n = bv.dim(1);
  const std::size_t m = av.size() / k;
  Shape out = av.shape();
  out.back() = n;
  Array r(out);
  kernels::gemm(false, false, m, n, k, av.data(), bv.data(), r.data(), false);
  const std::size_t ia = a.id;
  const std::size_t ib = b.id;
  return a.tape->record("matmul", std::move(r), {ia, ib}, [ia, ib, m, n, k](Tape& t, std::size_t self) {
    const Array& g = t.grad_of(self);
    if (t.needs_grad(ia)) {
      kernels::gemm(false, true, m, k, n, g.data(), t.value_of(ib).data(), t.grad_buffer(ia).data(), true);
    }
    if (t.needs_grad(ib)) {
      kernels::gemm(true, false, k, n, m, t.value_of(ia).data(), g.data(), t.grad_buffer(ib).data(), true);
    }
  });
}

Var batched_matmul(Var a, Var b, bool transpose_b) {
  same_tape(a, b);
  const Array& av = a.value();
  const Array& bv = b.value();
  const auto mismatch = [&] {
    return ShapeError("batched_matmul dimension mismatch: " + shape_string(av.shape()) + " x " +
                      shape_string(bv.shape()) + (transpose_b ? "^T" : ""));
  };
  if (av.rank() < 2 || av.rank() != bv.rank()) throw mismatch();
  const std::size_t r = av.rank();
  for (std::size_t d = 0; d + 2 < r; ++d) {
    if (av.dim(d) != bv.dim(d)) throw mismatch();
  }
  const std::size_t m = av.dim(r - 2);
  const std::size_t k = av.dim(r - 1);
  const std::size_t n = transpose_b ? bv.dim(r - 2) : bv.dim(r - 1);
  if ((transpose_b ? bv.dim(r - 1) : bv.dim(r - 2)) != k) throw mismatch();
  const std::size_t groups = av.size() / (m * k);
  Shape out = av.shape();
  out[r - 1] = n;
  Array res(out);
  {
    const double* ap = av.data();
    const double* bp = bv.data();
    double* rp = res.data();
#pragma omp parallel for schedule(static) if (groups * m * n * k >= (1u << 15))
    for (std::size_t g = 0; g < groups; ++g) {
      kernels::gemm(false, transpose_b, m, n, k, ap + g * m * k, bp + g * n * k, rp + g * m * n, false);
    }
  }
  const std::size_t ia = a.id;
  const std::size_t ib = b.id;
  return a.tape->record(
      "batched_matmul", std::move(res), {ia, ib},
      [ia, ib, m, n, k, groups, transpose_b](Tape& t, std::size_t self) {
        const double* gp = t.grad_of(self).data();
        const double* ap = t.value_of(ia).data();
        const double* bp = t.value_of(ib).data();
        double* ga = t.needs_grad(ia) ? t.grad_buffer(ia).data() : nullptr;
        double* gb = t.needs_grad(ib) ? t.grad_buffer(ib).data() : nullptr;
#pragma omp parallel for schedule(static) if (groups * m * n * k >= (1u << 15))
        for (std::size_t g = 0; g < groups; ++g) {
          const double* gg = gp + g * m * n;
          const double* ag = ap + g * m * k;
          const double* bg = bp + g * n * k;
          if (ga) {
            // C = A B: dA = G B^T.  C = A B^T: dA = G B.
            kernels::gemm(false, !transpose_b, m, k, n, gg, bg, ga + g * m * k, true);
          }
          if (gb) {
            if (transpose_b) {
              kernels::gemm(true, false, n, k, m, gg, ag, gb + g * n * k, true);  // G^T A
            } else {
              kernels::gemm(true, false, k, n, m, ag, gg, gb + g * n * k, true);  // A^T G
            }
          }
        }
      });
}

Var linear(Var x, Var w, Var bias) {
  same_tape(x, w);
  same_tape(x, bias);
  const Array& xv = x.value();
  const Array& wv = w.value();
  const Array& bv = bias.value();
  if (xv.rank() < 1 || wv.rank() != 2 || xv.shape().back() != wv.dim(0) || bv.size() != wv.dim(1)) {
    throw ShapeError("linear dimension mismatch: " + shape_string(xv.shape()) + " x " +
                     shape_string(wv.shape()) + " + " + shape_string(bv.shape()));
  }
  const std::size_t k = wv.dim(0);
  const std::size_t n = wv.dim(1);
  const std::size_t m = xv.size() / k;
  Shape out = xv.shape();
  out.back() = n;
  Array r(out);
  kernels::gemm(false, false, m, n, k, xv.data(), wv.data(), r.data(), false);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = r.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) row[j] += bv[j];
  }
  const std::size_t ix = x.id;
  const std::size_t iw = w.id;
  const std::size_t ibias = bias.id;
  return x.tape->record("linear", std::move(r), {ix, iw, ibias},
                        [ix, iw, ibias, m, n, k](Tape& t, std::size_t self) {
                          const Array& g = t.grad_of(self);
                          if (t.needs_grad(ix)) {
                            kernels::gemm(false, true, m, k, n, g.data(), t.value_of(iw).data(),
                                          t.grad_buffer(ix).data(), true);
                          }
                          if (t.needs_grad(iw)) {
                            kernels::gemm(true, false, k, n, m, t.value_of(ix).data(), g.data(),
                                          t.grad_buffer(iw).data(), true);
                          }
                          if (t.needs_grad(ibias)) {
                            std::vector<double> col(n);
                            kernels::reduce_sum(g.data(), col.data(), 1, m, n);
                            add_into(t.grad_buffer(ibias), col.data());
                          }
                        });
}

Var mod_linear(Var x, Var m, Var w, Var bias) {
  same_tape(x, m);
  same_tape(x, w);
  same_tape(x, bias);
  const Array& xv = x.value();
  const Array& mv = m.value();
  const Array& wv = w.value();
  const Array& bv = bias.value();
  if (xv.rank() < 2 || mv.rank() != 2 || wv.rank() != 2 || xv.dim(0) != mv.dim(0) ||
      xv.shape().back() != wv.dim(0) || mv.dim(1) != wv.dim(0) || bv.size() != wv.dim(1)) {
    throw ShapeError("mod_linear dimension mismatch: x " + shape_string(xv.shape()) + ", m " +
                     shape_string(mv.shape()) + ", w " + shape_string(wv.shape()) + ", b " +
                     shape_string(bv.shape()));
  }
  const std::size_t groups = xv.dim(0);
  const std::size_t k = wv.dim(0);
  const std::size_t n = wv.dim(1);
  const std::size_t rows = xv.size() / (groups * k);

  // (x * m) w == x (diag(m) w): modulate the weights once per group.
  Array wmod({groups, k, n});
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t i = 0; i < k; ++i) {
      const double s = mv[g * k + i];
      for (std::size_t j = 0; j < n; ++j) wmod[(g * k + i) * n + j] = s * wv[i * n + j];
    }
  }
  Shape out = xv.shape();
  out.back() = n;
  Array r(out);
  for (std::size_t g = 0; g < groups; ++g) {
    double* rg = r.data() + g * rows * n;
    kernels::gemm(false, false, rows, n, k, xv.data() + g * rows * k, wmod.data() + g * k * n, rg, false);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < n; ++j) rg[i * n + j] += bv[j];
    }
  }
  const std::size_t ix = x.id;
  const std::size_t im = m.id;
  const std::size_t iw = w.id;
  const std::size_t ibias = bias.id;
  return x.tape->record(
      "mod_linear", std::move(r), {ix, im, iw, ibias},
      [ix, im, iw, ibias, groups, rows, k, n, wmod = std::move(wmod)](Tape& t, std::size_t self) {
        const Array& g = t.grad_of(self);
        const Array& xv = t.value_of(ix);
        const Array& mv = t.value_of(im);
        const Array& wv = t.value_of(iw);
        if (t.needs_grad(ix)) {
          double* gx = t.grad_buffer(ix).data();
          for (std::size_t grp = 0; grp < groups; ++grp) {
            kernels::gemm(false, true, rows, k, n, g.data() + grp * rows * n, wmod.data() + grp * k * n,
                          gx + grp * rows * k, true);
          }
        }
        const bool want_m = t.needs_grad(im);
        const bool want_w = t.needs_grad(iw);
        if (want_m || want_w) {
          std::vector<double> outer(k * n);
          double* gm = want_m ? t.grad_buffer(im).data() : nullptr;
          double* gw = want_w ? t.grad_buffer(iw).data() : nullptr;
          for (std::size_t grp = 0; grp < groups; ++grp) {
            // outer = x_g^T g_g, the gradient w.r.t. the modulated weights.
            kernels::gemm(true, false, k, n, rows, xv.data() + grp * rows * k, g.data() + grp * rows * n,
                          outer.data(), false);
            for (std::size_t i = 0; i < k; ++i) {
              const double s = mv[grp * k + i];
              double dm = 0.0;
              for (std::size_t j = 0; j < n; ++j) {
                const double o = outer[i * n + j];
                if (gw) gw[i * n + j] += s * o;
                dm += o * wv[i * n + j];
              }
              if (gm) gm[grp * k + i] += dm;
            }
          }
        }
        if (t.needs_grad(ibias)) {
          std::vector<double> col(n);
          kernels::reduce_sum(g.data(), col.data(), 1, groups * rows, n);
          add_into(t.grad_buffer(ibias), col.data());
        }
      });
}

// ---------------------------------------------------------------- reductions

Var reduce(Var a, ReduceKind kind, std::size_t axis, bool keepdim) {
  const Array& av = a.value();
  const AxisSplit s = split_at(av.shape(), axis);
  Shape out = av.shape();
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<long>(axis));
    if (out.empty()) out = {1};
  }
  Array r(out);
  kernels::reduce_sum(av.data(), r.data(), s.outer, s.n, s.inner);
  const double scale = kind == ReduceKind::mean ? 1.0 / static_cast<double>(s.n) : 1.0;
  if (kind == ReduceKind::mean) {
    for (double& v : r.storage()) v *= scale;
  }
  const std::size_t ia = a.id;
  return a.tape->record(kind == ReduceKind::sum ? "sum" : "mean", std::move(r), {ia},
                        [ia, s, scale](Tape& t, std::size_t self) {
                          const double* g = t.grad_of(self).data();
                          double* ga = t.grad_buffer(ia).data();
                          for (std::size_t o = 0; o < s.outer; ++o) {
                            for (std::size_t j = 0; j < s.n; ++j) {
                              double* row = ga + (o * s.n + j) * s.inner;
                              const double* grow = g + o * s.inner;
                              for (std::size_t in = 0; in < s.inner; ++in) row[in] += scale * grow[in];
                            }
                          }
                        });
}

Var sum(Var a, std::size_t axis, bool keepdim) { return reduce(a, ReduceKind::sum, axis, keepdim); }
Var mean(Var a, std::size_t axis, bool keepdim) { return reduce(a, ReduceKind::mean, axis, keepdim); }

Var sum_all(Var a) { return reduce(reshape(a, {a.value().size()}), ReduceKind::sum, 0); }
Var mean_all(Var a) { return reduce(reshape(a, {a.value().size()}), ReduceKind::mean, 0); }

// ------------------------------------------------------ normalization / act.

Var softmax(Var a, std::size_t axis) {
  const Array& av = a.value();
  const AxisSplit s = split_at(av.shape(), axis);
  Array r(av.shape());
  kernels::softmax(av.data(), r.data(), s.outer, s.n, s.inner);
  const std::size_t ia = a.id;
  return a.tape->record("softmax", std::move(r), {ia}, [ia, s](Tape& t, std::size_t self) {
    const Array& y = t.value_of(self);
    std::vector<double> gx(y.size());
    kernels::softmax_backward(y.data(), t.grad_of(self).data(), gx.data(), s.outer, s.n, s.inner);
    add_into(t.grad_buffer(ia), gx.data());
  });
}

Var layer_norm(Var a, Var gamma, Var beta) {
  same_tape(a, gamma);
  same_tape(a, beta);
  const Array& av = a.value();
  const std::size_t n = av.shape().back();
  if (gamma.value().size() != n || beta.value().size() != n) {
    throw ShapeError("layer_norm affine shapes " + shape_string(gamma.value().shape()) + ", " +
                     shape_string(beta.value().shape()) + " do not match input " +
                     shape_string(av.shape()));
  }
  const std::size_t rows = av.size() / n;
  Array r(av.shape());
  std::vector<double> mu(rows);
  std::vector<double> rstd(rows);
  kernels::layer_norm(av.data(), gamma.value().data(), beta.value().data(), r.data(), mu.data(),
                      rstd.data(), rows, n, kLayerNormEps);
  const std::size_t ia = a.id;
  const std::size_t ig = gamma.id;
  const std::size_t ib = beta.id;
  return a.tape->record(
      "layer_norm", std::move(r), {ia, ig, ib},
      [ia, ig, ib, rows, n, mu = std::move(mu), rstd = std::move(rstd)](Tape& t, std::size_t self) {
        std::vector<double> gx(rows * n);
        std::vector<double> scratch_g;
        std::vector<double> scratch_b;
        double* gg = nullptr;
        double* gb = nullptr;
        if (t.needs_grad(ig)) {
          gg = t.grad_buffer(ig).data();
        } else {
          scratch_g.assign(n, 0.0);
          gg = scratch_g.data();
        }
        if (t.needs_grad(ib)) {
          gb = t.grad_buffer(ib).data();
        } else {
          scratch_b.assign(n, 0.0);
          gb = scratch_b.data();
        }
        kernels::layer_norm_backward(t.value_of(ia).data(), t.value_of(ig).data(), mu.data(),
                                     rstd.data(), t.grad_of(self).data(), gx.data(), gg, gb, rows, n);
        if (t.needs_grad(ia)) add_into(t.grad_buffer(ia), gx.data());
      });
}

Var gelu(Var a) {
  const Array& av = a.value();
  Array r(av.shape());
  kernels::gelu(av.data(), r.data(), av.size());
  const std::size_t ia = a.id;
  return a.tape->record("gelu", std::move(r), {ia}, [ia](Tape& t, std::size_t self) {
    const Array& x = t.value_of(ia);
    std::vector<double> gx(x.size());
    kernels::gelu_backward(x.data(), t.grad_of(self).data(), gx.data(), x.size());
    add_into(t.grad_buffer(ia), gx.data());
  });
}

Var l2_normalize(Var a) {
  const Array& av = a.value();
  const std::size_t n = av.shape().back();
  const std::size_t rows = av.size() / n;
  Array r(av.shape());
  std::vector<double> norms(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += av[i * n + j] * av[i * n + j];
    if (ss == 0.0) throw NumericError("l2_normalize of a zero vector");
    const double norm = std::sqrt(ss);
    norms[i] = norm;
    for (std::size_t j = 0; j < n; ++j) r[i * n + j] = av[i * n + j] / norm;
  }
  const std::size_t ia = a.id;
  return a.tape->record("l2_normalize", std::move(r), {ia},
                        [ia, rows, n, norms = std::move(norms)](Tape& t, std::size_t self) {
                          const Array& y = t.value_of(self);
                          const Array& g = t.grad_of(self);
                          Array& ga = t.grad_buffer(ia);
                          for (std::size_t i = 0; i < rows; ++i) {
                            double dot = 0.0;
                            for (std::size_t j = 0; j < n; ++j) dot += y[i * n + j] * g[i * n + j];
                            for (std::size_t j = 0; j < n; ++j) {
                              ga[i * n + j] += (g[i * n + j] - y[i * n + j] * dot) / norms[i];
                            }
                          }
                        });
}

// ----------------------------------------------------------------- structure

Var reshape(Var a, Shape shape) {
  Array r = a.value();
  r.reshape(std::move(shape));
  const std::size_t ia = a.id;
  return a.tape->record("reshape", std::move(r), {ia}, [ia](Tape& t, std::size_t self) {
    add_into(t.grad_buffer(ia), t.grad_of(self).data());
  });
}

Var permute(Var a, const std::vector<std::size_t>& perm) {
  const Array& av = a.value();
  const std::size_t r = av.rank();
  if (perm.size() != r) throw ShapeError("permutation rank mismatch for " + shape_string(av.shape()));
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw ShapeError("invalid permutation for " + shape_string(av.shape()));
    seen[p] = true;
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t d = r - 1; d-- > 0;) in_strides[d] = in_strides[d + 1] * av.dim(d + 1);
  Shape out(r);
  std::vector<std::size_t> strides(r);
  for (std::size_t d = 0; d < r; ++d) {
    out[d] = av.dim(perm[d]);
    strides[d] = in_strides[perm[d]];
  }
  // src[i] is the input offset of output element i.
  std::vector<std::size_t> src(av.size());
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < src.size(); ++i) {
      src[i] = off;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        off += strides[d];
        if (idx[d] < out[d]) break;
        off -= strides[d] * idx[d];
        idx[d] = 0;
      }
    }
  }
  Array res(out);
  for (std::size_t i = 0; i < src.size(); ++i) res[i] = av[src[i]];
  const std::size_t ia = a.id;
  return a.tape->record("permute", std::move(res), {ia},
                        [ia, src = std::move(src)](Tape& t, std::size_t self) {
                          const Array& g = t.grad_of(self);
                          Array& ga = t.grad_buffer(ia);
                          for (std::size_t i = 0; i < src.size(); ++i) ga[src[i]] += g[i];
                        });
}

Var broadcast_to(Var a, Shape shape) {
  const Array& av = a.value();
  if (broadcast_shape(av.shape(), shape) != shape) {
    throw ShapeError("cannot broadcast " + shape_string(av.shape()) + " to " + shape_string(shape));
  }
  const Array unit({1}, 0.0);
  Array r = broadcast_apply(av, unit, shape, [](double x, double) { return x; });
  const std::size_t ia = a.id;
  return a.tape->record("broadcast_to", std::move(r), {ia}, [ia](Tape& t, std::size_t self) {
    const Shape& out = t.value_of(self).shape();
    reduce_broadcast_grad(t.grad_of(self), out, broadcast_strides(t.value_of(ia).shape(), out),
                          t.grad_buffer(ia));
  });
}

Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Array& av = a.value();
  const AxisSplit s = split_at(av.shape(), axis);
  if (begin >= end || end > s.n) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of axis " +
                     std::to_string(axis) + " in " + shape_string(av.shape()));
  }
  const std::size_t len = end - begin;
  Shape out = av.shape();
  out[axis] = len;
  Array r(out);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::memcpy(r.data() + o * len * s.inner, av.data() + (o * s.n + begin) * s.inner,
                len * s.inner * sizeof(double));
  }
  const std::size_t ia = a.id;
  return a.tape->record("slice", std::move(r), {ia}, [ia, s, begin, len](Tape& t, std::size_t self) {
    const double* g = t.grad_of(self).data();
    double* ga = t.grad_buffer(ia).data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      const double* src = g + o * len * s.inner;
      double* dst = ga + (o * s.n + begin) * s.inner;
      for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
    }
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of no arrays");
  const Shape& first = parts[0].value().shape();
  if (axis >= first.size()) throw ShapeError("concat axis out of range for " + shape_string(first));
  std::vector<std::size_t> lens;
  std::vector<std::size_t> ids;
  std::size_t total = 0;
  for (const Var& p : parts) {
    same_tape(parts[0], p);
    Shape s = p.value().shape();
    if (s.size() != first.size()) throw ShapeError("concat rank mismatch: " + shape_string(first) + " and " + shape_string(s));
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) {
        throw ShapeError("concat shape mismatch: " + shape_string(first) + " and " + shape_string(s));
      }
    }
    lens.push_back(s[axis]);
    ids.push_back(p.id);
    total += s[axis];
  }
  const AxisSplit s = split_at(first, axis);
  Shape out = first;
  out[axis] = total;
  Array r(out);
  std::size_t at = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Array& pv = parts[p].value();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::memcpy(r.data() + (o * total + at) * s.inner, pv.data() + o * lens[p] * s.inner,
                  lens[p] * s.inner * sizeof(double));
    }
    at += lens[p];
  }
  return parts[0].tape->record("concat", std::move(r), ids,
                               [ids, lens, s, total](Tape& t, std::size_t self) {
                                 const double* g = t.grad_of(self).data();
                                 std::size_t at = 0;
                                 for (std::size_t p = 0; p < ids.size(); ++p) {
                                   if (t.needs_grad(ids[p])) {
                                     double* ga = t.grad_buffer(ids[p]).data();
                                     for (std::size_t o = 0; o < s.outer; ++o) {
                                       const double* src = g + (o * total + at) * s.inner;
                                       double* dst = ga + o * lens[p] * s.inner;
                                       for (std::size_t i = 0; i < lens[p] * s.inner; ++i) dst[i] += src[i];
                                     }
                                   }
                                   at += lens[p];
                                 }
                               });
}

Var gather_columns(Var a, std::vector<long> index) {
  const Array& av = a.value();
  if (av.rank() != 2) throw ShapeError("gather_columns expects [G, L], got " + shape_string(av.shape()));
  const std::size_t groups = av.dim(0);
  const std::size_t len = av.dim(1);
  for (long i : index) {
    if (i < -1 || i >= static_cast<long>(len)) {
      throw ShapeError("gather index " + std::to_string(i) + " out of range for " + shape_string(av.shape()));
    }
  }
  const std::size_t cols = index.size();
  Array r({groups, cols});
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t j = 0; j < cols; ++j) {
      r[g * cols + j] = index[j] < 0 ? 0.0 : av[g * len + static_cast<std::size_t>(index[j])];
    }
  }
  const std::size_t ia = a.id;
  return a.tape->record("gather_columns", std::move(r), {ia},
                        [ia, groups, len, cols, index = std::move(index)](Tape& t, std::size_t self) {
                          const Array& g = t.grad_of(self);
                          Array& ga = t.grad_buffer(ia);
                          for (std::size_t grp = 0; grp < groups; ++grp) {
                            for (std::size_t j = 0; j < cols; ++j) {
                              if (index[j] >= 0) {
                                ga[grp * len + static_cast<std::size_t>(index[j])] += g[grp * cols + j];
                              }
                            }
                          }
                        });
}

}  // namespace ni::ad
