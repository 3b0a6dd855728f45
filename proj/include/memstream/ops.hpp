#pragma once

// Differentiable operations over Tensor. Forward computes values eagerly;
// each op registers a backward closure on the tape. Elementwise binaries
// broadcast extent-1 axes (right-aligned); matmul broadcasts leading batch
// dims. The dense inner product goes through BLAS, everything else is plain
// loops.

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <vector>

#include "memstream/tensor.hpp"

namespace memstream {

namespace detail {

inline void dgemm(bool trans_a, bool trans_b, long m, long n, long k,
                  double alpha, const double* a, long lda, const double* b,
                  long ldb, double beta, double* c, long ldc) {
  // Pin BLAS to one thread: reductions stay bit-reproducible across
  // machines, and concurrency lives at the experiment level instead.
  [[maybe_unused]] static const bool pinned = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
              static_cast<int>(ldc));
}

// --- broadcasting -----------------------------------------------------------

struct BroadcastPlan {
  Shape out_shape;
  std::vector<long> dims;    // output extents, outermost first
  std::vector<long> stride_a;  // element strides, 0 on broadcast axes
  std::vector<long> stride_b;
  long tail = 1;  // contiguous common suffix handled by the inner loop
};

inline BroadcastPlan broadcast_plan(const Shape& a, const Shape& b,
                                    const char* op) {
  const int na = static_cast<int>(a.size()), nb = static_cast<int>(b.size());
  const int nd = std::max(na, nb);
  BroadcastPlan plan;
  plan.out_shape.resize(nd);
  std::vector<long> ea(nd, 1), eb(nd, 1);
  for (int i = 0; i < na; ++i) ea[nd - na + i] = a[i];
  for (int i = 0; i < nb; ++i) eb[nd - nb + i] = b[i];
  for (int i = 0; i < nd; ++i) {
    if (ea[i] == eb[i] || ea[i] == 1 || eb[i] == 1) {
      plan.out_shape[i] = std::max(ea[i], eb[i]);
    } else {
      throw ShapeError(msg(op, ": shapes ", shape_str(a), " and ",
                           shape_str(b), " are not broadcastable"));
    }
  }
  // Element strides of each operand laid out over the output shape.
  std::vector<long> sa(nd, 0), sb(nd, 0);
  long acc = 1;
  for (int i = nd - 1; i >= 0; --i) {
    sa[i] = (ea[i] == 1) ? 0 : acc;
    if (ea[i] != 1) acc *= ea[i];
  }
  acc = 1;
  for (int i = nd - 1; i >= 0; --i) {
    sb[i] = (eb[i] == 1) ? 0 : acc;
    if (eb[i] != 1) acc *= eb[i];
  }
  // Fold the contiguous suffix where neither side broadcasts.
  int cut = nd;
  long tail = 1;
  while (cut > 0 && ea[cut - 1] == eb[cut - 1]) {
    tail *= ea[cut - 1];
    --cut;
  }
  plan.tail = tail;
  // sa/sb are element strides over the full shapes, so the prefix before the
  // folded suffix can be used as-is for the outer odometer.
  plan.dims.assign(plan.out_shape.begin(), plan.out_shape.begin() + cut);
  plan.stride_a.assign(sa.begin(), sa.begin() + cut);
  plan.stride_b.assign(sb.begin(), sb.begin() + cut);
  return plan;
}

/// Calls fn(out_offset, a_offset, b_offset, tail_len) for every contiguous
/// tail run of the broadcast iteration space.
template <typename Fn>
void for_each_bcast(const BroadcastPlan& plan, Fn&& fn) {
  const int nd = static_cast<int>(plan.dims.size());
  if (nd == 0) {
    fn(0L, 0L, 0L, plan.tail);
    return;
  }
  std::vector<long> idx(nd, 0);
  long oa = 0, ob = 0, oo = 0;
  for (;;) {
    fn(oo, oa, ob, plan.tail);
    int d = nd - 1;
    for (; d >= 0; --d) {
      ++idx[d];
      oa += plan.stride_a[d];
      ob += plan.stride_b[d];
      if (idx[d] < plan.dims[d]) break;
      oa -= plan.stride_a[d] * plan.dims[d];
      ob -= plan.stride_b[d] * plan.dims[d];
      idx[d] = 0;
    }
    if (d < 0) return;
    oo += plan.tail;
    // oo tracks output linearly: output never broadcasts.
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

namespace detail {

enum class BinKind { Add, Sub, Mul };

inline Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind,
                        const char* name) {
  BroadcastPlan plan = broadcast_plan(a.shape(), b.shape(), name);
  std::vector<double> out(shape_numel(plan.out_shape));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data();
  long cursor = 0;
  for_each_bcast(plan, [&](long, long oa, long ob, long tail) {
    const double* x = pa + oa;
    const double* y = pb + ob;
    double* o = po + cursor;
    switch (kind) {
      case BinKind::Add:
        for (long i = 0; i < tail; ++i) o[i] = x[i] + y[i];
        break;
      case BinKind::Sub:
        for (long i = 0; i < tail; ++i) o[i] = x[i] - y[i];
        break;
      case BinKind::Mul:
        for (long i = 0; i < tail; ++i) o[i] = x[i] * y[i];
        break;
    }
    cursor += tail;
  });

  Node* na = a.node().get();
  Node* nb = b.node().get();
  return make_op_result(
      name, plan.out_shape, std::move(out), {a, b},
      [na, nb, plan, kind](Node& n) {
        const double* g = n.grad.data();
        double* ga = na->requires_grad ? na->grad_buffer() : nullptr;
        double* gb = nb->requires_grad ? nb->grad_buffer() : nullptr;
        const double* va = na->value.data();
        const double* vb = nb->value.data();
        long cursor = 0;
        for_each_bcast(plan, [&](long, long oa, long ob, long tail) {
          const double* go = g + cursor;
          switch (kind) {
            case BinKind::Add:
              if (ga)
                for (long i = 0; i < tail; ++i) ga[oa + i] += go[i];
              if (gb)
                for (long i = 0; i < tail; ++i) gb[ob + i] += go[i];
              break;
            case BinKind::Sub:
              if (ga)
                for (long i = 0; i < tail; ++i) ga[oa + i] += go[i];
              if (gb)
                for (long i = 0; i < tail; ++i) gb[ob + i] -= go[i];
              break;
            case BinKind::Mul:
              if (ga)
                for (long i = 0; i < tail; ++i)
                  ga[oa + i] += go[i] * vb[ob + i];
              if (gb)
                for (long i = 0; i < tail; ++i)
                  gb[ob + i] += go[i] * va[oa + i];
              break;
          }
          cursor += tail;
        });
      });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(a, b, detail::BinKind::Add, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(a, b, detail::BinKind::Sub, "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(a, b, detail::BinKind::Mul, "mul");
}

inline Tensor mul_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data());
  for (double& v : out) v *= s;
  detail::Node* na = a.node().get();
  return detail::make_op_result("mul_scalar", a.shape(), std::move(out), {a},
                                [na, s](detail::Node& n) {
                                  if (!na->requires_grad) return;
                                  double* ga = na->grad_buffer();
                                  const double* g = n.grad.data();
                                  for (long i = 0; i < n.numel(); ++i)
                                    ga[i] += g[i] * s;
                                });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data());
  for (double& v : out) v += s;
  detail::Node* na = a.node().get();
  return detail::make_op_result("add_scalar", a.shape(), std::move(out), {a},
                                [na](detail::Node& n) {
                                  if (!na->requires_grad) return;
                                  double* ga = na->grad_buffer();
                                  const double* g = n.grad.data();
                                  for (long i = 0; i < n.numel(); ++i)
                                    ga[i] += g[i];
                                });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

/// fwd(x) -> y, dfn(x, y) -> dy/dx.
template <typename F, typename D>
Tensor unary_op(const Tensor& a, const char* name, F&& fwd, D&& dfn) {
  std::vector<double> out(a.numel());
  const double* pa = a.data().data();
  for (long i = 0; i < a.numel(); ++i) out[i] = fwd(pa[i]);
  Node* na = a.node().get();
  return make_op_result(name, a.shape(), std::move(out), {a},
                        [na, dfn](Node& n) {
                          if (!na->requires_grad) return;
                          double* ga = na->grad_buffer();
                          const double* g = n.grad.data();
                          const double* x = na->value.data();
                          const double* y = n.value.data();
                          for (long i = 0; i < n.numel(); ++i)
                            ga[i] += g[i] * dfn(x[i], y[i]);
                        });
}

}  // namespace detail

inline Tensor exp_op(const Tensor& a) {
  return detail::unary_op(
      a, "exp", [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

inline Tensor tanh_op(const Tensor& a) {
  return detail::unary_op(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sqrt_op(const Tensor& a) {
  return detail::unary_op(
      a, "sqrt", [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

/// GELU, tanh approximation. The project's single nonlinearity.
inline Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return detail::unary_op(
      a, "gelu",
      [](double x) {
        return 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
      },
      [](double x, double) {
        const double u = kC * (x + kA * x * x * x);
        const double t = std::tanh(u);
        const double sech2 = 1.0 - t * t;
        return 0.5 * (1.0 + t) + 0.5 * x * sech2 * kC * (1.0 + 3.0 * kA * x * x);
      });
}

inline Tensor silu(const Tensor& a) {
  return detail::unary_op(
      a, "silu",
      [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

inline Tensor softplus(const Tensor& a) {
  return detail::unary_op(
      a, "softplus",
      [](double x) {
        return x > 0.0 ? x + std::log1p(std::exp(-x))
                       : std::log1p(std::exp(x));
      },
      [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

/// Clamp to [0,1] with pass-through gradient inside the interval.
inline Tensor clamp01(const Tensor& a) {
  return detail::unary_op(
      a, "clamp01",
      [](double x) { return std::min(1.0, std::max(0.0, x)); },
      [](double x, double) { return (x >= 0.0 && x <= 1.0) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Matrix multiplication
// ---------------------------------------------------------------------------

/// matmul(a [..,m,k], b [..,k,n]) -> [..,m,n]. Leading batch dims broadcast
/// (extent-1 or missing). Backward: dA = dC.B^T, dB = A^T.dC, reduced over
/// broadcast batch dims.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2) {
    throw ShapeError(msg("matmul requires ndim >= 2, got ",
                         shape_str(a.shape()), " and ", shape_str(b.shape())));
  }
  const long m = a.dim(-2), ka = a.dim(-1);
  const long kb = b.dim(-2), nn = b.dim(-1);
  if (ka != kb) {
    throw ShapeError(msg("matmul: inner extents disagree between ",
                         shape_str(a.shape()), " and ", shape_str(b.shape())));
  }
  Shape abatch(a.shape().begin(), a.shape().end() - 2);
  Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  detail::BroadcastPlan bp =
      detail::broadcast_plan(abatch, bbatch, "matmul batch dims");
  Shape out_shape = bp.out_shape;
  out_shape.push_back(m);
  out_shape.push_back(nn);

  const long batch = shape_numel(bp.out_shape);
  const long a_slice = m * ka, b_slice = ka * nn, o_slice = m * nn;

  // Batch strides in slice units for each operand.
  const int nd = static_cast<int>(bp.out_shape.size());
  std::vector<long> sa(nd, 0), sb(nd, 0), ea(nd, 1), eb(nd, 1);
  for (std::size_t i = 0; i < abatch.size(); ++i)
    ea[nd - abatch.size() + i] = abatch[i];
  for (std::size_t i = 0; i < bbatch.size(); ++i)
    eb[nd - bbatch.size() + i] = bbatch[i];
  long acc = 1;
  for (int i = nd - 1; i >= 0; --i) {
    sa[i] = (ea[i] == 1) ? 0 : acc;
    if (ea[i] != 1) acc *= ea[i];
  }
  acc = 1;
  for (int i = nd - 1; i >= 0; --i) {
    sb[i] = (eb[i] == 1) ? 0 : acc;
    if (eb[i] != 1) acc *= eb[i];
  }
  // Per-batch slice offsets (in slice units), resolved up front so the
  // backward closure carries plain tables instead of live references.
  std::vector<long> a_off(batch), b_off(batch);
  for (long flat = 0; flat < batch; ++flat) {
    long rest = flat, oa = 0, ob = 0;
    for (int d = nd - 1; d >= 0; --d) {
      const long e = bp.out_shape[d];
      const long i = rest % e;
      rest /= e;
      oa += i * sa[d];
      ob += i * sb[d];
    }
    a_off[flat] = oa;
    b_off[flat] = ob;
  }

  std::vector<double> out(batch * o_slice);
  const double* pa = a.data().data();
  const double* pb = b.data().data();

  const bool b_is_plain = bbatch.empty();
  if (b_is_plain && batch >= 1) {
    // [B.., m, k] x [k, n]: a folds into one tall gemm.
    detail::dgemm(false, false, batch * m, nn, ka, 1.0, pa, ka, pb, nn, 0.0,
                  out.data(), nn);
  } else {
    for (long i = 0; i < batch; ++i) {
      detail::dgemm(false, false, m, nn, ka, 1.0, pa + a_off[i] * a_slice, ka,
                    pb + b_off[i] * b_slice, nn, 0.0,
                    out.data() + i * o_slice, nn);
    }
  }

  detail::Node* na = a.node().get();
  detail::Node* nb = b.node().get();
  return detail::make_op_result(
      "matmul", out_shape, std::move(out), {a, b},
      [na, nb, m, ka, nn, batch, a_slice, b_slice, o_slice, b_is_plain,
       a_off = std::move(a_off), b_off = std::move(b_off)](detail::Node& n) {
        const double* g = n.grad.data();
        const double* va = na->value.data();
        const double* vb = nb->value.data();
        if (na->requires_grad) {
          double* ga = na->grad_buffer();
          if (b_is_plain) {
            detail::dgemm(false, true, batch * m, ka, nn, 1.0, g, nn, vb, nn,
                          1.0, ga, ka);
          } else {
            for (long i = 0; i < batch; ++i) {
              detail::dgemm(false, true, m, ka, nn, 1.0, g + i * o_slice, nn,
                            vb + b_off[i] * b_slice, nn, 1.0,
                            ga + a_off[i] * a_slice, ka);
            }
          }
        }
        if (nb->requires_grad) {
          double* gb = nb->grad_buffer();
          if (b_is_plain) {
            detail::dgemm(true, false, ka, nn, batch * m, 1.0, va, ka, g, nn,
                          1.0, gb, nn);
          } else {
            for (long i = 0; i < batch; ++i) {
              detail::dgemm(true, false, ka, nn, m, 1.0,
                            va + a_off[i] * a_slice, ka, g + i * o_slice, nn,
                            1.0, gb + b_off[i] * b_slice, nn);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Max-subtracted softmax along `axis`; rows sum to 1 for any finite input.
inline Tensor softmax(const Tensor& a, int axis) {
  const int nd = a.ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) {
    throw ShapeError(
        msg("softmax: axis out of range for shape ", shape_str(a.shape())));
  }
  const long n_axis = a.shape()[axis];
  long inner = 1, outer = 1;
  for (int i = axis + 1; i < nd; ++i) inner *= a.shape()[i];
  for (int i = 0; i < axis; ++i) outer *= a.shape()[i];

  std::vector<double> out(a.numel());
  const double* x = a.data().data();
  for (long o = 0; o < outer; ++o) {
    for (long in = 0; in < inner; ++in) {
      const long base = o * n_axis * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (long j = 0; j < n_axis; ++j)
        mx = std::max(mx, x[base + j * inner]);
      double sum = 0.0;
      for (long j = 0; j < n_axis; ++j) {
        const double e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (long j = 0; j < n_axis; ++j) out[base + j * inner] *= inv;
    }
  }

  detail::Node* na = a.node().get();
  return detail::make_op_result(
      "softmax", a.shape(), std::move(out), {a},
      [na, n_axis, inner, outer](detail::Node& n) {
        if (!na->requires_grad) return;
        double* ga = na->grad_buffer();
        const double* g = n.grad.data();
        const double* y = n.value.data();
        for (long o = 0; o < outer; ++o) {
          for (long in = 0; in < inner; ++in) {
            const long base = o * n_axis * inner + in;
            double dot = 0.0;
            for (long j = 0; j < n_axis; ++j) {
              const long idx = base + j * inner;
              dot += y[idx] * g[idx];
            }
            for (long j = 0; j < n_axis; ++j) {
              const long idx = base + j * inner;
              ga[idx] += y[idx] * (g[idx] - dot);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Fused attention probabilities
// ---------------------------------------------------------------------------

namespace detail {

/// Visible-key prefix length for query row i under the frame-causal rule:
/// memory rows read only memory; frame tokens read all memory plus frames up
/// to their own. Keys are laid out memory-first, so visibility is a prefix.
inline long causal_prefix(long i, long t_k, long n_prepended,
                          long tokens_per_frame, bool causal) {
  if (!causal) return t_k;
  if (i < n_prepended) return n_prepended;
  const long fq = (i - n_prepended) / tokens_per_frame;
  return n_prepended + (fq + 1) * tokens_per_frame;
}

}  // namespace detail

/// Fused scaled-dot-product attention weights:
/// softmax(scale * q.k^T + frame-causal mask) in one op. q [B,H,Tq,dh] and
/// k [B,H,Tk,dh] give probs [B,H,Tq,Tk]; hidden entries are exactly zero.
/// Numerically equal to the mul_scalar/mask-add/softmax chain (hidden scores
/// sit at -1e30 there, which underflows to zero weight), but touches one
/// [Tq,Tk] buffer per head instead of four.
inline Tensor attention_probs(const Tensor& q, const Tensor& k, double scale,
                              bool causal, long n_prepended,
                              long tokens_per_frame) {
  if (q.ndim() != 4 || k.ndim() != 4) {
    throw ShapeError(msg("attention_probs expects [B,H,T,dh] inputs, got ",
                         shape_str(q.shape()), " and ", shape_str(k.shape())));
  }
  const long b = q.dim(0), h = q.dim(1), tq = q.dim(2), dh = q.dim(3);
  const long tk = k.dim(2);
  if (k.dim(0) != b || k.dim(1) != h || k.dim(3) != dh) {
    throw ShapeError(msg("attention_probs: query/key shapes disagree: ",
                         shape_str(q.shape()), " vs ", shape_str(k.shape())));
  }
  if (n_prepended < 0 || tokens_per_frame <= 0) {
    throw ContractError("attention_probs: bad mask geometry");
  }
  if (causal) {
    const long frames_q = (tq - n_prepended) / tokens_per_frame;
    const long frames_k = (tk - n_prepended) / tokens_per_frame;
    if (frames_q * tokens_per_frame + n_prepended != tq ||
        frames_k * tokens_per_frame + n_prepended != tk) {
      throw ContractError(msg("attention: causal sequence lengths ", tq, "/",
                              tk, " not aligned to ", tokens_per_frame,
                              " tokens per frame with ", n_prepended,
                              " prepended"));
    }
    if (frames_q != frames_k) {
      throw ContractError(
          msg("attention: causal query/key frame counts differ (", frames_q,
              " vs ", frames_k, ")"));
    }
  }

  const long bh = b * h;
  const long q_slice = tq * dh, k_slice = tk * dh, o_slice = tq * tk;
  std::vector<double> out(bh * o_slice);
  const double* qp = q.data().data();
  const double* kp = k.data().data();
  for (long s = 0; s < bh; ++s) {
    double* op = out.data() + s * o_slice;
    detail::dgemm(false, true, tq, tk, dh, scale, qp + s * q_slice, dh,
                  kp + s * k_slice, dh, 0.0, op, tk);
    for (long i = 0; i < tq; ++i) {
      const long vis =
          detail::causal_prefix(i, tk, n_prepended, tokens_per_frame, causal);
      double* row = op + i * tk;
      double mx = -std::numeric_limits<double>::infinity();
      for (long j = 0; j < vis; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (long j = 0; j < vis; ++j) {
        const double e = std::exp(row[j] - mx);
        row[j] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (long j = 0; j < vis; ++j) row[j] *= inv;
      for (long j = vis; j < tk; ++j) row[j] = 0.0;
    }
  }

  detail::Node* nq = q.node().get();
  detail::Node* nk = k.node().get();
  return detail::make_op_result(
      "attention_probs", {b, h, tq, tk}, std::move(out), {q, k},
      [nq, nk, bh, tq, tk, dh, q_slice, k_slice, o_slice, scale, causal,
       n_prepended, tokens_per_frame](detail::Node& n) {
        const double* g = n.grad.data();
        const double* y = n.value.data();
        const double* qv = nq->value.data();
        const double* kv = nk->value.data();
        // Scratch for dScores; every entry is written below, so skip the
        // zero-initialization a vector would do.
        const auto ds_store = std::make_unique_for_overwrite<double[]>(
            static_cast<std::size_t>(o_slice));
        double* const ds = ds_store.get();
        for (long s = 0; s < bh; ++s) {
          const double* gs = g + s * o_slice;
          const double* ys = y + s * o_slice;
          for (long i = 0; i < tq; ++i) {
            const long vis = detail::causal_prefix(i, tk, n_prepended,
                                                   tokens_per_frame, causal);
            const long base = i * tk;
            double dot = 0.0;
            for (long j = 0; j < vis; ++j) {
              dot += ys[base + j] * gs[base + j];
            }
            for (long j = 0; j < vis; ++j) {
              ds[base + j] = ys[base + j] * (gs[base + j] - dot);
            }
            for (long j = vis; j < tk; ++j) ds[base + j] = 0.0;
          }
          if (nq->requires_grad) {
            detail::dgemm(false, false, tq, dh, tk, scale, ds, tk,
                          kv + s * k_slice, dh, 1.0,
                          nq->grad_buffer() + s * q_slice, dh);
          }
          if (nk->requires_grad) {
            detail::dgemm(true, false, tk, dh, tq, scale, ds, tk,
                          qv + s * q_slice, dh, 1.0,
                          nk->grad_buffer() + s * k_slice, dh);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Layer normalization (last axis)
// ---------------------------------------------------------------------------

/// Per-vector standardization over the last axis followed by gamma/beta.
/// gamma and beta broadcast: either shape [d] or any shape broadcastable to
/// x (extent-1 axes), which adaptive-norm modulation relies on.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, double eps = 1e-5) {
  const long d = x.dim(-1);
  if (gamma.ndim() >= 1 && gamma.dim(-1) != d && gamma.dim(-1) != 1) {
    throw ShapeError(msg("layer_norm: gamma shape ", shape_str(gamma.shape()),
                         " does not match feature dim ", d));
  }
  const long rows = x.numel() / d;

  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  const double* px = x.data().data();
  for (long r = 0; r < rows; ++r) {
    const double* v = px + r * d;
    double mean = 0.0;
    for (long i = 0; i < d; ++i) mean += v[i];
    mean /= d;
    double var = 0.0;
    for (long i = 0; i < d; ++i) {
      const double c = v[i] - mean;
      var += c * c;
    }
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    double* h = xhat.data() + r * d;
    for (long i = 0; i < d; ++i) h[i] = (v[i] - mean) * is;
  }

  detail::Node* nx = x.node().get();
  Tensor normalized = detail::make_op_result(
      "layer_norm", x.shape(), std::move(xhat), {x},
      [nx, d, rows, inv_std](detail::Node& n) {
        if (!nx->requires_grad) return;
        double* gx = nx->grad_buffer();
        const double* g = n.grad.data();
        const double* h = n.value.data();  // xhat
        for (long r = 0; r < rows; ++r) {
          const double* gr = g + r * d;
          const double* hr = h + r * d;
          double sum_g = 0.0, sum_gh = 0.0;
          for (long i = 0; i < d; ++i) {
            sum_g += gr[i];
            sum_gh += gr[i] * hr[i];
          }
          const double is = inv_std[r];
          double* gxr = gx + r * d;
          for (long i = 0; i < d; ++i) {
            gxr[i] += is * (gr[i] - sum_g / d - hr[i] * sum_gh / d);
          }
        }
      });
  return add(mul(normalized, gamma), beta);
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (const double v : a.data()) s += v;
  detail::Node* na = a.node().get();
  return detail::make_op_result("sum", Shape{}, {s}, {a},
                                [na](detail::Node& n) {
                                  if (!na->requires_grad) return;
                                  double* ga = na->grad_buffer();
                                  const double g = n.grad[0];
                                  for (long i = 0; i < na->numel(); ++i)
                                    ga[i] += g;
                                });
}

inline Tensor mean_all(const Tensor& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

/// Sum over one axis (removed from the shape).
inline Tensor sum_axis(const Tensor& a, int axis) {
  const int nd = a.ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) {
    throw ShapeError(
        msg("sum_axis: axis out of range for shape ", shape_str(a.shape())));
  }
  const long n_axis = a.shape()[axis];
  long inner = 1, outer = 1;
  for (int i = axis + 1; i < nd; ++i) inner *= a.shape()[i];
  for (int i = 0; i < axis; ++i) outer *= a.shape()[i];
  Shape out_shape;
  for (int i = 0; i < nd; ++i)
    if (i != axis) out_shape.push_back(a.shape()[i]);

  std::vector<double> out(outer * inner, 0.0);
  const double* x = a.data().data();
  for (long o = 0; o < outer; ++o)
    for (long j = 0; j < n_axis; ++j) {
      const double* src = x + (o * n_axis + j) * inner;
      double* dst = out.data() + o * inner;
      for (long in = 0; in < inner; ++in) dst[in] += src[in];
    }

  detail::Node* na = a.node().get();
  return detail::make_op_result(
      "sum_axis", out_shape, std::move(out), {a},
      [na, n_axis, inner, outer](detail::Node& n) {
        if (!na->requires_grad) return;
        double* ga = na->grad_buffer();
        const double* g = n.grad.data();
        for (long o = 0; o < outer; ++o)
          for (long j = 0; j < n_axis; ++j) {
            double* dst = ga + (o * n_axis + j) * inner;
            const double* src = g + o * inner;
            for (long in = 0; in < inner; ++in) dst[in] += src[in];
          }
      });
}

inline Tensor mean_axis(const Tensor& a, int axis) {
  const int nd = a.ndim();
  const int ax = axis < 0 ? axis + nd : axis;
  return mul_scalar(sum_axis(a, axis),
                    1.0 / static_cast<double>(a.shape()[ax]));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  long known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < new_shape.size(); ++i) {
    if (new_shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one -1 extent");
      infer = static_cast<int>(i);
    } else {
      known *= new_shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || a.numel() % known != 0) {
      throw ShapeError(msg("reshape: cannot infer extent for ",
                           shape_str(a.shape())));
    }
    new_shape[infer] = a.numel() / known;
  }
  if (shape_numel(new_shape) != a.numel()) {
    throw ShapeError(msg("reshape: ", shape_str(a.shape()), " -> ",
                         shape_str(new_shape), " changes element count"));
  }
  detail::Node* na = a.node().get();
  return detail::make_op_result("reshape", new_shape,
                                std::vector<double>(a.data()), {a},
                                [na](detail::Node& n) {
                                  if (!na->requires_grad) return;
                                  double* ga = na->grad_buffer();
                                  const double* g = n.grad.data();
                                  for (long i = 0; i < n.numel(); ++i)
                                    ga[i] += g[i];
                                });
}

inline Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  const int nd = a.ndim();
  if (static_cast<int>(perm.size()) != nd) {
    throw ShapeError(msg("permute: order has ", perm.size(),
                         " entries for shape ", shape_str(a.shape())));
  }
  Shape out_shape(nd);
  for (int i = 0; i < nd; ++i) out_shape[i] = a.shape()[perm[i]];

  std::vector<long> in_strides(nd, 1), out_strides(nd, 1);
  for (int i = nd - 2; i >= 0; --i)
    in_strides[i] = in_strides[i + 1] * a.shape()[i + 1];
  for (int i = nd - 2; i >= 0; --i)
    out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
  // Stride of each output dim in the input layout.
  std::vector<long> src_stride(nd);
  for (int i = 0; i < nd; ++i) src_stride[i] = in_strides[perm[i]];

  std::vector<double> out(a.numel());
  const double* x = a.data().data();
  std::vector<long> idx(nd, 0);
  long src = 0;
  for (long o = 0; o < a.numel(); ++o) {
    out[o] = x[src];
    for (int d = nd - 1; d >= 0; --d) {
      ++idx[d];
      src += src_stride[d];
      if (idx[d] < out_shape[d]) break;
      src -= src_stride[d] * out_shape[d];
      idx[d] = 0;
    }
  }

  detail::Node* na = a.node().get();
  return detail::make_op_result(
      "permute", out_shape, std::move(out), {a},
      [na, out_shape, src_stride, nd](detail::Node& n) {
        if (!na->requires_grad) return;
        double* ga = na->grad_buffer();
        const double* g = n.grad.data();
        std::vector<long> idx(nd, 0);
        long src = 0;
        for (long o = 0; o < n.numel(); ++o) {
          ga[src] += g[o];
          for (int d = nd - 1; d >= 0; --d) {
            ++idx[d];
            src += src_stride[d];
            if (idx[d] < out_shape[d]) break;
            src -= src_stride[d] * out_shape[d];
            idx[d] = 0;
          }
        }
      });
}

/// Contiguous slice [start, start+len) along `axis`.
inline Tensor slice(const Tensor& a, int axis, long start, long len) {
  const int nd = a.ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) {
    throw ShapeError(
        msg("slice: axis out of range for shape ", shape_str(a.shape())));
  }
  const long extent = a.shape()[axis];
  if (start < 0 || len < 0 || start + len > extent) {
    throw ShapeError(msg("slice: range [", start, ",", start + len,
                         ") exceeds extent ", extent, " of shape ",
                         shape_str(a.shape())));
  }
  long inner = 1, outer = 1;
  for (int i = axis + 1; i < nd; ++i) inner *= a.shape()[i];
  for (int i = 0; i < axis; ++i) outer *= a.shape()[i];
  Shape out_shape = a.shape();
  out_shape[axis] = len;

  std::vector<double> out(outer * len * inner);
  const double* x = a.data().data();
  for (long o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * len * inner,
                x + (o * extent + start) * inner,
                sizeof(double) * len * inner);
  }

  detail::Node* na = a.node().get();
  return detail::make_op_result(
      "slice", out_shape, std::move(out), {a},
      [na, outer, inner, extent, start, len](detail::Node& n) {
        if (!na->requires_grad) return;
        double* ga = na->grad_buffer();
        const double* g = n.grad.data();
        for (long o = 0; o < outer; ++o) {
          double* dst = ga + (o * extent + start) * inner;
          const double* src = g + o * len * inner;
          for (long i = 0; i < len * inner; ++i) dst[i] += src[i];
        }
      });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const int nd = parts[0].ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) {
    throw ShapeError(msg("concat: axis out of range for shape ",
                         shape_str(parts[0].shape())));
  }
  long total = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != nd) {
      throw ShapeError("concat: rank mismatch between inputs");
    }
    for (int i = 0; i < nd; ++i) {
      if (i != axis && p.shape()[i] != parts[0].shape()[i]) {
        throw ShapeError(msg("concat: shape ", shape_str(p.shape()),
                             " incompatible with ",
                             shape_str(parts[0].shape()), " on axis ", i));
      }
    }
    total += p.shape()[axis];
  }
  Shape out_shape = parts[0].shape();
  out_shape[axis] = total;
  long inner = 1, outer = 1;
  for (int i = axis + 1; i < nd; ++i) inner *= out_shape[i];
  for (int i = 0; i < axis; ++i) outer *= out_shape[i];

  std::vector<double> out(shape_numel(out_shape));
  long pos = 0;
  for (const Tensor& p : parts) {
    const long ext = p.shape()[axis];
    const double* x = p.data().data();
    for (long o = 0; o < outer; ++o) {
      std::memcpy(out.data() + (o * total + pos) * inner,
                  x + o * ext * inner, sizeof(double) * ext * inner);
    }
    pos += ext;
  }

  std::vector<detail::Node*> nodes;
  std::vector<long> extents;
  for (const Tensor& p : parts) {
    nodes.push_back(p.node().get());
    extents.push_back(p.shape()[axis]);
  }
  return detail::make_op_result(
      "concat", out_shape, std::move(out), parts,
      [nodes, extents, outer, inner, total](detail::Node& n) {
        const double* g = n.grad.data();
        long pos = 0;
        for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
          const long ext = extents[pi];
          if (nodes[pi]->requires_grad) {
            double* gp = nodes[pi]->grad_buffer();
            for (long o = 0; o < outer; ++o) {
              const double* src = g + (o * total + pos) * inner;
              double* dst = gp + o * ext * inner;
              for (long i = 0; i < ext * inner; ++i) dst[i] += src[i];
            }
          }
          pos += ext;
        }
      });
}

// ---------------------------------------------------------------------------
// Convolutions (im2col + gemm)
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const double* x, long ch, long h, long w, long kh, long kw,
                   long stride, long pad, long oh, long ow, double* col) {
  // col layout: [ch*kh*kw, oh*ow]
  for (long c = 0; c < ch; ++c) {
    for (long ki = 0; ki < kh; ++ki) {
      for (long kj = 0; kj < kw; ++kj) {
        double* row = col + ((c * kh + ki) * kw + kj) * (oh * ow);
        for (long oi = 0; oi < oh; ++oi) {
          const long ii = oi * stride + ki - pad;
          if (ii < 0 || ii >= h) {
            std::fill(row + oi * ow, row + (oi + 1) * ow, 0.0);
            continue;
          }
          for (long oj = 0; oj < ow; ++oj) {
            const long jj = oj * stride + kj - pad;
            row[oi * ow + oj] =
                (jj < 0 || jj >= w) ? 0.0 : x[(c * h + ii) * w + jj];
          }
        }
      }
    }
  }
}

inline void col2im(const double* col, long ch, long h, long w, long kh,
                   long kw, long stride, long pad, long oh, long ow,
                   double* x /* accumulated into */) {
  for (long c = 0; c < ch; ++c) {
    for (long ki = 0; ki < kh; ++ki) {
      for (long kj = 0; kj < kw; ++kj) {
        const double* row = col + ((c * kh + ki) * kw + kj) * (oh * ow);
        for (long oi = 0; oi < oh; ++oi) {
          const long ii = oi * stride + ki - pad;
          if (ii < 0 || ii >= h) continue;
          for (long oj = 0; oj < ow; ++oj) {
            const long jj = oj * stride + kj - pad;
            if (jj < 0 || jj >= w) continue;
            x[(c * h + ii) * w + jj] += row[oi * ow + oj];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation conv: x [N,C,H,W], w [F,C,kh,kw] -> [N,F,oh,ow] with
/// oh = (H + 2p - kh) / s + 1 (floor).
inline Tensor conv2d(const Tensor& x, const Tensor& w, long stride, long pad) {
  if (x.ndim() != 4 || w.ndim() != 4) {
    throw ShapeError(msg("conv2d expects 4-d input and kernel, got ",
                         shape_str(x.shape()), " and ", shape_str(w.shape())));
  }
  const long n = x.dim(0), c = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const long f = w.dim(0), wc = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (c != wc) {
    throw ShapeError(msg("conv2d: channel mismatch between input ",
                         shape_str(x.shape()), " and kernel ",
                         shape_str(w.shape())));
  }
  if (kh > h + 2 * pad || kw > ww + 2 * pad) {
    throw ShapeError(msg("conv2d: kernel ", shape_str(w.shape()),
                         " larger than padded input ", shape_str(x.shape()),
                         " at pad ", pad));
  }
  const long oh = (h + 2 * pad - kh) / stride + 1;
  const long ow = (ww + 2 * pad - kw) / stride + 1;
  const long ck = c * kh * kw;

  std::vector<double> out(n * f * oh * ow);
  std::vector<double> col(ck * oh * ow);
  const double* px = x.data().data();
  const double* pw = w.data().data();
  for (long i = 0; i < n; ++i) {
    detail::im2col(px + i * c * h * ww, c, h, ww, kh, kw, stride, pad, oh, ow,
                   col.data());
    detail::dgemm(false, false, f, oh * ow, ck, 1.0, pw, ck, col.data(),
                  oh * ow, 0.0, out.data() + i * f * oh * ow, oh * ow);
  }

  detail::Node* nx = x.node().get();
  detail::Node* nw = w.node().get();
  return detail::make_op_result(
      "conv2d", {n, f, oh, ow}, std::move(out), {x, w},
      [nx, nw, n, c, h, ww, f, kh, kw, stride, pad, oh, ow,
       ck](detail::Node& nd) {
        const double* g = nd.grad.data();
        const double* px = nx->value.data();
        const double* pw = nw->value.data();
        std::vector<double> col(ck * oh * ow);
        std::vector<double> dcol(ck * oh * ow);
        double* gw = nw->requires_grad ? nw->grad_buffer() : nullptr;
        double* gx = nx->requires_grad ? nx->grad_buffer() : nullptr;
        for (long i = 0; i < n; ++i) {
          const double* gslice = g + i * f * oh * ow;
          if (gw) {
            detail::im2col(px + i * c * h * ww, c, h, ww, kh, kw, stride, pad,
                           oh, ow, col.data());
            detail::dgemm(false, true, f, ck, oh * ow, 1.0, gslice, oh * ow,
                          col.data(), oh * ow, 1.0, gw, ck);
          }
          if (gx) {
            detail::dgemm(true, false, ck, oh * ow, f, 1.0, pw, ck, gslice,
                          oh * ow, 0.0, dcol.data(), oh * ow);
            detail::col2im(dcol.data(), c, h, ww, kh, kw, stride, pad, oh, ow,
                           gx + i * c * h * ww);
          }
        }
      });
}

/// Adjoint of conv2d: forward equals conv2d's input-gradient at identical
/// parameters. x [N,F,H,W], w [F,C,kh,kw] -> [N,C,(H-1)s-2p+kh, ...].
inline Tensor conv_transpose2d(const Tensor& x, const Tensor& w, long stride,
                               long pad) {
  if (x.ndim() != 4 || w.ndim() != 4) {
    throw ShapeError(msg("conv_transpose2d expects 4-d input and kernel, got ",
                         shape_str(x.shape()), " and ", shape_str(w.shape())));
  }
  const long n = x.dim(0), f = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const long wf = w.dim(0), c = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (f != wf) {
    throw ShapeError(msg("conv_transpose2d: channel mismatch between input ",
                         shape_str(x.shape()), " and kernel ",
                         shape_str(w.shape())));
  }
  const long yh = (h - 1) * stride - 2 * pad + kh;
  const long yw = (ww - 1) * stride - 2 * pad + kw;
  if (yh <= 0 || yw <= 0) {
    throw ShapeError(msg("conv_transpose2d: output would be empty for input ",
                         shape_str(x.shape()), " with kernel ",
                         shape_str(w.shape()), ", stride ", stride, ", pad ",
                         pad));
  }
  const long ck = c * kh * kw;

  std::vector<double> out(n * c * yh * yw, 0.0);
  std::vector<double> col(ck * h * ww);
  const double* px = x.data().data();
  const double* pw = w.data().data();
  for (long i = 0; i < n; ++i) {
    // col = W^T . x_slice, then scatter back to image space.
    detail::dgemm(true, false, ck, h * ww, f, 1.0, pw, ck,
                  px + i * f * h * ww, h * ww, 0.0, col.data(), h * ww);
    detail::col2im(col.data(), c, yh, yw, kh, kw, stride, pad, h, ww,
                   out.data() + i * c * yh * yw);
  }

  detail::Node* nx = x.node().get();
  detail::Node* nw = w.node().get();
  return detail::make_op_result(
      "conv_transpose2d", {n, c, yh, yw}, std::move(out), {x, w},
      [nx, nw, n, f, c, h, ww, kh, kw, stride, pad, yh, yw,
       ck](detail::Node& nd) {
        const double* g = nd.grad.data();
        const double* px = nx->value.data();
        const double* pw = nw->value.data();
        std::vector<double> col(ck * h * ww);
        double* gw = nw->requires_grad ? nw->grad_buffer() : nullptr;
        double* gx = nx->requires_grad ? nx->grad_buffer() : nullptr;
        for (long i = 0; i < n; ++i) {
          const double* gy = g + i * c * yh * yw;
          detail::im2col(gy, c, yh, yw, kh, kw, stride, pad, h, ww,
                         col.data());
          if (gx) {
            detail::dgemm(false, false, f, h * ww, ck, 1.0, pw, ck, col.data(),
                          h * ww, 1.0, gx + i * f * h * ww, h * ww);
          }
          if (gw) {
            detail::dgemm(false, true, f, ck, h * ww, 1.0, px + i * f * h * ww,
                          h * ww, col.data(), h * ww, 1.0, gw, ck);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

inline Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(msg("mse: shapes differ, ", shape_str(a.shape()), " vs ",
                         shape_str(b.shape())));
  }
  Tensor d = sub(a, b);
  return mean_all(mul(d, d));
}

}  // namespace memstream
