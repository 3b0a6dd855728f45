#pragma once

// Memory encoders: three ways of squeezing a latent-frame history into a
// compact readout the predictor can condition on.
//
//   Cache  — FIFO ring of the last K frames, stored gradient-detached.
//   Ssm    — diagonal selective state-space recurrence over pooled frames;
//            gradients flow through the recurrence within one training
//            window (state entering the window is detached by the trainer).
//   Titans — a small associative-memory MLP whose weights are updated online
//            by momentum-SGD on a retrieval loss ("surprise"); updates are
//            internal raw-double math, invisible to the autodiff tape.
//
// A MemoryState is owned by a single rollout; distinct episodes may advance
// their states on distinct threads.

#include <cmath>
#include <deque>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "memstream/codec.hpp"
#include "memstream/nn.hpp"
#include "memstream/ops.hpp"
#include "memstream/tensor.hpp"

namespace memstream {

enum class EncoderKind { None, Cache, Ssm, Titans };

inline const char* encoder_name(EncoderKind k) {
  switch (k) {
    case EncoderKind::None: return "none";
    case EncoderKind::Cache: return "cache";
    case EncoderKind::Ssm: return "ssm";
    case EncoderKind::Titans: return "titans";
  }
  return "?";
}

inline EncoderKind parse_encoder(const std::string& s) {
  if (s == "none") return EncoderKind::None;
  if (s == "cache") return EncoderKind::Cache;
  if (s == "ssm") return EncoderKind::Ssm;
  if (s == "titans") return EncoderKind::Titans;
  throw ContractError(msg("unknown encoder '", s,
                          "' (expected none|cache|ssm|titans)"));
}

struct MemoryConfig {
  long d_lat = 128;          // token width of incoming latent frames
  long cache_capacity = 16;  // K
  bool cache_pool = false;   // true: one mean token per cached frame
  long d_mem = 64;           // recurrent / associative hidden width
  long readout_tokens = 4;   // R trailing readouts kept for Ssm/Titans
  double titans_eta = 0.9;   // surprise momentum
  double titans_theta = 0.05;  // surprise step size
  double titans_alpha = 0.01;  // forget gate

  void validate() const {
    if (d_lat <= 0 || cache_capacity <= 0 || d_mem <= 0 ||
        readout_tokens <= 0) {
      throw ContractError("memory config: all sizes must be positive");
    }
    if (titans_eta < 0.0 || titans_eta > 1.0 || titans_alpha < 0.0 ||
        titans_alpha > 1.0 || titans_theta <= 0.0) {
      throw ContractError(
          "memory config: need eta,alpha in [0,1] and theta > 0");
    }
  }
};

/// Compact memory handed to the injectors. `tokens` is [M, width] where the
/// width depends on provenance (Cache/Titans: d_lat, Ssm: d_mem). With the
/// barrier set, no gradient reaches encoder-internal *state* through the
/// readout (adapter and query-projection gradients still flow).
struct MemoryReadout {
  Tensor tokens;
  EncoderKind provenance = EncoderKind::None;
  bool grad_barrier = true;

  long rows() const { return tokens.ndim() == 2 ? tokens.dim(0) : 0; }
};

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

struct CacheSlot {
  long time = 0;
  Tensor tokens;  // detached [P, d_lat]
};

struct CacheState {
  std::deque<CacheSlot> slots;
};

/// FIFO write. Stored values are detached; out-of-order times are refused.
inline void cache_write(CacheState& st, const MemoryConfig& cfg,
                        const LatentFrame& z) {
  if (!st.slots.empty() && z.source_time <= st.slots.back().time) {
    throw ContractError(msg("cache_write: time ", z.source_time,
                            " not after newest cached time ",
                            st.slots.back().time));
  }
  st.slots.push_back({z.source_time, z.tokens.detach()});
  while (static_cast<long>(st.slots.size()) > cfg.cache_capacity) {
    st.slots.pop_front();
  }
}

/// All cached frames oldest-first: either every patch token ([K·P, d_lat])
/// or one mean token per frame ([K, d_lat]) when cache_pool is set.
inline MemoryReadout cache_read(const CacheState& st,
                                const MemoryConfig& cfg) {
  MemoryReadout out;
  out.provenance = EncoderKind::Cache;
  out.grad_barrier = true;
  if (st.slots.empty()) return out;
  std::vector<Tensor> parts;
  parts.reserve(st.slots.size());
  for (const CacheSlot& slot : st.slots) {
    if (cfg.cache_pool) {
      parts.push_back(reshape(mean_axis(slot.tokens, 0), {1, cfg.d_lat}));
    } else {
      parts.push_back(slot.tokens);
    }
  }
  out.tokens = concat(parts, 0);
  return out;
}

// ---------------------------------------------------------------------------
// Ssm
// ---------------------------------------------------------------------------

/// Learned parameters of the diagonal selective recurrence. These live in
/// the model's ParamSet and train with the outer loss.
struct SsmParams {
  Tensor w_delta;  // [d_lat, 1]   step-size projection
  Tensor b_delta;  // [1, 1]       step-size bias
  Tensor a_log;    // [1, d_mem]   per-channel log decay rates
  Tensor w_b;      // [d_lat, 1]   input gate projection
  Tensor w_in;     // [d_lat, d_mem]
  Tensor w_gate;   // [d_lat, d_mem]
  Tensor w_out;    // [d_mem, d_mem]

  SsmParams() = default;

  SsmParams(const MemoryConfig& cfg, RandomSource& rng) {
    // Zero step-size projection keeps the initial decay input-independent;
    // the bias pins softplus(b_delta) = 0.05. Decay rates cover 1..d_mem so
    // channel i forgets on a ~1/(0.05·i) step timescale.
    w_delta = Tensor::zeros({cfg.d_lat, 1});
    b_delta = Tensor::full({1, 1}, std::log(std::expm1(0.05)));
    a_log = Tensor::zeros({1, cfg.d_mem});
    for (long i = 0; i < cfg.d_mem; ++i) {
      a_log.data()[i] = std::log(static_cast<double>(i + 1));
    }
    w_b = Tensor::trunc_normal({cfg.d_lat, 1}, rng, 0.02);
    w_in = Tensor::trunc_normal({cfg.d_lat, cfg.d_mem}, rng, 0.02);
    w_gate = Tensor::trunc_normal({cfg.d_lat, cfg.d_mem}, rng, 0.02);
    w_out = Tensor::trunc_normal({cfg.d_mem, cfg.d_mem}, rng, 0.02);
    for (Tensor* t : {&w_delta, &b_delta, &a_log, &w_b, &w_in, &w_gate,
                      &w_out}) {
      t->set_requires_grad(true);
    }
  }

  void register_params(ParamSet& ps, const std::string& prefix) {
    ps.add(prefix + ".w_delta", w_delta);
    ps.add(prefix + ".b_delta", b_delta);
    ps.add(prefix + ".a_log", a_log);
    ps.add(prefix + ".w_b", w_b);
    ps.add(prefix + ".w_in", w_in);
    ps.add(prefix + ".w_gate", w_gate);
    ps.add(prefix + ".w_out", w_out);
  }
};

struct SsmState {
  Tensor hidden;  // [1, d_mem]
};

/// One recurrence step on a pooled frame vector [1, d_lat]. Updates the
/// hidden state in place and returns the readout token [1, d_mem]:
///   delta = softplus(w_delta·z + b_delta)            (scalar)
///   a_i   = exp(-delta · exp(a_log_i))               (0 < a_i < 1)
///   h'_i  = a_i·h_i + delta·(w_b·z)·(w_in·z)_i
///   out   = w_out · (h' ⊙ silu(w_gate·z))
inline Tensor ssm_step(const SsmParams& p, SsmState& st,
                       const Tensor& pooled_row) {
  const Tensor delta = softplus(add(matmul(pooled_row, p.w_delta), p.b_delta));
  const Tensor decay = exp_op(neg(mul(delta, exp_op(p.a_log))));
  const Tensor gain = mul(delta, matmul(pooled_row, p.w_b));
  const Tensor z_in = matmul(pooled_row, p.w_in);
  st.hidden = add(mul(decay, st.hidden), mul(gain, z_in));
  const Tensor gate = silu(matmul(pooled_row, p.w_gate));
  return matmul(mul(st.hidden, gate), p.w_out);
}

// ---------------------------------------------------------------------------
// Titans
// ---------------------------------------------------------------------------

/// Online associative memory M_W(x) = W2·silu(W1·x), d_lat -> d_mem -> d_lat.
/// Weights and surprise buffers are raw row-major doubles: updates happen
/// outside the tape by construction.
struct TitansState {
  long width = 0;   // key/value width (d_lat)
  long d_mem = 0;
  std::vector<double> w1, s1;  // [d_mem * width]
  std::vector<double> w2, s2;  // [width * d_mem]
  long nan_resets = 0;         // stability-guard trips
};

/// Fresh memory: W1 from the given first-layer init, W2 zero (so retrieval
/// starts at exactly zero), momenta zero.
inline TitansState titans_make_state(const MemoryConfig& cfg,
                                     const std::vector<double>& w1_init) {
  TitansState st;
  st.width = cfg.d_lat;
  st.d_mem = cfg.d_mem;
  if (static_cast<long>(w1_init.size()) != cfg.d_mem * cfg.d_lat) {
    throw ContractError("titans_make_state: w1 init size mismatch");
  }
  st.w1 = w1_init;
  st.w2.assign(static_cast<std::size_t>(cfg.d_lat * cfg.d_mem), 0.0);
  st.s1.assign(st.w1.size(), 0.0);
  st.s2.assign(st.w2.size(), 0.0);
  return st;
}

/// One write: momentum-SGD on the retrieval loss |M_W(k) - v|^2.
///   S <- eta·S - theta·grad,  W <- (1-alpha)·W + S
/// A non-finite candidate anywhere resets the surprise buffers and skips the
/// step (counted in nan_resets). Returns false when the guard fired.
inline bool titans_write(TitansState& st, const MemoryConfig& cfg,
                         const std::vector<double>& k,
                         const std::vector<double>& v) {
  const long w = st.width, m = st.d_mem;
  if (static_cast<long>(k.size()) != w || static_cast<long>(v.size()) != w) {
    throw ContractError(msg("titans_write: key/value width ", k.size(), "/",
                            v.size(), " does not match memory width ", w));
  }
  std::vector<double> u(m), sig(m), s(m);
  for (long j = 0; j < m; ++j) {
    double acc = 0.0;
    const double* row = st.w1.data() + j * w;
    for (long i = 0; i < w; ++i) acc += row[i] * k[i];
    u[j] = acc;
    sig[j] = 1.0 / (1.0 + std::exp(-acc));
    s[j] = acc * sig[j];
  }
  std::vector<double> r(w);
  for (long i = 0; i < w; ++i) {
    double acc = 0.0;
    const double* row = st.w2.data() + i * m;
    for (long j = 0; j < m; ++j) acc += row[j] * s[j];
    r[i] = acc - v[i];
  }
  // grad wrt W2 is 2·r·sᵀ; back through silu for W1: 2·W2ᵀr ⊙ silu'(u) · kᵀ.
  std::vector<double> gu(m);
  for (long j = 0; j < m; ++j) {
    double acc = 0.0;
    for (long i = 0; i < w; ++i) acc += st.w2[i * m + j] * r[i];
    const double dsilu = sig[j] * (1.0 + u[j] * (1.0 - sig[j]));
    gu[j] = 2.0 * acc * dsilu;
  }
  std::vector<double> n_s1(st.s1.size()), n_w1(st.w1.size());
  std::vector<double> n_s2(st.s2.size()), n_w2(st.w2.size());
  const double eta = cfg.titans_eta, theta = cfg.titans_theta;
  const double keep = 1.0 - cfg.titans_alpha;
  bool finite = true;
  for (long j = 0; j < m; ++j) {
    for (long i = 0; i < w; ++i) {
      const std::size_t idx = static_cast<std::size_t>(j * w + i);
      n_s1[idx] = eta * st.s1[idx] - theta * gu[j] * k[i];
      n_w1[idx] = keep * st.w1[idx] + n_s1[idx];
      finite = finite && std::isfinite(n_s1[idx]) && std::isfinite(n_w1[idx]);
    }
  }
  for (long i = 0; i < w; ++i) {
    for (long j = 0; j < m; ++j) {
      const std::size_t idx = static_cast<std::size_t>(i * m + j);
      n_s2[idx] = eta * st.s2[idx] - theta * 2.0 * r[i] * s[j];
      n_w2[idx] = keep * st.w2[idx] + n_s2[idx];
      finite = finite && std::isfinite(n_s2[idx]) && std::isfinite(n_w2[idx]);
    }
  }
  if (!finite) {
    std::fill(st.s1.begin(), st.s1.end(), 0.0);
    std::fill(st.s2.begin(), st.s2.end(), 0.0);
    ++st.nan_resets;
    return false;
  }
  st.s1 = std::move(n_s1);
  st.w1 = std::move(n_w1);
  st.s2 = std::move(n_s2);
  st.w2 = std::move(n_w2);
  return true;
}

/// Differentiable retrieval M_W(q) for a query row [1, width]. The current
/// weights are snapshotted into constant tensors, so gradient reaches q (and
/// whatever produced it) but never the memory weights — and later writes
/// cannot corrupt an earlier read's backward pass.
inline Tensor titans_read(const TitansState& st, const Tensor& q_row) {
  const long w = st.width, m = st.d_mem;
  Tensor w1t = Tensor::zeros({w, m});
  for (long j = 0; j < m; ++j) {
    for (long i = 0; i < w; ++i) w1t.data()[i * m + j] = st.w1[j * w + i];
  }
  Tensor w2t = Tensor::zeros({m, w});
  for (long i = 0; i < w; ++i) {
    for (long j = 0; j < m; ++j) w2t.data()[j * w + i] = st.w2[i * m + j];
  }
  return matmul(silu(matmul(q_row, w1t)), w2t);
}

// ---------------------------------------------------------------------------
// Encoder bundle + dispatch
// ---------------------------------------------------------------------------

/// Learned parameters for one encoder kind. For Titans the key/value/query
/// vectors are linear projections of the pooled frame latent; only the query
/// projection can receive gradient (writes are detached), so w_k/w_v stay at
/// initialization — the price of keeping the online update off the tape.
struct MemoryEncoder {
  EncoderKind kind = EncoderKind::None;
  MemoryConfig cfg;
  SsmParams ssm;
  Tensor titans_wk, titans_wv, titans_wq;  // [d_lat, d_lat]
  std::vector<double> titans_w1_init;      // same fresh memory every episode

  MemoryEncoder() = default;

  MemoryEncoder(EncoderKind kind_, MemoryConfig cfg_, RandomSource& rng)
      : kind(kind_), cfg(cfg_) {
    cfg.validate();
    if (kind == EncoderKind::Ssm) {
      ssm = SsmParams(cfg, rng);
    } else if (kind == EncoderKind::Titans) {
      titans_wk = Tensor::trunc_normal({cfg.d_lat, cfg.d_lat}, rng, 0.02);
      titans_wv = Tensor::trunc_normal({cfg.d_lat, cfg.d_lat}, rng, 0.02);
      titans_wq = Tensor::trunc_normal({cfg.d_lat, cfg.d_lat}, rng, 0.02);
      titans_wk.set_requires_grad(true);
      titans_wv.set_requires_grad(true);
      titans_wq.set_requires_grad(true);
      titans_w1_init =
          Tensor::trunc_normal({cfg.d_mem, cfg.d_lat}, rng, 0.02).data();
    }
  }

  /// Width of the readout tokens this encoder emits (0 for None).
  long readout_width() const {
    switch (kind) {
      case EncoderKind::None: return 0;
      case EncoderKind::Cache: return cfg.d_lat;
      case EncoderKind::Ssm: return cfg.d_mem;
      case EncoderKind::Titans: return cfg.d_lat;
    }
    return 0;
  }

  void register_params(ParamSet& ps, const std::string& prefix) {
    if (kind == EncoderKind::Ssm) {
      ssm.register_params(ps, prefix + ".ssm");
    } else if (kind == EncoderKind::Titans) {
      ps.add(prefix + ".titans.w_k", titans_wk);
      ps.add(prefix + ".titans.w_v", titans_wv);
      ps.add(prefix + ".titans.w_q", titans_wq);
    }
  }
};

/// Per-rollout mutable state for any encoder kind. `recent` holds the last R
/// readout tokens for the recurrent encoders; `last_time` enforces that
/// frames are absorbed in strictly increasing source-time order.
struct MemoryState {
  EncoderKind kind = EncoderKind::None;
  CacheState cache;
  SsmState ssm;
  TitansState titans;
  std::deque<Tensor> recent;
  long last_time = std::numeric_limits<long>::min();

  /// Cut every held tensor off the tape (called at training-window
  /// boundaries so one window's graph never outlives its step).
  void detach_all() {
    if (ssm.hidden.ndim() != 0) ssm.hidden = ssm.hidden.detach();
    for (Tensor& t : recent) t = t.detach();
  }
};

inline MemoryState make_memory_state(const MemoryEncoder& enc) {
  MemoryState st;
  st.kind = enc.kind;
  if (enc.kind == EncoderKind::Ssm) {
    st.ssm.hidden = Tensor::zeros({1, enc.cfg.d_mem});
  } else if (enc.kind == EncoderKind::Titans) {
    st.titans = titans_make_state(enc.cfg, enc.titans_w1_init);
  }
  return st;
}

namespace detail {

/// Mean over patch tokens: [P, d_lat] -> [1, d_lat].
inline Tensor pool_frame(const Tensor& tokens) {
  if (tokens.ndim() != 2) {
    throw ShapeError(msg("memory pooling expects [P,d] frame tokens, got ",
                         shape_str(tokens.shape())));
  }
  return reshape(mean_axis(tokens, 0), {1, tokens.dim(1)});
}

inline void push_recent(MemoryState& st, const MemoryConfig& cfg, Tensor t) {
  st.recent.push_back(std::move(t));
  while (static_cast<long>(st.recent.size()) > cfg.readout_tokens) {
    st.recent.pop_front();
  }
}

}  // namespace detail

/// Current readout without consuming any frames.
inline MemoryReadout read_memory(const MemoryEncoder& enc,
                                 const MemoryState& st) {
  MemoryReadout out;
  out.provenance = enc.kind;
  switch (enc.kind) {
    case EncoderKind::None:
      return out;
    case EncoderKind::Cache:
      return cache_read(st.cache, enc.cfg);
    case EncoderKind::Ssm:
    case EncoderKind::Titans:
      out.grad_barrier = enc.kind == EncoderKind::Titans;
      if (!st.recent.empty()) {
        out.tokens = concat(
            std::vector<Tensor>(st.recent.begin(), st.recent.end()), 0);
      }
      return out;
  }
  return out;
}

/// Absorb frames (strictly increasing source_time, newer than anything the
/// state has seen) into the memory state.
inline void advance_memory(const MemoryEncoder& enc, MemoryState& st,
                           const std::vector<LatentFrame>& frames) {
  if (st.kind != enc.kind) {
    throw ContractError("advance_memory: state/encoder kind mismatch");
  }
  for (const LatentFrame& z : frames) {
    if (z.source_time <= st.last_time) {
      throw ContractError(msg("memory: frame time ", z.source_time,
                              " not after last absorbed time ",
                              st.last_time));
    }
    switch (enc.kind) {
      case EncoderKind::None:
        break;
      case EncoderKind::Cache:
        cache_write(st.cache, enc.cfg, z);
        break;
      case EncoderKind::Ssm:
        detail::push_recent(
            st, enc.cfg,
            ssm_step(enc.ssm, st.ssm, detail::pool_frame(z.tokens)));
        break;
      case EncoderKind::Titans: {
        const Tensor pooled = detail::pool_frame(z.tokens);
        {
          NoGradGuard ng;
          const Tensor k = matmul(pooled.detach(), enc.titans_wk);
          const Tensor v = matmul(pooled.detach(), enc.titans_wv);
          titans_write(st.titans, enc.cfg, k.data(), v.data());
        }
        detail::push_recent(
            st, enc.cfg,
            titans_read(st.titans, matmul(pooled, enc.titans_wq)));
        break;
      }
    }
    st.last_time = z.source_time;
  }
}

/// Dispatch op: absorb a (possibly empty) history then read. An empty
/// history is a no-op with an empty readout regardless of prior state.
inline MemoryReadout encode_history(const MemoryEncoder& enc, MemoryState& st,
                                    const std::vector<LatentFrame>& frames) {
  if (frames.empty()) {
    MemoryReadout out;
    out.provenance = enc.kind;
    return out;
  }
  advance_memory(enc, st, frames);
  return read_memory(enc, st);
}

}  // namespace memstream
