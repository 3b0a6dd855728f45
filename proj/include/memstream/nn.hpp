#pragma once

// Neural building blocks: named parameter registry, linear / layer-norm
// wrappers, multi-head attention with frame-causal masking and prepended
// memory tokens, and the transformer FFN.

#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "memstream/ops.hpp"
#include "memstream/tensor.hpp"

namespace memstream {

// ---------------------------------------------------------------------------
// Parameter registry
// ---------------------------------------------------------------------------

/// Ordered collection of named trainable tensors. Modules register their
/// parameters here; the optimizer and checkpoint writer iterate it in
/// insertion order, which keeps updates and serialization deterministic.
class ParamSet {
public:
  void add(const std::string& name, Tensor t) {
    if (index_.count(name)) {
      throw ContractError(msg("duplicate parameter name '", name, "'"));
    }
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(t));
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw ContractError(msg("unknown parameter '", name, "'"));
    }
    return items_[it->second].second;
  }

  const std::vector<std::pair<std::string, Tensor>>& items() const {
    return items_;
  }
  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }

  std::size_t size() const { return items_.size(); }

  long numel() const {
    long total = 0;
    for (const auto& [name, t] : items_) total += t.numel();
    return total;
  }

  void zero_grad() {
    for (auto& [name, t] : items_) t.zero_grad();
  }

  void set_requires_grad(bool flag) {
    for (auto& [name, t] : items_) t.set_requires_grad(flag);
  }

private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Affine map x·W + b with W stored [in, out]. Weight init is truncated
/// normal (std 0.02), biases zero; pass zero_init for adapter heads that
/// must start as the identity-preserving zero map.
struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(long in, long out, RandomSource& rng, bool zero_init = false)
      : weight(zero_init ? Tensor::zeros({in, out})
                         : Tensor::trunc_normal({in, out}, rng, 0.02)),
        bias(Tensor::zeros({out})) {
    weight.set_requires_grad(true);
    bias.set_requires_grad(true);
  }

  Tensor operator()(const Tensor& x) const {
    return add(matmul(x, weight), bias);
  }

  void register_params(ParamSet& ps, const std::string& prefix) {
    ps.add(prefix + ".weight", weight);
    ps.add(prefix + ".bias", bias);
  }
};

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

struct LayerNorm {
  Tensor gamma;  // [d]
  Tensor beta;   // [d]
  double eps = 1e-5;

  LayerNorm() = default;
  explicit LayerNorm(long d)
      : gamma(Tensor::full({d}, 1.0)), beta(Tensor::zeros({d})) {
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }

  Tensor operator()(const Tensor& x) const {
    return layer_norm(x, gamma, beta, eps);
  }

  void register_params(ParamSet& ps, const std::string& prefix) {
    ps.add(prefix + ".gamma", gamma);
    ps.add(prefix + ".beta", beta);
  }
};

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

struct AttentionConfig {
  long d = 128;
  int num_heads = 4;
  bool causal = false;
  long n_prepended = 0;      // memory tokens at the head of the kv sequence
  long tokens_per_frame = 1; // frame-causal granularity of the mask

  void validate() const {
    if (num_heads <= 0 || d % num_heads != 0) {
      throw ContractError(msg("attention: model dim ", d,
                              " not divisible by ", num_heads, " heads"));
    }
    if (n_prepended < 0) {
      throw ContractError("attention: n_prepended must be >= 0");
    }
    if (tokens_per_frame <= 0) {
      throw ContractError("attention: tokens_per_frame must be positive");
    }
  }
};

/// Optional low-rank modulation of the query/key projections: the effective
/// projection becomes W + A·B, applied as x·W + (x·A)·B. A may carry a
/// leading batch dim; B is shared.
struct QkDelta {
  Tensor a_q;  // [B, d, r] or [d, r]
  Tensor b_q;  // [r, d]
  Tensor a_k;
  Tensor b_k;
};

namespace detail {

/// Additive attention mask [Tq, Tk]: 0 where visible, a large negative
/// constant where hidden. -1e30 rather than -inf keeps every intermediate
/// finite for the numeric watchdog while still zeroing the weight.
inline Tensor frame_causal_mask(long t_q, long t_k, long n_prepended,
                                long tokens_per_frame) {
  constexpr double kHidden = -1e30;
  const long frames_q = (t_q - n_prepended) / tokens_per_frame;
  const long frames_k = (t_k - n_prepended) / tokens_per_frame;
  if (frames_q * tokens_per_frame + n_prepended != t_q ||
      frames_k * tokens_per_frame + n_prepended != t_k) {
    throw ContractError(msg("attention: causal sequence lengths ", t_q, "/",
                            t_k, " not aligned to ", tokens_per_frame,
                            " tokens per frame with ", n_prepended,
                            " prepended"));
  }
  if (frames_q != frames_k) {
    throw ContractError(msg("attention: causal query/key frame counts differ (",
                            frames_q, " vs ", frames_k, ")"));
  }
  std::vector<double> m(t_q * t_k, 0.0);
  for (long i = 0; i < t_q; ++i) {
    for (long j = 0; j < t_k; ++j) {
      bool visible;
      if (j < n_prepended) {
        // Memory is context for everyone.
        visible = true;
      } else if (i < n_prepended) {
        // Memory rows read only memory, so the memory channel stays
        // independent of frame content at every depth (otherwise later
        // frames would leak backward through it).
        visible = false;
      } else {
        const long fq = (i - n_prepended) / tokens_per_frame;
        const long fk = (j - n_prepended) / tokens_per_frame;
        visible = fk <= fq;
      }
      if (!visible) m[i * t_k + j] = kHidden;
    }
  }
  return Tensor({t_q, t_k}, std::move(m));
}

}  // namespace detail

struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  long d = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(long d_, RandomSource& rng)
      : wq(d_, d_, rng), wk(d_, d_, rng), wv(d_, d_, rng), wo(d_, d_, rng),
        d(d_) {}

  /// q_src [B,Tq,d], kv_src [B,Tk,d] -> [B,Tq,d].
  Tensor operator()(const Tensor& q_src, const Tensor& kv_src,
                    const AttentionConfig& cfg,
                    const QkDelta* qk_delta = nullptr) const {
    cfg.validate();
    if (q_src.ndim() != 3 || kv_src.ndim() != 3) {
      throw ShapeError(msg("attention expects [B,T,d] inputs, got ",
                           shape_str(q_src.shape()), " and ",
                           shape_str(kv_src.shape())));
    }
    if (q_src.dim(-1) != cfg.d || kv_src.dim(-1) != cfg.d) {
      throw ShapeError(msg("attention: feature dim of ",
                           shape_str(q_src.shape()), " does not match d=",
                           cfg.d));
    }
    const long b = q_src.dim(0), tq = q_src.dim(1), tk = kv_src.dim(1);
    const long h = cfg.num_heads, dh = cfg.d / cfg.num_heads;

    Tensor q = wq(q_src);
    Tensor k = wk(kv_src);
    if (qk_delta) {
      q = add(q, matmul(matmul(q_src, qk_delta->a_q), qk_delta->b_q));
      k = add(k, matmul(matmul(kv_src, qk_delta->a_k), qk_delta->b_k));
    }
    Tensor v = wv(kv_src);

    auto split = [&](const Tensor& t, long len) {
      // [B,T,d] -> [B,h,T,dh]
      return permute(reshape(t, {b, len, h, dh}), {0, 2, 1, 3});
    };
    Tensor q4 = split(q, tq);
    Tensor k4 = split(k, tk);
    Tensor v4 = split(v, tk);

    Tensor attn = attention_probs(q4, k4,
                                  1.0 / std::sqrt(static_cast<double>(dh)),
                                  cfg.causal, cfg.n_prepended,
                                  cfg.tokens_per_frame);
    Tensor ctx = matmul(attn, v4);  // [B,h,Tq,dh]
    Tensor merged = reshape(permute(ctx, {0, 2, 1, 3}), {b, tq, cfg.d});
    return wo(merged);
  }

  void register_params(ParamSet& ps, const std::string& prefix) {
    wq.register_params(ps, prefix + ".wq");
    wk.register_params(ps, prefix + ".wk");
    wv.register_params(ps, prefix + ".wv");
    wo.register_params(ps, prefix + ".wo");
  }
};

// ---------------------------------------------------------------------------
// Feed-forward block
// ---------------------------------------------------------------------------

/// linear(d -> mult·d) -> GELU -> linear(-> d).
struct Mlp {
  Linear fc1, fc2;

  Mlp() = default;
  Mlp(long d, long hidden_mult, RandomSource& rng)
      : fc1(d, d * hidden_mult, rng), fc2(d * hidden_mult, d, rng) {}

  Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }

  void register_params(ParamSet& ps, const std::string& prefix) {
    fc1.register_params(ps, prefix + ".fc1");
    fc2.register_params(ps, prefix + ".fc2");
  }
};

}  // namespace memstream
