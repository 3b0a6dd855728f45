#pragma once

// Memory injectors: five ways of wiring a MemoryReadout into the predictor's
// residual stream. Prepend acts once at the input (memory tokens join the
// sequence); the other four act at every transformer layer. Every per-layer
// adapter's output path is zero-initialized, so a freshly built injector
// leaves the baseline forward bit-for-bit unchanged; Prepend is the one
// exception (its tokens are meant to be visible immediately) and matches the
// baseline only while memory is empty.

#include <optional>
#include <string>
#include <vector>

#include "memstream/memory.hpp"
#include "memstream/nn.hpp"
#include "memstream/ops.hpp"
#include "memstream/tensor.hpp"

namespace memstream {

enum class InjectorKind { None, Prepend, Additive, CrossAttention, AdaNorm,
                          Lora };

inline const char* injector_name(InjectorKind k) {
  switch (k) {
    case InjectorKind::None: return "none";
    case InjectorKind::Prepend: return "prepend";
    case InjectorKind::Additive: return "additive";
    case InjectorKind::CrossAttention: return "xattn";
    case InjectorKind::AdaNorm: return "adanorm";
    case InjectorKind::Lora: return "lora";
  }
  return "?";
}

inline InjectorKind parse_injector(const std::string& s) {
  if (s == "none") return InjectorKind::None;
  if (s == "prepend") return InjectorKind::Prepend;
  if (s == "additive") return InjectorKind::Additive;
  if (s == "xattn") return InjectorKind::CrossAttention;
  if (s == "adanorm") return InjectorKind::AdaNorm;
  if (s == "lora") return InjectorKind::Lora;
  throw ContractError(msg(
      "unknown injector '", s,
      "' (expected none|prepend|additive|xattn|adanorm|lora)"));
}

struct InjectorConfig {
  InjectorKind kind = InjectorKind::None;
  long d = 128;      // model width
  long m_width = 0;  // memory readout token width
  int heads = 4;     // cross-attention heads
  long lora_rank = 8;

  void validate() const {
    if (kind == InjectorKind::None) return;
    if (m_width <= 0) {
      throw ContractError(
          "injector config: a memory-consuming injector needs m_width > 0 "
          "(pair it with a memory encoder)");
    }
    if (d <= 0) throw ContractError("injector config: d must be positive");
    if (kind == InjectorKind::Lora && (lora_rank <= 0 || lora_rank > d)) {
      throw ContractError(msg("injector config: lora rank ", lora_rank,
                              " outside (0, d=", d, "]"));
    }
    if (kind == InjectorKind::CrossAttention &&
        (heads <= 0 || d % heads != 0)) {
      throw ContractError(msg("injector config: d=", d, " not divisible by ",
                              heads, " cross-attention heads"));
    }
  }
};

/// Pool memory tokens [M, w] to a single conditioning vector [1, w].
inline Tensor pool_memory(const MemoryReadout& m) {
  if (m.rows() == 0) {
    throw ContractError("pool_memory: empty readout");
  }
  return reshape(mean_axis(m.tokens, 0), {1, m.tokens.dim(1)});
}

// ---------------------------------------------------------------------------
// Prepend (input site)
// ---------------------------------------------------------------------------

/// Maps memory tokens into the stream width and stamps them with a learned
/// "past" position embedding. The result is prepended to the token sequence;
/// the frame-causal mask makes them context for every query while they
/// themselves read nothing but memory.
struct PrependInjector {
  Linear proj;     // m_width -> d
  Tensor past_pos; // [1, d]

  PrependInjector() = default;
  PrependInjector(const InjectorConfig& cfg, RandomSource& rng)
      : proj(cfg.m_width, cfg.d, rng),
        past_pos(Tensor::trunc_normal({1, cfg.d}, rng, 0.02)) {
    past_pos.set_requires_grad(true);
  }

  /// [M, m_width] -> [1, M, d]
  Tensor operator()(const MemoryReadout& m) const {
    const long rows = m.rows();
    return reshape(add(proj(m.tokens), past_pos), {1, rows, -1});
  }

  void register_params(ParamSet& ps, const std::string& prefix) {
    proj.register_params(ps, prefix + ".proj");
    ps.add(prefix + ".past_pos", past_pos);
  }
};

// ---------------------------------------------------------------------------
// Per-layer injectors
// ---------------------------------------------------------------------------

/// Adapter set for one transformer layer. Only the members matching the
/// configured kind are constructed; the hook methods degrade to no-ops for
/// every other kind and for empty memory.
struct LayerInjector {
  InjectorKind kind = InjectorKind::None;

  Linear additive;            // zero-init: h + additive(pool(m))
  Linear xattn_kv;            // m_width -> d for cross-attention keys/values
  MultiHeadAttention xattn;   // output projection zeroed
  int xattn_heads = 1;
  Linear ada_gamma, ada_beta; // zero-init norm modulation
  Tensor lora_aq, lora_ak;    // [m_width, d*r] memory-conditioned factors
  Tensor lora_bq, lora_bk;    // [r, d] static, zero-init
  long lora_rank = 0;
  long d = 0;

  LayerInjector() = default;

  LayerInjector(const InjectorConfig& cfg, RandomSource& rng)
      : kind(cfg.kind), d(cfg.d) {
    cfg.validate();
    switch (cfg.kind) {
      case InjectorKind::None:
      case InjectorKind::Prepend:
        break;
      case InjectorKind::Additive:
        additive = Linear(cfg.m_width, cfg.d, rng, /*zero_init=*/true);
        break;
      case InjectorKind::CrossAttention:
        xattn_kv = Linear(cfg.m_width, cfg.d, rng);
        xattn = MultiHeadAttention(cfg.d, rng);
        xattn_heads = cfg.heads;
        std::fill(xattn.wo.weight.data().begin(),
                  xattn.wo.weight.data().end(), 0.0);
        break;
      case InjectorKind::AdaNorm:
        ada_gamma = Linear(cfg.m_width, cfg.d, rng, /*zero_init=*/true);
        ada_beta = Linear(cfg.m_width, cfg.d, rng, /*zero_init=*/true);
        break;
      case InjectorKind::Lora:
        lora_rank = cfg.lora_rank;
        lora_aq = Tensor::trunc_normal({cfg.m_width, cfg.d * cfg.lora_rank},
                                       rng, 0.02);
        lora_ak = Tensor::trunc_normal({cfg.m_width, cfg.d * cfg.lora_rank},
                                       rng, 0.02);
        lora_bq = Tensor::zeros({cfg.lora_rank, cfg.d});
        lora_bk = Tensor::zeros({cfg.lora_rank, cfg.d});
        for (Tensor* t : {&lora_aq, &lora_ak, &lora_bq, &lora_bk}) {
          t->set_requires_grad(true);
        }
        break;
    }
  }

  /// Low-rank QK modulation for the layer's self-attention. The A factors
  /// are linear in the pooled memory; the zero-init B factors gate the
  /// delta, so scores match the baseline bitwise until B moves.
  std::optional<QkDelta> lora_delta(const Tensor* pooled_m) const {
    if (kind != InjectorKind::Lora || pooled_m == nullptr) {
      return std::nullopt;
    }
    QkDelta delta;
    delta.a_q = reshape(matmul(*pooled_m, lora_aq), {d, lora_rank});
    delta.a_k = reshape(matmul(*pooled_m, lora_ak), {d, lora_rank});
    delta.b_q = lora_bq;
    delta.b_k = lora_bk;
    return delta;
  }

  /// Between self-attention and FFN: Additive writes a broadcast bias onto
  /// the stream, CrossAttention writes an attention-gathered residual.
  Tensor post_attention(const Tensor& h, const MemoryReadout& m,
                        const Tensor* pooled_m) const {
    if (m.rows() == 0 || pooled_m == nullptr) return h;
    if (kind == InjectorKind::Additive) {
      return add(h, reshape(additive(*pooled_m), {1, 1, d}));
    }
    if (kind == InjectorKind::CrossAttention) {
      AttentionConfig acfg;
      acfg.d = d;
      acfg.num_heads = xattn_heads;
      acfg.causal = false;
      const Tensor kv =
          reshape(xattn_kv(m.tokens), {1, m.rows(), d});
      return add(h, xattn(h, kv, acfg));
    }
    return h;
  }

  /// Pre-FFN normalization site. AdaNorm rescales the layer's own gamma and
  /// shifts its beta as linear functions of the pooled memory.
  Tensor pre_ffn_norm(const Tensor& x, const LayerNorm& ln,
                      const Tensor* pooled_m) const {
    if (kind != InjectorKind::AdaNorm || pooled_m == nullptr) {
      return ln(x);
    }
    const Tensor gamma_mod =
        mul(ln.gamma, add_scalar(ada_gamma(*pooled_m), 1.0));
    const Tensor beta_mod = add(ln.beta, ada_beta(*pooled_m));
    return layer_norm(x, gamma_mod, beta_mod, ln.eps);
  }

  void register_params(ParamSet& ps, const std::string& prefix) {
    switch (kind) {
      case InjectorKind::None:
      case InjectorKind::Prepend:
        break;
      case InjectorKind::Additive:
        additive.register_params(ps, prefix + ".additive");
        break;
      case InjectorKind::CrossAttention:
        xattn_kv.register_params(ps, prefix + ".xattn_kv");
        xattn.wq.register_params(ps, prefix + ".xattn.wq");
        xattn.wk.register_params(ps, prefix + ".xattn.wk");
        xattn.wv.register_params(ps, prefix + ".xattn.wv");
        xattn.wo.register_params(ps, prefix + ".xattn.wo");
        break;
      case InjectorKind::AdaNorm:
        ada_gamma.register_params(ps, prefix + ".ada_gamma");
        ada_beta.register_params(ps, prefix + ".ada_beta");
        break;
      case InjectorKind::Lora:
        ps.add(prefix + ".lora.a_q", lora_aq);
        ps.add(prefix + ".lora.a_k", lora_ak);
        ps.add(prefix + ".lora.b_q", lora_bq);
        ps.add(prefix + ".lora.b_k", lora_bk);
        break;
    }
  }
};

// ---------------------------------------------------------------------------
// Bundle
// ---------------------------------------------------------------------------

/// All injection machinery for one model: the input-site prepender (when
/// configured) or one LayerInjector per transformer layer.
struct Injector {
  InjectorConfig cfg;
  PrependInjector prepend;
  std::vector<LayerInjector> layers;

  Injector() = default;

  Injector(InjectorConfig cfg_, long n_layers, RandomSource& rng)
      : cfg(cfg_) {
    cfg.validate();
    if (cfg.kind == InjectorKind::Prepend) {
      prepend = PrependInjector(cfg, rng);
    } else if (cfg.kind != InjectorKind::None) {
      layers.reserve(static_cast<std::size_t>(n_layers));
      for (long i = 0; i < n_layers; ++i) layers.emplace_back(cfg, rng);
    }
  }

  bool per_layer() const { return !layers.empty(); }

  const LayerInjector& layer(long i) const {
    static const LayerInjector kNull;
    if (layers.empty()) return kNull;
    return layers.at(static_cast<std::size_t>(i));
  }

  void register_params(ParamSet& ps, const std::string& prefix) {
    if (cfg.kind == InjectorKind::Prepend) {
      prepend.register_params(ps, prefix + ".prepend");
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
      layers[i].register_params(ps,
                                prefix + ".layer" + std::to_string(i));
    }
  }
};

}  // namespace memstream
