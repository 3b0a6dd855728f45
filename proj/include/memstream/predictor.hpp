#pragma once

// Latent dynamics model: a 4-layer pre-norm ViT that maps a sliding window
// of latent frames (plus per-frame actions) to the next latent frame, with a
// memory encoder feeding one of the injectors. The residual stream entering
// layer 1 is the literal sum of projected window tokens, action embeddings,
// and spatial/temporal position embeddings — with memory tokens prepended in
// front of it for the Prepend injector.

#include <optional>
#include <string>
#include <vector>

#include "memstream/codec.hpp"
#include "memstream/inject.hpp"
#include "memstream/memory.hpp"
#include "memstream/nn.hpp"
#include "memstream/ops.hpp"
#include "memstream/optim.hpp"
#include "memstream/tensor.hpp"

namespace memstream {

struct PredictorConfig {
  long layers = 4;
  long d = 128;
  int heads = 4;
  long context = 9;          // C: frames visible in one forward pass
  long d_lat = 128;          // latent token width from the codec
  long tokens_per_frame = 64;
  long hidden_mult = 4;
  long n_actions = 4;
  EncoderKind encoder = EncoderKind::None;
  InjectorKind injector = InjectorKind::None;
  unsigned long long seed = 0;

  void validate() const {
    if (layers != 4) {
      throw ContractError(msg("predictor: layer count is fixed at 4, got ",
                              layers));
    }
    if (d <= 0 || heads <= 0 || d % heads != 0) {
      throw ContractError(msg("predictor: d=", d, " incompatible with ",
                              heads, " heads"));
    }
    if (context < 1 || d_lat <= 0 || tokens_per_frame <= 0 ||
        hidden_mult <= 0 || n_actions <= 0) {
      throw ContractError("predictor: all sizes must be positive");
    }
    if ((encoder == EncoderKind::None) != (injector == InjectorKind::None)) {
      throw ContractError(
          "predictor: memory encoder and injector must be paired "
          "(both none for the baseline, both set otherwise)");
    }
  }
};

/// A stretch of latent frames with the action taken at each frame.
struct LatentSeq {
  std::vector<LatentFrame> frames;
  std::vector<int> actions;
};

struct WorldModel {
  struct Layer {
    LayerNorm ln1, ln2;
    MultiHeadAttention attn;
    Mlp mlp;
  };

  PredictorConfig cfg;
  MemoryConfig mem_cfg;
  Linear in_proj;       // d_lat -> d
  Tensor action_emb;    // [n_actions, d]
  Tensor spatial_emb;   // [P, d]
  Tensor temporal_emb;  // [C, d]
  std::vector<Layer> layers;
  LayerNorm final_ln;
  Linear head;          // d -> d_lat, applied per token of a frame block
  MemoryEncoder encoder;
  Injector injector;

  WorldModel() = default;

  WorldModel(PredictorConfig cfg_, MemoryConfig mem_cfg_)
      : cfg(cfg_), mem_cfg(mem_cfg_) {
    cfg.validate();
    mem_cfg.d_lat = cfg.d_lat;
    RandomSource rng(derive_seed(cfg.seed, "world_model"));
    in_proj = Linear(cfg.d_lat, cfg.d, rng);
    action_emb = Tensor::trunc_normal({cfg.n_actions, cfg.d}, rng, 0.02);
    spatial_emb = Tensor::trunc_normal({cfg.tokens_per_frame, cfg.d}, rng,
                                       0.02);
    temporal_emb = Tensor::trunc_normal({cfg.context, cfg.d}, rng, 0.02);
    for (Tensor* t : {&action_emb, &spatial_emb, &temporal_emb}) {
      t->set_requires_grad(true);
    }
    layers.reserve(static_cast<std::size_t>(cfg.layers));
    for (long i = 0; i < cfg.layers; ++i) {
      Layer l;
      l.ln1 = LayerNorm(cfg.d);
      l.ln2 = LayerNorm(cfg.d);
      l.attn = MultiHeadAttention(cfg.d, rng);
      l.mlp = Mlp(cfg.d, cfg.hidden_mult, rng);
      layers.push_back(std::move(l));
    }
    final_ln = LayerNorm(cfg.d);
    head = Linear(cfg.d, cfg.d_lat, rng);
    encoder = MemoryEncoder(cfg.encoder, mem_cfg, rng);

    InjectorConfig icfg;
    icfg.kind = cfg.injector;
    icfg.d = cfg.d;
    icfg.m_width = encoder.readout_width();
    icfg.heads = cfg.heads;
    injector = Injector(icfg, cfg.layers, rng);
  }

  void register_params(ParamSet& ps, const std::string& prefix) {
    in_proj.register_params(ps, prefix + ".in_proj");
    ps.add(prefix + ".action_emb", action_emb);
    ps.add(prefix + ".spatial_emb", spatial_emb);
    ps.add(prefix + ".temporal_emb", temporal_emb);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string lp = prefix + ".layer" + std::to_string(i);
      layers[i].ln1.register_params(ps, lp + ".ln1");
      layers[i].attn.wq.register_params(ps, lp + ".attn.wq");
      layers[i].attn.wk.register_params(ps, lp + ".attn.wk");
      layers[i].attn.wv.register_params(ps, lp + ".attn.wv");
      layers[i].attn.wo.register_params(ps, lp + ".attn.wo");
      layers[i].ln2.register_params(ps, lp + ".ln2");
      layers[i].mlp.register_params(ps, lp + ".mlp");
    }
    final_ln.register_params(ps, prefix + ".final_ln");
    head.register_params(ps, prefix + ".head");
    encoder.register_params(ps, prefix + ".mem");
    injector.register_params(ps, prefix + ".inj");
  }

  MemoryState make_state() const { return make_memory_state(encoder); }

  /// Frames + actions -> [1, T*P, d]: projected patch tokens, plus the
  /// frame's action embedding on every token, plus spatial and temporal
  /// position embeddings.
  Tensor tokenize(const LatentSeq& seq) const {
    const long t_len = static_cast<long>(seq.frames.size());
    if (t_len == 0) {
      throw ContractError("tokenize: empty latent sequence");
    }
    if (t_len > cfg.context) {
      throw ContractError(msg("tokenize: ", t_len,
                              " frames exceed the context window C=",
                              cfg.context));
    }
    if (seq.actions.size() != seq.frames.size()) {
      throw ContractError(msg("tokenize: ", seq.frames.size(), " frames vs ",
                              seq.actions.size(), " actions"));
    }
    std::vector<Tensor> blocks;
    blocks.reserve(static_cast<std::size_t>(t_len));
    for (long t = 0; t < t_len; ++t) {
      const int a = seq.actions[static_cast<std::size_t>(t)];
      if (a < 0 || a >= cfg.n_actions) {
        throw ContractError(msg("tokenize: unknown action id ", a));
      }
      const Tensor& toks = seq.frames[static_cast<std::size_t>(t)].tokens;
      if (toks.ndim() != 2 || toks.dim(0) != cfg.tokens_per_frame ||
          toks.dim(1) != cfg.d_lat) {
        throw ShapeError(msg("tokenize: frame tokens ",
                             shape_str(toks.shape()), ", expected [",
                             cfg.tokens_per_frame, ",", cfg.d_lat, "]"));
      }
      Tensor block = in_proj(toks);                        // [P, d]
      block = add(block, slice(action_emb, 0, a, 1));      // action row
      block = add(block, spatial_emb);
      block = add(block, slice(temporal_emb, 0, t, 1));
      blocks.push_back(block);
    }
    return reshape(concat(blocks, 0),
                   {1, t_len * cfg.tokens_per_frame, cfg.d});
  }

  /// Full transformer pass. Returns the post-final-norm stream
  /// [1, M + T*P, d] where M is the number of prepended memory rows.
  Tensor forward_stream(const LatentSeq& seq, const MemoryReadout& m,
                        long* n_prepended_out = nullptr) const {
    Tensor x = tokenize(seq);
    long n_prepended = 0;
    if (cfg.injector == InjectorKind::Prepend && m.rows() > 0) {
      n_prepended = m.rows();
      x = concat({injector.prepend(m), x}, 1);
    }
    if (n_prepended_out) *n_prepended_out = n_prepended;

    std::optional<Tensor> pooled;
    if (injector.per_layer() && m.rows() > 0) pooled = pool_memory(m);
    const Tensor* pooled_ptr = pooled ? &*pooled : nullptr;

    AttentionConfig acfg;
    acfg.d = cfg.d;
    acfg.num_heads = cfg.heads;
    acfg.causal = true;
    acfg.n_prepended = n_prepended;
    acfg.tokens_per_frame = cfg.tokens_per_frame;

    for (long i = 0; i < cfg.layers; ++i) {
      const Layer& l = layers[static_cast<std::size_t>(i)];
      const LayerInjector& inj = injector.layer(i);
      const auto delta = inj.lora_delta(pooled_ptr);
      const Tensor a_in = l.ln1(x);
      x = add(x, l.attn(a_in, a_in, acfg, delta ? &*delta : nullptr));
      x = inj.post_attention(x, m, pooled_ptr);
      x = add(x, l.mlp(inj.pre_ffn_norm(x, l.ln2, pooled_ptr)));
    }
    return final_ln(x);
  }

  /// Predict the latent frame after the newest frame of `seq`. Frames not
  /// yet absorbed by the memory state (source_time past the state's last)
  /// are consumed first, so the state advances by exactly the new frames.
  LatentFrame predict_next(MemoryState& mem, const LatentSeq& seq) const {
    if (seq.frames.empty()) {
      throw ContractError("predict_next: empty latent sequence");
    }
    std::vector<LatentFrame> fresh;
    for (const LatentFrame& f : seq.frames) {
      if (f.source_time > mem.last_time) fresh.push_back(f);
    }
    advance_memory(encoder, mem, fresh);
    const MemoryReadout m = read_memory(encoder, mem);

    long n_prepended = 0;
    Tensor x = forward_stream(seq, m, &n_prepended);
    const long t_len = static_cast<long>(seq.frames.size());
    const long last_start =
        n_prepended + (t_len - 1) * cfg.tokens_per_frame;
    Tensor block = reshape(slice(x, 1, last_start, cfg.tokens_per_frame),
                           {cfg.tokens_per_frame, cfg.d});
    LatentFrame out;
    out.tokens = head(block);
    out.source_time = seq.frames.back().source_time + 1;
    return out;
  }

  /// Teacher-forced loss over one window: frames[0..n-2] are inputs,
  /// frames[1..n-1] targets, all predicted in a single frame-causal pass.
  Tensor window_loss(const LatentSeq& window, const MemoryReadout& m) const {
    const long n = static_cast<long>(window.frames.size());
    if (n < 2) {
      throw ContractError(msg("window_loss: need at least 2 frames, got ",
                              n));
    }
    if (window.actions.size() != window.frames.size()) {
      throw ContractError("window_loss: frame/action count mismatch");
    }
    LatentSeq inputs;
    inputs.frames.assign(window.frames.begin(), window.frames.end() - 1);
    inputs.actions.assign(window.actions.begin(), window.actions.end() - 1);

    long n_prepended = 0;
    Tensor x = forward_stream(inputs, m, &n_prepended);
    const long t_in = n - 1;
    Tensor stream = slice(x, 1, n_prepended, t_in * cfg.tokens_per_frame);
    Tensor pred = head(stream);  // [1, T*P, d_lat]

    std::vector<Tensor> target_blocks;
    target_blocks.reserve(static_cast<std::size_t>(t_in));
    for (long t = 1; t < n; ++t) {
      target_blocks.push_back(
          window.frames[static_cast<std::size_t>(t)].tokens.detach());
    }
    Tensor target = reshape(concat(target_blocks, 0),
                            {1, t_in * cfg.tokens_per_frame, cfg.d_lat});
    return mse(pred, target);
  }

  /// Open-loop imagination: context must span exactly C frames; at step h
  /// the newest window frame's action is overridden with step_actions[h],
  /// the prediction is appended and the oldest frame dropped. Memory evolves
  /// from the predicted latents.
  std::vector<LatentFrame> rollout_imagination(
      MemoryState& mem, const LatentSeq& context,
      const std::vector<int>& step_actions) const {
    if (static_cast<long>(context.frames.size()) != cfg.context) {
      throw ContractError(msg("rollout: context has ", context.frames.size(),
                              " frames, expected C=", cfg.context));
    }
    if (context.actions.size() != context.frames.size()) {
      throw ContractError("rollout: frame/action count mismatch");
    }
    std::vector<LatentFrame> win = context.frames;
    std::vector<int> acts = context.actions;
    std::vector<LatentFrame> preds;
    preds.reserve(step_actions.size());
    for (int a : step_actions) {
      acts.back() = a;
      LatentSeq seq{win, acts};
      LatentFrame z = predict_next(mem, seq);
      preds.push_back(z);
      win.erase(win.begin());
      win.push_back(z);
      acts.erase(acts.begin());
      acts.push_back(0);  // placeholder, overridden next step
    }
    return preds;
  }
};

/// One optimization step over a batch of training windows. The predictor
/// loss is the teacher-forced latent MSE; the decoder is trained in the same
/// step on detached ground-truth latents with image MSE (its gradient cannot
/// reach predictor parameters, and the frozen encoder receives none at all).
/// Gradients accumulate across windows, then a single Adam step runs.
struct TrainingWindow {
  LatentSeq window;          // >= 2 latent frames with actions
  MemoryReadout readout;     // conditioning for this window (may be empty)
  Tensor gt_images;          // [n, 3, H, W] decoder targets, or default
};

inline double training_step(const WorldModel& model, const Codec& codec,
                            const std::vector<TrainingWindow>& batch,
                            Adam& opt) {
  if (batch.empty()) throw ContractError("training_step: empty batch");
  opt.zero_grad();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const TrainingWindow& tw : batch) {
    Tensor loss = model.window_loss(tw.window, tw.readout);
    if (tw.gt_images.ndim() == 4) {
      std::vector<Tensor> lat;
      lat.reserve(tw.window.frames.size());
      for (const LatentFrame& f : tw.window.frames) {
        lat.push_back(f.tokens.detach());
      }
      Tensor z = reshape(concat(lat, 0),
                         {static_cast<long>(tw.window.frames.size()),
                          model.cfg.tokens_per_frame, model.cfg.d_lat});
      loss = add(loss, mse(codec.decode_batch_raw(z), tw.gt_images));
    }
    total += loss.data()[0];
    mul_scalar(loss, inv_b).backward();
  }
  opt.step();
  return total * inv_b;
}

}  // namespace memstream
