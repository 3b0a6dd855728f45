#pragma once

// Latent codec: a three-layer CNN encoder (strides 2, 2, 1) producing patch
// tokens, and a transposed-CNN decoder (two stride-2 upsampling layers plus
// a 1x1 channel projection). The encoder is pretrained as an autoencoder and
// then frozen; the decoder exists for visualization and image metrics only.

#include <string>
#include <vector>

#include "memstream/image.hpp"
#include "memstream/nn.hpp"
#include "memstream/optim.hpp"

namespace memstream {

/// Patch tokens of one frame, [P, d_lat], plus the frame's stream index.
struct LatentFrame {
  Tensor tokens;
  long source_time = 0;
};

struct CodecConfig {
  int obs_res = 32;
  long width1 = 32;
  long width2 = 64;
  long d_lat = 128;

  long patch_side() const { return obs_res / 4; }
  long tokens_per_frame() const { return patch_side() * patch_side(); }

  void validate() const {
    if (obs_res % 4 != 0 || obs_res <= 0) {
      throw ContractError(msg("codec: observation size ", obs_res,
                              " must be a positive multiple of 4"));
    }
  }
};

struct Codec {
  CodecConfig cfg;
  // Encoder: 3x3 convs, strides 2/2/1, GELU between.
  Tensor enc1_w, enc1_b, enc2_w, enc2_b, enc3_w, enc3_b;
  // Decoder: two 4x4 stride-2 transposed convs, then a 1x1 projection.
  Tensor dec1_w, dec1_b, dec2_w, dec2_b, proj_w, proj_b;

  Codec() = default;

  Codec(CodecConfig cfg_, RandomSource& rng) : cfg(cfg_) {
    cfg.validate();
    auto conv_w = [&rng](long f, long c, long k) {
      // Fan-in-scaled init keeps activations at unit scale through the
      // stride stack; flat 0.02 would shrink the signal ~10x per layer.
      const double std_dev = std::sqrt(2.0 / static_cast<double>(c * k * k));
      Tensor w = Tensor::trunc_normal({f, c, k, k}, rng, std_dev);
      w.set_requires_grad(true);
      return w;
    };
    auto conv_b = [](long f) {
      Tensor b = Tensor::zeros({f, 1, 1});
      b.set_requires_grad(true);
      return b;
    };
    enc1_w = conv_w(cfg.width1, 3, 3);
    enc1_b = conv_b(cfg.width1);
    enc2_w = conv_w(cfg.width2, cfg.width1, 3);
    enc2_b = conv_b(cfg.width2);
    enc3_w = conv_w(cfg.d_lat, cfg.width2, 3);
    enc3_b = conv_b(cfg.d_lat);
    dec1_w = conv_w(cfg.d_lat, cfg.width2, 4);
    dec1_b = conv_b(cfg.width2);
    dec2_w = conv_w(cfg.width2, cfg.width1, 4);
    dec2_b = conv_b(cfg.width1);
    proj_w = conv_w(3, cfg.width1, 1);
    proj_b = conv_b(3);
  }

  /// [N,3,H,W] in [0,1] -> [N,P,d_lat].
  Tensor encode_batch(const Tensor& x) const {
    if (x.ndim() != 4 || x.dim(1) != 3 || x.dim(2) != cfg.obs_res ||
        x.dim(3) != cfg.obs_res) {
      throw ContractError(msg("encoder expects [N,3,", cfg.obs_res, ",",
                              cfg.obs_res, "], got ", shape_str(x.shape())));
    }
    Tensor h = gelu(add(conv2d(x, enc1_w, 2, 1), enc1_b));
    h = gelu(add(conv2d(h, enc2_w, 2, 1), enc2_b));
    h = add(conv2d(h, enc3_w, 1, 1), enc3_b);  // [N,d_lat,s,s]
    const long n = x.dim(0), p = cfg.tokens_per_frame();
    return permute(reshape(h, {n, cfg.d_lat, p}), {0, 2, 1});
  }

  LatentFrame encode_frame(const Tensor& x, long source_time) const {
    Tensor batched = reshape(x, {1, 3, cfg.obs_res, cfg.obs_res});
    Tensor tokens = reshape(encode_batch(batched),
                            {cfg.tokens_per_frame(), cfg.d_lat});
    return LatentFrame{tokens, source_time};
  }

  /// [N,P,d_lat] -> [N,3,H,W], unclamped (training path).
  Tensor decode_batch_raw(const Tensor& z) const {
    const long p = cfg.tokens_per_frame(), s = cfg.patch_side();
    if (z.ndim() != 3 || z.dim(1) != p || z.dim(2) != cfg.d_lat) {
      throw ContractError(msg("decoder expects [N,", p, ",", cfg.d_lat,
                              "], got ", shape_str(z.shape())));
    }
    const long n = z.dim(0);
    Tensor h = reshape(permute(z, {0, 2, 1}), {n, cfg.d_lat, s, s});
    h = gelu(add(conv_transpose2d(h, dec1_w, 2, 1), dec1_b));
    h = gelu(add(conv_transpose2d(h, dec2_w, 2, 1), dec2_b));
    return add(conv2d(h, proj_w, 1, 0), proj_b);
  }

  /// Single latent -> [3,H,W] clamped to [0,1] (metrics/visualization path).
  Tensor decode_latent(const LatentFrame& z) const {
    Tensor batched = reshape(z.tokens, {1, cfg.tokens_per_frame(), cfg.d_lat});
    return clamp01(
        reshape(decode_batch_raw(batched), {3, cfg.obs_res, cfg.obs_res}));
  }

  void register_params(ParamSet& ps, const std::string& prefix) {
    ps.add(prefix + ".enc1.w", enc1_w);
    ps.add(prefix + ".enc1.b", enc1_b);
    ps.add(prefix + ".enc2.w", enc2_w);
    ps.add(prefix + ".enc2.b", enc2_b);
    ps.add(prefix + ".enc3.w", enc3_w);
    ps.add(prefix + ".enc3.b", enc3_b);
    ps.add(prefix + ".dec1.w", dec1_w);
    ps.add(prefix + ".dec1.b", dec1_b);
    ps.add(prefix + ".dec2.w", dec2_w);
    ps.add(prefix + ".dec2.b", dec2_b);
    ps.add(prefix + ".proj.w", proj_w);
    ps.add(prefix + ".proj.b", proj_b);
  }

  std::vector<Tensor> encoder_params() const {
    return {enc1_w, enc1_b, enc2_w, enc2_b, enc3_w, enc3_b};
  }
  std::vector<Tensor> decoder_params() const {
    return {dec1_w, dec1_b, dec2_w, dec2_b, proj_w, proj_b};
  }

  /// Permanently excludes the encoder from optimization.
  void freeze_encoder() {
    for (Tensor t : encoder_params()) t.set_requires_grad(false);
  }

  bool encoder_frozen() const {
    for (Tensor t : encoder_params()) {
      if (t.requires_grad()) return false;
    }
    return true;
  }
};

/// Packs a subset of frames into one [B,3,H,W] tensor.
inline Tensor frames_to_batch(const std::vector<Frame>& frames,
                              const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ContractError("frames_to_batch: empty batch");
  const int h = frames[indices[0]].h, w = frames[indices[0]].w;
  std::vector<double> data;
  data.reserve(indices.size() * 3 * h * w);
  for (const std::size_t idx : indices) {
    const Frame& f = frames[idx];
    if (f.h != h || f.w != w) {
      throw ContractError("frames_to_batch: mixed resolutions");
    }
    for (const std::uint8_t v : f.rgb) data.push_back(v / 255.0);
  }
  return Tensor({static_cast<long>(indices.size()), 3, h, w},
                std::move(data));
}

/// Autoencoder pretraining: minimizes image MSE end-to-end over the given
/// frames. Returns per-epoch mean losses. The caller freezes the encoder
/// afterwards; divergence surfaces as a numeric error from the tape or the
/// optimizer.
inline std::vector<double> pretrain_autoencoder(
    Codec& codec, const std::vector<Frame>& frames, int epochs,
    int batch_size, double base_lr, std::uint64_t seed) {
  if (frames.empty()) {
    throw ContractError("pretrain_autoencoder: empty dataset");
  }
  ParamSet ps;
  codec.register_params(ps, "codec");

  const long steps_per_epoch =
      (frames.size() + batch_size - 1) / batch_size;
  AdamConfig opt_cfg;
  opt_cfg.base_lr = base_lr;
  opt_cfg.total_steps = std::max<long>(1, epochs * steps_per_epoch);
  Adam opt(ps, opt_cfg);

  RandomSource rng(derive_seed(seed, "codec_pretrain"));
  std::vector<std::size_t> order(frames.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<double> epoch_losses;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    long batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      const std::vector<std::size_t> batch(order.begin() + start,
                                           order.begin() + end);
      Tensor x = frames_to_batch(frames, batch);
      Tensor loss = mse(codec.decode_batch_raw(codec.encode_batch(x)), x);
      opt.zero_grad();
      loss.backward();
      opt.step();
      total += loss.item();
      ++batches;
    }
    epoch_losses.push_back(total / batches);
  }
  return epoch_losses;
}

}  // namespace memstream
