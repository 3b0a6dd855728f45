#pragma once

// Image/latent metrics. Plain double arithmetic over tensor storage — the
// metric suite never participates in gradients.

#include <cmath>

#include "memstream/tensor.hpp"

namespace memstream {

/// Mean squared difference over all elements.
inline double mean_squared_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(msg("mse metric: shapes differ, ", shape_str(a.shape()),
                         " vs ", shape_str(b.shape())));
  }
  double total = 0.0;
  for (long i = 0; i < a.numel(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    total += d * d;
  }
  return total / static_cast<double>(a.numel());
}

/// Structural similarity for [C,H,W] images in [0,1]: 8x8 uniform window,
/// stride 1, K1=0.01, K2=0.03, L=1, averaged over channels and windows.
inline double ssim(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(msg("ssim: shapes differ, ", shape_str(a.shape()),
                         " vs ", shape_str(b.shape())));
  }
  if (a.ndim() != 3) {
    throw ShapeError(msg("ssim expects [C,H,W], got ", shape_str(a.shape())));
  }
  constexpr int kWin = 8;
  constexpr double kC1 = 0.01 * 0.01;  // (K1·L)^2
  constexpr double kC2 = 0.03 * 0.03;  // (K2·L)^2
  const long c = a.dim(0), h = a.dim(1), w = a.dim(2);
  if (h < kWin || w < kWin) {
    throw ContractError(msg("ssim: image ", h, "x", w,
                            " smaller than the 8x8 window"));
  }

  const double* pa = a.data().data();
  const double* pb = b.data().data();
  constexpr double kInvN = 1.0 / (kWin * kWin);
  double total = 0.0;
  long windows = 0;
  for (long ch = 0; ch < c; ++ch) {
    const double* xa = pa + ch * h * w;
    const double* xb = pb + ch * h * w;
    for (long y = 0; y + kWin <= h; ++y) {
      for (long x = 0; x + kWin <= w; ++x) {
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (int j = 0; j < kWin; ++j) {
          const double* ra = xa + (y + j) * w + x;
          const double* rb = xb + (y + j) * w + x;
          for (int i = 0; i < kWin; ++i) {
            sa += ra[i];
            sb += rb[i];
            saa += ra[i] * ra[i];
            sbb += rb[i] * rb[i];
            sab += ra[i] * rb[i];
          }
        }
        const double mu_a = sa * kInvN, mu_b = sb * kInvN;
        const double var_a = saa * kInvN - mu_a * mu_a;
        const double var_b = sbb * kInvN - mu_b * mu_b;
        const double cov = sab * kInvN - mu_a * mu_b;
        total += ((2 * mu_a * mu_b + kC1) * (2 * cov + kC2)) /
                 ((mu_a * mu_a + mu_b * mu_b + kC1) * (var_a + var_b + kC2));
        ++windows;
      }
    }
  }
  return total / static_cast<double>(windows);
}

}  // namespace memstream
