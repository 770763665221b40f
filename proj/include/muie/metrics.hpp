#pragma once

#include "muie/tensor.hpp"

namespace muie {

/// Reported for identical images instead of +inf.
inline constexpr double kPsnrCapDb = 100.0;

/// 10*log10(1/MSE) over all channels jointly, MAX = 1. Inputs [1,3,H,W] in [0,1].
double psnr(const Tensor<float>& a, const Tensor<float>& b);

/// Mean squared error over every element.
double mse(const Tensor<float>& a, const Tensor<float>& b);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

/// Gaussian-windowed SSIM per channel, averaged over valid (unpadded) window
/// positions and then over channels. Requires H,W >= window.
double ssim(const Tensor<float>& a, const Tensor<float>& b, const SsimOptions& options = {});

}  // namespace muie
