#include "muie/metrics.hpp"

#include <cmath>
#include <vector>

namespace muie {

double mse(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse: " + a.shape().str() + " vs " + b.shape().str());
  if (a.numel() == 0) throw ShapeError("mse: empty images");
  double acc = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.numel());
}

double psnr(const Tensor<float>& a, const Tensor<float>& b) {
  const double err = mse(a, b);
  if (err == 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(1.0 / err));
}

namespace {

// Valid-mode separable filtering of one plane.
std::vector<double> filter_valid(const std::vector<double>& plane, std::int64_t h, std::int64_t w,
                                 const std::vector<double>& taps) {
  const auto k = static_cast<std::int64_t>(taps.size());
  const std::int64_t ow = w - k + 1, oh = h - k + 1;
  std::vector<double> rows(static_cast<std::size_t>(h * ow));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < ow; ++x) {
      double acc = 0;
      for (std::int64_t i = 0; i < k; ++i) acc += taps[i] * plane[y * w + x + i];
      rows[y * ow + x] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(oh * ow));
  for (std::int64_t y = 0; y < oh; ++y)
    for (std::int64_t x = 0; x < ow; ++x) {
      double acc = 0;
      for (std::int64_t i = 0; i < k; ++i) acc += taps[i] * rows[(y + i) * ow + x];
      out[y * ow + x] = acc;
    }
  return out;
}

}  // namespace

double ssim(const Tensor<float>& a, const Tensor<float>& b, const SsimOptions& options) {
  if (a.shape() != b.shape()) throw ShapeError("ssim: " + a.shape().str() + " vs " + b.shape().str());
  const Shape s = a.shape();
  if (s.h < options.window || s.w < options.window)
    throw ShapeError("ssim: image " + s.str() + " smaller than the " + std::to_string(options.window) + "px window");

  std::vector<double> taps(static_cast<std::size_t>(options.window));
  const double centre = (options.window - 1) / 2.0;
  double total = 0;
  for (int i = 0; i < options.window; ++i) {
    const double d = i - centre;
    taps[i] = std::exp(-d * d / (2.0 * options.sigma * options.sigma));
    total += taps[i];
  }
  for (auto& t : taps) t /= total;

  const double c1 = std::pow(options.k1 * options.dynamic_range, 2);
  const double c2 = std::pow(options.k2 * options.dynamic_range, 2);
  const std::int64_t pix = s.plane();
  double sum_over_planes = 0;
  for (std::int64_t plane = 0; plane < s.n * s.c; ++plane) {
    std::vector<double> pa(pix), pb(pix), aa(pix), bb(pix), ab(pix);
    for (std::int64_t i = 0; i < pix; ++i) {
      pa[i] = a[plane * pix + i];
      pb[i] = b[plane * pix + i];
      aa[i] = pa[i] * pa[i];
      bb[i] = pb[i] * pb[i];
      ab[i] = pa[i] * pb[i];
    }
    const auto mu_a = filter_valid(pa, s.h, s.w, taps);
    const auto mu_b = filter_valid(pb, s.h, s.w, taps);
    const auto e_aa = filter_valid(aa, s.h, s.w, taps);
    const auto e_bb = filter_valid(bb, s.h, s.w, taps);
    const auto e_ab = filter_valid(ab, s.h, s.w, taps);
    double acc = 0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
      const double ma = mu_a[i], mb = mu_b[i];
      const double va = e_aa[i] - ma * ma, vb = e_bb[i] - mb * mb, cov = e_ab[i] - ma * mb;
      acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    sum_over_planes += acc / static_cast<double>(mu_a.size());
  }
  return sum_over_planes / static_cast<double>(s.n * s.c);
}

}  // namespace muie
