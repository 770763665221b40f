#pragma once

// Straightforward double-precision reference implementations. They share no
// code with the library beyond the Tensor container and WeightStore lookup.

#include "muie/scan.hpp"
#include "muie/weights.hpp"

#include <cmath>
#include <functional>
#include <vector>

namespace oracle {

using muie::Shape;
using T = muie::Tensor<double>;

inline T conv2d(const T& x, const T& w, const T* b, int stride, int pad, int groups) {
  const Shape s = x.shape(), k = w.shape();
  const std::int64_t ho = (s.h + 2 * pad - k.h) / stride + 1, wo = (s.w + 2 * pad - k.w) / stride + 1;
  const std::int64_t cin_g = s.c / groups, cout_g = k.n / groups;
  T out(Shape{s.n, k.n, ho, wo});
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t co = 0; co < k.n; ++co)
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          double acc = b ? (*b)[co] : 0.0;
          const std::int64_t g = co / cout_g;
          for (std::int64_t ci = 0; ci < cin_g; ++ci)
            for (std::int64_t ky = 0; ky < k.h; ++ky)
              for (std::int64_t kx = 0; kx < k.w; ++kx) {
                const std::int64_t iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
                if (iy < 0 || ix < 0 || iy >= s.h || ix >= s.w) continue;
                acc += x(n, g * cin_g + ci, iy, ix) * w(co, ci, ky, kx);
              }
          out(n, co, oy, ox) = acc;
        }
  return out;
}

inline T layer_norm(const T& x, const T& gamma, const T& beta, double eps = 1e-5) {
  const Shape s = x.shape();
  T out(s);
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t y = 0; y < s.h; ++y)
      for (std::int64_t xx = 0; xx < s.w; ++xx) {
        double mu = 0, var = 0;
        for (std::int64_t c = 0; c < s.c; ++c) mu += x(n, c, y, xx);
        mu /= static_cast<double>(s.c);
        for (std::int64_t c = 0; c < s.c; ++c) var += (x(n, c, y, xx) - mu) * (x(n, c, y, xx) - mu);
        var /= static_cast<double>(s.c);
        for (std::int64_t c = 0; c < s.c; ++c)
          out(n, c, y, xx) = (x(n, c, y, xx) - mu) / std::sqrt(var + eps) * gamma[c] + beta[c];
      }
  return out;
}

inline double gelu(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }
inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }
inline double silu(double v) { return v * sigmoid(v); }
inline double softplus(double v) { return v > 30 ? v : std::log(1.0 + std::exp(v)); }

inline T map(const T& x, const std::function<double(double)>& f) {
  T out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
  return out;
}

// Elementwise with extents of 1 stretched.
inline T binary(const T& a, const T& b, const std::function<double(double, double)>& f) {
  const Shape sa = a.shape(), sb = b.shape();
  const Shape s{std::max(sa.n, sb.n), std::max(sa.c, sb.c), std::max(sa.h, sb.h), std::max(sa.w, sb.w)};
  auto at = [](const T& t, std::int64_t n, std::int64_t c, std::int64_t y, std::int64_t x) {
    const Shape q = t.shape();
    return t(q.n == 1 ? 0 : n, q.c == 1 ? 0 : c, q.h == 1 ? 0 : y, q.w == 1 ? 0 : x);
  };
  T out(s);
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t x = 0; x < s.w; ++x) out(n, c, y, x) = f(at(a, n, c, y, x), at(b, n, c, y, x));
  return out;
}
inline T add(const T& a, const T& b) { return binary(a, b, [](double p, double q) { return p + q; }); }
inline T mul(const T& a, const T& b) { return binary(a, b, [](double p, double q) { return p * q; }); }

inline T gap(const T& x) {
  const Shape s = x.shape();
  T out(Shape{s.n, s.c, 1, 1});
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c) {
      double acc = 0;
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t xx = 0; xx < s.w; ++xx) acc += x(n, c, y, xx);
      out(n, c, 0, 0) = acc / static_cast<double>(s.plane());
    }
  return out;
}

// out[n, c*f*f + dy*f + dx, y, x] = in[n, c, y*f + dy, x*f + dx]
inline T pixel_down(const T& x, int f) {
  const Shape s = x.shape();
  T out(Shape{s.n, s.c * f * f, s.h / f, s.w / f});
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    std::int64_t r = i;
    const std::int64_t ox = r % out.shape().w;
    r /= out.shape().w;
    const std::int64_t oy = r % out.shape().h;
    r /= out.shape().h;
    const std::int64_t oc = r % out.shape().c;
    const std::int64_t n = r / out.shape().c;
    const std::int64_t c = oc / (f * f), dy = (oc % (f * f)) / f, dx = oc % f;
    out[i] = x(n, c, oy * f + dy, ox * f + dx);
  }
  return out;
}

inline T pixel_up(const T& x, int f) {
  const Shape s = x.shape();
  T out(Shape{s.n, s.c / (f * f), s.h * f, s.w * f});
  for (std::int64_t n = 0; n < out.shape().n; ++n)
    for (std::int64_t c = 0; c < out.shape().c; ++c)
      for (std::int64_t y = 0; y < out.shape().h; ++y)
        for (std::int64_t xx = 0; xx < out.shape().w; ++xx)
          out(n, c, y, xx) = x(n, c * f * f + (y % f) * f + (xx % f), y / f, xx / f);
  return out;
}

inline T slice(const T& x, std::int64_t start, std::int64_t count) {
  const Shape s = x.shape();
  T out(Shape{s.n, count, s.h, s.w});
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < count; ++c)
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t xx = 0; xx < s.w; ++xx) out(n, c, y, xx) = x(n, start + c, y, xx);
  return out;
}

/// Parameters of one scan direction as plain tensors.
struct Scan {
  T proj_delta, delta_bias, proj_b, proj_c, a_log, d_skip;
};

inline Scan scan_from(const muie::WeightStore<double>& store, const std::string& prefix) {
  return {store.at(prefix + ".proj_delta"), store.at(prefix + ".delta_bias"), store.at(prefix + ".proj_b"),
          store.at(prefix + ".proj_c"),     store.at(prefix + ".a_log"),      store.at(prefix + ".d_skip")};
}

/// Sequential recurrence on u [N,d,1,L], one time step at a time.
inline T scan_1d(const T& u, const Scan& p) {
  const Shape s = u.shape();
  const std::int64_t d = s.c, L = s.w, n_state = p.a_log.shape().c;
  T y(s);
  for (std::int64_t n = 0; n < s.n; ++n) {
    std::vector<double> h(static_cast<std::size_t>(d * n_state), 0.0);
    for (std::int64_t t = 0; t < L; ++t) {
      std::vector<double> B(n_state, 0.0), C(n_state, 0.0), delta(d, 0.0);
      for (std::int64_t k = 0; k < n_state; ++k)
        for (std::int64_t j = 0; j < d; ++j) {
          B[k] += p.proj_b(k, j, 0, 0) * u(n, j, 0, t);
          C[k] += p.proj_c(k, j, 0, 0) * u(n, j, 0, t);
        }
      for (std::int64_t i = 0; i < d; ++i) {
        double raw = p.delta_bias[i];
        for (std::int64_t j = 0; j < d; ++j) raw += p.proj_delta(i, j, 0, 0) * u(n, j, 0, t);
        delta[i] = softplus(raw);
      }
      for (std::int64_t i = 0; i < d; ++i) {
        double out = p.d_skip[i] * u(n, i, 0, t);
        for (std::int64_t k = 0; k < n_state; ++k) {
          const double a = -std::exp(p.a_log(i, k, 0, 0));
          double& state = h[static_cast<std::size_t>(i * n_state + k)];
          state = std::exp(delta[i] * a) * state + delta[i] * B[k] * u(n, i, 0, t);
          out += C[k] * state;
        }
        y(n, i, 0, t) = out;
      }
    }
  }
  return y;
}

inline std::int64_t position(muie::ScanOrder order, std::int64_t y, std::int64_t x, std::int64_t h, std::int64_t w) {
  switch (order) {
    case muie::ScanOrder::RowForward: return y * w + x;
    case muie::ScanOrder::RowBackward: return h * w - 1 - (y * w + x);
    case muie::ScanOrder::ColumnForward: return x * h + y;
    case muie::ScanOrder::ColumnBackward: return h * w - 1 - (x * h + y);
  }
  return 0;
}

inline T ss2d(const T& x, const std::vector<Scan>& dirs) {
  const Shape s = x.shape();
  T out(s);
  for (std::size_t k = 0; k < 4; ++k) {
    const auto order = muie::kScanOrders[k];
    T seq(Shape{s.n, s.c, 1, s.plane()});
    for (std::int64_t n = 0; n < s.n; ++n)
      for (std::int64_t c = 0; c < s.c; ++c)
        for (std::int64_t y = 0; y < s.h; ++y)
          for (std::int64_t xx = 0; xx < s.w; ++xx) seq(n, c, 0, position(order, y, xx, s.h, s.w)) = x(n, c, y, xx);
    const T ys = scan_1d(seq, dirs[k]);
    for (std::int64_t n = 0; n < s.n; ++n)
      for (std::int64_t c = 0; c < s.c; ++c)
        for (std::int64_t y = 0; y < s.h; ++y)
          for (std::int64_t xx = 0; xx < s.w; ++xx) out(n, c, y, xx) += ys(n, c, 0, position(order, y, xx, s.h, s.w));
  }
  return out;
}

// Block compositions written directly from the block definitions.
struct Store {
  const muie::WeightStore<double>& w;
  const T& operator()(const std::string& name) const { return w.at(name); }
  T conv(const T& x, const std::string& prefix, int pad, int groups) const {
    return conv2d(x, w.at(prefix + ".weight"), &w.at(prefix + ".bias"), 1, pad, groups);
  }
  T ln(const T& x, const std::string& prefix) const {
    return layer_norm(x, w.at(prefix + ".gamma"), w.at(prefix + ".beta"));
  }
};

inline T vss(const T& x, const Store& s, const std::string& p) {
  const T normed = s.ln(x, p + ".ln_in");
  const T b1 = s.conv(normed, p + ".proj_b1", 0, 1);
  T b2 = s.conv(normed, p + ".proj_b2", 0, 1);
  b2 = map(s.conv(b2, p + ".dwconv", 1, static_cast<int>(b2.shape().c)), silu);
  std::vector<Scan> dirs;
  for (int k = 0; k < 4; ++k) dirs.push_back(scan_from(s.w, p + ".scan." + std::to_string(k)));
  b2 = s.ln(ss2d(b2, dirs), p + ".ln_scan");
  return add(x, s.conv(s.ln(mul(b2, b1), p + ".ln_out"), p + ".proj_out", 0, 1));
}

inline T dib(const T& map_vss, const T& map_local, const Store& s, const std::string& p) {
  auto squash = [](double v) { return sigmoid(gelu(v)); };
  const T g = map(s.conv(map_vss, p + ".pw_spatial", 0, 1), squash);
  const T l = map(s.conv(gap(map_local), p + ".pw_channel", 0, 1), squash);
  return add(mul(g, map_local), mul(l, map_vss));
}

inline T sgfn(const T& x, const Store& s, const std::string& p) {
  const T h = s.conv(s.ln(x, p + ".ln"), p + ".pw_expand", 0, 1);
  const std::int64_t half = h.shape().c / 2;
  const T gate = map(s.conv(slice(h, 0, half), p + ".dw_gate", 1, static_cast<int>(half)), gelu);
  return add(x, s.conv(mul(gate, slice(h, half, half)), p + ".pw_project", 0, 1));
}

inline T block(const T& x, const Store& s, const std::string& p) {
  const T local = s.conv(x, p + ".dib.dw_local", 1, static_cast<int>(x.shape().c));
  return sgfn(dib(vss(x, s, p + ".vss"), local, s, p + ".dib"), s, p + ".sgfn");
}

inline double psnr(const T& a, const T& b) {
  double acc = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  const double mse = acc / static_cast<double>(a.numel());
  return mse == 0 ? 100.0 : 10.0 * std::log10(1.0 / mse);
}

/// Windowed SSIM with an 11x11 Gaussian (sigma 1.5) evaluated directly at every
/// valid window position, averaged over positions then over channels.
inline double ssim(const T& a, const T& b) {
  const int k = 11;
  const double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  std::vector<double> g(k * k);
  double total = 0;
  for (int y = 0; y < k; ++y)
    for (int x = 0; x < k; ++x) {
      const double dy = y - 5, dx = x - 5;
      g[y * k + x] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      total += g[y * k + x];
    }
  for (auto& v : g) v /= total;
  const Shape s = a.shape();
  double channel_sum = 0;
  for (std::int64_t c = 0; c < s.c; ++c) {
    double acc = 0;
    std::int64_t count = 0;
    for (std::int64_t oy = 0; oy + k <= s.h; ++oy)
      for (std::int64_t ox = 0; ox + k <= s.w; ++ox) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int y = 0; y < k; ++y)
          for (int x = 0; x < k; ++x) {
            const double wgt = g[y * k + x], va = a(0, c, oy + y, ox + x), vb = b(0, c, oy + y, ox + x);
            ma += wgt * va;
            mb += wgt * vb;
            saa += wgt * va * va;
            sbb += wgt * vb * vb;
            sab += wgt * va * vb;
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
    channel_sum += acc / static_cast<double>(count);
  }
  return channel_sum / static_cast<double>(s.c);
}

inline double max_rel(const T& got, const T& want, double floor = 1e-6) {
  double worst = 0;
  for (std::int64_t i = 0; i < got.numel(); ++i)
    worst = std::max(worst, std::abs(got[i] - want[i]) / std::max(std::abs(want[i]), floor));
  return worst;
}

}  // namespace oracle
