#include "muie/ops.hpp"

#include <cmath>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace muie {

void set_num_threads(int threads) {
#ifdef _OPENMP
  omp_set_num_threads(threads < 1 ? 1 : threads);
#else
  (void)threads;
#endif
}

int num_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace {

template <typename Scalar>
void push_grad(const Var<Scalar>& v, const Tensor<Scalar>& g) {
  if (v.requires_grad()) v.node()->accumulate(g);
}

template <typename Scalar>
bool any_grad(std::initializer_list<const Var<Scalar>*> vars) {
  for (const auto* v : vars)
    if (v->defined() && v->requires_grad()) return true;
  return false;
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}
double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
double softplus_value(double x) { return x > 20.0 ? x : std::log1p(std::exp(x)); }

// im2col for one group of one batch item: rows (ci, ky, kx), columns output pixels.
template <typename Scalar>
void im2col(const Scalar* in, std::int64_t channels, std::int64_t h, std::int64_t w, int kh, int kw,
            int stride, int pad, std::int64_t oh, std::int64_t ow, Scalar* col) {
  for (std::int64_t ci = 0; ci < channels; ++ci)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        Scalar* row = col + ((ci * kh + ky) * kw + kx) * oh * ow;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t iy = oy * stride - pad + ky;
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t ix = ox * stride - pad + kx;
            row[oy * ow + ox] =
                (iy >= 0 && iy < h && ix >= 0 && ix < w) ? in[(ci * h + iy) * w + ix] : Scalar(0);
          }
        }
      }
}

template <typename Scalar>
void col2im(const Scalar* col, std::int64_t channels, std::int64_t h, std::int64_t w, int kh, int kw,
            int stride, int pad, std::int64_t oh, std::int64_t ow, Scalar* in) {
  for (std::int64_t ci = 0; ci < channels; ++ci)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        const Scalar* row = col + ((ci * kh + ky) * kw + kx) * oh * ow;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) in[(ci * h + iy) * w + ix] += row[oy * ow + ox];
          }
        }
      }
}

struct ConvGeometry {
  std::int64_t n, cin, h, w, cout, oh, ow;
  int kh, kw, stride, pad, groups;
  std::int64_t cin_g() const { return cin / groups; }
  std::int64_t cout_g() const { return cout / groups; }
  bool depthwise() const { return groups == cin && cout == cin && groups > 1; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

template <typename Scalar>
using RowMat = typename Tensor<Scalar>::RowMatrix;
template <typename Scalar>
using MapM = Eigen::Map<RowMat<Scalar>>;
template <typename Scalar>
using CMapM = Eigen::Map<const RowMat<Scalar>>;

template <typename Scalar>
Tensor<Scalar> conv_forward(const Tensor<Scalar>& x, const Tensor<Scalar>& wt, const Tensor<Scalar>* b,
                            const ConvGeometry& g) {
  Tensor<Scalar> y(Shape{g.n, g.cout, g.oh, g.ow});
  const std::int64_t opix = g.oh * g.ow;
  if (g.depthwise()) {
#pragma omp parallel for schedule(static)
    for (std::int64_t nc = 0; nc < g.n * g.cin; ++nc) {
      const std::int64_t c = nc % g.cin;
      const Scalar* in = x.data() + nc * g.h * g.w;
      const Scalar* k = wt.data() + c * g.kh * g.kw;
      Scalar* out = y.data() + nc * opix;
      const Scalar bias = b ? (*b)[c] : Scalar(0);
      for (std::int64_t oy = 0; oy < g.oh; ++oy)
        for (std::int64_t ox = 0; ox < g.ow; ++ox) {
          Scalar acc = 0;
          for (int ky = 0; ky < g.kh; ++ky) {
            const std::int64_t iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            for (int kx = 0; kx < g.kw; ++kx) {
              const std::int64_t ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.w) acc += k[ky * g.kw + kx] * in[iy * g.w + ix];
            }
          }
          out[oy * g.ow + ox] = acc + bias;
        }
    }
    return y;
  }
  const std::int64_t krows = g.cin_g() * g.kh * g.kw;
#pragma omp parallel for schedule(static)
  for (std::int64_t n = 0; n < g.n; ++n) {
    RowMat<Scalar> col;
    for (int grp = 0; grp < g.groups; ++grp) {
      const Scalar* in = x.data() + (n * g.cin + grp * g.cin_g()) * g.h * g.w;
      CMapM<Scalar> wmat(wt.data() + grp * g.cout_g() * krows, g.cout_g(), krows);
      MapM<Scalar> out(y.data() + (n * g.cout + grp * g.cout_g()) * opix, g.cout_g(), opix);
      if (g.pointwise()) {
        out.noalias() = wmat * CMapM<Scalar>(in, krows, opix);
      } else {
        col.resize(krows, opix);
        im2col(in, g.cin_g(), g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.oh, g.ow, col.data());
        out.noalias() = wmat * col;
      }
      if (b)
        for (std::int64_t co = 0; co < g.cout_g(); ++co) out.row(co).array() += (*b)[grp * g.cout_g() + co];
    }
  }
  return y;
}

template <typename Scalar>
void conv_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& wt, const Tensor<Scalar>& gy,
                   const ConvGeometry& g, Tensor<Scalar>* gx, Tensor<Scalar>* gw, Tensor<Scalar>* gb) {
  const std::int64_t opix = g.oh * g.ow;
  if (gb) {
    for (std::int64_t n = 0; n < g.n; ++n)
      for (std::int64_t c = 0; c < g.cout; ++c) {
        const Scalar* row = gy.data() + (n * g.cout + c) * opix;
        Scalar acc = 0;
        for (std::int64_t i = 0; i < opix; ++i) acc += row[i];
        (*gb)[c] += acc;
      }
  }
  if (g.depthwise()) {
    if (gx) {
#pragma omp parallel for schedule(static)
      for (std::int64_t nc = 0; nc < g.n * g.cin; ++nc) {
        const std::int64_t c = nc % g.cin;
        const Scalar* k = wt.data() + c * g.kh * g.kw;
        const Scalar* go = gy.data() + nc * opix;
        Scalar* gi = gx->data() + nc * g.h * g.w;
        for (std::int64_t oy = 0; oy < g.oh; ++oy)
          for (std::int64_t ox = 0; ox < g.ow; ++ox) {
            const Scalar v = go[oy * g.ow + ox];
            for (int ky = 0; ky < g.kh; ++ky) {
              const std::int64_t iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= g.h) continue;
              for (int kx = 0; kx < g.kw; ++kx) {
                const std::int64_t ix = ox * g.stride - g.pad + kx;
                if (ix >= 0 && ix < g.w) gi[iy * g.w + ix] += k[ky * g.kw + kx] * v;
              }
            }
          }
      }
    }
    if (gw) {
#pragma omp parallel for schedule(static)
      for (std::int64_t c = 0; c < g.cin; ++c) {
        Scalar* gk = gw->data() + c * g.kh * g.kw;
        for (std::int64_t n = 0; n < g.n; ++n) {
          const Scalar* in = x.data() + (n * g.cin + c) * g.h * g.w;
          const Scalar* go = gy.data() + (n * g.cin + c) * opix;
          for (int ky = 0; ky < g.kh; ++ky)
            for (int kx = 0; kx < g.kw; ++kx) {
              Scalar acc = 0;
              for (std::int64_t oy = 0; oy < g.oh; ++oy) {
                const std::int64_t iy = oy * g.stride - g.pad + ky;
                if (iy < 0 || iy >= g.h) continue;
                for (std::int64_t ox = 0; ox < g.ow; ++ox) {
                  const std::int64_t ix = ox * g.stride - g.pad + kx;
                  if (ix >= 0 && ix < g.w) acc += go[oy * g.ow + ox] * in[iy * g.w + ix];
                }
              }
              gk[ky * g.kw + kx] += acc;
            }
        }
      }
    }
    return;
  }
  const std::int64_t krows = g.cin_g() * g.kh * g.kw;
  RowMat<Scalar> col, gcol;
  for (std::int64_t n = 0; n < g.n; ++n)
    for (int grp = 0; grp < g.groups; ++grp) {
      const Scalar* in = x.data() + (n * g.cin + grp * g.cin_g()) * g.h * g.w;
      CMapM<Scalar> go(gy.data() + (n * g.cout + grp * g.cout_g()) * opix, g.cout_g(), opix);
      CMapM<Scalar> wmat(wt.data() + grp * g.cout_g() * krows, g.cout_g(), krows);
      if (gw) {
        MapM<Scalar> gwm(gw->data() + grp * g.cout_g() * krows, g.cout_g(), krows);
        if (g.pointwise()) {
          gwm.noalias() += go * CMapM<Scalar>(in, krows, opix).transpose();
        } else {
          col.resize(krows, opix);
          im2col(in, g.cin_g(), g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.oh, g.ow, col.data());
          gwm.noalias() += go * col.transpose();
        }
      }
      if (gx) {
        Scalar* gi = gx->data() + (n * g.cin + grp * g.cin_g()) * g.h * g.w;
        if (g.pointwise()) {
          MapM<Scalar>(gi, krows, opix).noalias() += wmat.transpose() * go;
        } else {
          gcol.noalias() = wmat.transpose() * go;
          col2im(gcol.data(), g.cin_g(), g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.oh, g.ow, gi);
        }
      }
    }
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  Shape out;
  std::int64_t* dst[4] = {&out.n, &out.c, &out.h, &out.w};
  for (int axis = 0; axis < 4; ++axis) {
    const std::int64_t x = a[axis], y = b[axis];
    if (x != y && x != 1 && y != 1)
      throw ShapeError("elementwise_binary: incompatible shapes " + a.str() + " and " + b.str());
    *dst[axis] = x == 1 ? y : x;
  }
  return out;
}

// Flat index into a possibly-broadcast operand for output coordinates.
struct BroadcastIndex {
  std::int64_t sn, sc, sh, sw;
  BroadcastIndex(const Shape& s) {
    sw = s.w == 1 ? 0 : 1;
    sh = s.h == 1 ? 0 : s.w;
    sc = s.c == 1 ? 0 : s.h * s.w;
    sn = s.n == 1 ? 0 : s.c * s.h * s.w;
  }
  std::int64_t operator()(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return n * sn + c * sc + h * sh + w * sw;
  }
};

}  // namespace

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& weight, const Var<Scalar>& bias, int stride,
                   int padding, int groups) {
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  if (stride <= 0) throw ShapeError("conv2d: stride must be positive");
  if (padding < 0) throw ShapeError("conv2d: negative padding");
  if (groups <= 0 || xs.c % groups != 0 || ws.n % groups != 0)
    throw ShapeError("conv2d: channels " + std::to_string(xs.c) + " not divisible by groups " +
                     std::to_string(groups));
  if (ws.c != xs.c / groups)
    throw ShapeError("conv2d: weight " + ws.str() + " does not match input " + xs.str());
  if (bias.defined() && bias.value().numel() != ws.n)
    throw ShapeError("conv2d: bias length does not match output channels");
  const std::int64_t span_h = xs.h + 2 * padding - ws.h;
  const std::int64_t span_w = xs.w + 2 * padding - ws.w;
  if (span_h < 0 || span_w < 0 || span_h % stride != 0 || span_w % stride != 0)
    throw ShapeError("conv2d: padding/stride yield non-integer output extents for " + xs.str());
  ConvGeometry g{xs.n, xs.c, xs.h, xs.w, ws.n, span_h / stride + 1, span_w / stride + 1,
                 static_cast<int>(ws.h), static_cast<int>(ws.w), stride, padding, groups};
  const bool has_bias = bias.defined();
  Tensor<Scalar> y = conv_forward(input.value(), weight.value(), has_bias ? &bias.value() : nullptr, g);
  return make_result<Scalar>("conv2d", std::move(y), any_grad<Scalar>({&input, &weight, &bias}),
                             [input, weight, bias, g, has_bias](const Tensor<Scalar>& gy) {
                               Tensor<Scalar> gx, gw, gb;
                               if (input.requires_grad()) gx = Tensor<Scalar>(input.shape());
                               if (weight.requires_grad()) gw = Tensor<Scalar>(weight.shape());
                               if (has_bias && bias.requires_grad()) gb = Tensor<Scalar>(bias.shape());
                               conv_backward(input.value(), weight.value(), gy, g, gx.empty() ? nullptr : &gx,
                                             gw.empty() ? nullptr : &gw, gb.empty() ? nullptr : &gb);
                               if (!gx.empty()) push_grad(input, gx);
                               if (!gw.empty()) push_grad(weight, gw);
                               if (!gb.empty()) push_grad(bias, gb);
                             });
}

template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& input, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  const Shape& ws = weight.shape();
  if (ws.h != 1 || ws.w != 1 || ws.c != input.shape().c)
    throw ShapeError("linear: weight " + ws.str() + " does not map input " + input.shape().str());
  return conv2d(input, weight, bias, 1, 0, 1);
}

template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& input, const Var<Scalar>& gamma, const Var<Scalar>& beta, double eps) {
  if (!(eps > 0)) throw std::invalid_argument("layer_norm: eps must be positive");
  const Shape s = input.shape();
  if (gamma.value().numel() != s.c || beta.value().numel() != s.c)
    throw ShapeError("layer_norm: affine parameters do not match " + std::to_string(s.c) + " channels");
  const std::int64_t pix = s.plane();
  Tensor<Scalar> y(s);
  // xhat and 1/sigma are saved for backward.
  Tensor<Scalar> xhat(s);
  Tensor<Scalar> inv_std(Shape{s.n, 1, s.h, s.w});
  const Tensor<Scalar>& x = input.value();
  const Tensor<Scalar>& gm = gamma.value();
  const Tensor<Scalar>& bt = beta.value();
#pragma omp parallel for schedule(static)
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t p = 0; p < pix; ++p) {
      const Scalar* xp = x.data() + n * s.c * pix + p;
      Scalar mu = 0;
      for (std::int64_t c = 0; c < s.c; ++c) mu += xp[c * pix];
      mu /= static_cast<Scalar>(s.c);
      Scalar var = 0;
      for (std::int64_t c = 0; c < s.c; ++c) {
        const Scalar d = xp[c * pix] - mu;
        var += d * d;
      }
      var /= static_cast<Scalar>(s.c);
      const Scalar rstd = Scalar(1) / std::sqrt(var + static_cast<Scalar>(eps));
      inv_std[n * pix + p] = rstd;
      for (std::int64_t c = 0; c < s.c; ++c) {
        const std::int64_t idx = (n * s.c + c) * pix + p;
        const Scalar xh = (x[idx] - mu) * rstd;
        xhat[idx] = xh;
        y[idx] = gm[c] * xh + bt[c];
      }
    }
  return make_result<Scalar>(
      "layer_norm", std::move(y), any_grad<Scalar>({&input, &gamma, &beta}),
      [input, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Tensor<Scalar>& gy) {
        const Shape s = input.shape();
        const std::int64_t pix = s.plane();
        const Tensor<Scalar>& gm = gamma.value();
        if (gamma.requires_grad() || beta.requires_grad()) {
          Tensor<Scalar> gg(gamma.shape()), gb(beta.shape());
          for (std::int64_t n = 0; n < s.n; ++n)
            for (std::int64_t c = 0; c < s.c; ++c) {
              const std::int64_t base = (n * s.c + c) * pix;
              Scalar ag = 0, ab = 0;
              for (std::int64_t p = 0; p < pix; ++p) {
                ag += gy[base + p] * xhat[base + p];
                ab += gy[base + p];
              }
              gg[c] += ag;
              gb[c] += ab;
            }
          push_grad(gamma, gg);
          push_grad(beta, gb);
        }
        if (!input.requires_grad()) return;
        Tensor<Scalar> gx(s);
        const Scalar inv_c = Scalar(1) / static_cast<Scalar>(s.c);
#pragma omp parallel for schedule(static)
        for (std::int64_t n = 0; n < s.n; ++n)
          for (std::int64_t p = 0; p < pix; ++p) {
            Scalar m1 = 0, m2 = 0;
            for (std::int64_t c = 0; c < s.c; ++c) {
              const std::int64_t idx = (n * s.c + c) * pix + p;
              const Scalar d = gy[idx] * gm[c];
              m1 += d;
              m2 += d * xhat[idx];
            }
            m1 *= inv_c;
            m2 *= inv_c;
            const Scalar rstd = inv_std[n * pix + p];
            for (std::int64_t c = 0; c < s.c; ++c) {
              const std::int64_t idx = (n * s.c + c) * pix + p;
              gx[idx] = rstd * (gy[idx] * gm[c] - m1 - xhat[idx] * m2);
            }
          }
        push_grad(input, gx);
      });
}

template <typename Scalar>
Var<Scalar> activation(const Var<Scalar>& input, Activation kind) {
  const Tensor<Scalar>& x = input.value();
  Tensor<Scalar> y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double v = static_cast<double>(x[i]);
    double r = 0;
    switch (kind) {
      case Activation::Gelu: r = gelu_value(v); break;
      case Activation::Silu: r = v * sigmoid_value(v); break;
      case Activation::Sigmoid: r = sigmoid_value(v); break;
      case Activation::Softplus: r = softplus_value(v); break;
    }
    y[i] = static_cast<Scalar>(r);
  }
  const char* name = kind == Activation::Gelu   ? "gelu"
                     : kind == Activation::Silu ? "silu"
                     : kind == Activation::Sigmoid ? "sigmoid"
                                                   : "softplus";
  return make_result<Scalar>(name, std::move(y), input.requires_grad(), [input, kind](const Tensor<Scalar>& gy) {
    const Tensor<Scalar>& x = input.value();
    Tensor<Scalar> gx(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      const double v = static_cast<double>(x[i]);
      double d = 0;
      switch (kind) {
        case Activation::Gelu: d = gelu_grad(v); break;
        case Activation::Silu: {
          const double sg = sigmoid_value(v);
          d = sg * (1.0 + v * (1.0 - sg));
          break;
        }
        case Activation::Sigmoid: {
          const double sg = sigmoid_value(v);
          d = sg * (1.0 - sg);
          break;
        }
        case Activation::Softplus: d = sigmoid_value(v); break;
      }
      gx[i] = gy[i] * static_cast<Scalar>(d);
    }
    push_grad(input, gx);
  });
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& input) {
  Tensor<Scalar> y(input.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = std::exp(input.value()[i]);
  Tensor<Scalar> saved = y;
  return make_result<Scalar>("exp", std::move(y), input.requires_grad(),
                             [input, saved = std::move(saved)](const Tensor<Scalar>& gy) {
                               Tensor<Scalar> gx(gy.shape());
                               for (std::int64_t i = 0; i < gy.numel(); ++i) gx[i] = gy[i] * saved[i];
                               push_grad(input, gx);
                             });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& input, double factor) {
  const Scalar f = static_cast<Scalar>(factor);
  Tensor<Scalar> y(input.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = input.value()[i] * f;
  return make_result<Scalar>("scale", std::move(y), input.requires_grad(), [input, f](const Tensor<Scalar>& gy) {
    Tensor<Scalar> gx(gy.shape());
    for (std::int64_t i = 0; i < gy.numel(); ++i) gx[i] = gy[i] * f;
    push_grad(input, gx);
  });
}

template <typename Scalar>
Var<Scalar> elementwise_binary(const Var<Scalar>& a, const Var<Scalar>& b, BinaryOp kind) {
  const Shape os = broadcast_shape(a.shape(), b.shape());
  const BroadcastIndex ia(a.shape()), ib(b.shape());
  const Tensor<Scalar>& av = a.value();
  const Tensor<Scalar>& bv = b.value();
  Tensor<Scalar> y(os);
  std::int64_t i = 0;
  for (std::int64_t n = 0; n < os.n; ++n)
    for (std::int64_t c = 0; c < os.c; ++c)
      for (std::int64_t h = 0; h < os.h; ++h)
        for (std::int64_t w = 0; w < os.w; ++w, ++i) {
          const Scalar x = av[ia(n, c, h, w)], z = bv[ib(n, c, h, w)];
          y[i] = kind == BinaryOp::Add ? x + z : x * z;
        }
  return make_result<Scalar>(
      kind == BinaryOp::Add ? "add" : "mul", std::move(y), any_grad<Scalar>({&a, &b}),
      [a, b, kind, os, ia, ib](const Tensor<Scalar>& gy) {
        Tensor<Scalar> ga, gb;
        if (a.requires_grad()) ga = Tensor<Scalar>(a.shape());
        if (b.requires_grad()) gb = Tensor<Scalar>(b.shape());
        const Tensor<Scalar>& av = a.value();
        const Tensor<Scalar>& bv = b.value();
        std::int64_t i = 0;
        for (std::int64_t n = 0; n < os.n; ++n)
          for (std::int64_t c = 0; c < os.c; ++c)
            for (std::int64_t h = 0; h < os.h; ++h)
              for (std::int64_t w = 0; w < os.w; ++w, ++i) {
                const std::int64_t ja = ia(n, c, h, w), jb = ib(n, c, h, w);
                if (kind == BinaryOp::Add) {
                  if (!ga.empty()) ga[ja] += gy[i];
                  if (!gb.empty()) gb[jb] += gy[i];
                } else {
                  if (!ga.empty()) ga[ja] += gy[i] * bv[jb];
                  if (!gb.empty()) gb[jb] += gy[i] * av[ja];
                }
              }
        if (!ga.empty()) push_grad(a, ga);
        if (!gb.empty()) push_grad(b, gb);
      });
}

template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& input) {
  const Shape s = input.shape();
  if (s.h < 1 || s.w < 1) throw ShapeError("global_avg_pool: empty spatial extent");
  const std::int64_t pix = s.plane();
  Tensor<Scalar> y(Shape{s.n, s.c, 1, 1});
  for (std::int64_t nc = 0; nc < s.n * s.c; ++nc) {
    Scalar acc = 0;
    for (std::int64_t p = 0; p < pix; ++p) acc += input.value()[nc * pix + p];
    y[nc] = acc / static_cast<Scalar>(pix);
  }
  return make_result<Scalar>("global_avg_pool", std::move(y), input.requires_grad(),
                             [input](const Tensor<Scalar>& gy) {
                               const Shape s = input.shape();
                               const std::int64_t pix = s.plane();
                               Tensor<Scalar> gx(s);
                               for (std::int64_t nc = 0; nc < s.n * s.c; ++nc) {
                                 const Scalar v = gy[nc] / static_cast<Scalar>(pix);
                                 for (std::int64_t p = 0; p < pix; ++p) gx[nc * pix + p] = v;
                               }
                               push_grad(input, gx);
                             });
}

namespace {
// Maps every element of the "fine" layout [N,C,H,W] to the "coarse" layout
// [N,C*f*f,H/f,W/f] and copies along that map in the requested direction.
template <typename Scalar>
void rearrange_copy(const Scalar* src, Scalar* dst, const Shape& fine, int f, bool fine_to_coarse) {
  const std::int64_t ch = fine.h / f, cw = fine.w / f, cc = fine.c * f * f;
  for (std::int64_t n = 0; n < fine.n; ++n)
    for (std::int64_t c = 0; c < fine.c; ++c)
      for (std::int64_t y = 0; y < fine.h; ++y)
        for (std::int64_t x = 0; x < fine.w; ++x) {
          const std::int64_t fi = ((n * fine.c + c) * fine.h + y) * fine.w + x;
          const std::int64_t oc = c * f * f + (y % f) * f + (x % f);
          const std::int64_t ci = ((n * cc + oc) * ch + y / f) * cw + x / f;
          if (fine_to_coarse)
            dst[ci] = src[fi];
          else
            dst[fi] = src[ci];
        }
}
}  // namespace

template <typename Scalar>
Var<Scalar> pixel_rearrange(const Var<Scalar>& input, int factor, Rearrange direction) {
  if (factor < 1) throw ShapeError("pixel_rearrange: factor must be positive");
  const Shape s = input.shape();
  const std::int64_t ff = static_cast<std::int64_t>(factor) * factor;
  Shape fine, coarse;
  if (direction == Rearrange::Down) {
    if (s.h % factor != 0 || s.w % factor != 0)
      throw ShapeError("pixel_rearrange: extents " + s.str() + " not divisible by " + std::to_string(factor));
    fine = s;
    coarse = Shape{s.n, s.c * ff, s.h / factor, s.w / factor};
  } else {
    if (s.c % ff != 0)
      throw ShapeError("pixel_rearrange: channels " + std::to_string(s.c) + " not divisible by " +
                       std::to_string(ff));
    coarse = s;
    fine = Shape{s.n, s.c / ff, s.h * factor, s.w * factor};
  }
  const bool down = direction == Rearrange::Down;
  Tensor<Scalar> y(down ? coarse : fine);
  rearrange_copy(input.value().data(), y.data(), fine, factor, down);
  return make_result<Scalar>("pixel_rearrange", std::move(y), input.requires_grad(),
                             [input, fine, factor, down](const Tensor<Scalar>& gy) {
                               Tensor<Scalar> gx(input.shape());
                               rearrange_copy(gy.data(), gx.data(), fine, factor, !down);
                               push_grad(input, gx);
                             });
}

template <typename Scalar>
Var<Scalar> slice_channels(const Var<Scalar>& input, std::int64_t start, std::int64_t count) {
  const Shape s = input.shape();
  if (start < 0 || count <= 0 || start + count > s.c)
    throw ShapeError("slice_channels: range out of bounds for " + s.str());
  const std::int64_t pix = s.plane();
  Tensor<Scalar> y(Shape{s.n, count, s.h, s.w});
  for (std::int64_t n = 0; n < s.n; ++n)
    std::copy_n(input.value().data() + (n * s.c + start) * pix, count * pix, y.data() + n * count * pix);
  return make_result<Scalar>("slice_channels", std::move(y), input.requires_grad(),
                             [input, start, count](const Tensor<Scalar>& gy) {
                               const Shape s = input.shape();
                               const std::int64_t pix = s.plane();
                               Tensor<Scalar> gx(s);
                               for (std::int64_t n = 0; n < s.n; ++n)
                                 std::copy_n(gy.data() + n * count * pix, count * pix,
                                             gx.data() + (n * s.c + start) * pix);
                               push_grad(input, gx);
                             });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& input) {
  Scalar acc = 0;
  for (Scalar v : input.value().values()) acc += v;
  Tensor<Scalar> y(Shape{1, 1, 1, 1}, acc);
  return make_result<Scalar>("sum", std::move(y), input.requires_grad(), [input](const Tensor<Scalar>& gy) {
    push_grad(input, Tensor<Scalar>(input.shape(), gy[0]));
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& input) {
  return scale(sum(input), 1.0 / static_cast<double>(input.value().numel()));
}

#define MUIE_INSTANTIATE_OPS(T)                                                                         \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int, int, int);                   \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                  \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, double);                      \
  template Var<T> activation(const Var<T>&, Activation);                                                \
  template Var<T> exp(const Var<T>&);                                                                   \
  template Var<T> scale(const Var<T>&, double);                                                         \
  template Var<T> elementwise_binary(const Var<T>&, const Var<T>&, BinaryOp);                           \
  template Var<T> global_avg_pool(const Var<T>&);                                                       \
  template Var<T> pixel_rearrange(const Var<T>&, int, Rearrange);                                       \
  template Var<T> slice_channels(const Var<T>&, std::int64_t, std::int64_t);                            \
  template Var<T> sum(const Var<T>&);                                                                   \
  template Var<T> mean(const Var<T>&);

MUIE_INSTANTIATE_OPS(float)
MUIE_INSTANTIATE_OPS(double)

}  // namespace muie
