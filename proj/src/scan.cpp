#include "muie/scan.hpp"

#include <cmath>
#include <string>

namespace muie {

const char* to_string(ScanOrder order) {
  switch (order) {
    case ScanOrder::RowForward: return "row-forward";
    case ScanOrder::RowBackward: return "row-backward";
    case ScanOrder::ColumnForward: return "column-forward";
    case ScanOrder::ColumnBackward: return "column-backward";
  }
  return "?";
}

std::int64_t scan_position(ScanOrder order, std::int64_t y, std::int64_t x, std::int64_t h, std::int64_t w) {
  const std::int64_t last = h * w - 1;
  switch (order) {
    case ScanOrder::RowForward: return y * w + x;
    case ScanOrder::RowBackward: return last - (y * w + x);
    case ScanOrder::ColumnForward: return x * h + y;
    case ScanOrder::ColumnBackward: return last - (x * h + y);
  }
  return 0;
}

std::int64_t scan_recurrence_macs(std::int64_t length, std::int64_t d_inner, std::int64_t n_state) {
  return length * d_inner * n_state;
}

std::int64_t scan_direction_macs(std::int64_t length, std::int64_t d_inner, std::int64_t n_state) {
  return scan_recurrence_macs(length, d_inner, n_state) + length * (d_inner * d_inner + 2 * d_inner * n_state);
}

template <typename Scalar>
ScanParams<Scalar> ScanParams<Scalar>::bind(const ParamSet<Scalar>& p, const std::string& prefix) {
  ScanParams s;
  s.proj_delta = p[prefix + ".proj_delta"];
  s.delta_bias = p[prefix + ".delta_bias"];
  s.proj_b = p[prefix + ".proj_b"];
  s.proj_c = p[prefix + ".proj_c"];
  s.a_log = p[prefix + ".a_log"];
  s.d_skip = p[prefix + ".d_skip"];
  return s;
}

template <typename Scalar>
void add_scan_params(WeightStore<Scalar>& store, const std::string& prefix, std::int64_t d_inner,
                     std::int64_t n_state, Rng& rng) {
  store.add(prefix + ".proj_delta", fan_in_uniform<Scalar>(Shape{d_inner, d_inner, 1, 1}, d_inner, rng));
  Tensor<Scalar> bias(Shape{d_inner, 1, 1, 1});
  for (auto& v : bias.values()) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    v = static_cast<Scalar>(dt + std::log(-std::expm1(-dt)));
  }
  store.add(prefix + ".delta_bias", std::move(bias));
  store.add(prefix + ".proj_b", fan_in_uniform<Scalar>(Shape{n_state, d_inner, 1, 1}, d_inner, rng));
  store.add(prefix + ".proj_c", fan_in_uniform<Scalar>(Shape{n_state, d_inner, 1, 1}, d_inner, rng));
  Tensor<Scalar> a_log(Shape{d_inner, n_state, 1, 1});
  for (std::int64_t c = 0; c < d_inner; ++c)
    for (std::int64_t k = 0; k < n_state; ++k) a_log[c * n_state + k] = static_cast<Scalar>(std::log(double(k + 1)));
  store.add(prefix + ".a_log", std::move(a_log));
  store.add(prefix + ".d_skip", Tensor<Scalar>(Shape{d_inner, 1, 1, 1}, Scalar(1)));
}

template <typename Scalar>
void add_ss2d_params(WeightStore<Scalar>& store, const std::string& prefix, std::int64_t d_inner,
                     std::int64_t n_state, Rng& rng) {
  for (std::size_t i = 0; i < kScanOrders.size(); ++i)
    add_scan_params(store, prefix + "." + std::to_string(i), d_inner, n_state, rng);
}

template <typename Scalar>
std::array<DirectionalScan<Scalar>, 4> bind_ss2d(const ParamSet<Scalar>& p, const std::string& prefix) {
  std::array<DirectionalScan<Scalar>, 4> out;
  for (std::size_t i = 0; i < kScanOrders.size(); ++i)
    out[i] = {kScanOrders[i], ScanParams<Scalar>::bind(p, prefix + "." + std::to_string(i))};
  return out;
}

template <typename Scalar>
Discretization<Scalar> discretize(const DynMatrix<Scalar>& delta, const DynMatrix<Scalar>& a,
                                  const DynMatrix<Scalar>& b) {
  if (delta.cols() != a.rows() || b.rows() != delta.rows() || b.cols() != a.cols())
    throw ShapeError("discretize: inconsistent extents");
  if ((delta.array() <= Scalar(0)).any()) throw std::invalid_argument("discretize: delta must be positive");
  Discretization<Scalar> out;
  out.a_bar.reserve(static_cast<std::size_t>(delta.rows()));
  out.b_bar.reserve(static_cast<std::size_t>(delta.rows()));
  for (Eigen::Index t = 0; t < delta.rows(); ++t) {
    out.a_bar.push_back((delta.row(t).transpose().asDiagonal() * a).array().exp().matrix());
    out.b_bar.push_back(delta.row(t).transpose() * b.row(t));
  }
  return out;
}

template <typename Scalar>
Var<Scalar> selective_scan(const Var<Scalar>& u, const Var<Scalar>& delta, const Var<Scalar>& a,
                           const Var<Scalar>& b, const Var<Scalar>& c, const Var<Scalar>& d_skip) {
  const Shape us = u.shape();
  const std::int64_t batch = us.n, d = us.c, len = us.w;
  const std::int64_t n = a.shape().c;
  if (us.h != 1 || len < 1) throw ShapeError("selective_scan: expected [N,d,1,L], got " + us.str());
  if (delta.shape() != us) throw ShapeError("selective_scan: delta shape " + delta.shape().str());
  if (a.shape() != Shape{d, n, 1, 1}) throw ShapeError("selective_scan: A shape " + a.shape().str());
  if (b.shape() != Shape{batch, n, 1, len} || c.shape() != Shape{batch, n, 1, len})
    throw ShapeError("selective_scan: B/C shapes " + b.shape().str() + ", " + c.shape().str());
  if (d_skip.value().numel() != d) throw ShapeError("selective_scan: D length");
  for (Scalar v : delta.value().values())
    if (v < Scalar(0)) throw std::invalid_argument("selective_scan: negative delta");

  const Tensor<Scalar>& uv = u.value();
  const Tensor<Scalar>& dv = delta.value();
  const Tensor<Scalar>& av = a.value();
  const Tensor<Scalar>& bv = b.value();
  const Tensor<Scalar>& cv = c.value();
  const Tensor<Scalar>& dsk = d_skip.value();

  Tensor<Scalar> y(us);
  // Post-update states per lane, [N, d, L, n].
  Tensor<Scalar> states(Shape{batch, d, len, n});
  bool finite = true;
#pragma omp parallel for schedule(static) reduction(&& : finite)
  for (std::int64_t lane = 0; lane < batch * d; ++lane) {
    const std::int64_t bi = lane / d, ch = lane % d;
    const Scalar* ul = uv.data() + lane * len;
    const Scalar* dl = dv.data() + lane * len;
    const Scalar* al = av.data() + ch * n;
    const Scalar* bl = bv.data() + bi * n * len;
    const Scalar* cl = cv.data() + bi * n * len;
    Scalar* hs = states.data() + lane * len * n;
    Scalar* yl = y.data() + lane * len;
    std::vector<Scalar> h(static_cast<std::size_t>(n), Scalar(0));
    for (std::int64_t t = 0; t < len; ++t) {
      Scalar acc = dsk[ch] * ul[t];
      for (std::int64_t k = 0; k < n; ++k) {
        const Scalar hk = std::exp(dl[t] * al[k]) * h[k] + dl[t] * bl[k * len + t] * ul[t];
        h[k] = hk;
        hs[t * n + k] = hk;
        acc += cl[k * len + t] * hk;
      }
      if (!std::isfinite(acc)) finite = false;
      yl[t] = acc;
    }
  }
  if (!finite) throw NonFiniteError("selective_scan: non-finite state");

  return make_result<Scalar>(
      "selective_scan", std::move(y), u.requires_grad() || delta.requires_grad() || a.requires_grad() ||
                                          b.requires_grad() || c.requires_grad() || d_skip.requires_grad(),
      [u, delta, a, b, c, d_skip, states = std::move(states)](const Tensor<Scalar>& gy) {
        const Shape us = u.shape();
        const std::int64_t batch = us.n, d = us.c, len = us.w, n = a.shape().c;
        const Tensor<Scalar>& uv = u.value();
        const Tensor<Scalar>& dv = delta.value();
        const Tensor<Scalar>& av = a.value();
        const Tensor<Scalar>& bv = b.value();
        const Tensor<Scalar>& cv = c.value();
        const Tensor<Scalar>& dsk = d_skip.value();

        Tensor<Scalar> gu(us), gdelta(us);
        // Per-lane contributions, reduced below in a fixed order.
        Tensor<Scalar> ga_lane(Shape{batch, d, n, 1}), gd_lane(Shape{batch, d, 1, 1});
        Tensor<Scalar> gb_lane(Shape{batch, d, n, len}), gc_lane(Shape{batch, d, n, len});
#pragma omp parallel for schedule(static)
        for (std::int64_t lane = 0; lane < batch * d; ++lane) {
          const std::int64_t bi = lane / d, ch = lane % d;
          const Scalar* ul = uv.data() + lane * len;
          const Scalar* dl = dv.data() + lane * len;
          const Scalar* al = av.data() + ch * n;
          const Scalar* bl = bv.data() + bi * n * len;
          const Scalar* cl = cv.data() + bi * n * len;
          const Scalar* hs = states.data() + lane * len * n;
          const Scalar* gyl = gy.data() + lane * len;
          Scalar* gul = gu.data() + lane * len;
          Scalar* gdl = gdelta.data() + lane * len;
          Scalar* gal = ga_lane.data() + lane * n;
          Scalar* gbl = gb_lane.data() + lane * n * len;
          Scalar* gcl = gc_lane.data() + lane * n * len;
          Scalar gd = 0;
          std::vector<Scalar> gh(static_cast<std::size_t>(n), Scalar(0));
          for (std::int64_t t = len - 1; t >= 0; --t) {
            const Scalar g = gyl[t], ut = ul[t], dt = dl[t];
            Scalar gut = g * dsk[ch];
            Scalar gdt = 0;
            gd += g * ut;
            for (std::int64_t k = 0; k < n; ++k) {
              gh[k] += g * cl[k * len + t];
              gcl[k * len + t] = g * hs[t * n + k];
              const Scalar decay = std::exp(dt * al[k]);
              const Scalar hprev = t > 0 ? hs[(t - 1) * n + k] : Scalar(0);
              const Scalar gdecay = gh[k] * hprev;
              gdt += gdecay * decay * al[k] + gh[k] * bl[k * len + t] * ut;
              gal[k] += gdecay * decay * dt;
              gbl[k * len + t] = gh[k] * dt * ut;
              gut += gh[k] * dt * bl[k * len + t];
              gh[k] *= decay;
            }
            gul[t] = gut;
            gdl[t] = gdt;
          }
          gd_lane[lane] = gd;
        }
        if (u.requires_grad()) u.node()->accumulate(gu);
        if (delta.requires_grad()) delta.node()->accumulate(gdelta);
        if (a.requires_grad()) {
          Tensor<Scalar> ga(a.shape());
          for (std::int64_t bi = 0; bi < batch; ++bi)
            for (std::int64_t i = 0; i < d * n; ++i) ga[i] += ga_lane[bi * d * n + i];
          a.node()->accumulate(ga);
        }
        if (d_skip.requires_grad()) {
          Tensor<Scalar> gds(d_skip.shape());
          for (std::int64_t bi = 0; bi < batch; ++bi)
            for (std::int64_t ch = 0; ch < d; ++ch) gds[ch] += gd_lane[bi * d + ch];
          d_skip.node()->accumulate(gds);
        }
        auto reduce_over_channels = [&](const Tensor<Scalar>& lanes, const Var<Scalar>& target) {
          if (!target.requires_grad()) return;
          Tensor<Scalar> gt(target.shape());
          for (std::int64_t bi = 0; bi < batch; ++bi)
            for (std::int64_t ch = 0; ch < d; ++ch) {
              const Scalar* src = lanes.data() + (bi * d + ch) * n * len;
              Scalar* dst = gt.data() + bi * n * len;
              for (std::int64_t i = 0; i < n * len; ++i) dst[i] += src[i];
            }
          target.node()->accumulate(gt);
        };
        reduce_over_channels(gb_lane, b);
        reduce_over_channels(gc_lane, c);
      });
}

template <typename Scalar>
Var<Scalar> selective_scan_1d(const Var<Scalar>& u, const ScanParams<Scalar>& params) {
  if (u.shape().c != params.d_inner())
    throw ShapeError("selective_scan_1d: input channels " + std::to_string(u.shape().c) + " vs d_inner " +
                     std::to_string(params.d_inner()));
  const Var<Scalar> none;
  const Var<Scalar> delta = activation(linear(u, params.proj_delta, params.delta_bias), Activation::Softplus);
  const Var<Scalar> bm = linear(u, params.proj_b, none);
  const Var<Scalar> cm = linear(u, params.proj_c, none);
  const Var<Scalar> a = scale(exp(params.a_log), -1.0);
  return selective_scan(u, delta, a, bm, cm, params.d_skip);
}

namespace {
template <typename Scalar>
void permute_copy(const Scalar* src, Scalar* dst, std::int64_t planes, std::int64_t h, std::int64_t w,
                  ScanOrder order, bool to_seq) {
  const std::int64_t pix = h * w;
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const std::int64_t spatial = p * pix + y * w + x;
        const std::int64_t seq = p * pix + scan_position(order, y, x, h, w);
        if (to_seq)
          dst[seq] = src[spatial];
        else
          dst[spatial] = src[seq];
      }
}
}  // namespace

template <typename Scalar>
Var<Scalar> to_sequence(const Var<Scalar>& x, ScanOrder order) {
  const Shape s = x.shape();
  Tensor<Scalar> y(Shape{s.n, s.c, 1, s.plane()});
  permute_copy(x.value().data(), y.data(), s.n * s.c, s.h, s.w, order, true);
  return make_result<Scalar>("to_sequence", std::move(y), x.requires_grad(), [x, order](const Tensor<Scalar>& gy) {
    const Shape s = x.shape();
    Tensor<Scalar> gx(s);
    permute_copy(gy.data(), gx.data(), s.n * s.c, s.h, s.w, order, false);
    x.node()->accumulate(gx);
  });
}

template <typename Scalar>
Var<Scalar> from_sequence(const Var<Scalar>& seq, ScanOrder order, std::int64_t h, std::int64_t w) {
  const Shape s = seq.shape();
  if (s.h != 1 || s.w != h * w) throw ShapeError("from_sequence: " + s.str() + " is not a length-" +
                                                 std::to_string(h * w) + " sequence");
  Tensor<Scalar> y(Shape{s.n, s.c, h, w});
  permute_copy(seq.value().data(), y.data(), s.n * s.c, h, w, order, false);
  return make_result<Scalar>("from_sequence", std::move(y), seq.requires_grad(),
                             [seq, order, h, w](const Tensor<Scalar>& gy) {
                               const Shape s = seq.shape();
                               Tensor<Scalar> gs(s);
                               permute_copy(gy.data(), gs.data(), s.n * s.c, h, w, order, true);
                               seq.node()->accumulate(gs);
                             });
}

template <typename Scalar>
Var<Scalar> scan_direction(const Var<Scalar>& x, const DirectionalScan<Scalar>& scan) {
  const Shape s = x.shape();
  return from_sequence(selective_scan_1d(to_sequence(x, scan.order), scan.params), scan.order, s.h, s.w);
}

template <typename Scalar>
Var<Scalar> ss2d(const Var<Scalar>& x, std::span<const DirectionalScan<Scalar>, 4> directions) {
  Var<Scalar> out = scan_direction(x, directions[0]);
  for (std::size_t i = 1; i < directions.size(); ++i) out = add(out, scan_direction(x, directions[i]));
  return out;
}

#define MUIE_INSTANTIATE_SCAN(T)                                                                          \
  template struct ScanParams<T>;                                                                          \
  template void add_scan_params(WeightStore<T>&, const std::string&, std::int64_t, std::int64_t, Rng&);   \
  template void add_ss2d_params(WeightStore<T>&, const std::string&, std::int64_t, std::int64_t, Rng&);   \
  template std::array<DirectionalScan<T>, 4> bind_ss2d(const ParamSet<T>&, const std::string&);           \
  template Discretization<T> discretize(const DynMatrix<T>&, const DynMatrix<T>&, const DynMatrix<T>&);   \
  template Var<T> selective_scan(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, \
                                 const Var<T>&);                                                          \
  template Var<T> selective_scan_1d(const Var<T>&, const ScanParams<T>&);                                 \
  template Var<T> to_sequence(const Var<T>&, ScanOrder);                                                  \
  template Var<T> from_sequence(const Var<T>&, ScanOrder, std::int64_t, std::int64_t);                    \
  template Var<T> scan_direction(const Var<T>&, const DirectionalScan<T>&);                               \
  template Var<T> ss2d(const Var<T>&, std::span<const DirectionalScan<T>, 4>);

MUIE_INSTANTIATE_SCAN(float)
MUIE_INSTANTIATE_SCAN(double)

}  // namespace muie
