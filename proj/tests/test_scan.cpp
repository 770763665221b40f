#include "muie/scan.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <numbers>

using namespace muie;
using oracle::T;

namespace {

T rnd(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) { return uniform_tensor<double>(s, rng, lo, hi); }

// Weight store whose four scan directions all carry the parameters of direction 0.
WeightStore<double> shared_ss2d(std::int64_t d, std::int64_t n, Rng& rng) {
  WeightStore<double> base;
  add_scan_params(base, "s.0", d, n, rng);
  WeightStore<double> out;
  for (int k = 0; k < 4; ++k)
    for (const auto& [name, t] : base) out.add("s." + std::to_string(k) + name.substr(3), t);
  return out;
}

// Scan projections large enough that the recurrence does more than decay.
void stir(WeightStore<double>& store, Rng& rng) {
  for (auto& [name, t] : store)
    if (name.ends_with("proj_delta") || name.ends_with("proj_b") || name.ends_with("proj_c"))
      t = uniform_tensor<double>(t.shape(), rng, -1.0, 1.0);
}

T transpose_hw(const T& x) {
  const Shape s = x.shape();
  T out(Shape{s.n, s.c, s.w, s.h});
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t y = 0; y < s.h; ++y)
        for (std::int64_t xx = 0; xx < s.w; ++xx) out(n, c, xx, y) = x(n, c, y, xx);
  return out;
}

}  // namespace

TEST_CASE("discretize") {
  using M = DynMatrix<double>;
  SUBCASE("hand-evaluated values") {
    const M delta = M::Constant(1, 1, std::numbers::ln2), a = M::Constant(1, 1, -1.0), b = M::Constant(1, 1, 1.0);
    const auto disc = discretize(delta, a, b);
    CHECK(disc.a_bar[0](0, 0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(disc.b_bar[0](0, 0) == doctest::Approx(0.6931471805599453).epsilon(1e-15));
  }
  SUBCASE("A = 0 leaves the state untouched") {
    const auto disc = discretize<double>(M::Constant(3, 2, 0.7), M::Zero(2, 4), M::Constant(3, 4, 1.0));
    for (const auto& m : disc.a_bar) CHECK((m.array() == 1.0).all());
  }
  SUBCASE("delta to zero freezes the state") {
    const auto disc = discretize<double>(M::Constant(1, 2, 1e-12), M::Constant(2, 3, -5.0), M::Constant(1, 3, 2.0));
    CHECK((disc.a_bar[0].array() - 1.0).abs().maxCoeff() < 1e-10);
    CHECK(disc.b_bar[0].array().abs().maxCoeff() < 1e-10);
  }
  CHECK_THROWS(discretize<double>(M::Constant(1, 1, 0.0), M::Constant(1, 1, -1.0), M::Constant(1, 1, 1.0)));
  CHECK_THROWS(discretize<double>(M::Constant(1, 1, -0.1), M::Constant(1, 1, -1.0), M::Constant(1, 1, 1.0)));
}

TEST_CASE("selective scan two-step hand example") {
  const Var<double> u(T(Shape{1, 1, 1, 2}, 1.0));
  const Var<double> delta(T(Shape{1, 1, 1, 2}, std::numbers::ln2));
  const Var<double> a(T(Shape{1, 1, 1, 1}, -1.0));
  const Var<double> b(T(Shape{1, 1, 1, 2}, 1.0)), c(T(Shape{1, 1, 1, 2}, 1.0));
  const Var<double> d(T(Shape{1, 1, 1, 1}, 0.0));
  const auto y = selective_scan(u, delta, a, b, c, d).value();
  CHECK(y[0] == doctest::Approx(0.6931471805599453).epsilon(1e-14));
  CHECK(y[1] == doctest::Approx(1.0397207708399179).epsilon(1e-14));
}

TEST_CASE("zero B projection leaves only the skip path") {
  Rng rng(3);
  WeightStore<double> store;
  add_scan_params(store, "s", 5, 4, rng);
  store.at("s.proj_b").fill(0.0);
  const T u = rnd(Shape{2, 5, 1, 11}, rng);
  const auto y = selective_scan_1d(Var<double>(u), ScanParams<double>::bind(ParamSet<double>(store, false), "s"));
  CHECK(max_abs_diff(y.value(), u) == 0);
}

TEST_CASE("selective scan matches the sequential recurrence") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const std::int64_t L = 1 + static_cast<std::int64_t>(rng.below(16)), d = 1 + static_cast<std::int64_t>(rng.below(8));
    WeightStore<double> store;
    add_scan_params(store, "s", d, 4, rng);
    stir(store, rng);
    const T u = rnd(Shape{2, d, 1, L}, rng);
    const auto got = selective_scan_1d(Var<double>(u), ScanParams<double>::bind(ParamSet<double>(store, false), "s"));
    CHECK(oracle::max_rel(got.value(), oracle::scan_1d(u, oracle::scan_from(store, "s")), 1e-3) < 1e-5);
  }
}

TEST_CASE("scan orders are bijections and round-trip") {
  const std::int64_t h = 3, w = 5;
  Rng rng(4);
  const T x = rnd(Shape{1, 2, h, w}, rng);
  for (auto order : kScanOrders) {
    std::vector<int> seen(h * w, 0);
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t xx = 0; xx < w; ++xx) {
        CHECK(scan_position(order, y, xx, h, w) == oracle::position(order, y, xx, h, w));
        ++seen[scan_position(order, y, xx, h, w)];
      }
    CHECK(std::all_of(seen.begin(), seen.end(), [](int k) { return k == 1; }));
    const auto seq = to_sequence(Var<double>(x), order);
    CHECK(seq.shape() == Shape{1, 2, 1, h * w});
    CHECK(bitwise_equal(from_sequence(seq, order, h, w).value(), x));
  }
}

TEST_CASE("ss2d") {
  Rng rng(21);
  SUBCASE("a single pixel sees the same sequence four times") {
    const WeightStore<double> store = shared_ss2d(3, 4, rng);
    const ParamSet<double> p(store, false);
    const T x = rnd(Shape{1, 3, 1, 1}, rng);
    const auto once = selective_scan_1d(Var<double>(x), ScanParams<double>::bind(p, "s.0")).value();
    const auto all = ss2d<double>(Var<double>(x), bind_ss2d(p, "s")).value();
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(all[i] == doctest::Approx(4 * once[i]).epsilon(1e-14));
  }
  SUBCASE("transposing the input swaps row and column branches") {
    WeightStore<double> store = shared_ss2d(4, 4, rng);
    stir(store, rng);
    const ParamSet<double> p(store, false);
    const auto dirs = bind_ss2d(p, "s");
    const T x = rnd(Shape{1, 4, 4, 4}, rng);
    const T xt = transpose_hw(x);
    for (auto [row, col] : {std::pair{0, 2}, std::pair{1, 3}}) {
      const auto row_of_t = scan_direction(Var<double>(xt), DirectionalScan<double>{kScanOrders[row], dirs[0].params});
      const auto col_of_x = scan_direction(Var<double>(x), DirectionalScan<double>{kScanOrders[col], dirs[0].params});
      CHECK(bitwise_equal(row_of_t.value(), transpose_hw(col_of_x.value())));
    }
  }
  SUBCASE("matches four composed sequential oracles") {
    WeightStore<double> store;
    add_ss2d_params(store, "s", 4, 4, rng);
    stir(store, rng);
    const T x = rnd(Shape{1, 4, 4, 4}, rng);
    std::vector<oracle::Scan> dirs;
    for (int k = 0; k < 4; ++k) dirs.push_back(oracle::scan_from(store, "s." + std::to_string(k)));
    const auto got = ss2d<double>(Var<double>(x), bind_ss2d(ParamSet<double>(store, false), "s"));
    CHECK(oracle::max_rel(got.value(), oracle::ss2d(x, dirs), 1e-3) < 1e-5);
  }
}

TEST_CASE("long scans stay bounded") {
  Rng rng(5);
  WeightStore<double> store;
  add_scan_params(store, "s", 2, 4, rng);
  const T u = rnd(Shape{1, 2, 1, 10000}, rng);
  const auto y = selective_scan_1d(Var<float>(u.cast<float>()),
                                   ScanParams<float>::bind(ParamSet<float>(store.cast<float>(), false), "s"));
  CHECK(y.value().all_finite());
}

TEST_CASE("scan cost is linear in sequence length") {
  CHECK(scan_recurrence_macs(200, 8, 4) == 2 * scan_recurrence_macs(100, 8, 4));
  CHECK(scan_direction_macs(200, 8, 4) == 2 * scan_direction_macs(100, 8, 4));
  CHECK(scan_recurrence_macs(10, 3, 4) == 120);
}

TEST_CASE("initialization follows the documented ranges") {
  Rng rng(9);
  WeightStore<double> store;
  add_scan_params(store, "s", 6, 4, rng);
  const T& a_log = store.at("s.a_log");
  for (std::int64_t i = 0; i < 6; ++i)
    for (std::int64_t k = 0; k < 4; ++k) CHECK(-std::exp(a_log(i, k, 0, 0)) == doctest::Approx(-(k + 1.0)));
  for (double d : store.at("s.d_skip").values()) CHECK(d == 1.0);
  for (double b : store.at("s.delta_bias").values()) {
    const double delta = oracle::softplus(b);
    CHECK((delta >= 1e-3 * (1 - 1e-9) && delta <= 1e-1 * (1 + 1e-9)));
  }
}

TEST_CASE("scan output is independent of the worker count") {
  Rng rng(8);
  WeightStore<float> store;
  add_ss2d_params(store, "s", 8, 4, rng);
  const auto x = uniform_tensor<float>(Shape{2, 8, 8, 8}, rng);
  const ParamSet<float> p(store, false);
  const int before = num_threads();
  set_num_threads(1);
  const auto one = ss2d<float>(Var<float>(x), bind_ss2d(p, "s")).value();
  set_num_threads(3);
  const auto three = ss2d<float>(Var<float>(x), bind_ss2d(p, "s")).value();
  set_num_threads(before);
  CHECK(bitwise_equal(one, three));
}
