#pragma once

#include "muie/ops.hpp"
#include "muie/weights.hpp"

#include <Eigen/Core>

#include <array>
#include <span>
#include <vector>

namespace muie {

/// Order in which an H x W map is flattened into a length H*W sequence.
enum class ScanOrder { RowForward, RowBackward, ColumnForward, ColumnBackward };

inline constexpr std::array<ScanOrder, 4> kScanOrders = {ScanOrder::RowForward, ScanOrder::RowBackward,
                                                         ScanOrder::ColumnForward, ScanOrder::ColumnBackward};

const char* to_string(ScanOrder order);

/// Sequence position of pixel (y, x) under `order`.
std::int64_t scan_position(ScanOrder order, std::int64_t y, std::int64_t x, std::int64_t h, std::int64_t w);

/// Selective state-space parameters for one scan direction over `d_inner`
/// channels with `n_state` states per channel.
///
///   delta_t = softplus(proj_delta * u_t + delta_bias)     [d]
///   B_t     = proj_b * u_t                                [n]
///   C_t     = proj_c * u_t                                [n]
///   A       = -exp(a_log)                                 [d, n]
template <typename Scalar>
struct ScanParams {
  Var<Scalar> proj_delta;  // [d, d, 1, 1]
  Var<Scalar> delta_bias;  // [d, 1, 1, 1]
  Var<Scalar> proj_b;      // [n, d, 1, 1]
  Var<Scalar> proj_c;      // [n, d, 1, 1]
  Var<Scalar> a_log;       // [d, n, 1, 1]
  Var<Scalar> d_skip;      // [d, 1, 1, 1]

  std::int64_t d_inner() const { return a_log.shape().n; }
  std::int64_t n_state() const { return a_log.shape().c; }

  static ScanParams bind(const ParamSet<Scalar>& p, const std::string& prefix);
};

template <typename Scalar>
struct DirectionalScan {
  ScanOrder order = ScanOrder::RowForward;
  ScanParams<Scalar> params;
};

/// Registers one direction's parameters under `prefix`. A follows the S4D-real
/// initialization -(1..n); D starts at 1; delta_bias is the inverse softplus
/// of a log-uniform draw in [1e-3, 1e-1].
template <typename Scalar>
void add_scan_params(WeightStore<Scalar>& store, const std::string& prefix, std::int64_t d_inner,
                     std::int64_t n_state, Rng& rng);

/// Registers four directions as "<prefix>.<i>.*" in kScanOrders order.
template <typename Scalar>
void add_ss2d_params(WeightStore<Scalar>& store, const std::string& prefix, std::int64_t d_inner,
                     std::int64_t n_state, Rng& rng);

template <typename Scalar>
std::array<DirectionalScan<Scalar>, 4> bind_ss2d(const ParamSet<Scalar>& p, const std::string& prefix);

template <typename Scalar>
using DynMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
struct Discretization {
  std::vector<DynMatrix<Scalar>> a_bar;  // L entries of [d, n]
  std::vector<DynMatrix<Scalar>> b_bar;  // L entries of [d, n]
};

/// Abar_t = exp(delta_t * A), Bbar_t = delta_t * B_t (first-order input term).
/// delta: [L, d] strictly positive, A: [d, n], B: [L, n].
template <typename Scalar>
Discretization<Scalar> discretize(const DynMatrix<Scalar>& delta, const DynMatrix<Scalar>& a,
                                  const DynMatrix<Scalar>& b);

/// Fused selective-scan recurrence over sequences laid out as [N, ch, 1, L]:
///   h_t = exp(delta_t * A) h_{t-1} + delta_t * B_t * u_t,  h_0 = 0
///   y_t = <C_t, h_t> + D * u_t
/// u, delta: [N,d,1,L]; a: [d,n,1,1] (negative); b, c: [N,n,1,L]; d_skip: [d,1,1,1].
template <typename Scalar>
Var<Scalar> selective_scan(const Var<Scalar>& u, const Var<Scalar>& delta, const Var<Scalar>& a,
                           const Var<Scalar>& b, const Var<Scalar>& c, const Var<Scalar>& d_skip);

/// Input-dependent scan of u [N,d,1,L] with projections from `params`.
template <typename Scalar>
Var<Scalar> selective_scan_1d(const Var<Scalar>& u, const ScanParams<Scalar>& params);

/// [N,d,H,W] -> [N,d,1,H*W] flattened in `order`.
template <typename Scalar>
Var<Scalar> to_sequence(const Var<Scalar>& x, ScanOrder order);

/// Inverse of to_sequence.
template <typename Scalar>
Var<Scalar> from_sequence(const Var<Scalar>& seq, ScanOrder order, std::int64_t h, std::int64_t w);

/// One direction of SS2D: flatten, scan, unflatten.
template <typename Scalar>
Var<Scalar> scan_direction(const Var<Scalar>& x, const DirectionalScan<Scalar>& scan);

/// Four-direction 2D selective scan merged by summation. [N,d,H,W] -> [N,d,H,W].
template <typename Scalar>
Var<Scalar> ss2d(const Var<Scalar>& x, std::span<const DirectionalScan<Scalar>, 4> directions);

/// Multiply-accumulates of the recurrence for one direction: L * d * n.
std::int64_t scan_recurrence_macs(std::int64_t length, std::int64_t d_inner, std::int64_t n_state);

/// Recurrence plus the delta/B/C projections for one direction.
std::int64_t scan_direction_macs(std::int64_t length, std::int64_t d_inner, std::int64_t n_state);

}  // namespace muie
