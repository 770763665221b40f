#pragma once

#include "muie/network.hpp"

#include <functional>
#include <string>
#include <vector>

namespace muie {

struct GradCheckOptions {
  double step = 1e-5;          // central-difference half step
  double rel_tol = 1e-4;       // per-coordinate tolerance
  double max_rel_tol = 1e-3;   // no coordinate may exceed this
  double pass_fraction = 0.95; // share of coordinates that must meet rel_tol
  double abs_floor = 1e-6;     // denominator floor for near-zero gradients
  int coords_per_tensor = 16;  // sampled coordinates per input (all if fewer)
  std::uint64_t seed = 7;
};

struct GradCheckReport {
  std::string name;
  std::int64_t checked = 0;
  std::int64_t within_tol = 0;
  double max_rel_err = 0;
  std::string worst;  // "<input>[<index>]: analytic vs numeric"
  bool pass = false;

  double fraction() const { return checked == 0 ? 0.0 : static_cast<double>(within_tol) / checked; }
};

using NamedTensors = std::vector<std::pair<std::string, Tensor<double>>>;
using LossFn = std::function<Var<double>(const std::vector<Var<double>>&)>;

/// Compares reverse-mode gradients of the scalar `loss` with central finite
/// differences for sampled coordinates of every input, in double precision.
GradCheckReport check_gradients(const std::string& name, const LossFn& loss, const NamedTensors& inputs,
                                const GradCheckOptions& options = {});

/// sum(out * probe) with a fixed probe tensor; turns any op output into a
/// scalar whose gradient exercises every output element.
Var<double> probe_loss(const Var<double>& out, const Tensor<double>& probe);

/// Finite-difference checks for each primitive op, each block, and a tiny
/// full network under L1 loss. Used by the gradcheck command and tests.
std::vector<GradCheckReport> run_gradcheck_suite(const ModelConfig& tiny, const GradCheckOptions& options = {});

}  // namespace muie
