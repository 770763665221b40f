#pragma once

#include "muie/autodiff.hpp"

namespace muie {

/// Sets the worker count used by ops that parallelize over batch or channel
/// lanes. Results do not depend on it.
void set_num_threads(int threads);
int num_threads();

enum class Activation { Gelu, Silu, Sigmoid, Softplus };
enum class BinaryOp { Add, Mul };
enum class Rearrange { Down, Up };

/// Zero-padded 2D cross-correlation. `weight` is [Cout, Cin/groups, kh, kw];
/// `bias` may be undefined, otherwise [Cout,1,1,1]. groups == Cin gives a
/// depthwise convolution.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& weight, const Var<Scalar>& bias,
                   int stride = 1, int padding = 0, int groups = 1);

/// Per-position linear map over channels. `weight` is [Dout, Din, 1, 1],
/// `bias` undefined or [Dout,1,1,1].
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& input, const Var<Scalar>& weight, const Var<Scalar>& bias);

/// Normalizes the channel vector of each pixel; gamma/beta are [C,1,1,1].
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& input, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       double eps = 1e-5);

template <typename Scalar>
Var<Scalar> activation(const Var<Scalar>& input, Activation kind);

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& input);

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& input, double factor);

/// Elementwise add/mul; any extent of 1 on one side stretches to the other.
template <typename Scalar>
Var<Scalar> elementwise_binary(const Var<Scalar>& a, const Var<Scalar>& b, BinaryOp kind);

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  return elementwise_binary(a, b, BinaryOp::Add);
}
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  return elementwise_binary(a, b, BinaryOp::Mul);
}

/// [N,C,H,W] -> [N,C,1,1] spatial mean.
template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& input);

/// Down: [N,C,H,W] -> [N,C*f*f,H/f,W/f] with output channel c*f*f + dy*f + dx.
/// Up is its exact inverse.
template <typename Scalar>
Var<Scalar> pixel_rearrange(const Var<Scalar>& input, int factor, Rearrange direction);

template <typename Scalar>
Var<Scalar> slice_channels(const Var<Scalar>& input, std::int64_t start, std::int64_t count);

/// Sum of all elements as a [1,1,1,1] scalar.
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& input);

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& input);

}  // namespace muie
