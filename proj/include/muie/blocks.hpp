#pragma once

#include "muie/scan.hpp"

namespace muie {

/// Widths of one efficient mamba block operating on `channels`.
struct BlockDims {
  std::int64_t channels = 16;
  int expand = 2;      // scan/gate branch width = expand * channels
  int sgfn_ratio = 2;  // SGFN hidden width = sgfn_ratio * channels
  int n_state = 4;

  std::int64_t inner() const { return expand * channels; }
  std::int64_t hidden() const { return sgfn_ratio * channels; }
};

/// Visual state space block: LN, a linear gate branch and a
/// linear -> depthwise 3x3 -> silu -> SS2D -> LN branch, multiplied, normalized,
/// projected back to `channels` and added to the input.
template <typename Scalar>
struct VSSWeights {
  NormVars<Scalar> ln_in, ln_scan, ln_out;
  ConvVars<Scalar> proj_b1, proj_b2, dwconv, proj_out;
  std::array<DirectionalScan<Scalar>, 4> scan;

  static VSSWeights bind(const ParamSet<Scalar>& p, const std::string& prefix);
};

/// Dynamic interaction between the global (VSS) and local (depthwise) maps.
template <typename Scalar>
struct DIBWeights {
  ConvVars<Scalar> pw_spatial;  // C -> 1, 1x1
  ConvVars<Scalar> pw_channel;  // C -> C, 1x1 on the pooled vector
  ConvVars<Scalar> dw_local;    // depthwise 3x3

  static DIBWeights bind(const ParamSet<Scalar>& p, const std::string& prefix);
};

/// Gated feed-forward network with a depthwise 3x3 on the gate half.
template <typename Scalar>
struct SGFNWeights {
  NormVars<Scalar> ln;
  ConvVars<Scalar> pw_expand;   // C -> 2rC
  ConvVars<Scalar> dw_gate;     // depthwise 3x3 on rC
  ConvVars<Scalar> pw_project;  // rC -> C

  static SGFNWeights bind(const ParamSet<Scalar>& p, const std::string& prefix);
};

template <typename Scalar>
struct MambaBlockWeights {
  VSSWeights<Scalar> vss;
  DIBWeights<Scalar> dib;
  SGFNWeights<Scalar> sgfn;

  static MambaBlockWeights bind(const ParamSet<Scalar>& p, const std::string& prefix);
};

/// Registers "<prefix>.vss.*", "<prefix>.dib.*", "<prefix>.sgfn.*".
template <typename Scalar>
void add_block_weights(WeightStore<Scalar>& store, const std::string& prefix, const BlockDims& dims, Rng& rng);

template <typename Scalar>
Var<Scalar> vss_block(const Var<Scalar>& x, const VSSWeights<Scalar>& w);

/// Spatial map sigmoid(gelu(pw_spatial(map_vss))), [N,1,H,W].
template <typename Scalar>
Var<Scalar> dib_spatial_map(const Var<Scalar>& map_vss, const DIBWeights<Scalar>& w);

/// Channel map sigmoid(gelu(pw_channel(gap(map_local)))), [N,C,1,1].
template <typename Scalar>
Var<Scalar> dib_channel_map(const Var<Scalar>& map_local, const DIBWeights<Scalar>& w);

/// spatial_map * map_local + channel_map * map_vss.
template <typename Scalar>
Var<Scalar> dib(const Var<Scalar>& map_vss, const Var<Scalar>& map_local, const DIBWeights<Scalar>& w);

template <typename Scalar>
Var<Scalar> di_vss_block(const Var<Scalar>& x, const VSSWeights<Scalar>& vss, const DIBWeights<Scalar>& dw);

template <typename Scalar>
Var<Scalar> sgfn(const Var<Scalar>& x, const SGFNWeights<Scalar>& w);

template <typename Scalar>
Var<Scalar> efficient_mamba_block(const Var<Scalar>& x, const MambaBlockWeights<Scalar>& w);

/// k*k*cin/groups*cout per output pixel, times `pixels`.
std::int64_t conv_macs(std::int64_t cin, std::int64_t cout, int k, int groups, std::int64_t pixels);

/// Multiply-accumulates of one efficient mamba block on an h x w map.
std::int64_t block_macs(const BlockDims& dims, std::int64_t h, std::int64_t w);

}  // namespace muie
