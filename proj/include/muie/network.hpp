#pragma once

#include "muie/blocks.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace muie {

/// Architecture hyperparameters. Stage i of the encoder runs at
/// base_channels * 2^i channels and 1/(patch_size * 2^i) resolution.
struct ModelConfig {
  int base_channels = 8;
  int patch_size = 4;
  int stages = 4;
  int expand = 2;
  int sgfn_ratio = 2;
  int n_state = 4;
  int depth = 1;  // efficient mamba blocks per stage
  std::string skip_mode = "add";

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
  /// Input extents must be multiples of this.
  int required_multiple() const { return 8 * patch_size; }
  BlockDims block_dims(int stage) const;
  std::int64_t stage_channels(int stage) const { return static_cast<std::int64_t>(base_channels) << stage; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

/// Freshly initialized parameters for `cfg`, deterministic in `seed`.
template <typename Scalar>
WeightStore<Scalar> init_weights(const ModelConfig& cfg, std::uint64_t seed);

/// [N,3,H,W] -> [N,C,H/P,W/P].
template <typename Scalar>
Var<Scalar> patch_embed(const Var<Scalar>& image, const ModelConfig& cfg, const ParamSet<Scalar>& params);

/// [N,c,h,w] -> [N,2c,h/2,w/2]: pixel rearrange then 1x1 conv 4c -> 2c.
template <typename Scalar>
Var<Scalar> downsample(const Var<Scalar>& x, const ConvVars<Scalar>& conv);

/// [N,c,h,w] -> [N,c/2,2h,2w]: 1x1 conv c -> 2c then pixel rearrange.
template <typename Scalar>
Var<Scalar> upsample(const Var<Scalar>& x, const ConvVars<Scalar>& conv);

template <typename Scalar>
struct ForwardTrace {
  Var<Scalar> output;   // [N,3,H,W], unclamped
  Var<Scalar> latent;   // encoder output, [N,8C,H/8P,W/8P]
  Var<Scalar> head;     // head prediction before the global residual
};

template <typename Scalar>
ForwardTrace<Scalar> forward_trace(const Var<Scalar>& image, const ModelConfig& cfg, const ParamSet<Scalar>& params);

/// Full network: embed, 4 encoder stages, 4 decoder stages with additive
/// skips, head, and global residual. Unclamped.
template <typename Scalar>
Var<Scalar> forward(const Var<Scalar>& image, const ModelConfig& cfg, const ParamSet<Scalar>& params);

/// Inference without gradient recording. Extents are reflect-padded up to
/// required_multiple() and the output is cropped back and clamped to [0,1].
Tensor<float> enhance(const Tensor<float>& image, const ModelConfig& cfg, const WeightStore<float>& weights);

struct FlopReport {
  std::vector<std::pair<std::string, std::int64_t>> stages;  // name -> MACs
  std::int64_t total_macs = 0;   // sum of stages, at the nominal extents
  std::int64_t padded_macs = 0;  // what runs after padding to required_multiple()

  double gflops() const { return 2.0 * static_cast<double>(total_macs) / 1e9; }
  static double gflops(std::int64_t macs) { return 2.0 * static_cast<double>(macs) / 1e9; }
};

/// Analytic multiply-accumulate count of one forward pass on `input`
/// ([N,3,H,W]); convolutions, linear maps, and scans. The count is linear in
/// H*W; for extents that are not a multiple of required_multiple() the
/// stage figures are scaled from the padded run to the nominal pixel count.
FlopReport count_flops(const ModelConfig& cfg, const Shape& input);

/// Binary weight file: "MUIE", u32 version 1, u32 count, then per tensor
/// u32 name length, name bytes, u32 rank, u64 dims[rank], little-endian f32
/// payload; trailing u64 sum of all payload bytes.
void save_weights(const WeightStore<float>& weights, const std::filesystem::path& path);
WeightStore<float> load_weights(const std::filesystem::path& path);
std::uint64_t payload_checksum(const WeightStore<float>& weights);

/// Config companion of a weight file: same stem, ".json" extension.
std::filesystem::path config_path_for(const std::filesystem::path& weights_path);
void save_model_config(const ModelConfig& cfg, const std::filesystem::path& path);
ModelConfig load_model_config(const std::filesystem::path& path);

/// Names missing from / unexpected in / mis-shaped in `weights` relative to
/// what `cfg` requires. Empty when they correspond.
std::vector<std::string> weight_mismatches(const ModelConfig& cfg, const WeightStore<float>& weights);

}  // namespace muie
