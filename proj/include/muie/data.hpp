#pragma once

#include "muie/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace muie {

/// Images are [1,3,H,W] float tensors with values in [0,1].
using Image = Tensor<float>;

/// 8-bit RGB PNG. Byte b maps to b/255.
Image load_png(const std::filesystem::path& path);

/// Clamps to [0,1] and quantizes round-half-up: byte = floor(255*v + 0.5).
void save_png(const Image& image, const std::filesystem::path& path);

std::uint8_t quantize_byte(float value);

struct ImagePair {
  Image raw;
  Image reference;
  std::string id;
};

enum class Split { Train, Test };

struct Dataset {
  std::vector<ImagePair> pairs;
  Split split = Split::Train;
  std::vector<std::string> warnings;  // pairs excluded while loading

  std::size_t size() const { return pairs.size(); }
};

/// Reads `root/raw/*.png` and `root/reference/*.png`, pairing files by stem in
/// lexicographic order. With `split_list`, only the stems listed there (one per
/// line) are kept. Unpaired stems and pairs with mismatched extents are
/// skipped and described in `warnings`.
Dataset load_dataset(const std::filesystem::path& root, const std::optional<std::filesystem::path>& split_list = {},
                     Split split = Split::Train);

std::vector<std::string> read_split_list(const std::filesystem::path& path);

struct DegradeOptions {
  /// Per-channel attenuation coefficients (R, G, B); transmission is
  /// exp(-coeff * depth). Red attenuates strongest.
  float attenuation[3] = {1.6f, 0.45f, 0.35f};
  bool blur = true;
};

/// Underwater-style degradation: 3x3 box blur, then per-channel
/// transmission t_c blending toward a seeded greenish veil:
///   out = t_c * blur(clean) + (1 - t_c) * veil_c
/// Depth and veil are drawn from `seed`.
Image synth_degrade(const Image& clean, std::uint64_t seed, const DegradeOptions& options = {});

/// Smooth procedural test image: mixtures of low-frequency sinusoids and
/// gradients, values in [0,1].
Image procedural_image(std::int64_t height, std::int64_t width, std::uint64_t seed);

/// 3x3 box blur averaging the in-bounds neighbours.
Image box_blur3(const Image& image);

/// Reflect-pads [N,C,H,W] on the bottom/right up to multiples of `multiple`.
Tensor<float> reflect_pad(const Tensor<float>& image, std::int64_t multiple);
Tensor<float> crop(const Tensor<float>& image, std::int64_t top, std::int64_t left, std::int64_t height,
                   std::int64_t width);
Tensor<float> flip_horizontal(const Tensor<float>& image);

/// Stacks same-extent [1,C,H,W] tensors into [N,C,H,W].
Tensor<float> stack(const std::vector<Tensor<float>>& items);

}  // namespace muie
