#include "muie/network.hpp"

#include "muie/data.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace muie {

static_assert(std::endian::native == std::endian::little, "weight files assume a little-endian host");

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (base_channels < 4) fail("base_channels must be >= 4");
  if (patch_size != 1 && patch_size != 2 && patch_size != 4) fail("patch_size must be 1, 2 or 4");
  if (stages != 4) fail("stages must be 4");
  if (expand < 1) fail("expand must be >= 1");
  if (sgfn_ratio < 1) fail("sgfn_ratio must be >= 1");
  if (n_state < 1) fail("n_state must be >= 1");
  if (depth < 1) fail("depth must be >= 1");
  if (skip_mode != "add") fail("skip_mode must be \"add\"");
}

BlockDims ModelConfig::block_dims(int stage) const {
  return BlockDims{stage_channels(stage), expand, sgfn_ratio, n_state};
}

void to_json(nlohmann::json& j, const ModelConfig& cfg) {
  j = nlohmann::json{{"base_channels", cfg.base_channels}, {"patch_size", cfg.patch_size},
                     {"stages", cfg.stages},               {"expand", cfg.expand},
                     {"sgfn_ratio", cfg.sgfn_ratio},       {"n_state", cfg.n_state},
                     {"depth", cfg.depth},                 {"skip_mode", cfg.skip_mode}};
}

void from_json(const nlohmann::json& j, ModelConfig& cfg) {
  static const std::vector<std::string> known = {"base_channels", "patch_size", "stages", "expand",
                                                 "sgfn_ratio",    "n_state",    "depth",  "skip_mode"};
  for (const auto& [key, value] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw std::invalid_argument("model config: unknown field \"" + key + "\"");
  ModelConfig d;
  cfg.base_channels = j.value("base_channels", d.base_channels);
  cfg.patch_size = j.value("patch_size", d.patch_size);
  cfg.stages = j.value("stages", d.stages);
  cfg.expand = j.value("expand", d.expand);
  cfg.sgfn_ratio = j.value("sgfn_ratio", d.sgfn_ratio);
  cfg.n_state = j.value("n_state", d.n_state);
  cfg.depth = j.value("depth", d.depth);
  cfg.skip_mode = j.value("skip_mode", d.skip_mode);
}

namespace {

std::string block_prefix(const char* side, int stage, int index) {
  return std::string(side) + "." + std::to_string(stage) + "." + std::to_string(index);
}

template <typename Scalar>
Var<Scalar> run_stage(Var<Scalar> x, const ModelConfig& cfg, const ParamSet<Scalar>& params, const char* side,
                      int stage) {
  for (int j = 0; j < cfg.depth; ++j)
    x = efficient_mamba_block(x, MambaBlockWeights<Scalar>::bind(params, block_prefix(side, stage, j)));
  return x;
}

}  // namespace

template <typename Scalar>
WeightStore<Scalar> init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  WeightStore<Scalar> store;
  const std::int64_t c = cfg.base_channels, p = cfg.patch_size;
  if (p == 1)
    add_conv(store, "embed.conv", 3, c, 3, 1, rng);
  else
    add_conv(store, "embed.conv", 3 * p * p, c, 1, 1, rng);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < cfg.depth; ++j) add_block_weights(store, block_prefix("enc", i, j), cfg.block_dims(i), rng);
    if (i < 3) add_conv(store, "down." + std::to_string(i) + ".conv", 4 * cfg.stage_channels(i),
                        cfg.stage_channels(i + 1), 1, 1, rng);
  }
  for (int i = 0; i < 4; ++i) {
    const int level = 3 - i;
    for (int j = 0; j < cfg.depth; ++j)
      add_block_weights(store, block_prefix("dec", i, j), cfg.block_dims(level), rng);
    if (i < 3) add_conv(store, "up." + std::to_string(i) + ".conv", cfg.stage_channels(level),
                        2 * cfg.stage_channels(level), 1, 1, rng);
  }
  if (p > 1) add_conv(store, "head.expand", c, c * p * p, 1, 1, rng);
  add_conv(store, "head.conv", c, 3, 3, 1, rng);
  return store;
}

template <typename Scalar>
Var<Scalar> patch_embed(const Var<Scalar>& image, const ModelConfig& cfg, const ParamSet<Scalar>& params) {
  const Shape s = image.shape();
  if (s.c != 3) throw ShapeError("patch_embed: expected 3 input channels, got " + s.str());
  const int p = cfg.patch_size;
  if (s.h % p != 0 || s.w % p != 0)
    throw ShapeError("patch_embed: extents " + s.str() + " not divisible by patch size " + std::to_string(p));
  const auto conv = ConvVars<Scalar>::bind(params, "embed.conv");
  if (p == 1) return conv2d(image, conv.weight, conv.bias, 1, 1, 1);
  return conv2d(pixel_rearrange(image, p, Rearrange::Down), conv.weight, conv.bias, 1, 0, 1);
}

template <typename Scalar>
Var<Scalar> downsample(const Var<Scalar>& x, const ConvVars<Scalar>& conv) {
  return conv2d(pixel_rearrange(x, 2, Rearrange::Down), conv.weight, conv.bias, 1, 0, 1);
}

template <typename Scalar>
Var<Scalar> upsample(const Var<Scalar>& x, const ConvVars<Scalar>& conv) {
  return pixel_rearrange(conv2d(x, conv.weight, conv.bias, 1, 0, 1), 2, Rearrange::Up);
}

template <typename Scalar>
ForwardTrace<Scalar> forward_trace(const Var<Scalar>& image, const ModelConfig& cfg, const ParamSet<Scalar>& params) {
  const Shape s = image.shape();
  const int multiple = cfg.required_multiple();
  if (s.c != 3) throw ShapeError("forward: expected [N,3,H,W], got " + s.str());
  if (s.h % multiple != 0 || s.w % multiple != 0)
    throw ShapeError("forward: height and width must be multiples of " + std::to_string(multiple) + ", got " +
                     std::to_string(s.h) + "x" + std::to_string(s.w));

  std::vector<Var<Scalar>> skips;
  Var<Scalar> x = patch_embed(image, cfg, params);
  for (int i = 0; i < 4; ++i) {
    x = run_stage(x, cfg, params, "enc", i);
    skips.push_back(x);
    if (i < 3) x = downsample(x, ConvVars<Scalar>::bind(params, "down." + std::to_string(i) + ".conv"));
  }
  ForwardTrace<Scalar> trace;
  trace.latent = x;
  for (int i = 0; i < 4; ++i) {
    if (i > 0) x = add(x, skips[static_cast<std::size_t>(3 - i)]);
    x = run_stage(x, cfg, params, "dec", i);
    if (i < 3) x = upsample(x, ConvVars<Scalar>::bind(params, "up." + std::to_string(i) + ".conv"));
  }
  if (cfg.patch_size > 1) {
    const auto expand = ConvVars<Scalar>::bind(params, "head.expand");
    x = pixel_rearrange(conv2d(x, expand.weight, expand.bias, 1, 0, 1), cfg.patch_size, Rearrange::Up);
  }
  const auto head = ConvVars<Scalar>::bind(params, "head.conv");
  trace.head = conv2d(x, head.weight, head.bias, 1, 1, 1);
  trace.output = add(trace.head, image);
  return trace;
}

template <typename Scalar>
Var<Scalar> forward(const Var<Scalar>& image, const ModelConfig& cfg, const ParamSet<Scalar>& params) {
  return forward_trace(image, cfg, params).output;
}

Tensor<float> enhance(const Tensor<float>& image, const ModelConfig& cfg, const WeightStore<float>& weights) {
  const ParamSet<float> params(weights, false);
  const Shape s = image.shape();
  const Tensor<float> padded = reflect_pad(image, cfg.required_multiple());
  Tensor<float> out = forward(Var<float>(padded), cfg, params).value();
  if (padded.shape() != s) out = crop(out, 0, 0, s.h, s.w);
  for (auto& v : out.values()) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

FlopReport count_flops(const ModelConfig& cfg, const Shape& input) {
  cfg.validate();
  if (input.c != 3 || input.n < 1 || input.h < 1 || input.w < 1)
    throw ShapeError("count_flops: input " + input.str() + " must be [N,3,H,W]");
  // Every term is per-pixel at its stage, so the count is computed on the
  // padded extents that inference runs and then rescaled to the nominal pixel
  // count. The padded figure is kept alongside.
  const std::int64_t multiple = cfg.required_multiple();
  const std::int64_t padded_h = (input.h + multiple - 1) / multiple * multiple;
  const std::int64_t padded_w = (input.w + multiple - 1) / multiple * multiple;
  const std::int64_t n = input.n, p = cfg.patch_size, c = cfg.base_channels;
  FlopReport report;
  const double nominal = static_cast<double>(input.h * input.w) / static_cast<double>(padded_h * padded_w);
  auto push = [&](std::string name, std::int64_t macs) {
    const std::int64_t scaled = std::llround(static_cast<double>(n * macs) * nominal);
    report.stages.emplace_back(std::move(name), scaled);
    report.total_macs += scaled;
    report.padded_macs += n * macs;
  };
  const std::int64_t h0 = padded_h / p, w0 = padded_w / p;
  push("embed", p == 1 ? 27 * c * h0 * w0 : 3 * p * p * c * h0 * w0);
  for (int i = 0; i < 4; ++i) {
    const std::int64_t h = h0 >> i, w = w0 >> i, ci = cfg.stage_channels(i);
    std::int64_t macs = cfg.depth * block_macs(cfg.block_dims(i), h, w);
    if (i < 3) macs += 4 * ci * 2 * ci * (h / 2) * (w / 2);
    push("enc." + std::to_string(i), macs);
  }
  for (int i = 0; i < 4; ++i) {
    const int level = 3 - i;
    const std::int64_t h = h0 >> level, w = w0 >> level, ci = cfg.stage_channels(level);
    std::int64_t macs = cfg.depth * block_macs(cfg.block_dims(level), h, w);
    if (i < 3) macs += ci * 2 * ci * h * w;
    push("dec." + std::to_string(i), macs);
  }
  std::int64_t head = 27 * c * padded_h * padded_w;
  if (p > 1) head += c * c * p * p * h0 * w0;
  push("head", head);
  return report;
}

namespace {

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw std::runtime_error("weights: truncated file " + path.string());
  return v;
}

std::uint64_t byte_sum(const Tensor<float>& t) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
  std::uint64_t acc = 0;
  for (std::size_t i = 0; i < static_cast<std::size_t>(t.numel()) * sizeof(float); ++i) acc += bytes[i];
  return acc;
}

}  // namespace

std::uint64_t payload_checksum(const WeightStore<float>& weights) {
  std::uint64_t acc = 0;
  for (const auto& [name, t] : weights) acc += byte_sum(t);
  return acc;
}

void save_weights(const WeightStore<float>& weights, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("weights: cannot open " + path.string() + " for writing");
  out.write("MUIE", 4);
  write_pod(out, std::uint32_t{1});
  write_pod(out, static_cast<std::uint32_t>(weights.size()));
  for (const auto& [name, t] : weights) {
    write_pod(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(out, std::uint32_t{4});
    for (int axis = 0; axis < 4; ++axis) write_pod(out, static_cast<std::uint64_t>(t.shape()[axis]));
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
  write_pod(out, payload_checksum(weights));
  if (!out) throw std::runtime_error("weights: write failed for " + path.string());
}

WeightStore<float> load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("weights: cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "MUIE", 4) != 0)
    throw std::runtime_error("weights: bad magic in " + path.string());
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != 1) throw std::runtime_error("weights: unsupported version " + std::to_string(version));
  const auto count = read_pod<std::uint32_t>(in, path);
  WeightStore<float> store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = read_pod<std::uint32_t>(in, path);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw std::runtime_error("weights: truncated name in " + path.string());
    const auto rank = read_pod<std::uint32_t>(in, path);
    if (rank < 1 || rank > 4) throw std::runtime_error("weights: unsupported rank for " + name);
    std::int64_t dims[4] = {1, 1, 1, 1};
    for (std::uint32_t a = 0; a < rank; ++a) dims[a] = static_cast<std::int64_t>(read_pod<std::uint64_t>(in, path));
    Tensor<float> t(Shape{dims[0], dims[1], dims[2], dims[3]});
    if (!in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(float))))
      throw std::runtime_error("weights: truncated payload for " + name);
    store.add(name, std::move(t));
  }
  const auto stored = read_pod<std::uint64_t>(in, path);
  if (stored != payload_checksum(store)) throw std::runtime_error("weights: checksum mismatch in " + path.string());
  return store;
}

std::filesystem::path config_path_for(const std::filesystem::path& weights_path) {
  auto p = weights_path;
  return p.replace_extension(".json");
}

void save_model_config(const ModelConfig& cfg, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << nlohmann::json(cfg).dump(2) << "\n";
}

ModelConfig load_model_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read model config " + path.string());
  ModelConfig cfg = nlohmann::json::parse(in).get<ModelConfig>();
  cfg.validate();
  return cfg;
}

std::vector<std::string> weight_mismatches(const ModelConfig& cfg, const WeightStore<float>& weights) {
  const WeightStore<float> expected = init_weights<float>(cfg, 0);
  std::vector<std::string> issues;
  for (const auto& [name, t] : expected) {
    if (!weights.contains(name))
      issues.push_back("missing " + name);
    else if (weights.at(name).shape() != t.shape())
      issues.push_back("shape " + name + ": expected " + t.shape().str() + ", found " + weights.at(name).shape().str());
  }
  for (const auto& [name, t] : weights)
    if (!expected.contains(name)) issues.push_back("unexpected " + name);
  return issues;
}

#define MUIE_INSTANTIATE_NETWORK(T)                                                                  \
  template WeightStore<T> init_weights<T>(const ModelConfig&, std::uint64_t);                        \
  template Var<T> patch_embed(const Var<T>&, const ModelConfig&, const ParamSet<T>&);                \
  template Var<T> downsample(const Var<T>&, const ConvVars<T>&);                                     \
  template Var<T> upsample(const Var<T>&, const ConvVars<T>&);                                       \
  template ForwardTrace<T> forward_trace(const Var<T>&, const ModelConfig&, const ParamSet<T>&);     \
  template Var<T> forward(const Var<T>&, const ModelConfig&, const ParamSet<T>&);

MUIE_INSTANTIATE_NETWORK(float)
MUIE_INSTANTIATE_NETWORK(double)

}  // namespace muie
