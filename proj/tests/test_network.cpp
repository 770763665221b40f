#include "muie/data.hpp"
#include "muie/network.hpp"

#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

using namespace muie;
namespace fs = std::filesystem;

namespace {

ModelConfig config(int c, int p) {
  ModelConfig cfg;
  cfg.base_channels = c;
  cfg.patch_size = p;
  return cfg;
}

Tensor<float> image(std::int64_t h, std::int64_t w, std::uint64_t seed, std::int64_t n = 1) {
  Rng rng(seed);
  return uniform_tensor<float>(Shape{n, 3, h, w}, rng, 0.0, 1.0);
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "muie_network_tests";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("config validation and json") {
  CHECK_THROWS(config(3, 1).validate());
  CHECK_THROWS(config(8, 3).validate());
  const ModelConfig cfg = config(12, 2);
  const nlohmann::json j = cfg;
  CHECK(j.get<ModelConfig>() == cfg);
  nlohmann::json bad = j;
  bad["bogus"] = 1;
  CHECK_THROWS(bad.get<ModelConfig>());
  CHECK(ModelConfig{}.required_multiple() == 8 * ModelConfig{}.patch_size);
}

TEST_CASE("patch embedding shapes") {
  for (auto [p, side] : {std::pair{1, 64}, std::pair{2, 32}}) {
    const ModelConfig cfg = config(16, p);
    const auto store = init_weights<float>(cfg, 1);
    const auto out = patch_embed(Var<float>(image(64, 64, 2)), cfg, ParamSet<float>(store, false));
    CHECK(out.shape() == Shape{1, 16, side, side});
  }
  const ModelConfig cfg = config(16, 2);
  const auto store = init_weights<float>(cfg, 1);
  CHECK_THROWS_AS(patch_embed(Var<float>(image(63, 64, 2)), cfg, ParamSet<float>(store, false)), ShapeError);
}

TEST_CASE("downsample and upsample") {
  Rng rng(3);
  WeightStore<float> store;
  add_conv(store, "down", 64, 32, 1, 1, rng);
  add_conv(store, "up", 32, 64, 1, 1, rng);
  const ParamSet<float> p(store, false);
  const auto x = Var<float>(uniform_tensor<float>(Shape{1, 16, 32, 32}, rng));
  const auto down = downsample(x, ConvVars<float>::bind(p, "down"));
  CHECK(down.shape() == Shape{1, 32, 16, 16});
  const auto up = upsample(down, ConvVars<float>::bind(p, "up"));
  CHECK(up.shape() == Shape{1, 16, 32, 32});
  for (auto [h, w] : {std::pair{4, 6}, std::pair{8, 2}, std::pair{10, 10}}) {
    const auto y = Var<float>(uniform_tensor<float>(Shape{2, 32, h, w}, rng));
    CHECK(downsample(upsample(y, ConvVars<float>::bind(p, "up")), ConvVars<float>::bind(p, "down")).shape() ==
          y.shape());
  }
}

TEST_CASE("encoder latent is 8C channels at H/8P") {
  const ModelConfig cfg = config(16, 1);
  const auto store = init_weights<float>(cfg, 4);
  const auto trace = forward_trace(Var<float>(image(64, 64, 5)), cfg, ParamSet<float>(store, false));
  CHECK(trace.latent.shape() == Shape{1, 128, 8, 8});
  CHECK(trace.output.shape() == Shape{1, 3, 64, 64});
  for (int p : {2, 4}) {
    const ModelConfig c2 = config(4, p);
    const auto t2 = forward_trace(Var<float>(image(64, 32, 6, 2)), c2, ParamSet<float>(init_weights<float>(c2, 7), false));
    CHECK(t2.latent.shape() == Shape{2, 32, 64 / (8 * p), 32 / (8 * p)});
    CHECK(t2.output.shape() == Shape{2, 3, 64, 32});
  }
}

TEST_CASE("forward rejects extents that are not multiples of 8P") {
  const ModelConfig cfg = config(4, 2);
  const auto store = init_weights<float>(cfg, 8);
  try {
    forward(Var<float>(image(40, 32, 9)), cfg, ParamSet<float>(store, false));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("multiples of 16") != std::string::npos);
  }
}

TEST_CASE("head and global residual") {
  const ModelConfig cfg = config(4, 2);
  auto store = init_weights<float>(cfg, 10);
  const auto x = image(32, 32, 11);
  SUBCASE("zeroed head returns the input") {
    store.at("head.conv.weight").fill(0);
    store.at("head.conv.bias").fill(0);
    CHECK(bitwise_equal(forward(Var<float>(x), cfg, ParamSet<float>(store, false)).value(), x));
  }
  SUBCASE("zero-weight head predicts its bias") {
    store.at("head.conv.weight").fill(0);
    store.at("head.conv.bias") = Tensor<float>(Shape{3, 1, 1, 1}, std::vector<float>{0.1f, -0.2f, 0.3f});
    const auto head = forward_trace(Var<float>(x), cfg, ParamSet<float>(store, false)).head.value();
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t i = 0; i < 32 * 32; ++i) CHECK(head[c * 1024 + i] == store.at("head.conv.bias")[c]);
  }
}

TEST_CASE("enhance pads, crops back, and clamps") {
  const ModelConfig cfg = config(4, 1);
  const auto store = init_weights<float>(cfg, 12);
  for (auto [h, w] : {std::pair{64, 64}, std::pair{70, 70}, std::pair{9, 21}}) {
    const auto out = enhance(image(h, w, 13), cfg, store);
    CHECK(out.shape() == Shape{1, 3, h, w});
    for (float v : out.values()) CHECK((v >= 0.0f && v <= 1.0f));
  }
}

TEST_CASE("forward is reproducible across runs and worker counts") {
  const ModelConfig cfg = config(4, 1);
  const auto store = init_weights<float>(cfg, 14);
  const auto x = image(32, 32, 15, 2);
  const int before = num_threads();
  set_num_threads(1);
  const auto a = forward(Var<float>(x), cfg, ParamSet<float>(store, false)).value();
  const auto b = forward(Var<float>(x), cfg, ParamSet<float>(store, false)).value();
  set_num_threads(4);
  const auto c = forward(Var<float>(x), cfg, ParamSet<float>(store, false)).value();
  set_num_threads(before);
  CHECK(bitwise_equal(a, b));
  CHECK(bitwise_equal(a, c));
}

TEST_CASE("weight store") {
  const ModelConfig cfg = config(4, 2);
  const auto a = init_weights<float>(cfg, 16), b = init_weights<float>(cfg, 16);
  CHECK(a.names() == b.names());
  for (const auto& name : a.names()) CHECK(bitwise_equal(a.at(name), b.at(name)));
  CHECK(a.parameter_count() == b.parameter_count());
  CHECK(a.contains("embed.conv.weight"));
  CHECK(a.contains("enc.0.0.vss.scan.3.a_log"));
  CHECK(a.contains("dec.3.0.sgfn.pw_project.bias"));
  CHECK(a.contains("head.expand.weight"));
  CHECK_FALSE(init_weights<float>(config(4, 1), 16).contains("head.expand.weight"));
  WeightStore<float> dup;
  dup.add("x", Tensor<float>(Shape{1, 1, 1, 1}));
  CHECK_THROWS(dup.add("x", Tensor<float>(Shape{1, 1, 1, 1})));
  CHECK(weight_mismatches(cfg, a).empty());
}

TEST_CASE("mismatched weights are listed by name") {
  const ModelConfig cfg = config(4, 2);
  const auto good = init_weights<float>(cfg, 17);
  WeightStore<float> bad;
  for (const auto& [name, t] : good) {
    if (name == "head.conv.bias") continue;
    bad.add(name, name == "embed.conv.weight" ? Tensor<float>(Shape{1, 1, 1, 1}) : t);
  }
  bad.add("extra.weight", Tensor<float>(Shape{1, 1, 1, 1}));
  const auto problems = weight_mismatches(cfg, bad);
  auto mentions = [&](const std::string& what) {
    return std::any_of(problems.begin(), problems.end(), [&](const std::string& p) { return p.find(what) != std::string::npos; });
  };
  CHECK(problems.size() == 3);
  CHECK(mentions("head.conv.bias"));
  CHECK(mentions("embed.conv.weight"));
  CHECK(mentions("extra.weight"));
}

TEST_CASE("weight file round trip and format") {
  const ModelConfig cfg = config(4, 2);
  const auto store = init_weights<float>(cfg, 18);
  const fs::path path = scratch("w.muie");
  save_weights(store, path);
  const auto back = load_weights(path);
  CHECK(back.names() == store.names());
  for (const auto& name : store.names()) CHECK(bitwise_equal(back.at(name), store.at(name)));

  std::ifstream in(path, std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto u32 = [&](std::size_t at) {
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + at, 4);
    return v;
  };
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "MUIE");
  CHECK(u32(4) == 1);
  CHECK(u32(8) == store.size());
  const std::uint32_t name_len = u32(12);
  CHECK(std::string(bytes.begin() + 16, bytes.begin() + 16 + name_len) == store.names().front());
  CHECK(u32(16 + name_len) == 4);

  // Trailing checksum: sum of payload bytes.
  std::uint64_t expected = 0;
  for (const auto& [name, t] : store) {
    const auto* p = reinterpret_cast<const unsigned char*>(t.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(t.numel()) * 4; ++i) expected += p[i];
  }
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  CHECK(stored == expected);
  CHECK(payload_checksum(store) == expected);

  SUBCASE("corruption is detected") {
    std::vector<unsigned char> flipped = bytes;
    flipped[flipped.size() - 20] ^= 0x01;
    std::ofstream(scratch("flip.muie"), std::ios::binary).write(reinterpret_cast<const char*>(flipped.data()), flipped.size());
    CHECK_THROWS(load_weights(scratch("flip.muie")));
    std::ofstream(scratch("short.muie"), std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), bytes.size() / 2);
    CHECK_THROWS(load_weights(scratch("short.muie")));
    std::vector<unsigned char> magic = bytes;
    magic[0] = 'X';
    std::ofstream(scratch("magic.muie"), std::ios::binary).write(reinterpret_cast<const char*>(magic.data()), magic.size());
    CHECK_THROWS(load_weights(scratch("magic.muie")));
    CHECK_THROWS(load_weights(scratch("missing.muie")));
  }
  SUBCASE("config is stored beside the weights") {
    CHECK(config_path_for(path).extension() == ".json");
    save_model_config(cfg, config_path_for(path));
    CHECK(load_model_config(config_path_for(path)) == cfg);
  }
}

TEST_CASE("flop accounting") {
  const ModelConfig cfg = config(8, 2);
  const auto a = count_flops(cfg, Shape{1, 3, 128, 128});
  const auto b = count_flops(cfg, Shape{1, 3, 128, 256});
  const double ratio = static_cast<double>(b.total_macs) / static_cast<double>(a.total_macs);
  CHECK((ratio >= 1.99 && ratio <= 2.01));
  std::int64_t sum = 0;
  for (const auto& [name, macs] : a.stages) sum += macs;
  CHECK(sum == a.total_macs);
  CHECK(a.stages.size() == 10);
  CHECK(count_flops(cfg, Shape{2, 3, 128, 128}).total_macs == 2 * a.total_macs);
  const auto hd = count_flops(ModelConfig{}, Shape{1, 3, 720, 1280});
  CHECK((hd.gflops() >= 0.5 && hd.gflops() <= 10.0));
  CHECK(hd.padded_macs >= hd.total_macs);
  CHECK_THROWS(count_flops(cfg, Shape{1, 4, 32, 32}));
}
