#include "muie/cli.hpp"
#include "muie/metrics.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

using namespace muie;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("muie_cli_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& child = "") const { return (child.empty() ? path : path / child).string(); }
};

struct Run {
  int code;
  std::string out, err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  std::vector<std::string> full{"muie"};
  full.insert(full.end(), args.begin(), args.end());
  const int code = run_cli(full, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ModelConfig tiny() {
  ModelConfig cfg;
  cfg.base_channels = 4;
  cfg.patch_size = 1;
  return cfg;
}

void write_config(const fs::path& path, int epochs = 2) {
  RunConfig cfg;
  cfg.model = tiny();
  cfg.train.epochs = epochs;
  cfg.train.warmup_epochs = 1;
  cfg.train.batch = 2;
  cfg.train.crop = 16;
  cfg.train.checkpoint_every = 1;
  cfg.train.seed = 3;
  std::ofstream(path) << to_json(cfg).dump(2);
}

/// Weights whose head is zero, so the model returns its (clamped) input.
fs::path identity_weights(const fs::path& dir) {
  auto w = init_weights<float>(tiny(), 1);
  w.at("head.conv.weight").fill(0);
  w.at("head.conv.bias").fill(0);
  const fs::path path = dir / "identity.muie";
  save_weights(w, path);
  save_model_config(tiny(), config_path_for(path));
  return path;
}

double total_from(const std::string& text, const std::string& key) {
  std::smatch m;
  REQUIRE(std::regex_search(text, m, std::regex(key + "=([0-9.e+-]+)")));
  return std::stod(m[1]);
}

}  // namespace

TEST_CASE("argument errors exit with the usage code") {
  CHECK(run({}).code == kExitUsage);
  CHECK(run({"bogus"}).code == kExitUsage);
  CHECK(run({"train", "--config", "x.json", "--out", "o"}).code == kExitUsage);
  CHECK(run({"flops", "--hw", "720by1280"}).code == kExitUsage);
  CHECK(run({"--help"}).code == kExitOk);
}

TEST_CASE("hw parsing") {
  CHECK(parse_hw("720x1280") == std::pair<std::int64_t, std::int64_t>{720, 1280});
  CHECK_THROWS_AS(parse_hw("720"), std::invalid_argument);
  CHECK_THROWS_AS(parse_hw("0x5"), std::invalid_argument);
  CHECK_THROWS_AS(parse_hw("4x5x6"), std::invalid_argument);
  CHECK_THROWS_AS(parse_hw("ax5"), std::invalid_argument);
}

TEST_CASE("run config nested or flat") {
  const auto nested = parse_run_config({{"model", {{"base_channels", 4}}}, {"train", {{"epochs", 9}}}});
  CHECK(nested.model.base_channels == 4);
  CHECK(nested.train.epochs == 9);
  const auto flat = parse_run_config({{"base_channels", 4}, {"epochs", 9}});
  CHECK(flat.model == nested.model);
  CHECK(flat.train.epochs == 9);
  CHECK_THROWS(parse_run_config({{"colour", 1}}));
  CHECK_THROWS(parse_run_config({{"model", {{"colour", 1}}}}));
  const auto round = parse_run_config(to_json(nested));
  CHECK(round.model == nested.model);
  CHECK(round.train.epochs == 9);
}

TEST_CASE("synth, train, enhance and eval end to end") {
  TempDir dir("e2e");
  const auto synth = run({"synth", "--out", dir.str("data"), "--count", "3", "--hw", "24x24", "--seed", "2"});
  REQUIRE(synth.code == kExitOk);
  CHECK(fs::exists(dir.path / "data" / "raw" / "synth_0002.png"));
  write_config(dir.path / "cfg.json");

  SUBCASE("train writes checkpoints, log and manifest") {
    const auto args = [&](const std::string& out) {
      return std::vector<std::string>{"train", "--data", dir.str("data"), "--config", dir.str("cfg.json"),
                                      "--out", dir.str(out), "--epochs", "1", "--seed", "7"};
    };
    const auto a = run(args("a"));
    REQUIRE(a.code == kExitOk);
    const auto b = run(args("b"));
    REQUIRE(b.code == kExitOk);
    CHECK(fs::exists(dir.path / "a" / "checkpoints" / "epoch_0001.muie"));
    CHECK(fs::exists(dir.path / "a" / "final.json"));
    std::istringstream log(slurp(dir.path / "a" / "train.log"));
    std::string line;
    int lines = 0;
    while (std::getline(log, line)) lines += line.starts_with("epoch=") ? 1 : 0;
    CHECK(lines == 1);
    CHECK(slurp(dir.path / "a" / "final.muie") == slurp(dir.path / "b" / "final.muie"));
    CHECK(a.out.substr(a.out.find("checksum=")) == b.out.substr(b.out.find("checksum=")));

    const auto manifest = nlohmann::json::parse(slurp(dir.path / "a" / "train.manifest.json"));
    CHECK(manifest.at("command") == "train");
    CHECK(manifest.at("seed") == 7);
    CHECK(manifest.at("config").at("train").at("epochs") == 1);
    CHECK_FALSE(manifest.at("timestamp").get<std::string>().empty());

    const auto c = run({"train", "--data", dir.str("data"), "--config", dir.str("cfg.json"), "--out", dir.str("c"),
                        "--epochs", "1", "--seed", "8"});
    REQUIRE(c.code == kExitOk);
    CHECK(slurp(dir.path / "c" / "final.muie") != slurp(dir.path / "a" / "final.muie"));
  }

  SUBCASE("enhance keeps extents and an identity model keeps bytes") {
    const fs::path weights = identity_weights(dir.path);
    save_png(procedural_image(70, 70, 5), dir.path / "odd.png");
    const auto r = run({"enhance", "--weights", weights.string(), "--in", dir.str("odd.png"), "--out",
                        dir.str("odd_out.png")});
    REQUIRE(r.code == kExitOk);
    const Image in = load_png(dir.path / "odd.png"), out = load_png(dir.path / "odd_out.png");
    CHECK(out.shape() == in.shape());
    CHECK(bitwise_equal(in, out));
    CHECK(fs::exists(dir.path / "enhance.manifest.json"));

    const auto batch = run({"enhance", "--weights", weights.string(), "--in", dir.str("data/raw"), "--out",
                            dir.str("enhanced")});
    REQUIRE(batch.code == kExitOk);
    CHECK(fs::exists(dir.path / "enhanced" / "synth_0000.png"));
    CHECK(fs::exists(dir.path / "enhanced" / "enhance.manifest.json"));
  }

  SUBCASE("mismatched weights are reported") {
    const fs::path weights = identity_weights(dir.path);
    ModelConfig other = tiny();
    other.base_channels = 8;
    RunConfig rc;
    rc.model = other;
    std::ofstream(dir.path / "other.json") << to_json(rc).dump();
    const auto r = run({"enhance", "--weights", weights.string(), "--config", dir.str("other.json"), "--in",
                        dir.str("data/raw"), "--out", dir.str("x")});
    CHECK(r.code == kExitFailure);
    CHECK(r.err.find("do not match") != std::string::npos);
    CHECK(run({"enhance", "--weights", dir.str("none.muie"), "--in", dir.str("data/raw"), "--out", dir.str("x")}).code ==
          kExitFailure);
  }

  SUBCASE("eval of references against themselves is perfect") {
    TempDir same("same");
    fs::copy(dir.path / "data" / "reference", same.path / "reference", fs::copy_options::recursive);
    fs::copy(dir.path / "data" / "reference", same.path / "raw", fs::copy_options::recursive);
    const fs::path weights = identity_weights(dir.path);
    const auto r = run({"eval", "--weights", weights.string(), "--data", same.str(), "--out", dir.str("ev")});
    REQUIRE(r.code == kExitOk);
    std::istringstream csv(slurp(dir.path / "ev" / "eval.csv"));
    std::string line;
    std::getline(csv, line);
    CHECK(line == "id,psnr,ssim");
    int rows = 0;
    std::string last;
    while (std::getline(csv, line)) {
      ++rows;
      last = line;
      const auto first = line.find(','), second = line.find(',', first + 1);
      CHECK(std::stod(line.substr(first + 1, second - first - 1)) == kPsnrCapDb);
      CHECK(std::stod(line.substr(second + 1)) == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK(rows == 4);
    CHECK(last.starts_with("mean,"));
  }

  SUBCASE("eval matches the metrics computed directly") {
    const fs::path weights = identity_weights(dir.path);
    const auto r = run({"eval", "--weights", weights.string(), "--data", dir.str("data"), "--out", dir.str("ev")});
    REQUIRE(r.code == kExitOk);
    const Dataset data = load_dataset(dir.path / "data");
    std::istringstream csv(slurp(dir.path / "ev" / "eval.csv"));
    std::string line;
    std::getline(csv, line);
    double psnr_sum = 0;
    for (const auto& pair : data.pairs) {
      REQUIRE(std::getline(csv, line));
      std::istringstream row(line);
      std::string id, p, s;
      std::getline(row, id, ',');
      std::getline(row, p, ',');
      std::getline(row, s, ',');
      const Image out = enhance(pair.raw, tiny(), load_weights(weights));
      CHECK(id == pair.id);
      CHECK(std::stod(p) == doctest::Approx(psnr(out, pair.reference)).epsilon(1e-12));
      CHECK(std::stod(s) == doctest::Approx(ssim(out, pair.reference)).epsilon(1e-12));
      psnr_sum += std::stod(p);
    }
    REQUIRE(std::getline(csv, line));
    CHECK(std::stod(line.substr(5, line.find(',', 5) - 5)) == doctest::Approx(psnr_sum / 3).epsilon(1e-12));
    CHECK(fs::exists(dir.path / "ev" / "eval.manifest.json"));
  }
}

TEST_CASE("flops command") {
  TempDir dir("flops");
  const auto a = run({"flops", "--hw", "1280x720", "--out", dir.str()});
  const auto b = run({"flops", "--hw", "1280x1440", "--out", dir.str()});
  REQUIRE(a.code == kExitOk);
  REQUIRE(b.code == kExitOk);
  CHECK(total_from(b.out, "total_macs") / total_from(a.out, "total_macs") == doctest::Approx(2.0).epsilon(0.01));

  std::istringstream lines(a.out);
  std::string line;
  double stage_sum = 0;
  while (std::getline(lines, line))
    if (line.starts_with("stage ")) stage_sum += total_from(line, "macs");
  CHECK(stage_sum == total_from(a.out, "total_macs"));
  const double g = total_from(a.out, "total_gflops");
  CHECK((g > 0.5 && g < 10));
  CHECK(fs::exists(dir.path / "flops.manifest.json"));
}

TEST_CASE("gradcheck command") {
  TempDir dir("gradcheck");
  const auto r = run({"gradcheck", "--out", dir.str()});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("all blocks PASS") != std::string::npos);
  CHECK(r.out.find("FAIL") == std::string::npos);
}
