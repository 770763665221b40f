#include "muie/cli.hpp"

#include "muie/gradcheck.hpp"
#include "muie/metrics.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace fs = std::filesystem;

namespace muie {

RunConfig parse_run_config(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  RunConfig cfg;
  if (j.contains("model") || j.contains("train")) {
    for (const auto& [key, value] : j.items())
      if (key != "model" && key != "train")
        throw std::invalid_argument("config: unknown top-level field \"" + key + "\"");
    if (j.contains("model")) cfg.model = j.at("model").get<ModelConfig>();
    if (j.contains("train")) cfg.train = j.at("train").get<TrainConfig>();
  } else {
    const nlohmann::json model_keys = ModelConfig{}, train_keys = TrainConfig{};
    nlohmann::json model = nlohmann::json::object(), train = nlohmann::json::object();
    for (const auto& [key, value] : j.items()) {
      if (model_keys.contains(key))
        model[key] = value;
      else if (train_keys.contains(key))
        train[key] = value;
      else
        throw std::invalid_argument("config: unknown field \"" + key + "\"");
    }
    cfg.model = model.get<ModelConfig>();
    cfg.train = train.get<TrainConfig>();
  }
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return parse_run_config(j);
}

nlohmann::json to_json(const RunConfig& cfg) { return {{"model", cfg.model}, {"train", cfg.train}}; }

std::pair<std::int64_t, std::int64_t> parse_hw(const std::string& text) {
  const auto x = text.find_first_of("xX");
  auto number = [&](const std::string& part) {
    if (part.empty() || part.size() > 9 || part.find_first_not_of("0123456789") != std::string::npos)
      throw std::invalid_argument("malformed HxW \"" + text + "\"");
    const std::int64_t v = std::stoll(part);
    if (v < 1) throw std::invalid_argument("malformed HxW \"" + text + "\": extents must be positive");
    return v;
  };
  if (x == std::string::npos) throw std::invalid_argument("malformed HxW \"" + text + "\"");
  return {number(text.substr(0, x)), number(text.substr(x + 1))};
}

void to_json(nlohmann::json& j, const RunManifest& m) {
  j = nlohmann::json{{"command", m.command},         {"argv", m.argv},     {"config_path", m.config_path},
                     {"config", m.config},           {"seed", m.seed},     {"weights", m.weights},
                     {"data_root", m.data_root},     {"output_dir", m.output_dir},
                     {"timestamp", m.timestamp}};
}

void write_manifest(const RunManifest& manifest, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << nlohmann::json(manifest).dump(2) << "\n";
}

namespace {

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Context {
  std::vector<std::string> argv;
  std::ostream& out;
  std::ostream& err;

  RunManifest manifest(const std::string& command) const {
    RunManifest m;
    m.command = command;
    m.argv = argv;
    m.timestamp = utc_timestamp();
    return m;
  }
};

// Weights plus the model config stored next to them (or given explicitly).
struct LoadedModel {
  ModelConfig cfg;
  WeightStore<float> weights;
};

LoadedModel load_model(const fs::path& weights_path, const std::string& config_path) {
  LoadedModel m;
  m.cfg = config_path.empty() ? load_model_config(config_path_for(weights_path)) : load_run_config(config_path).model;
  m.weights = load_weights(weights_path);
  const auto mismatches = weight_mismatches(m.cfg, m.weights);
  if (!mismatches.empty()) {
    std::string msg = "weights " + weights_path.string() + " do not match the model config:";
    for (const auto& line : mismatches) msg += "\n  " + line;
    throw std::runtime_error(msg);
  }
  return m;
}

std::vector<fs::path> png_files(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  return files;
}

struct TrainArgs {
  std::string data, config, out, split;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
};

int cmd_train(const TrainArgs& a, const Context& ctx) {
  RunConfig cfg = load_run_config(a.config);
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.epochs) {
    if (*a.epochs < 1) throw UsageError("--epochs must be >= 1");
    cfg.train.epochs = *a.epochs;
    // Short runs keep a warmup that ends halfway through.
    if (cfg.train.warmup_epochs >= cfg.train.epochs) cfg.train.warmup_epochs = 0.5 * cfg.train.epochs;
  }
  cfg.train.validate();

  const fs::path out_dir(a.out);
  fs::create_directories(out_dir / "checkpoints");
  RunManifest manifest = ctx.manifest("train");
  manifest.config_path = a.config;
  manifest.config = to_json(cfg);
  manifest.seed = cfg.train.seed;
  manifest.data_root = a.data;
  manifest.output_dir = out_dir.string();
  manifest.weights = {(out_dir / "final.muie").string()};
  write_manifest(manifest, out_dir / "train.manifest.json");

  const Dataset data = load_dataset(a.data, a.split.empty() ? std::nullopt : std::optional<fs::path>(a.split));
  for (const auto& w : data.warnings) ctx.err << "warning: " << w << "\n";
  ctx.out << "training on " << data.size() << " pairs from " << a.data << "\n";

  std::ofstream log(out_dir / "train.log", std::ios::app);
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochLog& entry) {
    const std::string line = format_epoch_line(entry);
    ctx.out << line << "\n";
    log << line << "\n";
    log.flush();
  };
  hooks.on_checkpoint = [&](int epoch, const WeightStore<float>& weights) {
    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%04d.muie", epoch);
    const fs::path path = out_dir / "checkpoints" / name;
    save_weights(weights, path);
    save_model_config(cfg.model, config_path_for(path));
  };

  const TrainResult result =
      train_loop(cfg.model, init_weights<float>(cfg.model, cfg.train.seed), data, cfg.train, hooks);
  const fs::path final_path = out_dir / "final.muie";
  save_weights(result.weights, final_path);
  save_model_config(cfg.model, config_path_for(final_path));
  ctx.out << "steps=" << result.steps << " final=" << final_path.string()
          << " checksum=" << hex64(payload_checksum(result.weights)) << "\n";
  return kExitOk;
}

struct EnhanceArgs {
  std::string weights, in, out, config;
};

int cmd_enhance(const EnhanceArgs& a, const Context& ctx) {
  const fs::path in(a.in), out(a.out);
  if (!fs::exists(in)) throw std::runtime_error("input " + a.in + " does not exist");
  const bool batch = fs::is_directory(in);
  const bool out_is_dir = batch || fs::is_directory(out);
  const fs::path out_dir = out_is_dir ? out : (out.has_parent_path() ? out.parent_path() : fs::path("."));
  fs::create_directories(out_dir);

  RunManifest manifest = ctx.manifest("enhance");
  manifest.config_path = a.config.empty() ? config_path_for(a.weights).string() : a.config;
  manifest.weights = {a.weights};
  manifest.data_root = a.in;
  manifest.output_dir = out_dir.string();
  const LoadedModel model = load_model(a.weights, a.config);
  manifest.config = model.cfg;
  write_manifest(manifest, out_dir / "enhance.manifest.json");

  const std::vector<fs::path> inputs = batch ? png_files(in) : std::vector<fs::path>{in};
  if (inputs.empty()) throw std::runtime_error("no PNG files in " + a.in);
  for (const auto& path : inputs) {
    const Image image = load_png(path);
    const fs::path target = out_is_dir ? out / path.filename() : out;
    save_png(enhance(image, model.cfg, model.weights), target);
    ctx.out << path.string() << " -> " << target.string() << " (" << image.shape().h << "x" << image.shape().w
            << ")\n";
  }
  return kExitOk;
}

struct EvalArgs {
  std::string weights, data, split, out = ".", config;
};

int cmd_eval(const EvalArgs& a, const Context& ctx) {
  const fs::path out_dir(a.out);
  fs::create_directories(out_dir);
  RunManifest manifest = ctx.manifest("eval");
  manifest.config_path = a.config.empty() ? config_path_for(a.weights).string() : a.config;
  manifest.weights = {a.weights};
  manifest.data_root = a.data;
  manifest.output_dir = out_dir.string();
  const LoadedModel model = load_model(a.weights, a.config);
  manifest.config = model.cfg;
  write_manifest(manifest, out_dir / "eval.manifest.json");

  const Dataset data = load_dataset(a.data, a.split.empty() ? std::nullopt : std::optional<fs::path>(a.split),
                                    Split::Test);
  for (const auto& w : data.warnings) ctx.err << "warning: " << w << "\n";

  std::ofstream csv(out_dir / "eval.csv");
  if (!csv) throw std::runtime_error("cannot write " + (out_dir / "eval.csv").string());
  csv << "id,psnr,ssim\n" << std::setprecision(17);
  ctx.out << std::left << std::setw(24) << "id" << std::right << std::setw(12) << "psnr" << std::setw(12) << "ssim"
          << "\n";
  double psnr_sum = 0, ssim_sum = 0;
  for (const auto& pair : data.pairs) {
    const Image pred = enhance(pair.raw, model.cfg, model.weights);
    const double p = psnr(pred, pair.reference), s = ssim(pred, pair.reference);
    psnr_sum += p;
    ssim_sum += s;
    csv << pair.id << "," << p << "," << s << "\n";
    ctx.out << std::left << std::setw(24) << pair.id << std::right << std::fixed << std::setprecision(4)
            << std::setw(12) << p << std::setw(12) << s << "\n";
    ctx.out.unsetf(std::ios::fixed);
  }
  const double n = static_cast<double>(data.size());
  csv << "mean," << psnr_sum / n << "," << ssim_sum / n << "\n";
  ctx.out << std::left << std::setw(24) << "mean" << std::right << std::fixed << std::setprecision(4)
          << std::setw(12) << psnr_sum / n << std::setw(12) << ssim_sum / n << "\n";
  ctx.out.unsetf(std::ios::fixed);
  ctx.out << "csv=" << (out_dir / "eval.csv").string() << "\n";
  return kExitOk;
}

struct FlopsArgs {
  std::string config, hw = "1280x720", out = ".";
};

int cmd_flops(const FlopsArgs& a, const Context& ctx) {
  std::pair<std::int64_t, std::int64_t> hw;
  try {
    hw = parse_hw(a.hw);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const RunConfig cfg = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  RunManifest manifest = ctx.manifest("flops");
  manifest.config_path = a.config;
  manifest.config = to_json(cfg);
  manifest.output_dir = a.out;
  write_manifest(manifest, fs::path(a.out) / "flops.manifest.json");

  const FlopReport report = count_flops(cfg.model, Shape{1, 3, hw.first, hw.second});
  const auto fmt = [](double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9f", v);
    return std::string(buf);
  };
  ctx.out << "input=1x3x" << hw.first << "x" << hw.second << " base_channels=" << cfg.model.base_channels
          << " patch_size=" << cfg.model.patch_size << "\n";
  for (const auto& [name, macs] : report.stages)
    ctx.out << "stage " << std::left << std::setw(8) << name << std::right << " macs=" << macs
            << " gflops=" << fmt(FlopReport::gflops(macs)) << "\n";
  ctx.out << "total_macs=" << report.total_macs << "\n";
  ctx.out << "padded_gflops=" << fmt(FlopReport::gflops(report.padded_macs)) << "\n";
  ctx.out << "total_gflops=" << fmt(report.gflops()) << "\n";
  return kExitOk;
}

struct GradcheckArgs {
  std::string config, out = ".";
};

int cmd_gradcheck(const GradcheckArgs& a, const Context& ctx) {
  ModelConfig tiny;
  tiny.base_channels = 4;
  tiny.patch_size = 1;
  if (!a.config.empty()) tiny = load_run_config(a.config).model;
  RunManifest manifest = ctx.manifest("gradcheck");
  manifest.config_path = a.config;
  manifest.config = tiny;
  manifest.seed = GradCheckOptions{}.seed;
  manifest.output_dir = a.out;
  write_manifest(manifest, fs::path(a.out) / "gradcheck.manifest.json");

  bool all = true;
  for (const auto& r : run_gradcheck_suite(tiny)) {
    char line[256];
    std::snprintf(line, sizeof(line), "%-4s %-22s coords=%-5lld within_tol=%.4f max_rel_err=%.3e", r.pass ? "PASS" : "FAIL",
                  r.name.c_str(), static_cast<long long>(r.checked), r.fraction(), r.max_rel_err);
    ctx.out << line << (r.pass ? "" : "  worst " + r.worst) << "\n";
    all = all && r.pass;
  }
  ctx.out << (all ? "all blocks PASS" : "gradient check FAILED") << "\n";
  return all ? kExitOk : kExitFailure;
}

struct SynthArgs {
  std::string out, hw = "64x64";
  int count = 4;
  std::uint64_t seed = 0;
};

// Writes a paired dataset of procedural references and their degraded versions.
int cmd_synth(const SynthArgs& a, const Context& ctx) {
  std::pair<std::int64_t, std::int64_t> hw;
  try {
    hw = parse_hw(a.hw);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (a.count < 1) throw UsageError("--count must be >= 1");
  const fs::path root(a.out);
  fs::create_directories(root / "raw");
  fs::create_directories(root / "reference");
  RunManifest manifest = ctx.manifest("synth");
  manifest.seed = a.seed;
  manifest.output_dir = root.string();
  write_manifest(manifest, root / "synth.manifest.json");
  for (int i = 0; i < a.count; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof(stem), "synth_%04d.png", i);
    const Image clean = procedural_image(hw.first, hw.second, a.seed * 1000 + 100 + i);
    save_png(clean, root / "reference" / stem);
    save_png(synth_degrade(clean, a.seed * 1000 + 200 + i), root / "raw" / stem);
  }
  ctx.out << "wrote " << a.count << " pairs to " << root.string() << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"MambaUIE underwater image enhancement", "muie"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "worker threads (0 keeps the runtime default)")->check(CLI::NonNegativeNumber);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train on a paired dataset");
  train_cmd->add_option("--data", train.data, "dataset root with raw/ and reference/")->required();
  train_cmd->add_option("--config", train.config, "JSON config with model and train fields")->required();
  train_cmd->add_option("--out", train.out, "output directory")->required();
  train_cmd->add_option("--split", train.split, "file listing the stems to train on");
  train_cmd->add_option("--seed", train.seed, "override the config seed");
  train_cmd->add_option("--epochs", train.epochs, "override the config epoch count");

  EnhanceArgs enh;
  auto* enhance_cmd = app.add_subcommand("enhance", "enhance a PNG or a directory of PNGs");
  enhance_cmd->add_option("--weights", enh.weights, "weight file (.muie)")->required();
  enhance_cmd->add_option("--in", enh.in, "input PNG or directory")->required();
  enhance_cmd->add_option("--out", enh.out, "output PNG or directory")->required();
  enhance_cmd->add_option("--config", enh.config, "config overriding the one stored next to the weights");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "per-image and mean PSNR/SSIM on a paired dataset");
  eval_cmd->add_option("--weights", ev.weights, "weight file (.muie)")->required();
  eval_cmd->add_option("--data", ev.data, "dataset root with raw/ and reference/")->required();
  eval_cmd->add_option("--split", ev.split, "file listing the stems to evaluate");
  eval_cmd->add_option("--out", ev.out, "directory for eval.csv and the manifest")->capture_default_str();
  eval_cmd->add_option("--config", ev.config, "config overriding the one stored next to the weights");

  FlopsArgs fl;
  auto* flops_cmd = app.add_subcommand("flops", "analytic per-stage and total GFLOPs");
  flops_cmd->add_option("--config", fl.config, "JSON config (defaults when omitted)");
  flops_cmd->add_option("--hw", fl.hw, "input extents HxW")->capture_default_str();
  flops_cmd->add_option("--out", fl.out, "directory for the manifest")->capture_default_str();

  GradcheckArgs gc;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite on a tiny model");
  grad_cmd->add_option("--config", gc.config, "JSON config for the model (tiny default when omitted)");
  grad_cmd->add_option("--out", gc.out, "directory for the manifest")->capture_default_str();

  SynthArgs sy;
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic paired dataset");
  synth_cmd->add_option("--out", sy.out, "dataset root to create")->required();
  synth_cmd->add_option("--count", sy.count, "number of pairs")->capture_default_str();
  synth_cmd->add_option("--hw", sy.hw, "image extents HxW")->capture_default_str();
  synth_cmd->add_option("--seed", sy.seed, "content seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    if (!app.get_subcommands().empty())
      err << app.get_subcommands().front()->help();
    else
      err << app.help();
    return kExitUsage;
  }

  if (threads > 0) set_num_threads(threads);
  const Context ctx{std::vector<std::string>(argv, argv + argc), out, err};
  try {
    if (train_cmd->parsed()) return cmd_train(train, ctx);
    if (enhance_cmd->parsed()) return cmd_enhance(enh, ctx);
    if (eval_cmd->parsed()) return cmd_eval(ev, ctx);
    if (flops_cmd->parsed()) return cmd_flops(fl, ctx);
    if (grad_cmd->parsed()) return cmd_gradcheck(gc, ctx);
    if (synth_cmd->parsed()) return cmd_synth(sy, ctx);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace muie
