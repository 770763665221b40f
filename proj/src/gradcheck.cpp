#include "muie/gradcheck.hpp"

#include "muie/training.hpp"

#include <cmath>
#include <cstdio>

namespace muie {

Var<double> probe_loss(const Var<double>& out, const Tensor<double>& probe) {
  return sum(mul(out, Var<double>(probe)));
}

GradCheckReport check_gradients(const std::string& name, const LossFn& loss, const NamedTensors& inputs,
                                const GradCheckOptions& options) {
  GradCheckReport report;
  report.name = name;

  std::vector<Var<double>> vars;
  for (const auto& [input_name, t] : inputs) vars.emplace_back(t, true);
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    const Var<double> l = loss(vars);
    backward(tape, l);
    for (const auto& v : vars) analytic.push_back(v.grad());
  }

  auto evaluate = [&](std::size_t which, std::int64_t index, double delta) {
    std::vector<Var<double>> shifted;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (i != which) {
        shifted.emplace_back(inputs[i].second);
        continue;
      }
      Tensor<double> t = inputs[i].second;
      t[index] += delta;
      shifted.emplace_back(std::move(t));
    }
    return loss(shifted).value()[0];
  };

  Rng rng(options.seed);
  for (std::size_t which = 0; which < inputs.size(); ++which) {
    const std::int64_t numel = inputs[which].second.numel();
    std::vector<std::int64_t> coords;
    if (numel <= options.coords_per_tensor) {
      for (std::int64_t i = 0; i < numel; ++i) coords.push_back(i);
    } else {
      for (int k = 0; k < options.coords_per_tensor; ++k)
        coords.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(numel))));
    }
    for (std::int64_t index : coords) {
      const double numeric =
          (evaluate(which, index, options.step) - evaluate(which, index, -options.step)) / (2.0 * options.step);
      const double a = analytic[which][index];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.abs_floor});
      ++report.checked;
      if (err < options.rel_tol) ++report.within_tol;
      if (err > report.max_rel_err || report.worst.empty()) {
        report.max_rel_err = std::max(report.max_rel_err, err);
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%s[%lld]: %.6e vs %.6e", inputs[which].first.c_str(),
                      static_cast<long long>(index), a, numeric);
        report.worst = buf;
      }
    }
  }
  report.pass = report.fraction() >= options.pass_fraction && report.max_rel_err < options.max_rel_tol;
  return report;
}

namespace {

Tensor<double> random(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return uniform_tensor<double>(s, rng, lo, hi);
}

// Inputs for a block: the activation first, then every weight under `prefix`.
NamedTensors block_inputs(const WeightStore<double>& store, const std::string& prefix, Tensor<double> x) {
  NamedTensors inputs{{"x", std::move(x)}};
  for (const auto& [name, t] : store)
    if (name.rfind(prefix, 0) == 0) inputs.emplace_back(name, t);
  return inputs;
}

ParamSet<double> params_from(const NamedTensors& inputs, const std::vector<Var<double>>& vars, std::size_t first) {
  std::map<std::string, Var<double>> named;
  for (std::size_t i = first; i < inputs.size(); ++i) named.emplace(inputs[i].first, vars[i]);
  return ParamSet<double>(std::move(named));
}

}  // namespace

std::vector<GradCheckReport> run_gradcheck_suite(const ModelConfig& tiny, const GradCheckOptions& options) {
  std::vector<GradCheckReport> reports;
  Rng rng(options.seed + 1);

  {
    const Shape xs{2, 4, 5, 5};
    const Tensor<double> probe = random(Shape{2, 6, 5, 5}, rng);
    reports.push_back(check_gradients(
        "conv2d", [&](const std::vector<Var<double>>& v) { return probe_loss(conv2d(v[0], v[1], v[2], 1, 1, 2), probe); },
        {{"x", random(xs, rng)}, {"weight", random(Shape{6, 2, 3, 3}, rng)}, {"bias", random(Shape{6, 1, 1, 1}, rng)}},
        options));
  }
  {
    const Tensor<double> probe = random(Shape{2, 4, 6, 6}, rng);
    reports.push_back(check_gradients(
        "depthwise_conv2d",
        [&](const std::vector<Var<double>>& v) { return probe_loss(conv2d(v[0], v[1], v[2], 1, 1, 4), probe); },
        {{"x", random(Shape{2, 4, 6, 6}, rng)}, {"weight", random(Shape{4, 1, 3, 3}, rng)},
         {"bias", random(Shape{4, 1, 1, 1}, rng)}},
        options));
  }
  {
    const Tensor<double> probe = random(Shape{2, 3, 4, 4}, rng);
    reports.push_back(check_gradients(
        "linear", [&](const std::vector<Var<double>>& v) { return probe_loss(linear(v[0], v[1], v[2]), probe); },
        {{"x", random(Shape{2, 5, 4, 4}, rng)}, {"weight", random(Shape{3, 5, 1, 1}, rng)},
         {"bias", random(Shape{3, 1, 1, 1}, rng)}},
        options));
  }
  {
    const Tensor<double> probe = random(Shape{2, 6, 3, 3}, rng);
    reports.push_back(check_gradients(
        "layer_norm",
        [&](const std::vector<Var<double>>& v) { return probe_loss(layer_norm(v[0], v[1], v[2], 1e-5), probe); },
        {{"x", random(Shape{2, 6, 3, 3}, rng)}, {"gamma", random(Shape{6, 1, 1, 1}, rng, 0.5, 1.5)},
         {"beta", random(Shape{6, 1, 1, 1}, rng)}},
        options));
  }
  for (auto [kind, label] : {std::pair{Activation::Gelu, "gelu"}, std::pair{Activation::Silu, "silu"},
                             std::pair{Activation::Sigmoid, "sigmoid"}, std::pair{Activation::Softplus, "softplus"}}) {
    const Tensor<double> probe = random(Shape{1, 3, 4, 4}, rng);
    reports.push_back(check_gradients(
        label, [&, kind = kind](const std::vector<Var<double>>& v) { return probe_loss(activation(v[0], kind), probe); },
        {{"x", random(Shape{1, 3, 4, 4}, rng, -3.0, 3.0)}}, options));
  }
  {
    const Tensor<double> probe = random(Shape{2, 3, 4, 4}, rng);
    reports.push_back(check_gradients(
        "broadcast_mul_add",
        [&](const std::vector<Var<double>>& v) { return probe_loss(add(mul(v[0], v[1]), mul(v[2], v[0])), probe); },
        {{"x", random(Shape{2, 3, 4, 4}, rng)}, {"spatial", random(Shape{2, 1, 4, 4}, rng)},
         {"channel", random(Shape{2, 3, 1, 1}, rng)}},
        options));
  }
  {
    const Tensor<double> probe = random(Shape{2, 3, 1, 1}, rng);
    reports.push_back(check_gradients(
        "global_avg_pool", [&](const std::vector<Var<double>>& v) { return probe_loss(global_avg_pool(v[0]), probe); },
        {{"x", random(Shape{2, 3, 4, 5}, rng)}}, options));
  }
  {
    const Tensor<double> probe = random(Shape{1, 8, 2, 2}, rng);
    reports.push_back(check_gradients(
        "pixel_rearrange",
        [&](const std::vector<Var<double>>& v) {
          return probe_loss(pixel_rearrange(pixel_rearrange(v[0], 2, Rearrange::Down), 1, Rearrange::Up), probe);
        },
        {{"x", random(Shape{1, 2, 4, 4}, rng)}}, options));
  }

  // Scan with its input-dependent projections.
  {
    WeightStore<double> store;
    add_scan_params(store, "scan", 3, 4, rng);
    const Tensor<double> probe = random(Shape{1, 3, 1, 9}, rng);
    const NamedTensors inputs = block_inputs(store, "scan", random(Shape{1, 3, 1, 9}, rng));
    reports.push_back(check_gradients(
        "selective_scan",
        [&](const std::vector<Var<double>>& v) {
          const ParamSet<double> p = params_from(inputs, v, 1);
          return probe_loss(selective_scan_1d(v[0], ScanParams<double>::bind(p, "scan")), probe);
        },
        inputs, options));
  }
  {
    WeightStore<double> store;
    add_ss2d_params(store, "ss2d", 2, 3, rng);
    const Tensor<double> probe = random(Shape{1, 2, 3, 4}, rng);
    const NamedTensors inputs = block_inputs(store, "ss2d", random(Shape{1, 2, 3, 4}, rng));
    reports.push_back(check_gradients(
        "ss2d",
        [&](const std::vector<Var<double>>& v) {
          const ParamSet<double> p = params_from(inputs, v, 1);
          return probe_loss(ss2d<double>(v[0], bind_ss2d(p, "ss2d")), probe);
        },
        inputs, options));
  }

  // Blocks on a 4-channel 4x4 map.
  {
    WeightStore<double> store;
    const BlockDims dims{4, 2, 2, 4};
    add_block_weights(store, "blk", dims, rng);
    const Shape xs{1, 4, 4, 4};
    const Tensor<double> probe = random(xs, rng);
    const Tensor<double> x = random(xs, rng);
    struct Case {
      const char* label;
      const char* prefix;
      std::function<Var<double>(const Var<double>&, const ParamSet<double>&)> run;
    };
    const std::vector<Case> cases = {
        {"vss_block", "blk.vss",
         [](const Var<double>& in, const ParamSet<double>& p) {
           return vss_block(in, VSSWeights<double>::bind(p, "blk.vss"));
         }},
        {"dib", "blk.dib",
         [](const Var<double>& in, const ParamSet<double>& p) {
           const auto w = DIBWeights<double>::bind(p, "blk.dib");
           return dib(in, conv2d(in, w.dw_local.weight, w.dw_local.bias, 1, 1, 4), w);
         }},
        {"sgfn", "blk.sgfn",
         [](const Var<double>& in, const ParamSet<double>& p) {
           return sgfn(in, SGFNWeights<double>::bind(p, "blk.sgfn"));
         }},
        {"efficient_mamba_block", "blk",
         [](const Var<double>& in, const ParamSet<double>& p) {
           return efficient_mamba_block(in, MambaBlockWeights<double>::bind(p, "blk"));
         }},
    };
    for (const auto& c : cases) {
      const NamedTensors inputs = block_inputs(store, c.prefix, x);
      reports.push_back(check_gradients(
          c.label,
          [&](const std::vector<Var<double>>& v) { return probe_loss(c.run(v[0], params_from(inputs, v, 1)), probe); },
          inputs, options));
    }
  }

  // Whole network under L1 loss.
  {
    const std::int64_t side = 2 * tiny.required_multiple();
    const WeightStore<double> store = init_weights<double>(tiny, options.seed);
    const Shape xs{1, 3, side, side};
    const Tensor<double> target = random(xs, rng, 0.0, 1.0);
    const NamedTensors inputs = block_inputs(store, "", random(xs, rng, 0.0, 1.0));
    GradCheckOptions net = options;
    net.coords_per_tensor = std::max(2, options.coords_per_tensor / 4);
    reports.push_back(check_gradients(
        "network_l1",
        [&](const std::vector<Var<double>>& v) {
          return l1_loss(forward(v[0], tiny, params_from(inputs, v, 1)), Var<double>(target));
        },
        inputs, net));
  }
  return reports;
}

}  // namespace muie
