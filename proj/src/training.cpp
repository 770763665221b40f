#include "muie/training.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

namespace muie {

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("train config: " + msg); };
  if (!(lr_min > 0 && lr_min < lr0)) fail("require 0 < lr_min < lr0");
  if (!(warmup_epochs >= 0 && warmup_epochs < epochs)) fail("require 0 <= warmup_epochs < epochs");
  if (batch < 1) fail("batch must be >= 1");
  if (crop < 1) fail("crop must be >= 1");
  if (checkpoint_every < 1) fail("checkpoint_every must be >= 1");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0,1)");
  if (!(eps > 0)) fail("eps must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& cfg) {
  j = nlohmann::json{{"lr0", cfg.lr0},
                     {"betas", {cfg.beta1, cfg.beta2}},
                     {"eps", cfg.eps},
                     {"epochs", cfg.epochs},
                     {"batch", cfg.batch},
                     {"warmup_epochs", cfg.warmup_epochs},
                     {"lr_min", cfg.lr_min},
                     {"crop", cfg.crop},
                     {"augment", cfg.augment},
                     {"checkpoint_every", cfg.checkpoint_every},
                     {"seed", cfg.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& cfg) {
  static const std::vector<std::string> known = {"lr0",    "betas", "eps",     "epochs",           "batch", "warmup_epochs",
                                                 "lr_min", "crop",  "augment", "checkpoint_every", "seed"};
  for (const auto& [key, value] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw std::invalid_argument("train config: unknown field \"" + key + "\"");
  TrainConfig d;
  cfg.lr0 = j.value("lr0", d.lr0);
  if (j.contains("betas")) {
    const auto& b = j.at("betas");
    if (!b.is_array() || b.size() != 2) throw std::invalid_argument("train config: betas must be a pair");
    cfg.beta1 = b[0].get<double>();
    cfg.beta2 = b[1].get<double>();
  }
  cfg.eps = j.value("eps", d.eps);
  cfg.epochs = j.value("epochs", d.epochs);
  cfg.batch = j.value("batch", d.batch);
  cfg.warmup_epochs = j.value("warmup_epochs", d.warmup_epochs);
  cfg.lr_min = j.value("lr_min", d.lr_min);
  cfg.crop = j.value("crop", d.crop);
  cfg.augment = j.value("augment", d.augment);
  cfg.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  cfg.seed = j.value("seed", d.seed);
}

double lr_at(double epoch, const TrainConfig& cfg) {
  if (!(epoch >= 0 && epoch <= cfg.epochs))
    throw std::out_of_range("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + "]");
  if (epoch < cfg.warmup_epochs) return cfg.lr0 * epoch / cfg.warmup_epochs;
  const double progress = (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs);
  return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename Scalar>
void adam_step(WeightStore<Scalar>& params, const std::map<std::string, Tensor<Scalar>>& grads,
               AdamState<Scalar>& state, double lr, const TrainConfig& cfg) {
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) throw std::invalid_argument("adam_step: gradient for unknown parameter " + name);
    if (g.shape() != params.at(name).shape()) throw ShapeError("adam_step: gradient shape mismatch for " + name);
    for (std::int64_t i = 0; i < g.numel(); ++i)
      if (!std::isfinite(g[i]))
        throw TrainingError("adam_step: non-finite gradient in " + name + " at element " + std::to_string(i) +
                            " (step " + std::to_string(state.step + 1) + ")");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double corr1 = 1.0 - std::pow(cfg.beta1, t);
  const double corr2 = 1.0 - std::pow(cfg.beta2, t);
  const Scalar b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
  for (const auto& [name, g] : grads) {
    Tensor<Scalar>& p = params.at(name);
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m = Tensor<Scalar>(p.shape());
    if (v.empty()) v = Tensor<Scalar>(p.shape());
    for (std::int64_t i = 0; i < p.numel(); ++i) {
      m[i] = b1 * m[i] + (Scalar(1) - b1) * g[i];
      v[i] = b2 * v[i] + (Scalar(1) - b2) * g[i] * g[i];
      const double mhat = static_cast<double>(m[i]) / corr1;
      const double vhat = static_cast<double>(v[i]) / corr2;
      p[i] = static_cast<Scalar>(static_cast<double>(p[i]) - lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

template <typename Scalar>
Var<Scalar> l1_loss(const Var<Scalar>& pred, const Var<Scalar>& target) {
  if (pred.shape() != target.shape())
    throw ShapeError("l1_loss: " + pred.shape().str() + " vs " + target.shape().str());
  const Tensor<Scalar>& p = pred.value();
  const Tensor<Scalar>& t = target.value();
  double acc = 0;
  for (std::int64_t i = 0; i < p.numel(); ++i) acc += std::abs(static_cast<double>(p[i]) - static_cast<double>(t[i]));
  Tensor<Scalar> out(Shape{1, 1, 1, 1}, static_cast<Scalar>(acc / static_cast<double>(p.numel())));
  return make_result<Scalar>("l1_loss", std::move(out), pred.requires_grad() || target.requires_grad(),
                             [pred, target](const Tensor<Scalar>& gy) {
                               const Tensor<Scalar>& p = pred.value();
                               const Tensor<Scalar>& t = target.value();
                               const Scalar k = gy[0] / static_cast<Scalar>(p.numel());
                               Tensor<Scalar> gp(p.shape());
                               for (std::int64_t i = 0; i < p.numel(); ++i) {
                                 const Scalar d = p[i] - t[i];
                                 gp[i] = d > 0 ? k : d < 0 ? -k : Scalar(0);
                               }
                               if (pred.requires_grad()) pred.node()->accumulate(gp);
                               if (target.requires_grad()) {
                                 for (auto& v : gp.values()) v = -v;
                                 target.node()->accumulate(gp);
                               }
                             });
}

std::string format_epoch_line(const EpochLog& entry) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "epoch=%d loss=%.9g lr=%.17g", entry.epoch, entry.loss, entry.lr);
  return buf;
}

namespace {

std::int64_t training_crop(const ModelConfig& model, const Dataset& data, int requested) {
  std::int64_t side = requested;
  for (const auto& pair : data.pairs) side = std::min({side, pair.raw.shape().h, pair.raw.shape().w});
  const std::int64_t multiple = model.required_multiple();
  side = side / multiple * multiple;
  if (side < multiple)
    throw TrainingError("training crop must be at least " + std::to_string(multiple) + " pixels; images are too small");
  return side;
}

}  // namespace

TrainResult train_loop(const ModelConfig& model, WeightStore<float> weights, const Dataset& data,
                       const TrainConfig& cfg, const TrainHooks& hooks) {
  model.validate();
  cfg.validate();
  if (data.pairs.empty()) throw TrainingError("train_loop: empty dataset");
  const auto mismatches = weight_mismatches(model, weights);
  if (!mismatches.empty()) throw TrainingError("train_loop: weights do not match config: " + mismatches.front());

  const std::int64_t side = training_crop(model, data, cfg.crop);
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  AdamState<float> adam;
  TrainResult result;
  const std::size_t count = data.pairs.size();
  const std::size_t batches = (count + cfg.batch - 1) / static_cast<std::size_t>(cfg.batch);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(count);
    for (std::size_t i = 0; i < count; ++i) order[i] = i;
    shuffle(order, rng);

    double loss_sum = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      std::vector<Tensor<float>> raws, refs;
      std::string ids;
      for (std::size_t k = b * cfg.batch; k < std::min(count, (b + 1) * cfg.batch); ++k) {
        const ImagePair& pair = data.pairs[order[k]];
        const Shape s = pair.raw.shape();
        std::int64_t top = (s.h - side) / 2, left = (s.w - side) / 2;
        bool flip = false;
        if (cfg.augment) {
          top = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(s.h - side + 1)));
          left = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(s.w - side + 1)));
          flip = rng.uniform() < 0.5;
        }
        Tensor<float> raw = crop(pair.raw, top, left, side, side);
        Tensor<float> ref = crop(pair.reference, top, left, side, side);
        if (flip) {
          raw = flip_horizontal(raw);
          ref = flip_horizontal(ref);
        }
        raws.push_back(std::move(raw));
        refs.push_back(std::move(ref));
        ids += (ids.empty() ? "" : ",") + pair.id;
      }

      const double lr = lr_at(epoch + static_cast<double>(b) / static_cast<double>(batches), cfg);
      Tape<float> tape;
      std::map<std::string, Tensor<float>> grads;
      double loss_value = 0;
      try {
        TapeScope<float> scope(tape);
        const ParamSet<float> params(weights, true);
        const Var<float> loss = l1_loss(forward(Var<float>(stack(raws)), model, params), Var<float>(stack(refs)));
        loss_value = loss.value()[0];
        backward(tape, loss);
        for (const auto& [name, var] : params.vars()) grads.emplace(name, var.grad());
      } catch (const NonFiniteError& e) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(b) +
                            " [" + ids + "]: " + e.what());
      }
      tape.clear();
      adam_step(weights, grads, adam, lr, cfg);
      loss_sum += loss_value;
      ++result.steps;
    }

    EpochLog entry{epoch + 1, loss_sum / static_cast<double>(batches), lr_at(epoch, cfg)};
    result.log.push_back(entry);
    if (hooks.on_epoch) hooks.on_epoch(entry);
    if (hooks.on_checkpoint && ((epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs))
      hooks.on_checkpoint(epoch + 1, weights);
  }
  result.weights = std::move(weights);
  return result;
}

double evaluate_l1(const ModelConfig& model, const WeightStore<float>& weights, const Dataset& data) {
  double acc = 0;
  std::int64_t count = 0;
  for (const auto& pair : data.pairs) {
    const Tensor<float> out = enhance(pair.raw, model, weights);
    for (std::int64_t i = 0; i < out.numel(); ++i) acc += std::abs(static_cast<double>(out[i]) - pair.reference[i]);
    count += out.numel();
  }
  return acc / static_cast<double>(count);
}

#define MUIE_INSTANTIATE_TRAINING(T)                                                                          \
  template void adam_step(WeightStore<T>&, const std::map<std::string, Tensor<T>>&, AdamState<T>&, double, \
                          const TrainConfig&);                                                                \
  template Var<T> l1_loss(const Var<T>&, const Var<T>&);

MUIE_INSTANTIATE_TRAINING(float)
MUIE_INSTANTIATE_TRAINING(double)

}  // namespace muie
