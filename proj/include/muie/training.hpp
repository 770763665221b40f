#pragma once

#include "muie/data.hpp"
#include "muie/network.hpp"

#include <functional>
#include <optional>

namespace muie {

struct TrainConfig {
  double lr0 = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int epochs = 800;
  int batch = 8;
  double warmup_epochs = 3;
  double lr_min = 1e-6;
  int crop = 128;
  bool augment = true;  // random crops and horizontal flips
  int checkpoint_every = 50;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

/// Linear warmup from 0 to lr0 over warmup_epochs, then cosine annealing to
/// lr_min at `epochs`. `epoch` may be fractional.
double lr_at(double epoch, const TrainConfig& cfg);

template <typename Scalar>
struct AdamState {
  std::map<std::string, Tensor<Scalar>> m;
  std::map<std::string, Tensor<Scalar>> v;
  std::int64_t step = 0;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One bias-corrected Adam update of every parameter in `params` that has an
/// entry in `grads`. Throws TrainingError (leaving everything untouched) if a
/// gradient is not finite.
template <typename Scalar>
void adam_step(WeightStore<Scalar>& params, const std::map<std::string, Tensor<Scalar>>& grads,
               AdamState<Scalar>& state, double lr, const TrainConfig& cfg);

/// Mean absolute difference as a scalar variable.
template <typename Scalar>
Var<Scalar> l1_loss(const Var<Scalar>& pred, const Var<Scalar>& target);

struct EpochLog {
  int epoch = 0;      // 1-based
  double loss = 0;    // mean batch loss
  double lr = 0;      // lr_at(epoch - 1), used by the epoch's first step
};

std::string format_epoch_line(const EpochLog& entry);

struct TrainHooks {
  std::function<void(const EpochLog&)> on_epoch;
  /// Called with the 1-based epoch after every checkpoint_every epochs and
  /// after the final epoch.
  std::function<void(int, const WeightStore<float>&)> on_checkpoint;
};

struct TrainResult {
  WeightStore<float> weights;
  std::vector<EpochLog> log;
  std::int64_t steps = 0;
};

/// Seeded training: each epoch shuffles the pairs, forms batches, and runs
/// forward -> L1 -> backward -> Adam at lr_at(fractional epoch).
TrainResult train_loop(const ModelConfig& model, WeightStore<float> weights, const Dataset& data,
                       const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Mean L1 of the model's clamped prediction on every pair.
double evaluate_l1(const ModelConfig& model, const WeightStore<float>& weights, const Dataset& data);

}  // namespace muie
