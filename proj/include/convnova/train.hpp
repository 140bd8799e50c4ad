#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "convnova/genome.hpp"
#include "convnova/metrics.hpp"
#include "convnova/model.hpp"

namespace convnova {

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.1;
  double eps = 1e-8;
  std::size_t batch_size = 8;
  std::size_t epochs = 1;
  /// Hard cap on optimizer steps; 0 means no cap.
  std::size_t max_steps = 0;
  /// "cosine" (to 0, no warmup) or "constant".
  std::string lr_schedule = "cosine";
  std::uint64_t seed = 0;
  /// "f32" or "f64".
  std::string precision = "f32";
  double mask_rate = 0.1;
  /// Pretraining window length and stride (stride 0 means non-overlapping).
  std::size_t window = 128;
  std::size_t window_stride = 0;
  /// Fraction of a labeled set used for training when no validation set is given.
  double train_fraction = 0.9;
  /// Validation metric used to pick the best fine-tuning epoch.
  std::string select_metric = "top1";
  /// Threads used per batch; results do not depend on it.
  std::size_t workers = 1;
  /// Std of the weight init when training starts from scratch.
  double init_std = kInitStddev;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// base_lr * 0.5 * (1 + cos(pi * step / total)).
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr);

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::size_t t = 0;
};

/// Pointers to every parameter tensor, in for_each_param order.
template <typename T>
std::vector<Tensor<T>*> param_refs(ModelParams<Tensor<T>>& params) {
  std::vector<Tensor<T>*> out;
  for_each_param(params, [&](const std::string&, Tensor<T>& t) { out.push_back(&t); });
  return out;
}

/// Decoupled-weight-decay Adam:
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
/// Throws Error("non_finite") before touching anything if a gradient is not finite.
template <typename T>
void adamw_step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& state,
                const TrainConfig& config, double lr);

struct PretrainResult {
  std::vector<double> step_losses;
  /// Mean masked loss over the steps of each epoch.
  std::vector<double> epoch_losses;
  std::size_t steps = 0;
  std::size_t skipped_batches = 0;
};

using StepCallback = std::function<void(std::size_t step, double loss)>;

/// Masked-language-model pretraining on windows of `corpus`.
template <typename T>
PretrainResult pretrain_mlm(ModelParams<Tensor<T>>& params, const ModelConfig& config,
                            const std::vector<NucSeq>& corpus, const TrainConfig& train,
                            const StepCallback& on_step = {});

/// Mean masked cross-entropy of the model over fixed masks drawn from `seed`.
template <typename T>
double mlm_loss(const ModelParams<Tensor<T>>& params, const ModelConfig& config, const std::vector<NucSeq>& windows,
                double mask_rate, std::uint64_t seed);

/// Class probabilities for every sequence (sequence_class head).
template <typename T>
std::vector<std::vector<double>> predict_proba(const ModelParams<Tensor<T>>& params, const ModelConfig& config,
                                               const LabeledSet& set, std::size_t workers = 1);

/// One read-only pass; `report.loss` is the mean cross-entropy.
template <typename T>
MetricReport evaluate(const ModelParams<Tensor<T>>& params, const ModelConfig& config, const LabeledSet& set,
                      const std::vector<std::string>& metrics, std::size_t workers = 1);

struct FinetuneResult {
  std::vector<double> epoch_losses;
  std::vector<MetricReport> epoch_reports;
  /// 1-based epoch of the returned parameters; 0 when no epoch ran.
  std::size_t best_epoch = 0;
  MetricReport best;
};

/// Full-model fine-tuning with cross-entropy; evaluates `valid` after every
/// epoch and leaves `params` at the best epoch by `train.select_metric`.
template <typename T>
FinetuneResult finetune(ModelParams<Tensor<T>>& params, const ModelConfig& config, const LabeledSet& train_set,
                        const LabeledSet& valid_set, const TrainConfig& train,
                        const std::vector<std::string>& metrics = kAllMetrics);

/// Swaps in a freshly initialised head for `config` (e.g. MLM -> classifier).
template <typename T>
void reset_head(ModelParams<Tensor<T>>& params, const ModelConfig& config, std::uint64_t seed);

}  // namespace convnova
