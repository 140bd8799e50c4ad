#include "convnova/train.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <mutex>
#include <numbers>
#include <numeric>
#include <thread>

namespace convnova {

namespace {

// Runs f(0..n-1) on up to `workers` threads. Callers write results into
// per-index slots, so the outcome never depends on scheduling.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& f) {
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) f(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

template <typename T>
struct ExampleGrad {
  double loss = 0.0;
  std::vector<Tensor<T>> grads;
};

template <typename T, typename LossFn>
ExampleGrad<T> example_grad(const ModelParams<Tensor<T>>& params, LossFn&& loss_fn) {
  Tape<T> tape;
  const auto vars = bind_params(tape, params);
  const Var<T> loss = loss_fn(tape, vars);
  const auto grads = tape.backward(loss);
  ExampleGrad<T> out{static_cast<double>(loss.value()[0]), {}};
  for_each_param(vars, [&](const std::string&, const Var<T>& v) { out.grads.push_back(grads.get(v)); });
  return out;
}

// Weighted sum of per-example gradients in index order.
template <typename T>
std::vector<Tensor<T>> reduce(const std::vector<ExampleGrad<T>>& parts, const std::vector<double>& weights) {
  std::vector<Tensor<T>> total;
  for (const auto& g : parts.front().grads) total.push_back(Tensor<T>::zeros_like(g));
  for (std::size_t e = 0; e < parts.size(); ++e) {
    const T w = static_cast<T>(weights[e]);
    for (std::size_t k = 0; k < total.size(); ++k) {
      auto dst = total[k].data();
      auto src = parts[e].grads[k].data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += w * src[i];
    }
  }
  return total;
}

std::size_t planned_steps(std::size_t examples, const TrainConfig& train) {
  const std::size_t per_epoch = (examples + train.batch_size - 1) / train.batch_size;
  const std::size_t total = per_epoch * train.epochs;
  return train.max_steps == 0 ? total : std::min(total, train.max_steps);
}

double scheduled_lr(std::size_t step, std::size_t total, const TrainConfig& train) {
  return train.lr_schedule == "constant" ? train.learning_rate : cosine_lr(step, total, train.learning_rate);
}

std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

template <typename T>
std::vector<double> class_logit_row(const ModelParams<Tensor<T>>& params, const ModelConfig& config,
                                    const NucSeq& seq) {
  const auto logits = class_logits(model_forward(one_hot<T>(seq), params, config), params.head);
  return {logits.data().begin(), logits.data().end()};
}

double log_sum_exp(const std::vector<double>& z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

}  // namespace

void TrainConfig::validate() const {
  require(learning_rate > 0.0, "bad_config", "learning_rate must be > 0");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "bad_config", "betas must lie in [0, 1)");
  require(weight_decay >= 0.0, "bad_config", "weight_decay must be >= 0");
  require(eps > 0.0, "bad_config", "eps must be > 0");
  require(batch_size >= 1, "bad_config", "batch_size must be >= 1");
  require(mask_rate >= 0.0 && mask_rate <= 1.0, "bad_config", "mask_rate must lie in [0, 1]");
  require(window >= 1, "bad_config", "window must be >= 1");
  require(train_fraction > 0.0 && train_fraction <= 1.0, "bad_config", "train_fraction must lie in (0, 1]");
  require(lr_schedule == "cosine" || lr_schedule == "constant", "bad_config",
          "lr_schedule must be 'cosine' or 'constant'");
  require(precision == "f32" || precision == "f64", "bad_config", "precision must be 'f32' or 'f64'");
  require(select_metric == "loss" || std::find(kAllMetrics.begin(), kAllMetrics.end(), select_metric) !=
                                         kAllMetrics.end(),
          "bad_config", "unknown select_metric '" + select_metric + "'");
  require(workers >= 1, "bad_config", "workers must be >= 1");
  require(init_std > 0.0, "bad_config", "init_std must be > 0");
}

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
  require(step <= total_steps, "bad_argument", "cosine_lr: step exceeds total_steps");
  if (total_steps == 0) return base_lr;
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
void adamw_step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& state,
                const TrainConfig& config, double lr) {
  require(params.size() == grads.size(), "shape_mismatch", "adamw: parameter and gradient counts differ");
  for (std::size_t k = 0; k < params.size(); ++k) {
    require(params[k]->shape() == grads[k].shape(), "shape_mismatch",
            "adamw: gradient " + std::to_string(k) + " has the wrong shape");
    require(grads[k].all_finite(), "non_finite",
            "adamw: gradient of parameter " + std::to_string(k) + " is not finite; step aborted");
  }
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.push_back(Tensor<T>::zeros_like(*p));
      state.v.push_back(Tensor<T>::zeros_like(*p));
    }
  }
  require(state.m.size() == params.size(), "shape_mismatch", "adamw: optimizer state does not match parameters");
  state.t += 1;
  const double b1 = config.beta1, b2 = config.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k]->data();
    auto m = state.m[k].data();
    auto v = state.v[k].data();
    auto g = grads[k].data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = b1 * m[i] + (1.0 - b1) * gi;
      const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + config.eps) + config.weight_decay * p[i];
      p[i] = static_cast<T>(p[i] - lr * update);
    }
  }
}

template <typename T>
PretrainResult pretrain_mlm(ModelParams<Tensor<T>>& params, const ModelConfig& config,
                            const std::vector<NucSeq>& corpus, const TrainConfig& train,
                            const StepCallback& on_step) {
  config.validate();
  train.validate();
  require(config.head == HeadKind::mlm, "bad_config", "pretraining needs the mlm head");
  std::vector<NucSeq> windows;
  const std::size_t stride = train.window_stride == 0 ? train.window : train.window_stride;
  for (const auto& seq : corpus)
    for (auto& w : window(seq, train.window, stride)) windows.push_back(std::move(w));
  require(!windows.empty(), "empty_corpus",
          "corpus has no full window of length " + std::to_string(train.window));

  Rng rng(train.seed);
  const std::size_t total = planned_steps(windows.size(), train);
  const auto refs = param_refs(params);
  AdamState<T> state;
  PretrainResult result;
  for (std::size_t epoch = 0; epoch < train.epochs && result.steps < total; ++epoch) {
    auto order = iota_n(windows.size());
    rng.shuffle(order.begin(), order.end());
    double epoch_sum = 0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size() && result.steps < total; start += train.batch_size) {
      std::vector<MaskedRow> rows;
      std::size_t masked = 0;
      for (std::size_t i = start; i < std::min(order.size(), start + train.batch_size); ++i) {
        auto row = mlm_mask(windows[order[i]], train.mask_rate, rng);
        const std::size_t c = row.mask_count();
        if (c == 0) continue;
        masked += c;
        rows.push_back(std::move(row));
      }
      if (masked == 0) {
        ++result.skipped_batches;
        continue;
      }
      std::vector<ExampleGrad<T>> parts(rows.size());
      parallel_for(rows.size(), train.workers, [&](std::size_t e) {
        parts[e] = example_grad(params, [&](Tape<T>& tape, const ModelParams<Var<T>>& p) {
          const auto features = model_forward(tape.constant(one_hot<T>(rows[e].masked)), p, config);
          return masked_cross_entropy(mlm_logits(features, p.head), rows[e].targets, rows[e].mask);
        });
      });
      // Every masked position carries equal weight in the batch loss.
      std::vector<double> weights;
      double loss = 0;
      for (std::size_t e = 0; e < rows.size(); ++e) {
        weights.push_back(static_cast<double>(rows[e].mask_count()) / static_cast<double>(masked));
        loss += weights.back() * parts[e].loss;
      }
      adamw_step(refs, reduce(parts, weights), state, train, scheduled_lr(result.steps, total, train));
      result.step_losses.push_back(loss);
      if (on_step) on_step(result.steps, loss);
      ++result.steps;
      epoch_sum += loss;
      ++epoch_steps;
    }
    if (epoch_steps > 0) result.epoch_losses.push_back(epoch_sum / static_cast<double>(epoch_steps));
  }
  return result;
}

template <typename T>
double mlm_loss(const ModelParams<Tensor<T>>& params, const ModelConfig& config, const std::vector<NucSeq>& windows,
                double mask_rate, std::uint64_t seed) {
  Rng rng(seed);
  double weighted = 0;
  std::size_t masked = 0;
  for (const auto& w : windows) {
    const auto row = mlm_mask(w, mask_rate, rng);
    const std::size_t c = row.mask_count();
    if (c == 0) continue;
    const auto logits = mlm_logits(model_forward(one_hot<T>(row.masked), params, config), params.head);
    weighted += static_cast<double>(c) * static_cast<double>(masked_cross_entropy(logits, row.targets, row.mask)[0]);
    masked += c;
  }
  require(masked > 0, "empty_mask", "mlm_loss: no position was masked");
  return weighted / static_cast<double>(masked);
}

template <typename T>
std::vector<std::vector<double>> predict_proba(const ModelParams<Tensor<T>>& params, const ModelConfig& config,
                                               const LabeledSet& set, std::size_t workers) {
  std::vector<std::vector<double>> probs(set.size());
  parallel_for(set.size(), workers, [&](std::size_t i) {
    auto z = class_logit_row(params, config, set.sequences[i]);
    const double lse = log_sum_exp(z);
    for (auto& v : z) v = std::exp(v - lse);
    probs[i] = std::move(z);
  });
  return probs;
}

template <typename T>
MetricReport evaluate(const ModelParams<Tensor<T>>& params, const ModelConfig& config, const LabeledSet& set,
                      const std::vector<std::string>& metrics, std::size_t workers) {
  set.validate();
  require(config.head == HeadKind::sequence_class, "bad_config", "evaluation needs the sequence_class head");
  require(set.n_classes <= config.n_classes, "bad_label", "dataset has more classes than the model head");
  std::vector<std::vector<double>> logits(set.size());
  parallel_for(set.size(), workers,
               [&](std::size_t i) { logits[i] = class_logit_row(params, config, set.sequences[i]); });
  std::vector<std::vector<double>> probs;
  double loss = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const double lse = log_sum_exp(logits[i]);
    loss += lse - logits[i][static_cast<std::size_t>(set.labels[i])];
    std::vector<double> p;
    for (double z : logits[i]) p.push_back(std::exp(z - lse));
    probs.push_back(std::move(p));
  }
  auto report = compute_report(probs, set.labels, config.n_classes, metrics);
  report.loss = loss / static_cast<double>(set.size());
  return report;
}

template <typename T>
FinetuneResult finetune(ModelParams<Tensor<T>>& params, const ModelConfig& config, const LabeledSet& train_set,
                        const LabeledSet& valid_set, const TrainConfig& train,
                        const std::vector<std::string>& metrics) {
  config.validate();
  train.validate();
  train_set.validate();
  valid_set.validate();
  require(config.head == HeadKind::sequence_class, "bad_config", "fine-tuning needs the sequence_class head");
  require(train_set.n_classes <= config.n_classes, "bad_label", "training set has more classes than the head");
  const auto first = train_set.labels.front();
  require(std::any_of(train_set.labels.begin(), train_set.labels.end(), [&](auto l) { return l != first; }),
          "single_class", "training set contains a single class");

  std::vector<std::string> wanted = metrics;
  if (train.select_metric != "loss" &&
      std::find(wanted.begin(), wanted.end(), train.select_metric) == wanted.end())
    wanted.push_back(train.select_metric);

  FinetuneResult result;
  if (train.epochs == 0) {
    result.best = evaluate(params, config, valid_set, wanted, train.workers);
    return result;
  }

  Rng rng(train.seed);
  const std::size_t total = planned_steps(train_set.size(), train);
  const auto refs = param_refs(params);
  AdamState<T> state;
  ModelParams<Tensor<T>> best_params = params;
  std::size_t steps = 0;
  double best_score = 0;
  for (std::size_t epoch = 1; epoch <= train.epochs; ++epoch) {
    auto order = iota_n(train_set.size());
    rng.shuffle(order.begin(), order.end());
    double epoch_sum = 0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size() && steps < total; start += train.batch_size) {
      const std::size_t end = std::min(order.size(), start + train.batch_size);
      std::vector<ExampleGrad<T>> parts(end - start);
      parallel_for(parts.size(), train.workers, [&](std::size_t e) {
        const std::size_t idx = order[start + e];
        parts[e] = example_grad(params, [&](Tape<T>& tape, const ModelParams<Var<T>>& p) {
          const auto features = model_forward(tape.constant(one_hot<T>(train_set.sequences[idx])), p, config);
          return masked_cross_entropy(class_logits(features, p.head), {train_set.labels[idx]}, {1});
        });
      });
      const std::vector<double> weights(parts.size(), 1.0 / static_cast<double>(parts.size()));
      double loss = 0;
      for (const auto& part : parts) loss += part.loss / static_cast<double>(parts.size());
      adamw_step(refs, reduce(parts, weights), state, train, scheduled_lr(steps, total, train));
      ++steps;
      epoch_sum += loss;
      ++epoch_steps;
    }
    result.epoch_losses.push_back(epoch_steps ? epoch_sum / static_cast<double>(epoch_steps) : 0.0);
    auto report = evaluate(params, config, valid_set, wanted, train.workers);
    const double score = train.select_metric == "loss" ? -*report.loss : *report.get(train.select_metric);
    if (result.best_epoch == 0 || score > best_score) {
      best_score = score;
      result.best_epoch = epoch;
      result.best = report;
      best_params = params;
    }
    result.epoch_reports.push_back(std::move(report));
  }
  params = std::move(best_params);
  return result;
}

template <typename T>
void reset_head(ModelParams<Tensor<T>>& params, const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t classes = config.head == HeadKind::mlm ? kMlmClasses : config.n_classes;
  Tensor<T> weight({config.hidden_dim, classes});
  Rng rng(seed);
  for (auto& v : weight.data()) v = static_cast<T>(rng.truncated_normal(kInitStddev));
  params.head = {std::move(weight), Tensor<T>({classes})};
}

#define CONVNOVA_INSTANTIATE(T)                                                                                   \
  template void adamw_step<T>(const std::vector<Tensor<T>*>&, const std::vector<Tensor<T>>&, AdamState<T>&,      \
                              const TrainConfig&, double);                                                        \
  template PretrainResult pretrain_mlm<T>(ModelParams<Tensor<T>>&, const ModelConfig&, const std::vector<NucSeq>&, \
                                          const TrainConfig&, const StepCallback&);                               \
  template double mlm_loss<T>(const ModelParams<Tensor<T>>&, const ModelConfig&, const std::vector<NucSeq>&,     \
                              double, std::uint64_t);                                                             \
  template std::vector<std::vector<double>> predict_proba<T>(const ModelParams<Tensor<T>>&, const ModelConfig&,  \
                                                             const LabeledSet&, std::size_t);                     \
  template MetricReport evaluate<T>(const ModelParams<Tensor<T>>&, const ModelConfig&, const LabeledSet&,        \
                                    const std::vector<std::string>&, std::size_t);                                \
  template FinetuneResult finetune<T>(ModelParams<Tensor<T>>&, const ModelConfig&, const LabeledSet&,            \
                                      const LabeledSet&, const TrainConfig&, const std::vector<std::string>&);    \
  template void reset_head<T>(ModelParams<Tensor<T>>&, const ModelConfig&, std::uint64_t);

CONVNOVA_INSTANTIATE(float)
CONVNOVA_INSTANTIATE(double)

}  // namespace convnova
