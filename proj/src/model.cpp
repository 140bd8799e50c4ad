#include "convnova/model.hpp"

#include <cmath>
#include <limits>

namespace convnova {

namespace {

constexpr std::size_t kSaturated = std::numeric_limits<std::size_t>::max();

std::size_t sat_add(std::size_t a, std::size_t b) { return a > kSaturated - b ? kSaturated : a + b; }
std::size_t sat_mul(std::size_t a, std::size_t b) {
  if (a == 0 || b == 0) return 0;
  return a > kSaturated / b ? kSaturated : a * b;
}

// Sum of the scheduled dilations, saturating instead of overflowing.
std::size_t dilation_sum(std::size_t base, std::size_t n_gcb, std::size_t stage_size) {
  std::size_t total = 0;
  std::size_t power = 1;
  for (std::size_t i = 0; i < n_gcb; ++i) {
    const std::size_t pos = i % stage_size;
    if (pos <= 1)
      power = 1;
    else
      power = sat_mul(power, base);
    total = sat_add(total, power);
  }
  return total;
}

std::size_t rf_from_sum(std::size_t kernel, std::size_t stem_kernel, std::size_t sum) {
  return sat_add(stem_kernel, sat_mul(kernel - 1, sum));
}

std::size_t conv_scalars(std::size_t k, std::size_t c_in, std::size_t c_out) { return k * c_in * c_out + c_out; }

std::size_t head_classes(const ModelConfig& c) { return c.head == HeadKind::mlm ? kMlmClasses : c.n_classes; }

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::dual_branch: return "dual_branch";
    case Variant::single_gate: return "single_gate";
    case Variant::additive: return "additive";
    case Variant::unet_downsample: return "unet_downsample";
  }
  return "?";
}

std::string to_string(HeadKind h) {
  switch (h) {
    case HeadKind::mlm: return "mlm";
    case HeadKind::sequence_class: return "sequence_class";
    case HeadKind::token_class: return "token_class";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  for (auto v : {Variant::dual_branch, Variant::single_gate, Variant::additive, Variant::unet_downsample})
    if (to_string(v) == s) return v;
  fail("bad_config", "unknown variant '" + s + "'");
}

HeadKind parse_head(const std::string& s) {
  for (auto h : {HeadKind::mlm, HeadKind::sequence_class, HeadKind::token_class})
    if (to_string(h) == s) return h;
  fail("bad_config", "unknown head '" + s + "'");
}

void ModelConfig::validate() const {
  require(hidden_dim >= 1, "bad_config", "hidden_dim must be >= 1");
  require(n_gcb >= 1, "bad_config", "n_gcb must be >= 1");
  require(stage_size >= 1, "bad_config", "stage_size must be >= 1");
  require(dilation_base >= 1, "bad_config", "dilation_base must be >= 1");
  require(kernel_size % 2 == 1, "bad_config", "kernel_size must be odd, got " + std::to_string(kernel_size));
  require(stem_kernel % 2 == 1, "bad_config", "stem_kernel must be odd, got " + std::to_string(stem_kernel));
  require(alphabet_size == kAlphabetSize, "bad_config", "alphabet_size must be 5");
  require(n_classes >= 1, "bad_config", "n_classes must be >= 1");
  require(head != HeadKind::mlm || n_classes == kMlmClasses, "bad_config", "the mlm head has exactly 4 classes");
  require(variant != Variant::unet_downsample || unet_depth >= 1, "bad_config", "unet_depth must be >= 1");
}

std::vector<std::size_t> dilation_schedule(std::size_t dilation_base, std::size_t n_gcb, std::size_t stage_size) {
  require(dilation_base >= 1 && stage_size >= 1, "bad_argument", "dilation_schedule: inputs must be positive");
  std::vector<std::size_t> out;
  out.reserve(n_gcb);
  std::size_t power = 1;
  for (std::size_t i = 0; i < n_gcb; ++i) {
    const std::size_t pos = i % stage_size;
    if (pos <= 1) {
      power = 1;
    } else {
      require(power <= kSaturated / dilation_base, "overflow", "dilation_schedule: dilation overflows");
      power *= dilation_base;
    }
    out.push_back(power);
  }
  return out;
}

template <typename T>
ModelParams<Tensor<T>> zero_params(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.hidden_dim, k = config.kernel_size;
  auto conv = [](std::size_t kk, std::size_t c_in, std::size_t c_out) {
    return ConvParams<Tensor<T>>{Tensor<T>({kk, c_in, c_out}), Tensor<T>({c_out})};
  };
  auto affine = [](std::size_t d_in, std::size_t d_out) {
    return AffineParams<Tensor<T>>{Tensor<T>({d_in, d_out}), Tensor<T>({d_out})};
  };
  auto norm = [d] { return NormParams<Tensor<T>>{Tensor<T>({d}), Tensor<T>({d})}; };

  ModelParams<Tensor<T>> p;
  p.stem = conv(config.stem_kernel, config.alphabet_size, d);
  for (std::size_t i = 0; i < config.n_gcb; ++i) {
    GcbParams<Tensor<T>> blk;
    blk.conv_a = conv(k, d, d);
    switch (config.variant) {
      case Variant::dual_branch:
      case Variant::unet_downsample:
        blk.norm_a = norm();
        blk.norm_b = norm();
        blk.conv_b = conv(k, d, d);
        break;
      case Variant::single_gate:
        blk.norm_a = norm();
        break;
      case Variant::additive:
        blk.conv_b = conv(k, d, d);
        break;
    }
    p.blocks.push_back(std::move(blk));
  }
  if (config.variant == Variant::unet_downsample) {
    for (std::size_t lvl = 0; lvl < config.unet_depth; ++lvl) {
      p.down_a.push_back(conv(k, d, d));
      p.down_b.push_back(conv(k, d, d));
    }
  }
  p.mlp_in = affine(d, d);
  p.mlp_out = affine(d, d);
  p.head = affine(d, head_classes(config));
  return p;
}

template <typename T>
ModelParams<Tensor<T>> init_params(const ModelConfig& config, std::uint64_t seed, double stddev) {
  auto p = zero_params<T>(config);
  Rng rng(seed);
  for_each_param(p, [&](const std::string& name, Tensor<T>& t) {
    if (name.ends_with(".weight")) {
      for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(stddev));
    } else if (name.ends_with(".gamma")) {
      t.fill(T(1));
    }
  });
  return p;
}

template ModelParams<Tensor<float>> zero_params<float>(const ModelConfig&);
template ModelParams<Tensor<double>> zero_params<double>(const ModelConfig&);
template ModelParams<Tensor<float>> init_params<float>(const ModelConfig&, std::uint64_t, double);
template ModelParams<Tensor<double>> init_params<double>(const ModelConfig&, std::uint64_t, double);

std::size_t param_count(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.hidden_dim, k = config.kernel_size;
  const std::size_t conv = conv_scalars(k, d, d);
  const std::size_t norm = 2 * d;
  std::size_t block = 0;
  switch (config.variant) {
    case Variant::dual_branch:
    case Variant::unet_downsample: block = 2 * conv + 2 * norm; break;
    case Variant::single_gate: block = conv + norm; break;
    case Variant::additive: block = 2 * conv; break;
  }
  std::size_t total = conv_scalars(config.stem_kernel, config.alphabet_size, d);
  total += config.n_gcb * block;
  if (config.variant == Variant::unet_downsample) total += 2 * config.unet_depth * conv;
  total += 2 * (d * d + d);
  const std::size_t classes = head_classes(config);
  total += d * classes + classes;
  return total;
}

std::size_t parity_hidden_dim(const ModelConfig& reference, Variant variant) {
  const auto target = static_cast<double>(param_count(reference));
  ModelConfig cfg = reference;
  cfg.variant = variant;
  std::size_t best = 1;
  double best_gap = std::numeric_limits<double>::infinity();
  for (std::size_t d = 1; d <= 4 * reference.hidden_dim + 8; ++d) {
    cfg.hidden_dim = d;
    const double gap = std::abs(static_cast<double>(param_count(cfg)) - target);
    if (gap < best_gap) {
      best_gap = gap;
      best = d;
    }
  }
  return best;
}

std::size_t receptive_field_analytic(const ModelConfig& config) {
  config.validate();
  require(config.variant != Variant::unet_downsample, "unsupported_variant",
          "receptive field algebra is not defined for the unet_downsample variant");
  const auto dil = dilation_schedule(config.dilation_base, config.n_gcb, config.stage_size);
  std::size_t sum = 0;
  for (auto v : dil) sum += v;
  return rf_from_sum(config.kernel_size, config.stem_kernel, sum);
}

ModelParams<Tensor<double>> probe_params(const ModelConfig& config, std::uint64_t seed, double scale) {
  auto p = zero_params<double>(config);
  Rng rng(seed);
  for_each_param(p, [&](const std::string& name, Tensor<double>& t) {
    for (auto& v : t.data()) v = (name.ends_with(".gamma") ? 1.0 : 0.0) + scale * rng.normal();
  });
  return p;
}

std::size_t receptive_field_empirical(const ModelParams<Tensor<double>>& params, const ModelConfig& config,
                                      std::size_t length, std::uint64_t seed) {
  const std::size_t rf = receptive_field_analytic(config);
  require(length > rf, "length_too_small",
          "receptive_field_empirical: length " + std::to_string(length) + " must exceed the analytic field " +
              std::to_string(rf));
  auto nonzero = [](const Tensor<double>& t) {
    for (double v : t.data())
      if (v != 0.0) return true;
    return false;
  };
  bool all_nonzero = nonzero(params.stem.weight);
  for (const auto& blk : params.blocks) {
    all_nonzero = all_nonzero && nonzero(blk.conv_a.weight);
    if (blk.conv_b) all_nonzero = all_nonzero && nonzero(blk.conv_b->weight);
  }
  require(all_nonzero, "zero_params", "receptive_field_empirical: convolution weights must be nonzero");

  Rng rng(seed);
  std::vector<std::size_t> bases(length);
  for (auto& b : bases) b = rng.below(4);
  auto encode = [&](const std::vector<std::size_t>& seq) {
    Tensor<double> x({length, config.alphabet_size});
    for (std::size_t t = 0; t < length; ++t) x.at(t, seq[t]) = 1.0;
    return x;
  };
  const auto base_features = model_forward(encode(bases), params, config);
  const std::size_t centre = length / 2;
  bases[centre] = (bases[centre] + 1) % 4;
  const auto moved_features = model_forward(encode(bases), params, config);

  std::size_t changed = 0;
  for (std::size_t t = 0; t < length; ++t) {
    auto r0 = base_features.row(t);
    auto r1 = moved_features.row(t);
    for (std::size_t c = 0; c < r0.size(); ++c) {
      if (std::abs(r0[c] - r1[c]) > 1e-9) {
        ++changed;
        break;
      }
    }
  }
  return changed;
}

DilationPlan plan_dilation_for_fraction(std::size_t length, double fraction, std::size_t kernel_size,
                                        std::size_t n_gcb, std::size_t stage_size, std::size_t stem_kernel) {
  require(fraction > 0.0 && fraction <= 1.0, "bad_argument", "fraction must be in (0, 1]");
  require(kernel_size >= 1 && stem_kernel >= 1 && n_gcb >= 1 && stage_size >= 1, "bad_argument",
          "plan_dilation_for_fraction: sizes must be positive");
  const auto target = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(length)));
  auto rf = [&](std::size_t base) {
    return rf_from_sum(kernel_size, stem_kernel, dilation_sum(base, n_gcb, stage_size));
  };
  DilationPlan plan{1, rf(1), true};
  if (plan.receptive_field > target) {
    plan.feasible = false;
    return plan;
  }
  // The field is nondecreasing in the base; with fewer than three blocks per
  // stage it does not depend on the base at all, and base 1 is returned.
  for (std::size_t base = 2;; ++base) {
    const std::size_t next = rf(base);
    if (next > target || next == plan.receptive_field) break;
    plan = {base, next, true};
  }
  return plan;
}

}  // namespace convnova
