#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "convnova/ops.hpp"
#include "convnova/rng.hpp"

namespace convnova {

enum class Variant { dual_branch, single_gate, additive, unet_downsample };
enum class HeadKind { mlm, sequence_class, token_class };

std::string to_string(Variant v);
std::string to_string(HeadKind h);
Variant parse_variant(const std::string& s);
HeadKind parse_head(const std::string& s);

inline constexpr std::size_t kAlphabetSize = 5;  // A, C, G, T, N
inline constexpr std::size_t kMlmClasses = 4;    // A, C, G, T
inline constexpr double kInitStddev = 0.02;

struct ModelConfig {
  std::size_t hidden_dim = 128;
  std::size_t n_gcb = 5;
  std::size_t stage_size = 5;
  std::size_t dilation_base = 4;
  std::size_t kernel_size = 9;
  std::size_t stem_kernel = 9;
  Variant variant = Variant::dual_branch;
  std::size_t alphabet_size = kAlphabetSize;
  HeadKind head = HeadKind::mlm;
  /// Output classes of the head; fixed to 4 for the MLM head.
  std::size_t n_classes = kMlmClasses;
  /// Resolution levels of the U-Net variant.
  std::size_t unet_depth = 2;

  /// Throws Error("bad_config") on any violated invariant.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Per-stage dilations [1, 1, b, b^2, b^3, ...], restarted at every stage
/// boundary and truncated to `n_gcb` entries.
std::vector<std::size_t> dilation_schedule(std::size_t dilation_base, std::size_t n_gcb, std::size_t stage_size);

template <typename V>
struct ConvParams {
  V weight;  // [k, c_in, c_out]
  V bias;    // [c_out]
};

template <typename V>
struct NormParams {
  V gamma;
  V beta;
};

template <typename V>
struct AffineParams {
  V weight;  // [d_in, d_out]
  V bias;    // [d_out]
};

/// One gated convolution block. Which members are populated depends on the
/// variant: dual-branch uses all four, single-gate uses norm_a and conv_a,
/// additive uses conv_a and conv_b.
template <typename V>
struct GcbParams {
  std::optional<NormParams<V>> norm_a;
  std::optional<NormParams<V>> norm_b;
  ConvParams<V> conv_a;
  std::optional<ConvParams<V>> conv_b;
};

template <typename V>
struct ModelParams {
  ConvParams<V> stem;
  std::vector<GcbParams<V>> blocks;
  // U-Net variant only: one stride-2 convolution per level and branch.
  std::vector<ConvParams<V>> down_a;
  std::vector<ConvParams<V>> down_b;
  AffineParams<V> mlp_in;
  AffineParams<V> mlp_out;
  AffineParams<V> head;
};

template <typename V>
struct BranchState {
  V a;
  V b;
};

/// Visits every parameter tensor in a fixed order with a stable dotted name.
template <typename P, typename F>
void for_each_param(P& params, F&& f) {
  auto conv = [&](const std::string& name, auto& c) {
    f(name + ".weight", c.weight);
    f(name + ".bias", c.bias);
  };
  auto norm = [&](const std::string& name, auto& n) {
    f(name + ".gamma", n.gamma);
    f(name + ".beta", n.beta);
  };
  conv("stem", params.stem);
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    auto& blk = params.blocks[i];
    const std::string p = "blocks." + std::to_string(i);
    if (blk.norm_a) norm(p + ".norm_a", *blk.norm_a);
    if (blk.norm_b) norm(p + ".norm_b", *blk.norm_b);
    conv(p + ".conv_a", blk.conv_a);
    if (blk.conv_b) conv(p + ".conv_b", *blk.conv_b);
  }
  for (std::size_t i = 0; i < params.down_a.size(); ++i) conv("down_a." + std::to_string(i), params.down_a[i]);
  for (std::size_t i = 0; i < params.down_b.size(); ++i) conv("down_b." + std::to_string(i), params.down_b[i]);
  conv("mlp_in", params.mlp_in);
  conv("mlp_out", params.mlp_out);
  conv("head", params.head);
}

/// Structure-preserving map of every parameter, e.g. Tensor -> tape leaf.
template <typename U, typename V, typename F>
ModelParams<U> transform_params(const ModelParams<V>& src, F&& f) {
  auto conv = [&](const auto& c) { return ConvParams<U>{f(c.weight), f(c.bias)}; };
  auto affine = [&](const auto& c) { return AffineParams<U>{f(c.weight), f(c.bias)}; };
  auto norm = [&](const auto& n) { return NormParams<U>{f(n.gamma), f(n.beta)}; };
  ModelParams<U> out;
  out.stem = conv(src.stem);
  for (const auto& blk : src.blocks) {
    GcbParams<U> g;
    if (blk.norm_a) g.norm_a = norm(*blk.norm_a);
    if (blk.norm_b) g.norm_b = norm(*blk.norm_b);
    g.conv_a = conv(blk.conv_a);
    if (blk.conv_b) g.conv_b = conv(*blk.conv_b);
    out.blocks.push_back(std::move(g));
  }
  for (const auto& c : src.down_a) out.down_a.push_back(conv(c));
  for (const auto& c : src.down_b) out.down_b.push_back(conv(c));
  out.mlp_in = affine(src.mlp_in);
  out.mlp_out = affine(src.mlp_out);
  out.head = affine(src.head);
  return out;
}

template <typename U, typename T>
ModelParams<Tensor<U>> cast_params(const ModelParams<Tensor<T>>& p) {
  return transform_params<Tensor<U>>(p, [](const Tensor<T>& t) { return t.template cast<U>(); });
}

/// Binds parameters to a tape as tracked leaves.
template <typename T>
ModelParams<Var<T>> bind_params(Tape<T>& tape, const ModelParams<Tensor<T>>& p) {
  return transform_params<Var<T>>(p, [&](const Tensor<T>& t) { return tape.leaf(t); });
}

/// Conv/affine weights ~ Normal(0, stddev^2) truncated at +-2 stddev, biases 0,
/// layer-norm gamma 1 and beta 0. Deterministic in (config, seed, stddev).
template <typename T>
ModelParams<Tensor<T>> init_params(const ModelConfig& config, std::uint64_t seed, double stddev = kInitStddev);

/// Zero tensors with the same layout as `init_params` (gamma included).
template <typename T>
ModelParams<Tensor<T>> zero_params(const ModelConfig& config);

/// Exact number of learnable scalars, from the configuration alone.
std::size_t param_count(const ModelConfig& config);

template <typename T>
std::size_t count_scalars(const ModelParams<Tensor<T>>& params) {
  std::size_t n = 0;
  for_each_param(params, [&](const std::string&, const Tensor<T>& t) { n += t.size(); });
  return n;
}

/// Hidden width for `variant` whose parameter count is closest to that of
/// `reference` (ties go to the smaller width).
std::size_t parity_hidden_dim(const ModelConfig& reference, Variant variant);

// ---- blocks -----------------------------------------------------------------

/// Dual-branch gated block:
///   h = GELU(conv_a(LN_a(A)));  g = sigmoid(conv_b(LN_b(B)))
///   A' = A + h * g;             B' = B + g
template <typename V>
BranchState<V> gcb_forward(const BranchState<V>& state, const GcbParams<V>& p, std::size_t dilation) {
  const V na = layer_norm(state.a, p.norm_a->gamma, p.norm_a->beta);
  const V h = gelu(conv1d(na, p.conv_a.weight, p.conv_a.bias, dilation));
  const V nb = layer_norm(state.b, p.norm_b->gamma, p.norm_b->beta);
  const V g = sigmoid(conv1d(nb, p.conv_b->weight, p.conv_b->bias, dilation));
  return {add(state.a, hadamard(h, g)), add(state.b, g)};
}

/// Single-gate block: one shared convolution feeds both activations.
///   z = conv(LN(A));  A' = A + GELU(z) * sigmoid(z)
template <typename V>
V gcb_forward_single(const V& a, const GcbParams<V>& p, std::size_t dilation) {
  const V z = conv1d(layer_norm(a, p.norm_a->gamma, p.norm_a->beta), p.conv_a.weight, p.conv_a.bias, dilation);
  return add(a, hadamard(gelu(z), sigmoid(z)));
}

/// Gate-free block: h = GELU(conv_a(A)); g = GELU(conv_b(B)); A' = A + h + g; B' = B + g.
template <typename V>
BranchState<V> gcb_forward_additive(const BranchState<V>& state, const GcbParams<V>& p, std::size_t dilation) {
  const V h = gelu(conv1d(state.a, p.conv_a.weight, p.conv_a.bias, dilation));
  const V g = gelu(conv1d(state.b, p.conv_b->weight, p.conv_b->bias, dilation));
  return {add(add(state.a, h), g), add(state.b, g)};
}

/// Encoder-decoder variant: stride-2 convolutions halve the length per level,
/// the gated blocks run undilated at the bottleneck, then nearest-neighbour
/// upsampling plus the saved skip restores each level.
template <typename V>
BranchState<V> unet_block_forward(const BranchState<V>& state, const ModelParams<V>& p) {
  const std::size_t depth = p.down_a.size();
  const std::size_t length = value_of(state.a).dim(0);
  require(length % (std::size_t{1} << depth) == 0, "bad_length",
          "unet: length " + std::to_string(length) + " is not divisible by 2^" + std::to_string(depth));
  std::vector<V> skips{state.a};
  BranchState<V> s = state;
  for (std::size_t lvl = 0; lvl < depth; ++lvl) {
    s.a = conv1d(s.a, p.down_a[lvl].weight, p.down_a[lvl].bias, 1, 2);
    s.b = conv1d(s.b, p.down_b[lvl].weight, p.down_b[lvl].bias, 1, 2);
    if (lvl + 1 < depth) skips.push_back(s.a);
  }
  for (const auto& blk : p.blocks) s = gcb_forward(s, blk, 1);
  V a = s.a;
  for (std::size_t lvl = depth; lvl-- > 0;) a = add(skips[lvl], upsample_nearest(a, 2));
  return {a, s.b};
}

namespace detail {

template <typename T>
void check_one_hot(const Tensor<T>& x, std::size_t alphabet) {
  require(x.rank() == 2 && x.dim(1) == alphabet, "bad_input",
          "model input must be one-hot [length, " + std::to_string(alphabet) + "], got " + shape_str(x.shape()));
  for (std::size_t t = 0; t < x.dim(0); ++t) {
    std::size_t ones = 0;
    for (T v : x.row(t)) {
      if (v == T(1))
        ++ones;
      else
        require(v == T(0), "bad_input", "model input row " + std::to_string(t) + " is not one-hot");
    }
    require(ones == 1, "bad_input", "model input row " + std::to_string(t) + " is not one-hot");
  }
}

}  // namespace detail

/// Stem convolution, the block stack (A0 = B0 = stem output), then the
/// two-layer MLP on branch A. Returns per-position features [l, d].
template <typename V>
V model_forward(const V& x, const ModelParams<V>& p, const ModelConfig& config) {
  detail::check_one_hot(value_of(x), config.alphabet_size);
  const V stem = conv1d(x, p.stem.weight, p.stem.bias, 1);
  const auto dilations = dilation_schedule(config.dilation_base, config.n_gcb, config.stage_size);
  V a = stem;
  switch (config.variant) {
    case Variant::dual_branch: {
      BranchState<V> s{stem, stem};
      for (std::size_t i = 0; i < p.blocks.size(); ++i) s = gcb_forward(s, p.blocks[i], dilations[i]);
      a = s.a;
      break;
    }
    case Variant::single_gate:
      for (std::size_t i = 0; i < p.blocks.size(); ++i) a = gcb_forward_single(a, p.blocks[i], dilations[i]);
      break;
    case Variant::additive: {
      BranchState<V> s{stem, stem};
      for (std::size_t i = 0; i < p.blocks.size(); ++i) s = gcb_forward_additive(s, p.blocks[i], dilations[i]);
      a = s.a;
      break;
    }
    case Variant::unet_downsample:
      a = unet_block_forward(BranchState<V>{stem, stem}, p).a;
      break;
  }
  const V hidden = gelu(affine(a, p.mlp_in.weight, p.mlp_in.bias));
  return affine(hidden, p.mlp_out.weight, p.mlp_out.bias);
}

/// Per-position logits [l, 4] of the pretraining head.
template <typename V>
V mlm_logits(const V& features, const AffineParams<V>& head) {
  return affine(features, head.weight, head.bias);
}

/// Per-position logits [l, n_labels].
template <typename V>
V token_logits(const V& features, const AffineParams<V>& head) {
  return affine(features, head.weight, head.bias);
}

/// Sequence logits [n]: mean over positions, then the linear head.
template <typename V>
V class_logits(const V& features, const AffineParams<V>& head) {
  return affine(mean_pool(features), head.weight, head.bias);
}

/// Head output for the configured task: [l, C] for per-position heads, [C]
/// for sequence classification.
template <typename V>
V head_logits(const V& features, const ModelParams<V>& p, const ModelConfig& config) {
  return config.head == HeadKind::sequence_class ? class_logits(features, p.head) : token_logits(features, p.head);
}

// ---- receptive field --------------------------------------------------------

/// 1 + (k_stem - 1) + (k - 1) * sum of block dilations. Rejects the U-Net variant.
std::size_t receptive_field_analytic(const ModelConfig& config);

/// Flips the base at the centre of a random length-`length` sequence and
/// Every parameter drawn as scale * N(0, 1), gamma centred on 1. Large enough
/// that a single-base change stays measurable across the whole receptive field.
ModelParams<Tensor<double>> probe_params(const ModelConfig& config, std::uint64_t seed, double scale = 0.5);

/// counts output positions whose features move by more than 1e-9.
std::size_t receptive_field_empirical(const ModelParams<Tensor<double>>& params, const ModelConfig& config,
                                      std::size_t length, std::uint64_t seed = 0);

struct DilationPlan {
  std::size_t dilation_base = 1;
  std::size_t receptive_field = 0;
  /// False when even base 1 exceeds the target; the base is then clamped to 1.
  bool feasible = true;
};

/// Largest dilation base whose analytic receptive field is <= fraction * length.
DilationPlan plan_dilation_for_fraction(std::size_t length, double fraction, std::size_t kernel_size,
                                        std::size_t n_gcb, std::size_t stage_size, std::size_t stem_kernel);

}  // namespace convnova
