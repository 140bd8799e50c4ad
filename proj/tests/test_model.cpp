#include <gtest/gtest.h>

#include <cmath>

#include "convnova/grad_check.hpp"
#include "convnova/model.hpp"
#include "oracles.hpp"

using namespace convnova;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

Tensor<double> random_one_hot(std::size_t length, Rng& rng) {
  Tensor<double> x({length, kAlphabetSize});
  for (std::size_t t = 0; t < length; ++t) x.at(t, rng.below(kAlphabetSize)) = 1.0;
  return x;
}

// Fills every parameter (gamma and beta included) with noise so no term is inert.
ModelConfig tiny(std::size_t d, std::size_t n, std::size_t k) {
  ModelConfig c;
  c.hidden_dim = d;
  c.n_gcb = n;
  c.kernel_size = k;
  return c;
}

}  // namespace

TEST(DilationSchedule, Examples) {
  EXPECT_EQ(dilation_schedule(4, 5, 5), (std::vector<std::size_t>{1, 1, 4, 16, 64}));
  EXPECT_EQ(dilation_schedule(1, 5, 5), (std::vector<std::size_t>{1, 1, 1, 1, 1}));
  EXPECT_EQ(dilation_schedule(4, 10, 5), (std::vector<std::size_t>{1, 1, 4, 16, 64, 1, 1, 4, 16, 64}));
  EXPECT_EQ(dilation_schedule(2, 7, 3), (std::vector<std::size_t>{1, 1, 2, 1, 1, 2, 1}));
}

TEST(DilationSchedule, MonotoneWithinStagesAndRestarts) {
  for (std::size_t base = 1; base <= 5; ++base)
    for (std::size_t stage = 1; stage <= 6; ++stage) {
      const auto s = dilation_schedule(base, 13, stage);
      ASSERT_EQ(s.size(), 13u);
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (i % stage == 0)
          EXPECT_EQ(s[i], 1u);
        else
          EXPECT_GE(s[i], s[i - 1]);
      }
    }
}

TEST(DilationSchedule, OverflowIsAnError) {
  EXPECT_THROW(dilation_schedule(1u << 20, 6, 6), Error);
}

TEST(Config, Validation) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  c.kernel_size = 8;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.n_gcb = 0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.dilation_base = 0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.n_classes = 3;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_EQ(parse_variant("single_gate"), Variant::single_gate);
  EXPECT_THROW(parse_variant("lstm"), Error);
}

TEST(Init, DeterministicGammaOneAndTruncatedSpread) {
  const ModelConfig cfg = tiny(8, 2, 5);
  const auto a = init_params<float>(cfg, 42);
  const auto b = init_params<float>(cfg, 42);
  const auto c = init_params<float>(cfg, 43);
  bool differs = false;
  std::vector<const Tensor<float>*> tb;
  for_each_param(b, [&](const std::string&, const Tensor<float>& t) { tb.push_back(&t); });
  std::size_t i = 0;
  for_each_param(a, [&](const std::string& name, const Tensor<float>& t) {
    EXPECT_TRUE(t == *tb[i++]) << name;
    if (name.ends_with(".gamma"))
      for (float v : t.data()) EXPECT_EQ(v, 1.0f);
    if (name.ends_with(".bias") || name.ends_with(".beta"))
      for (float v : t.data()) EXPECT_EQ(v, 0.0f);
  });
  for_each_param(c, [&](const std::string& name, const Tensor<float>& t) {
    if (name == "stem.weight") differs = !(t == a.stem.weight);
  });
  EXPECT_TRUE(differs);

  // 100352-element weight tensor.
  ModelConfig big = tiny(112, 1, 9);
  const auto p = init_params<double>(big, 7);
  const auto& w = p.blocks[0].conv_a.weight;
  ASSERT_GE(w.size(), 100000u);
  double mean = 0, sq = 0, extreme = 0;
  for (double v : w.data()) {
    mean += v;
    sq += v * v;
    extreme = std::max(extreme, std::abs(v));
  }
  mean /= double(w.size());
  const double sd = std::sqrt(sq / double(w.size()) - mean * mean);
  EXPECT_GE(sd, 0.017);
  EXPECT_LE(sd, 0.021);
  EXPECT_LE(extreme, 0.04);
}

TEST(Gcb, ZeroWeightFixedPoint) {
  Rng rng(3);
  for (std::size_t d : {1, 3, 8}) {
    ModelConfig cfg = tiny(d, 1, 5);
    auto p = zero_params<double>(cfg);
    Rng g(d);
    for (auto& v : p.blocks[0].norm_a->gamma.data()) v = g.normal();
    for (auto& v : p.blocks[0].norm_b->gamma.data()) v = g.normal();
    const BranchState<Tensor<double>> s{random_tensor({7, d}, rng), random_tensor({7, d}, rng)};
    const auto out = gcb_forward(s, p.blocks[0], 2);
    EXPECT_TRUE(out.a == s.a);
    for (std::size_t i = 0; i < s.b.size(); ++i) EXPECT_NEAR(out.b[i], s.b[i] + 0.5, 1e-12);
  }
}

TEST(Gcb, MatchesScalarOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ModelConfig cfg = tiny(3, 1, 3);
    const auto p = probe_params(cfg, seed, 0.7);
    Rng rng(100 + seed);
    const BranchState<Tensor<double>> s{random_tensor({6, 3}, rng), random_tensor({6, 3}, rng)};
    const auto out = gcb_forward(s, p.blocks[0], 2);
    const auto ref = oracle::gcb<double>({oracle::to_mat(s.a), oracle::to_mat(s.b)}, p.blocks[0], 2);
    for (std::size_t t = 0; t < 6; ++t)
      for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_NEAR(out.a.at(t, c), ref.a[t][c], 1e-6);
        EXPECT_NEAR(out.b.at(t, c), ref.b[t][c], 1e-6);
      }
  }
}

TEST(Gcb, GateStrictlyInsideUnitInterval) {
  ModelConfig cfg = tiny(4, 1, 3);
  const auto p = probe_params(cfg, 9, 1.0);
  Rng rng(5);
  // B stays small so B' - B resolves g without cancellation.
  const BranchState<Tensor<double>> s{random_tensor({32, 4}, rng, 5.0), random_tensor({32, 4}, rng, 1e-3)};
  const auto out = gcb_forward(s, p.blocks[0], 1);
  for (std::size_t i = 0; i < s.b.size(); ++i) {
    const double g = out.b[i] - s.b[i];
    EXPECT_GT(g, 0.0);
    EXPECT_LT(g, 1.0);
  }
}

TEST(SingleGate, ZeroAsymptoteAndOracle) {
  ModelConfig cfg = tiny(2, 1, 3);
  cfg.variant = Variant::single_gate;
  auto p = zero_params<double>(cfg);
  Rng rng(1);
  const auto a = random_tensor({4, 2}, rng);
  EXPECT_TRUE(gcb_forward_single(a, p.blocks[0], 1) == a);

  // Bias 20 with zero weights: z = 20 everywhere, so A' = A + GELU(20) * sigmoid(20) ~ A + 20.
  p.blocks[0].conv_a.bias.fill(20.0);
  const auto big = gcb_forward_single(a, p.blocks[0], 1);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(big[i] - a[i], 20.0, 1e-6);

  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto q = probe_params(cfg, seed, 0.8);
    const auto x = random_tensor({4, 2}, rng);
    const auto out = gcb_forward_single(x, q.blocks[0], 1);
    const auto& blk = q.blocks[0];
    const auto z =
        oracle::conv1d(oracle::layer_norm(oracle::to_mat(x), blk.norm_a->gamma, blk.norm_a->beta),
                       blk.conv_a.weight, blk.conv_a.bias, 1);
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t c = 0; c < 2; ++c)
        EXPECT_NEAR(out.at(t, c), x.at(t, c) + oracle::gelu(z[t][c]) * oracle::sigmoid(z[t][c]), 1e-9);
  }
}

TEST(Additive, ZeroSymmetryAndOracle) {
  ModelConfig cfg = tiny(3, 1, 3);
  cfg.variant = Variant::additive;
  Rng rng(2);
  const auto a = random_tensor({5, 3}, rng);
  const BranchState<Tensor<double>> same{a, a};
  const auto z = gcb_forward_additive(same, zero_params<double>(cfg).blocks[0], 1);
  EXPECT_TRUE(z.a == a);
  EXPECT_TRUE(z.b == a);

  auto p = probe_params(cfg, 4, 0.6);
  p.blocks[0].conv_b = p.blocks[0].conv_a;
  const auto sym = gcb_forward_additive(same, p.blocks[0], 2);
  const auto h = oracle::apply(oracle::conv1d(oracle::to_mat(a), p.blocks[0].conv_a.weight,
                                              p.blocks[0].conv_a.bias, 2),
                               oracle::gelu);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_NEAR(sym.a.at(t, c), a.at(t, c) + 2 * h[t][c], 1e-9);
      EXPECT_NEAR(sym.b.at(t, c), a.at(t, c) + h[t][c], 1e-9);
    }

  const auto q = probe_params(cfg, 5, 0.6);
  const BranchState<Tensor<double>> s{random_tensor({5, 3}, rng), random_tensor({5, 3}, rng)};
  const auto out = gcb_forward_additive(s, q.blocks[0], 1);
  const auto& blk = q.blocks[0];
  const auto ha = oracle::apply(oracle::conv1d(oracle::to_mat(s.a), blk.conv_a.weight, blk.conv_a.bias, 1),
                                oracle::gelu);
  const auto gb = oracle::apply(oracle::conv1d(oracle::to_mat(s.b), blk.conv_b->weight, blk.conv_b->bias, 1),
                                oracle::gelu);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_NEAR(out.a.at(t, c), s.a.at(t, c) + ha[t][c] + gb[t][c], 1e-9);
      EXPECT_NEAR(out.b.at(t, c), s.b.at(t, c) + gb[t][c], 1e-9);
    }
}

TEST(Unet, ShapeZeroWeightsAndLengthCheck) {
  ModelConfig cfg = tiny(4, 2, 3);
  cfg.variant = Variant::unet_downsample;
  cfg.unet_depth = 2;
  Rng rng(8);
  const auto p = probe_params(cfg, 1, 0.3);
  const BranchState<Tensor<double>> s{random_tensor({64, 4}, rng), random_tensor({64, 4}, rng)};
  const auto out = unet_block_forward(s, p);
  EXPECT_EQ(out.a.shape(), (Shape{64, 4}));

  const auto zero = zero_params<double>(cfg);
  EXPECT_TRUE(unet_block_forward(s, zero).a == s.a);

  const BranchState<Tensor<double>> odd{random_tensor({62, 4}, rng), random_tensor({62, 4}, rng)};
  try {
    unet_block_forward(odd, p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.cause(), "bad_length");
  }
  EXPECT_EQ(model_forward(random_one_hot(64, rng), p, cfg).shape(), (Shape{64, 4}));
}

TEST(Unet, ParityWithinTenPercent) {
  ModelConfig ref;  // d = 128, n = 5
  for (Variant v : {Variant::unet_downsample, Variant::single_gate, Variant::additive}) {
    ModelConfig cfg = ref;
    cfg.variant = v;
    cfg.hidden_dim = parity_hidden_dim(ref, v);
    const double ratio = double(param_count(cfg)) / double(param_count(ref));
    EXPECT_GT(ratio, 0.9) << to_string(v);
    EXPECT_LT(ratio, 1.1) << to_string(v);
  }
  EXPECT_EQ(parity_hidden_dim(ref, Variant::dual_branch), ref.hidden_dim);
}

TEST(Model, ZeroParamsGiveMlpBias) {
  ModelConfig cfg = tiny(4, 3, 5);
  auto p = zero_params<double>(cfg);
  for (std::size_t c = 0; c < 4; ++c) p.mlp_out.bias[c] = 0.25 * double(c) - 0.3;
  Rng rng(4);
  for (std::size_t l : {1, 2, 17}) {
    const auto f = model_forward(random_one_hot(l, rng), p, cfg);
    ASSERT_EQ(f.shape(), (Shape{l, 4}));
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(f.at(t, c), p.mlp_out.bias[c]);
  }
}

TEST(Model, TinyModelMatchesOracle) {
  const ModelConfig cfg = tiny(4, 2, 9);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = probe_params(cfg, seed, 0.4);
    Rng rng(50 + seed);
    const auto x = random_one_hot(16, rng);
    const auto f = model_forward(x, p, cfg);
    const auto ref = oracle::model_features<double>(oracle::to_mat(x), p, cfg);
    for (std::size_t t = 0; t < 16; ++t)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(f.at(t, c), ref[t][c], 1e-5);
    // float path agrees with the double oracle too
    const auto f32 = model_forward(x.cast<float>(), cast_params<float>(p), cfg);
    for (std::size_t t = 0; t < 16; ++t)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(f32.at(t, c), ref[t][c], 1e-4);
  }
}

TEST(Model, RejectsInvalidOneHot) {
  const ModelConfig cfg = tiny(2, 1, 3);
  const auto p = zero_params<double>(cfg);
  Tensor<double> x({4, 5});
  EXPECT_THROW(model_forward(x, p, cfg), Error);  // all-zero rows
  x.at(0, 0) = 1;
  x.at(1, 1) = 1;
  x.at(2, 2) = 1;
  x.at(3, 3) = 0.5;
  EXPECT_THROW(model_forward(x, p, cfg), Error);
  Tensor<double> wide({4, 4});
  EXPECT_THROW(model_forward(wide, p, cfg), Error);
}

TEST(Heads, ShapesAndBias) {
  ModelConfig cfg = tiny(4, 1, 3);
  cfg.head = HeadKind::token_class;
  cfg.n_classes = 9;
  auto p = zero_params<double>(cfg);
  for (std::size_t c = 0; c < 9; ++c) p.head.bias[c] = double(c);
  Rng rng(6);
  const auto f = model_forward(random_one_hot(12, rng), p, cfg);
  const auto tok = head_logits(f, p, cfg);
  ASSERT_EQ(tok.shape(), (Shape{12, 9}));
  for (std::size_t t = 0; t < 12; ++t)
    for (std::size_t c = 0; c < 9; ++c) EXPECT_EQ(tok.at(t, c), double(c));

  cfg.head = HeadKind::sequence_class;
  cfg.n_classes = 3;
  const auto q = probe_params(cfg, 2, 0.5);
  const auto one = model_forward(random_one_hot(1, rng), q, cfg);
  const auto cls = head_logits(one, q, cfg);
  ASSERT_EQ(cls.shape(), (Shape{3}));
  const auto direct = affine(one, q.head.weight, q.head.bias);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(cls[c], direct.at(0, c), 1e-12);

  ModelConfig mlm = tiny(4, 1, 3);
  const auto m = probe_params(mlm, 3, 0.5);
  EXPECT_EQ(mlm_logits(model_forward(random_one_hot(7, rng), m, mlm), m.head).shape(), (Shape{7, 4}));
}

TEST(ParamCount, BracketsAndManualCount) {
  ModelConfig big;  // d = 128, n = 5, k = 9, MLM head
  EXPECT_GE(param_count(big), 1'400'000u);
  EXPECT_LE(param_count(big), 2'000'000u);
  ModelConfig mid;
  mid.hidden_dim = 64;
  EXPECT_GE(param_count(mid), 330'000u);
  EXPECT_LE(param_count(mid), 440'000u);

  // d = 1, n = 1, k = 1, stem kernel 1:
  //   stem 1*5*1 + 1 = 6; block: two LNs 2*2 = 4, two convs 2*(1 + 1) = 4;
  //   MLP 2*(1 + 1) = 4; MLM head 1*4 + 4 = 8. Total 26.
  ModelConfig unit = tiny(1, 1, 1);
  unit.stem_kernel = 1;
  EXPECT_EQ(param_count(unit), 26u);

  for (Variant v : {Variant::dual_branch, Variant::single_gate, Variant::additive, Variant::unet_downsample}) {
    ModelConfig c = tiny(6, 3, 5);
    c.variant = v;
    EXPECT_EQ(param_count(c), count_scalars(zero_params<float>(c))) << to_string(v);
  }
}

TEST(ReceptiveField, AnalyticExamples) {
  ModelConfig c = tiny(8, 5, 9);
  EXPECT_EQ(receptive_field_analytic(c), 697u);
  c = tiny(8, 5, 3);
  c.dilation_base = 1;
  c.stem_kernel = 3;
  EXPECT_EQ(receptive_field_analytic(c), 13u);
  c = tiny(8, 2, 3);
  c.stem_kernel = 3;
  EXPECT_EQ(receptive_field_analytic(c), 7u);
  // A single k = 9 convolution: stem only, with a block of kernel 1 adding nothing.
  c = tiny(8, 1, 1);
  c.stem_kernel = 9;
  EXPECT_EQ(receptive_field_analytic(c), 9u);
  c.variant = Variant::unet_downsample;
  EXPECT_THROW(receptive_field_analytic(c), Error);
}

TEST(ReceptiveField, EmpiricalEqualsAnalytic) {
  // Layer norm over one or two channels discards everything but a sign, so
  // the probes use at least four channels.
  ModelConfig c = tiny(4, 5, 9);
  EXPECT_EQ(receptive_field_empirical(probe_params(c, 1, 0.5), c, 1024), 697u);

  c = tiny(4, 2, 3);
  c.dilation_base = 1;
  c.stem_kernel = 3;
  EXPECT_EQ(receptive_field_empirical(probe_params(c, 2, 0.5), c, 32), 7u);

  Rng rng(11);
  const std::size_t ks[] = {3, 5, 7, 9, 11};
  for (int trial = 0; trial < 12; ++trial) {
    ModelConfig r = tiny(4 + rng.below(3), 1 + rng.below(5), ks[rng.below(5)]);
    r.dilation_base = 1 + rng.below(4);
    r.stem_kernel = ks[rng.below(5)];
    const std::size_t rf = receptive_field_analytic(r);
    const auto got = receptive_field_empirical(probe_params(r, 100 + trial, 0.5), r, rf + 64, trial);
    EXPECT_EQ(got, rf) << "k=" << r.kernel_size << " base=" << r.dilation_base << " n=" << r.n_gcb;
  }
}

TEST(ReceptiveField, EmpiricalPreconditions) {
  ModelConfig c = tiny(2, 2, 3);
  c.stem_kernel = 3;
  try {
    receptive_field_empirical(zero_params<double>(c), c, 32);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.cause(), "zero_params");
  }
  try {
    receptive_field_empirical(probe_params(c, 1, 0.5), c, 7);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.cause(), "length_too_small");
  }
}

TEST(PlanDilation, SearchAgreesWithExhaustiveScan) {
  // RF(base) = 9 + 8 * (2 + b + b^2 + b^3): base 1 -> 49, base 2 -> 137.
  auto plan = plan_dilation_for_fraction(500, 0.15, 9, 5, 5, 9);
  EXPECT_EQ(plan.dilation_base, 1u);
  EXPECT_EQ(plan.receptive_field, 49u);
  EXPECT_TRUE(plan.feasible);

  plan = plan_dilation_for_fraction(100, 0.15, 9, 5, 5, 9);
  EXPECT_EQ(plan.dilation_base, 1u);
  EXPECT_FALSE(plan.feasible);

  for (std::size_t length : {60, 200, 697, 1000, 5000, 40000}) {
    for (double f : {0.15, 0.5, 1.0}) {
      const auto p = plan_dilation_for_fraction(length, f, 9, 5, 5, 9);
      const auto target = static_cast<std::size_t>(std::floor(f * double(length)));
      std::size_t best = 0;
      for (std::size_t b = 1; b < 200; ++b) {
        ModelConfig c = tiny(1, 5, 9);
        c.dilation_base = b;
        if (receptive_field_analytic(c) <= target) best = b;
      }
      if (best == 0) {
        EXPECT_FALSE(p.feasible);
      } else {
        EXPECT_TRUE(p.feasible);
        EXPECT_EQ(p.dilation_base, best) << length << " " << f;
      }
    }
  }
  EXPECT_EQ(plan_dilation_for_fraction(697, 1.0, 9, 5, 5, 9).dilation_base, 4u);
}

TEST(GradCheck, TinyFullModelMlm) {
  const ModelConfig cfg = tiny(4, 2, 9);
  const auto params = probe_params(cfg, 21, 0.3);
  std::vector<Tensor<double>> inputs;
  for_each_param(params, [&](const std::string&, const Tensor<double>& t) { inputs.push_back(t); });

  Rng rng(77);
  const auto x = random_one_hot(16, rng);
  std::vector<std::int32_t> targets(16);
  std::vector<std::uint8_t> mask(16);
  for (std::size_t t = 0; t < 16; ++t) {
    targets[t] = static_cast<std::int32_t>(rng.below(4));
    mask[t] = t % 3 == 0;
  }
  auto loss = [&](Tape<double>& tape, const std::vector<Var<double>>& vars) {
    std::size_t next = 0;
    const auto p = transform_params<Var<double>>(params, [&](const Tensor<double>&) { return vars[next++]; });
    const auto features = model_forward(tape.constant(x), p, cfg);
    return masked_cross_entropy(mlm_logits(features, p.head), targets, mask);
  };
  const auto r = grad_check(loss, inputs);
  EXPECT_EQ(r.coordinates, param_count(cfg));
  EXPECT_LT(r.max_rel_error, 1e-4);
}
