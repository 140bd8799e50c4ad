#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "convnova/commands.hpp"
#include "convnova/error.hpp"
#include "convnova/genome.hpp"
#include "convnova/io.hpp"

using namespace convnova;

namespace {

fs::path scratch_dir() {
  const auto* info = testing::UnitTest::GetInstance()->current_test_info();
  auto dir = fs::temp_directory_path() / "convnova_test_io" / (std::string(info->test_suite_name()) + "." + info->name());
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::string cause_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.cause();
  }
  return "";
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

ModelConfig small(Variant v = Variant::dual_branch) {
  ModelConfig c;
  c.hidden_dim = 6;
  c.n_gcb = 3;
  c.kernel_size = 5;
  c.stem_kernel = 3;
  c.dilation_base = 2;
  c.variant = v;
  return c;
}

template <typename T>
bool bit_equal(const ModelParams<Tensor<T>>& a, const ModelParams<Tensor<T>>& b) {
  std::vector<const Tensor<T>*> xs, ys;
  for_each_param(a, [&](const std::string&, const Tensor<T>& t) { xs.push_back(&t); });
  for_each_param(b, [&](const std::string&, const Tensor<T>& t) { ys.push_back(&t); });
  if (xs.size() != ys.size()) return false;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i]->shape() != ys[i]->shape()) return false;
    if (std::memcmp(xs[i]->ptr(), ys[i]->ptr(), xs[i]->size() * sizeof(T)) != 0) return false;
  }
  return true;
}

RunConfig tiny_run() {
  RunConfig c;
  c.model = small();
  c.train.epochs = 1;
  c.train.batch_size = 4;
  c.train.window = 64;
  c.train.mask_rate = 0.15;
  c.train.seed = 5;
  return c;
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  RunConfig c;
  c.model = small(Variant::single_gate);
  c.model.head = HeadKind::sequence_class;
  c.model.n_classes = 3;
  c.train.learning_rate = 3e-4;
  c.train.lr_schedule = "constant";
  c.train.precision = "f64";
  c.train.init_std = 0.2;
  EXPECT_EQ(run_config_from_json(to_json(c)), c);
  EXPECT_EQ(run_config_from_json(Json::parse(to_json(c).dump())), c);
}

TEST(Config, DefaultsAndErrors) {
  const auto c = run_config_from_json(Json::parse(R"({"model": {"hidden_dim": 16}})"));
  EXPECT_EQ(c.model.hidden_dim, 16u);
  EXPECT_EQ(c.model.n_gcb, ModelConfig{}.n_gcb);
  EXPECT_EQ(c.train, TrainConfig{});
  const auto cls = run_config_from_json(Json::parse(R"({"model": {"head": "sequence_class"}})"));
  EXPECT_EQ(cls.model.n_classes, 2u);

  EXPECT_EQ(cause_of([] { run_config_from_json(Json::parse(R"({"model": {"hidden": 4}})")); }), "bad_config");
  EXPECT_EQ(cause_of([] { run_config_from_json(Json::parse(R"({"model": {"hidden_dim": -4}})")); }), "bad_config");
  EXPECT_EQ(cause_of([] { run_config_from_json(Json::parse(R"({"model": {"kernel_size": 4}})")); }), "bad_config");
  EXPECT_EQ(cause_of([] { run_config_from_json(Json::parse(R"({"train": {"precision": "f16"}})")); }), "bad_config");
  EXPECT_EQ(cause_of([] { run_config_from_json(Json::parse(R"({"optim": {}})")); }), "bad_config");
  EXPECT_EQ(cause_of([] { run_config_from_json(Json::parse(R"({"train": {"epochs": "3"}})")); }), "bad_config");

  const auto dir = scratch_dir();
  spit(dir / "broken.json", "{\"model\": ");
  EXPECT_EQ(cause_of([&] { load_run_config(dir / "broken.json"); }), "bad_config");
  EXPECT_EQ(cause_of([&] { load_run_config(dir / "missing.json"); }), "io");
  spit(dir / "bad.json", R"({"model": {"n_gcb": 0}})");
  EXPECT_NE(message_of([&] { load_run_config(dir / "bad.json"); }).find("bad.json"), std::string::npos);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  for (auto v : {Variant::dual_branch, Variant::single_gate, Variant::additive, Variant::unet_downsample}) {
    const auto cfg = small(v);
    const auto p32 = init_params<float>(cfg, 11);
    std::stringstream s32;
    save_checkpoint(s32, p32, cfg, Json{{"note", "x"}});
    const auto back32 = load_checkpoint<float>(s32);
    EXPECT_TRUE(bit_equal(p32, back32.params)) << to_string(v);
    EXPECT_EQ(back32.header.config, cfg);
    EXPECT_EQ(back32.header.meta["note"], "x");

    const auto p64 = probe_params(cfg, 12, 1.0);
    std::stringstream s64;
    save_checkpoint(s64, p64, cfg);
    EXPECT_TRUE(bit_equal(p64, load_checkpoint<double>(s64).params)) << to_string(v);
  }
}

TEST(Checkpoint, ManifestCoversPayload) {
  const auto cfg = small();
  const auto p = init_params<float>(cfg, 1);
  const auto dir = scratch_dir();
  save_checkpoint(dir / "a.cnvn", p, cfg);
  const auto h = read_checkpoint_header(dir / "a.cnvn");
  std::uint64_t end = 0;
  std::size_t n = 0;
  for (const auto& e : h.tensors) {
    EXPECT_EQ(e.offset, end);
    EXPECT_EQ(e.dtype, "f32");
    end += e.length;
    n += shape_numel(e.shape);
  }
  EXPECT_EQ(n, param_count(cfg));
  EXPECT_EQ(end, n * 4);
  const std::string bytes = slurp(dir / "a.cnvn");
  EXPECT_EQ(bytes.substr(0, 4), "CNVN");
}

TEST(Checkpoint, CrossPrecisionLoadCasts) {
  const auto cfg = small();
  const auto p = probe_params(cfg, 3, 0.5);
  std::stringstream s;
  save_checkpoint(s, p, cfg);
  const auto f = load_checkpoint<float>(s).params;
  EXPECT_EQ(f.stem.weight[7], static_cast<float>(p.stem.weight[7]));
}

TEST(Checkpoint, CorruptionIsRejected) {
  const auto cfg = small();
  std::stringstream s;
  save_checkpoint(s, init_params<float>(cfg, 1), cfg);
  const std::string good = s.str();
  auto load = [](std::string bytes) {
    std::stringstream in(bytes);
    load_checkpoint<float>(in);
  };
  EXPECT_NO_THROW(load(good));
  EXPECT_EQ(cause_of([&] { load("hello world, not a checkpoint"); }), "bad_magic");
  EXPECT_EQ(cause_of([&] { load(""); }), "bad_magic");
  auto v2 = good;
  v2[4] = 2;
  EXPECT_EQ(cause_of([&] { load(v2); }), "bad_version");
  EXPECT_NE(message_of([&] { load(good.substr(0, good.size() - 3)); }).find("payload length mismatch"),
            std::string::npos);
  EXPECT_NE(message_of([&] { load(good + "xx"); }).find("payload length mismatch"), std::string::npos);
  EXPECT_EQ(cause_of([&] { load(good.substr(0, 40)); }), "bad_checkpoint");
  auto header = good;
  header[20] = '#';
  EXPECT_EQ(cause_of([&] { load(header); }), "bad_checkpoint");
  EXPECT_EQ(cause_of([] { load_checkpoint<float>(fs::path("/nonexistent/x.cnvn")); }), "io");
}

TEST(Hash, GitBlobIds) {
  EXPECT_EQ(git_blob_sha1(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  EXPECT_EQ(git_blob_sha1("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
  const auto dir = scratch_dir();
  spit(dir / "h.txt", "hello\n");
  EXPECT_EQ(hash_file(dir / "h.txt"), "ce013625030ba8dba906f756967f9e9ca394464a");
  const auto ts = utc_timestamp();
  EXPECT_EQ(ts.size(), 20u);
  EXPECT_EQ(ts.back(), 'Z');
}

TEST(Manifest, RoundTrip) {
  RunManifest m{"pretrain", to_json(tiny_run()), 9, "2026-01-01T00:00:00Z", "2026-01-01T00:01:00Z",
                {{"corpus.fa", "abc"}}, {{"checkpoint.cnvn", "def"}}};
  const auto dir = scratch_dir();
  write_manifest(dir / "m.json", m);
  const auto back = read_manifest(dir / "m.json");
  EXPECT_EQ(back.command, "pretrain");
  EXPECT_EQ(back.seed, 9u);
  EXPECT_EQ(run_config_from_json(back.config), tiny_run());
  ASSERT_EQ(back.inputs.size(), 1u);
  EXPECT_EQ(back.inputs[0].hash, "abc");
  EXPECT_EQ(back.outputs[0].path, "checkpoint.cnvn");
  spit(dir / "bad.json", R"({"seed": 1})");
  EXPECT_EQ(cause_of([&] { read_manifest(dir / "bad.json"); }), "bad_manifest");
}

TEST(LossCsv, Format) {
  std::ostringstream out;
  write_loss_csv(out, "epoch", {"train_loss", "valid_top1"}, {{1.5, 0.25}, {1.0, 0.5}});
  EXPECT_EQ(out.str(), "epoch,train_loss,valid_top1\n1,1.5,0.25\n2,1,0.5\n");
  EXPECT_THROW(write_loss_csv(out, "epoch", {"a"}, {{1.0, 2.0}}), Error);
}

TEST(Bench, PreconditionsAndRows) {
  const auto cfg = small();
  const auto p = init_params<float>(cfg, 0);
  EXPECT_EQ(cause_of([&] { bench_throughput(p, cfg, {64}, 1); }), "bad_argument");
  EXPECT_EQ(cause_of([&] { bench_throughput(p, cfg, {128, 64}, 5); }), "bad_argument");
  EXPECT_EQ(cause_of([&] { bench_throughput(p, cfg, {}, 5); }), "bad_argument");

  const auto rows = bench_throughput(p, cfg, {256, 512, 1024, 2048}, 5);
  ASSERT_EQ(rows.size(), 4u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_TRUE(rows[i].ok);
    EXPECT_GT(rows[i].median_seconds, 0.0);
    EXPECT_EQ(rows[i].batch_size, 1u);
    EXPECT_EQ(rows[i].repeats, 5u);
    EXPECT_EQ(rows[i].n_params, param_count(cfg));
  }
  EXPECT_LT(rows.front().median_seconds, rows.back().median_seconds);
  EXPECT_EQ(doubling_ratios(rows).size(), 3u);

  std::stringstream csv;
  write_bench_csv(csv, rows);
  const auto back = read_bench_csv(csv);
  ASSERT_EQ(back.size(), rows.size());
  EXPECT_EQ(back[2].length, 1024u);
  EXPECT_NEAR(back[2].median_seconds, rows[2].median_seconds, 1e-8 * rows[2].median_seconds);
}

TEST(Bench, FailedLengthDoesNotStopTheRun) {
  const auto cfg = small(Variant::unet_downsample);
  const auto p = init_params<float>(cfg, 0);
  const auto rows = bench_throughput(p, cfg, {64, 66, 128}, 5);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_TRUE(rows[0].ok);
  EXPECT_FALSE(rows[1].ok);
  EXPECT_FALSE(rows[1].error.empty());
  EXPECT_TRUE(rows[2].ok);
  std::stringstream csv;
  write_bench_csv(csv, rows);
  EXPECT_NE(csv.str().find("66,,1,5,"), std::string::npos);
  const auto back = read_bench_csv(csv);
  EXPECT_FALSE(back[1].ok);
  const auto ratios = doubling_ratios(rows);
  ASSERT_EQ(ratios.size(), 1u);
  EXPECT_EQ(ratios[0].length, 64u);
}

TEST(Commands, PretrainWritesReloadableArtifacts) {
  const auto dir = scratch_dir();
  Rng rng(1);
  std::string text = ">r1\n";
  for (int i = 0; i < 1024; ++i) text += "ACGT"[rng.below(4)];
  spit(dir / "corpus.fa", text + "\n");

  PretrainRequest req{tiny_run(), dir / "corpus.fa", dir / "run1"};
  const auto out = cmd_pretrain(req);
  ASSERT_EQ(out.result.epoch_losses.size(), 1u);
  EXPECT_NEAR(out.result.step_losses.front(), std::log(4.0), 0.05);
  const auto ck = load_checkpoint<float>(out.checkpoint);
  EXPECT_EQ(ck.header.config, req.config.model);
  std::stringstream again;
  save_checkpoint(again, ck.params, ck.header.config, ck.header.meta);
  EXPECT_EQ(again.str(), slurp(out.checkpoint));

  const auto m = read_manifest(out.manifest);
  EXPECT_EQ(m.command, "pretrain");
  EXPECT_EQ(m.inputs[0].hash, hash_file(dir / "corpus.fa"));
  PretrainRequest replay{replay_config(m), m.inputs[0].path, dir / "run2"};
  const auto out2 = cmd_pretrain(replay);
  EXPECT_EQ(slurp(out.loss_csv), slurp(out2.loss_csv));
  EXPECT_EQ(slurp(dir / "run1" / "steps.csv"), slurp(dir / "run2" / "steps.csv"));
  EXPECT_EQ(slurp(out.checkpoint), slurp(out2.checkpoint));

  spit(dir / "corpus.fa", text + "A\n");
  EXPECT_EQ(cause_of([&] { replay_config(m); }), "input_changed");
  EXPECT_EQ(cause_of([&] { cmd_pretrain({tiny_run(), dir / "nope.fa", dir / "run3"}); }), "io");
  auto cls = tiny_run();
  cls.model.head = HeadKind::sequence_class;
  cls.model.n_classes = 2;
  EXPECT_EQ(cause_of([&] { cmd_pretrain({cls, dir / "corpus.fa", dir / "run4"}); }), "bad_config");
}

TEST(Commands, FinetuneEvalAndWarmStart) {
  const auto dir = scratch_dir();
  cmd_synth({"motif", {{"n", "80"}, {"length", "32"}}, 3, dir / "motif.tsv"});
  Rng rng(2);
  std::string text = ">r\n";
  for (int i = 0; i < 512; ++i) text += "ACGT"[rng.below(4)];
  spit(dir / "corpus.fa", text + "\n");
  const auto pre = cmd_pretrain({tiny_run(), dir / "corpus.fa", dir / "pre"});

  auto run = tiny_run();
  run.model.head = HeadKind::sequence_class;
  run.model.n_classes = 3;
  FinetuneRequest req;
  req.config = run;
  req.data = dir / "motif.tsv";
  req.out_dir = dir / "ft";
  const auto msg = message_of([&] { cmd_finetune(req); });
  EXPECT_NE(msg.find("n_classes=3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("2 classes"), std::string::npos) << msg;

  req.config.model.n_classes = 2;
  req.config.train.epochs = 2;
  req.checkpoint = pre.checkpoint;
  req.compare_scratch = true;
  const auto ft = cmd_finetune(req);
  EXPECT_EQ(ft.result.epoch_reports.size(), 2u);
  ASSERT_TRUE(ft.scratch.has_value());
  const auto cmp = slurp(dir / "ft" / "comparison.csv");
  EXPECT_EQ(cmp.substr(0, cmp.find('\n')), "metric,warm_start,scratch");
  EXPECT_NE(cmp.find("\ntop1,"), std::string::npos);
  EXPECT_NE(cmp.find("\nmcc,"), std::string::npos);
  const auto loss = slurp(dir / "ft" / "loss.csv");
  EXPECT_EQ(loss.substr(0, loss.find('\n')), "epoch,train_loss,valid_loss,valid_mcc,valid_f1,valid_top1,valid_auroc");

  auto other = req;
  other.config.model.hidden_dim = 8;
  other.compare_scratch = false;
  other.out_dir = dir / "ft2";
  EXPECT_EQ(cause_of([&] { cmd_finetune(other); }), "incompatible_checkpoint");

  EvalRequest ev{ft.checkpoint, dir / "motif.tsv", {"mcc", "top1"}, dir / "eval1.txt"};
  const auto r1 = cmd_eval(ev);
  ev.out = dir / "eval2.txt";
  cmd_eval(ev);
  EXPECT_EQ(slurp(dir / "eval1.txt"), slurp(dir / "eval2.txt"));
  EXPECT_TRUE(r1.mcc.has_value());
  EXPECT_FALSE(r1.f1.has_value());
  EXPECT_EQ(r1.n_examples, 80u);

  spit(dir / "empty.tsv", "");
  ev.data = dir / "empty.tsv";
  EXPECT_EQ(cause_of([&] { cmd_eval(ev); }), "empty_dataset");
  ev.data = dir / "motif.tsv";
  ev.checkpoint = pre.checkpoint;
  EXPECT_EQ(cause_of([&] { cmd_eval(ev); }), "incompatible_checkpoint");
}

TEST(Commands, EvalNineClassUsesMulticlassMcc) {
  const auto dir = scratch_dir();
  auto cfg = small();
  cfg.head = HeadKind::sequence_class;
  cfg.n_classes = 9;
  save_checkpoint(dir / "nine.cnvn", probe_params(cfg, 4, 0.3), cfg);
  Rng rng(8);
  LabeledSet set;
  set.n_classes = 9;
  for (int i = 0; i < 45; ++i) {
    std::string s;
    for (int t = 0; t < 24; ++t) s += "ACGT"[rng.below(4)];
    set.sequences.push_back(NucSeq::normalized(s));
    set.labels.push_back(i % 9);
  }
  {
    std::ofstream f(dir / "nine.tsv");
    write_tsv(f, set);
  }
  const auto r = cmd_eval({dir / "nine.cnvn", dir / "nine.tsv", {"mcc"}, dir / "r.txt"});
  ASSERT_TRUE(r.mcc.has_value());
  EXPECT_EQ(r.confusion.classes(), 9u);
  EXPECT_DOUBLE_EQ(*r.mcc, mcc_multiclass(r.confusion));

  auto two = cfg;
  two.n_classes = 2;
  save_checkpoint(dir / "two.cnvn", probe_params(two, 4, 0.3), two);
  const auto msg = message_of([&] { cmd_eval({dir / "two.cnvn", dir / "nine.tsv", {"mcc"}, dir / "r2.txt"}); });
  EXPECT_NE(msg.find("9 classes"), std::string::npos) << msg;
}

TEST(Commands, ReceptiveFieldReport) {
  ModelConfig c;
  c.hidden_dim = 4;
  const auto r = cmd_receptive_field({c, 500, 0.15, 1});
  EXPECT_EQ(r.analytic, 697u);
  EXPECT_EQ(r.empirical, 697u);
  EXPECT_TRUE(r.agree);
  EXPECT_TRUE(r.plan.feasible);
  EXPECT_LE(r.plan.receptive_field, 75u);
  std::ostringstream out;
  print_rf_report(out, r);
  EXPECT_NE(out.str().find("verdict: PASS"), std::string::npos);
  EXPECT_NE(out.str().find("dilation_base 1, receptive field 49"), std::string::npos);

  c.dilation_base = 1;
  c.kernel_size = 3;
  c.stem_kernel = 3;
  EXPECT_EQ(cmd_receptive_field({c, 500, 0.15, 1}).analytic, 13u);

  c.variant = Variant::unet_downsample;
  const auto u = cmd_receptive_field({c, 500, 0.15, 1});
  EXPECT_FALSE(u.analytic.has_value());
  EXPECT_NE(u.notice.find("unsupported"), std::string::npos);
}

TEST(Commands, SynthIsReproducible) {
  const auto dir = scratch_dir();
  const auto a = cmd_synth({"motif", {{"n", "1000"}}, 7, dir / "a.tsv"});
  EXPECT_EQ(a.n_records, 1000u);
  const auto set = load_tsv(a.data);
  EXPECT_EQ(std::count(set.labels.begin(), set.labels.end(), 1), 500);
  EXPECT_EQ(std::count(set.labels.begin(), set.labels.end(), 0), 500);

  const auto m = read_manifest(a.manifest);
  const auto b = cmd_synth(synth_request_from_manifest(m, dir / "b.tsv"));
  EXPECT_EQ(hash_file(a.data), hash_file(b.data));
  EXPECT_EQ(m.outputs[0].hash, hash_file(b.data));

  const auto lr = cmd_synth({"longrange", {{"n", "40"}, {"length", "96"}, {"gap_max", "64"}}, 1, dir / "lr.tsv"});
  const auto lr2 = cmd_synth(synth_request_from_manifest(read_manifest(lr.manifest), dir / "lr2.tsv"));
  EXPECT_EQ(slurp(lr.data), slurp(lr2.data));
  const auto km = cmd_synth({"kmer", {{"total_length", "1000"}, {"noise", "0.05"}}, 1, dir / "k.fa"});
  const auto recs = load_fasta(km.data);
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0].seq.size(), 1000u);
  const auto km2 = cmd_synth(synth_request_from_manifest(read_manifest(km.manifest), dir / "k2.fa"));
  EXPECT_EQ(slurp(km.data), slurp(km2.data));

  EXPECT_EQ(cause_of([&] { cmd_synth({"longrange", {{"length", "20"}}, 1, dir / "x.tsv"}); }), "bad_argument");
  EXPECT_EQ(cause_of([&] { cmd_synth({"motif", {{"length", "4"}}, 1, dir / "x.tsv"}); }), "bad_argument");
  EXPECT_EQ(cause_of([&] { cmd_synth({"motif", {{"size", "4"}}, 1, dir / "x.tsv"}); }), "bad_argument");
  EXPECT_EQ(cause_of([&] { cmd_synth({"motif", {{"n", "-3"}}, 1, dir / "x.tsv"}); }), "bad_argument");
  EXPECT_EQ(cause_of([&] { cmd_synth({"gc", {}, 1, dir / "x.tsv"}); }), "bad_argument");
}
