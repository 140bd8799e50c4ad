#include "convnova/commands.hpp"

#include <fstream>
#include <ostream>

#include "convnova/error.hpp"
#include "convnova/genome.hpp"

namespace convnova {

namespace {

template <typename F>
decltype(auto) with_precision(const std::string& precision, F&& f) {
  if (precision == "f64") return f(double{});
  require(precision == "f32", "bad_config", "precision must be 'f32' or 'f64'");
  return f(float{});
}

std::ofstream create_text(const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "io", "cannot write '" + path.string() + "'");
  return out;
}

void prepare_dir(const fs::path& dir) {
  require(!dir.empty(), "bad_argument", "no output directory given");
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec && fs::is_directory(dir), "io", "cannot create output directory '" + dir.string() + "'");
}

InputFile describe(const fs::path& path) { return {path.string(), hash_file(path)}; }

/// Everything except the head must match for a warm start.
bool same_backbone(ModelConfig a, ModelConfig b) {
  a.head = b.head;
  a.n_classes = b.n_classes;
  return a == b;
}

std::string checkpoint_dtype(const CheckpointHeader& header) {
  require(!header.tensors.empty(), "bad_checkpoint", "checkpoint holds no tensors");
  return header.tensors.front().dtype;
}

std::vector<std::vector<double>> finetune_rows(const FinetuneResult& r, const std::vector<std::string>& columns) {
  std::vector<std::vector<double>> rows;
  for (std::size_t e = 0; e < r.epoch_reports.size(); ++e) {
    std::vector<double> row{r.epoch_losses[e]};
    for (std::size_t c = 1; c < columns.size(); ++c)
      row.push_back(r.epoch_reports[e].get(columns[c].substr(6)).value_or(0.0));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::size_t param_size(const std::map<std::string, std::string>& params, const std::string& key,
                       std::size_t fallback) {
  auto it = params.find(key);
  if (it == params.end()) return fallback;
  const auto& s = it->second;
  require(!s.empty() && s.find_first_not_of("0123456789") == std::string::npos, "bad_argument",
          "generator parameter '" + key + "' must be a non-negative integer, got '" + s + "'");
  return std::stoull(s);
}

double param_double(const std::map<std::string, std::string>& params, const std::string& key, double fallback) {
  auto it = params.find(key);
  if (it == params.end()) return fallback;
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(it->second, &used);
  } catch (const std::exception&) {
  }
  require(used == it->second.size() && used > 0, "bad_argument",
          "generator parameter '" + key + "' must be a number, got '" + it->second + "'");
  return v;
}

std::string param_string(const std::map<std::string, std::string>& params, const std::string& key,
                         const std::string& fallback) {
  auto it = params.find(key);
  return it == params.end() ? fallback : it->second;
}

void reject_unknown(const std::map<std::string, std::string>& params, const std::vector<std::string>& known,
                    const std::string& generator) {
  for (const auto& [key, value] : params)
    require(std::find(known.begin(), known.end(), key) != known.end(), "bad_argument",
            "generator '" + generator + "' has no parameter '" + key + "'");
}

}  // namespace

PretrainOutcome cmd_pretrain(const PretrainRequest& request) {
  const auto& cfg = request.config;
  cfg.model.validate();
  cfg.train.validate();
  require(cfg.model.head == HeadKind::mlm, "bad_config", "pretraining needs the mlm head, config has '" +
                                                             to_string(cfg.model.head) + "'");
  prepare_dir(request.out_dir);
  RunManifest manifest{"pretrain", to_json(cfg), cfg.train.seed, utc_timestamp(), {}, {describe(request.data)}, {}};

  std::vector<NucSeq> corpus;
  for (auto& rec : load_fasta(request.data)) corpus.push_back(std::move(rec.seq));

  PretrainOutcome out;
  out.checkpoint = request.out_dir / "checkpoint.cnvn";
  out.loss_csv = request.out_dir / "loss.csv";
  out.manifest = request.out_dir / "manifest.json";
  with_precision(cfg.train.precision, [&](auto tag) {
    using T = decltype(tag);
    auto params = init_params<T>(cfg.model, cfg.train.seed, cfg.train.init_std);
    out.result = pretrain_mlm(params, cfg.model, corpus, cfg.train);
    save_checkpoint(out.checkpoint, params, cfg.model,
                    Json{{"command", "pretrain"}, {"seed", cfg.train.seed}, {"steps", out.result.steps}});
  });

  std::vector<std::vector<double>> epochs, steps;
  for (double v : out.result.epoch_losses) epochs.push_back({v});
  for (double v : out.result.step_losses) steps.push_back({v});
  {
    auto f = create_text(out.loss_csv);
    write_loss_csv(f, "epoch", {"loss"}, epochs);
    auto g = create_text(request.out_dir / "steps.csv");
    write_loss_csv(g, "step", {"loss"}, steps);
  }
  manifest.finished = utc_timestamp();
  manifest.outputs = {describe(out.checkpoint), describe(out.loss_csv)};
  write_manifest(out.manifest, manifest);
  return out;
}

FinetuneOutcome cmd_finetune(const FinetuneRequest& request) {
  const auto& cfg = request.config;
  cfg.model.validate();
  cfg.train.validate();
  require(cfg.model.head == HeadKind::sequence_class, "bad_config",
          "fine-tuning needs the sequence_class head, config has '" + to_string(cfg.model.head) + "'");
  prepare_dir(request.out_dir);
  RunManifest manifest{"finetune", to_json(cfg), cfg.train.seed, utc_timestamp(), {}, {describe(request.data)}, {}};

  LabeledSet train_set = load_tsv(request.data);
  LabeledSet valid_set;
  if (request.valid) {
    valid_set = load_tsv(*request.valid);
    manifest.inputs.push_back(describe(*request.valid));
  } else {
    Rng rng(cfg.train.seed);
    std::tie(train_set, valid_set) = split(train_set, cfg.train.train_fraction, rng);
    require(!valid_set.sequences.empty(), "bad_config",
            "validation split is empty; lower train_fraction or pass a validation file");
  }
  const std::size_t data_classes = std::max(train_set.n_classes, valid_set.n_classes);
  train_set.n_classes = valid_set.n_classes = data_classes;
  require(cfg.model.n_classes == data_classes, "class_mismatch",
          "config has n_classes=" + std::to_string(cfg.model.n_classes) + " but the data has " +
              std::to_string(data_classes) + " classes");

  std::optional<CheckpointHeader> warm;
  if (request.checkpoint) {
    warm = read_checkpoint_header(*request.checkpoint);
    require(same_backbone(warm->config, cfg.model), "incompatible_checkpoint",
            "checkpoint backbone " + to_json(warm->config).dump() + " does not match config " +
                to_json(cfg.model).dump());
    manifest.inputs.push_back(describe(*request.checkpoint));
  }

  FinetuneOutcome out;
  out.checkpoint = request.out_dir / "checkpoint.cnvn";
  out.report = request.out_dir / "metrics.txt";
  out.manifest = request.out_dir / "manifest.json";
  with_precision(cfg.train.precision, [&](auto tag) {
    using T = decltype(tag);
    auto scratch = init_params<T>(cfg.model, cfg.train.seed, cfg.train.init_std);
    auto params = scratch;
    if (warm) {
      auto ck = load_checkpoint<T>(*request.checkpoint);
      params = std::move(ck.params);
      if (warm->config.head != cfg.model.head || warm->config.n_classes != cfg.model.n_classes)
        reset_head(params, cfg.model, cfg.train.seed);
    }
    out.result = finetune(params, cfg.model, train_set, valid_set, cfg.train, request.metrics);
    save_checkpoint(out.checkpoint, params, cfg.model,
                    Json{{"command", "finetune"}, {"seed", cfg.train.seed}, {"best_epoch", out.result.best_epoch}});
    if (warm && request.compare_scratch)
      out.scratch = finetune(scratch, cfg.model, train_set, valid_set, cfg.train, request.metrics);
  });

  std::vector<std::string> columns{"train_loss", "valid_loss"};
  for (const auto& m : request.metrics) columns.push_back("valid_" + m);
  {
    auto f = create_text(out.report);
    write_report(f, out.result.best);
    auto g = create_text(request.out_dir / "loss.csv");
    write_loss_csv(g, "epoch", columns, finetune_rows(out.result, columns));
  }
  manifest.outputs = {describe(out.checkpoint), describe(out.report)};
  if (out.scratch) {
    const fs::path cmp = request.out_dir / "comparison.csv";
    auto f = create_text(cmp);
    f.precision(17);
    f << "metric,warm_start,scratch\n";
    std::vector<std::string> names{"loss"};
    names.insert(names.end(), request.metrics.begin(), request.metrics.end());
    for (const auto& m : names)
      f << m << ',' << out.result.best.get(m).value_or(0.0) << ',' << out.scratch->best.get(m).value_or(0.0)
        << '\n';
    f.close();
    manifest.outputs.push_back(describe(cmp));
  }
  manifest.finished = utc_timestamp();
  write_manifest(out.manifest, manifest);
  return out;
}

MetricReport cmd_eval(const EvalRequest& request) {
  const auto header = read_checkpoint_header(request.checkpoint);
  require(header.config.head == HeadKind::sequence_class, "incompatible_checkpoint",
          "evaluation needs a sequence_class checkpoint, this one has the '" + to_string(header.config.head) +
              "' head");
  LabeledSet set = load_tsv(request.data);
  set.validate();
  require(set.n_classes <= header.config.n_classes, "class_mismatch",
          "data has " + std::to_string(set.n_classes) + " classes but the checkpoint predicts " +
              std::to_string(header.config.n_classes));
  set.n_classes = header.config.n_classes;
  const auto report = with_precision(checkpoint_dtype(header), [&](auto tag) {
    using T = decltype(tag);
    const auto ck = load_checkpoint<T>(request.checkpoint);
    return evaluate(ck.params, ck.header.config, set, request.metrics, request.workers);
  });
  auto f = create_text(request.out);
  write_report(f, report);
  require(f.good(), "io", "failed writing '" + request.out.string() + "'");
  return report;
}

std::vector<BenchRow> cmd_bench(const BenchRequest& request) {
  request.model.validate();
  const auto rows = with_precision(request.precision, [&](auto tag) {
    using T = decltype(tag);
    const auto params = init_params<T>(request.model, request.seed);
    return bench_throughput(params, request.model, request.lengths, request.repeats, request.seed);
  });
  auto f = create_text(request.out);
  write_bench_csv(f, rows);
  return rows;
}

RfReport cmd_receptive_field(const RfRequest& request) {
  const auto& cfg = request.model;
  cfg.validate();
  RfReport r;
  r.length = request.length;
  r.fraction = request.fraction;
  r.plan = plan_dilation_for_fraction(request.length, request.fraction, cfg.kernel_size, cfg.n_gcb, cfg.stage_size,
                                      cfg.stem_kernel);
  if (cfg.variant == Variant::unet_downsample) {
    r.notice = "analytic receptive field is unsupported for the unet_downsample variant";
    return r;
  }
  r.analytic = receptive_field_analytic(cfg);
  r.probe_length = std::max<std::size_t>(2 * *r.analytic, 64);
  r.empirical = receptive_field_empirical(probe_params(cfg, request.seed), cfg, r.probe_length, request.seed);
  r.agree = r.analytic == r.empirical;
  if (cfg.hidden_dim < 4) r.notice = "hidden_dim < 4: layer norm over so few channels can hide influence";
  return r;
}

void print_rf_report(std::ostream& out, const RfReport& r) {
  if (r.analytic) {
    out << "analytic receptive field: " << *r.analytic << '\n';
    out << "empirical receptive field: " << *r.empirical << " (probe length " << r.probe_length << ")\n";
    out << "verdict: " << (r.agree ? "PASS" : "FAIL") << '\n';
  }
  if (!r.notice.empty()) out << "note: " << r.notice << '\n';
  out << "plan for fraction " << r.fraction << " of length " << r.length << ": ";
  if (r.plan.feasible)
    out << "dilation_base " << r.plan.dilation_base << ", receptive field " << r.plan.receptive_field << '\n';
  else
    out << "infeasible, base 1 already reaches " << r.plan.receptive_field << '\n';
}

SynthOutcome cmd_synth(const SynthRequest& request) {
  require(!request.out.empty(), "bad_argument", "no output path given");
  const auto& p = request.params;
  Rng rng(request.seed);
  SynthOutcome out;
  out.data = request.out;
  out.manifest = fs::path(request.out.string() + ".manifest.json");
  if (request.generator == "motif") {
    reject_unknown(p, {"n", "length", "motif"}, "motif");
    const std::size_t n = param_size(p, "n", 1000), length = param_size(p, "length", 64);
    const std::string motif = param_string(p, "motif", "TATAAT");
    out.params = Json{{"n", n}, {"length", length}, {"motif", motif}};
    const auto set = synth_motif(n, length, NucSeq::normalized(motif), rng);
    auto f = create_text(out.data);
    write_tsv(f, set);
    out.n_records = set.size();
  } else if (request.generator == "longrange") {
    reject_unknown(p, {"n", "length", "gap_min", "gap_max", "motif_a", "motif_b"}, "longrange");
    LongRangeSpec spec;
    spec.n = param_size(p, "n", spec.n);
    spec.length = param_size(p, "length", spec.length);
    spec.gap_min = param_size(p, "gap_min", spec.gap_min);
    spec.gap_max = param_size(p, "gap_max", spec.gap_max);
    spec.motif_a = param_string(p, "motif_a", spec.motif_a);
    spec.motif_b = param_string(p, "motif_b", spec.motif_b);
    out.params = Json{{"n", spec.n},           {"length", spec.length},   {"gap_min", spec.gap_min},
                      {"gap_max", spec.gap_max}, {"motif_a", spec.motif_a}, {"motif_b", spec.motif_b}};
    const auto set = synth_longrange(spec, rng);
    auto f = create_text(out.data);
    write_tsv(f, set);
    out.n_records = set.size();
  } else if (request.generator == "kmer") {
    reject_unknown(p, {"total_length", "vocab_size", "word_length", "noise"}, "kmer");
    const std::size_t total = param_size(p, "total_length", 100000), vocab = param_size(p, "vocab_size", 16),
                      word = param_size(p, "word_length", 6);
    const double noise = param_double(p, "noise", 0.02);
    out.params = Json{{"total_length", total}, {"vocab_size", vocab}, {"word_length", word}, {"noise", noise}};
    const auto corpus = synth_kmer_corpus(total, vocab, word, noise, rng);
    auto f = create_text(out.data);
    f << ">kmer_corpus\n";
    for (std::size_t i = 0; i < corpus.size(); i += 80) f << corpus.str().substr(i, 80) << '\n';
    out.n_records = 1;
  } else {
    fail("bad_argument", "unknown generator '" + request.generator + "' (expected motif, longrange or kmer)");
  }
  RunManifest m{"synth", Json{{"generator", request.generator}, {"params", out.params}}, request.seed,
                utc_timestamp(), utc_timestamp(), {}, {describe(out.data)}};
  write_manifest(out.manifest, m);
  return out;
}

SynthRequest synth_request_from_manifest(const RunManifest& manifest, const fs::path& out) {
  require(manifest.command == "synth", "bad_manifest",
          "expected a synth manifest, got command '" + manifest.command + "'");
  SynthRequest r;
  r.seed = manifest.seed;
  r.out = out;
  try {
    r.generator = manifest.config.at("generator").get<std::string>();
    for (const auto& [key, v] : manifest.config.at("params").items())
      r.params[key] = v.is_string() ? v.get<std::string>() : v.dump();
  } catch (const Json::exception& e) {
    fail("bad_manifest", std::string("synth manifest lacks generator parameters: ") + e.what());
  }
  return r;
}

RunConfig replay_config(const RunManifest& manifest) {
  for (const auto& in : manifest.inputs) {
    require(fs::exists(in.path), "io", "manifest input '" + in.path + "' no longer exists");
    require(hash_file(in.path) == in.hash, "input_changed",
            "manifest input '" + in.path + "' changed since the recorded run");
  }
  return run_config_from_json(manifest.config);
}

}  // namespace convnova
