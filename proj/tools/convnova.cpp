#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "convnova/commands.hpp"
#include "convnova/error.hpp"

using namespace convnova;

namespace {

std::size_t env_workers() {
  const char* v = std::getenv("CONVNOVA_WORKERS");
  if (v == nullptr || *v == '\0') return 1;
  char* end = nullptr;
  const unsigned long n = std::strtoul(v, &end, 10);
  require(*end == '\0' && n >= 1, "bad_argument", std::string("CONVNOVA_WORKERS must be a positive integer, got '") + v + "'");
  return n;
}

struct Common {
  std::string config;
  std::string manifest;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
};

void add_common(CLI::App* cmd, Common& c, bool with_manifest) {
  cmd->add_option("--config", c.config, "JSON config with 'model' and 'train' sections")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Override the configured seed");
  cmd->add_option("--workers", c.workers, "Threads per batch (default: $CONVNOVA_WORKERS or 1)");
  if (with_manifest)
    cmd->add_option("--manifest", c.manifest, "Re-run the configuration recorded in a manifest")
        ->check(CLI::ExistingFile)
        ->excludes("--config");
}

RunConfig resolve(const Common& c, std::optional<RunManifest>& manifest) {
  RunConfig cfg;
  if (!c.manifest.empty()) {
    manifest = read_manifest(c.manifest);
    cfg = replay_config(*manifest);
  } else if (!c.config.empty()) {
    cfg = load_run_config(c.config);
  }
  if (c.seed) cfg.train.seed = *c.seed;
  cfg.train.workers = c.workers ? *c.workers : env_workers();
  return cfg;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

std::string fmt(const std::optional<double>& v) { return v ? std::to_string(*v) : "-"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"convnova: dilated gated convolutions for DNA sequences"};
  app.require_subcommand(1);

  Common pre_opts;
  std::string pre_data, pre_out;
  auto* pre = app.add_subcommand("pretrain", "Masked-base pretraining on a FASTA corpus");
  add_common(pre, pre_opts, true);
  pre->add_option("--data", pre_data, "FASTA corpus");
  pre->add_option("--out", pre_out, "Output directory")->required();

  Common ft_opts;
  std::string ft_data, ft_valid, ft_ckpt, ft_out, ft_metrics = "mcc,f1,top1,auroc";
  bool ft_compare = false;
  auto* ft = app.add_subcommand("finetune", "Fine-tune a sequence classifier on a labeled TSV");
  add_common(ft, ft_opts, true);
  ft->add_option("--data", ft_data, "Training TSV (sequence<TAB>label)");
  ft->add_option("--valid", ft_valid, "Validation TSV; otherwise split by train_fraction");
  ft->add_option("--checkpoint", ft_ckpt, "Warm-start checkpoint")->check(CLI::ExistingFile);
  ft->add_option("--out", ft_out, "Output directory")->required();
  ft->add_option("--metrics", ft_metrics, "Comma-separated metrics");
  ft->add_flag("--compare-scratch", ft_compare, "Also train from scratch and write comparison.csv");

  std::string ev_ckpt, ev_data, ev_out, ev_metrics = "mcc,f1,top1,auroc";
  std::optional<std::size_t> ev_workers;
  auto* ev = app.add_subcommand("eval", "Evaluate a classifier checkpoint on a labeled TSV");
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint")->required();
  ev->add_option("--data", ev_data, "Labeled TSV")->required();
  ev->add_option("--metrics", ev_metrics, "Comma-separated metrics");
  ev->add_option("--out", ev_out, "Report file")->required();
  ev->add_option("--workers", ev_workers, "Threads (default: $CONVNOVA_WORKERS or 1)");

  std::string bn_config, bn_lengths = "4096,8192,16384,32768,65536,131072", bn_out, bn_precision = "f32";
  std::size_t bn_repeats = kMinBenchRepeats;
  std::uint64_t bn_seed = 0;
  auto* bn = app.add_subcommand("bench", "Forward-pass wall time versus sequence length at batch 1");
  bn->add_option("--config", bn_config, "JSON config (model section is used)")->check(CLI::ExistingFile);
  bn->add_option("--lengths", bn_lengths, "Comma-separated ascending lengths");
  bn->add_option("--repeats", bn_repeats, "Timed runs per length (>= 5)");
  bn->add_option("--seed", bn_seed, "Seed for weights and inputs");
  bn->add_option("--precision", bn_precision, "f32 or f64");
  bn->add_option("--out", bn_out, "CSV output")->required();

  std::string rf_config;
  RfRequest rf_req;
  auto* rf = app.add_subcommand("rf", "Analytic and empirical receptive field, plus a dilation plan");
  rf->add_option("--config", rf_config, "JSON config (model section is used)")->check(CLI::ExistingFile);
  rf->add_option("--length", rf_req.length, "Input length for the dilation plan");
  rf->add_option("--fraction", rf_req.fraction, "Target receptive-field fraction of the length");
  rf->add_option("--seed", rf_req.seed, "Seed for the probe");

  SynthRequest sy_req;
  std::vector<std::string> sy_params;
  std::string sy_manifest, sy_out;
  auto* sy = app.add_subcommand("synth", "Generate a synthetic dataset and its manifest");
  auto* gen = sy->add_option("--generator", sy_req.generator, "motif, longrange or kmer");
  sy->add_option("--param", sy_params, "Generator parameter key=value (repeatable)");
  sy->add_option("--seed", sy_req.seed, "Generator seed");
  sy->add_option("--manifest", sy_manifest, "Regenerate from a synth manifest")
      ->check(CLI::ExistingFile)
      ->excludes(gen);
  sy->add_option("--out", sy_out, "Output file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    std::optional<RunManifest> manifest;
    if (pre->parsed()) {
      PretrainRequest req{resolve(pre_opts, manifest), pre_data, pre_out};
      if (manifest && pre_data.empty()) req.data = manifest->inputs.at(0).path;
      require(!req.data.empty(), "bad_argument", "pretrain needs --data or --manifest");
      const auto out = cmd_pretrain(req);
      for (std::size_t e = 0; e < out.result.epoch_losses.size(); ++e)
        std::cout << "epoch " << e + 1 << " loss " << out.result.epoch_losses[e] << '\n';
      std::cout << "steps " << out.result.steps << ", checkpoint " << out.checkpoint.string() << '\n';
    } else if (ft->parsed()) {
      FinetuneRequest req;
      req.config = resolve(ft_opts, manifest);
      req.data = ft_data;
      req.out_dir = ft_out;
      req.metrics = split_list(ft_metrics);
      req.compare_scratch = ft_compare;
      if (!ft_valid.empty()) req.valid = ft_valid;
      if (!ft_ckpt.empty()) req.checkpoint = ft_ckpt;
      if (manifest && ft_data.empty()) req.data = manifest->inputs.at(0).path;
      require(!req.data.empty(), "bad_argument", "finetune needs --data or --manifest");
      const auto out = cmd_finetune(req);
      for (std::size_t e = 0; e < out.result.epoch_reports.size(); ++e) {
        const auto& r = out.result.epoch_reports[e];
        std::cout << "epoch " << e + 1 << " train_loss " << out.result.epoch_losses[e] << " valid_loss "
                  << fmt(r.loss) << " top1 " << fmt(r.top1) << " mcc " << fmt(r.mcc) << '\n';
      }
      std::cout << "best epoch " << out.result.best_epoch << ", report " << out.report.string() << '\n';
      if (out.scratch)
        std::cout << "scratch best " << req.config.train.select_metric << ' '
                  << fmt(out.scratch->best.get(req.config.train.select_metric)) << " vs warm start "
                  << fmt(out.result.best.get(req.config.train.select_metric)) << '\n';
    } else if (ev->parsed()) {
      const auto report = cmd_eval({ev_ckpt, ev_data, split_list(ev_metrics), ev_out,
                                    ev_workers ? *ev_workers : env_workers()});
      write_report(std::cout, report);
    } else if (bn->parsed()) {
      BenchRequest req;
      if (!bn_config.empty()) req.model = load_run_config(bn_config).model;
      for (const auto& s : split_list(bn_lengths)) {
        try {
          req.lengths.push_back(std::stoull(s));
        } catch (const std::exception&) {
          fail("bad_argument", "length '" + s + "' is not an integer");
        }
      }
      req.repeats = bn_repeats;
      req.seed = bn_seed;
      req.precision = bn_precision;
      req.out = bn_out;
      const auto rows = cmd_bench(req);
      write_bench_csv(std::cout, rows);
      for (const auto& r : doubling_ratios(rows))
        std::cout << "ratio " << 2 * r.length << '/' << r.length << " = " << r.ratio << '\n';
    } else if (rf->parsed()) {
      if (!rf_config.empty()) rf_req.model = load_run_config(rf_config).model;
      print_rf_report(std::cout, cmd_receptive_field(rf_req));
    } else if (sy->parsed()) {
      SynthRequest req = sy_req;
      if (!sy_manifest.empty()) {
        require(sy_params.empty(), "bad_argument", "--param cannot be combined with --manifest");
        req = synth_request_from_manifest(read_manifest(sy_manifest), sy_out);
      } else {
        require(!req.generator.empty(), "bad_argument", "synth needs --generator or --manifest");
        req.out = sy_out;
        for (const auto& kv : sy_params) {
          const auto eq = kv.find('=');
          require(eq != std::string::npos && eq > 0, "bad_argument", "--param expects key=value, got '" + kv + "'");
          req.params[kv.substr(0, eq)] = kv.substr(eq + 1);
        }
      }
      const auto out = cmd_synth(req);
      std::cout << "wrote " << out.n_records << " records to " << out.data.string() << ", manifest "
                << out.manifest.string() << '\n';
    }
  } catch (const Error& e) {
    std::cerr << "error [" << e.cause() << "]: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
