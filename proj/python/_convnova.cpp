#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "convnova/commands.hpp"
#include "convnova/error.hpp"
#include "convnova/genome.hpp"
#include "convnova/io.hpp"
#include "convnova/metrics.hpp"
#include "convnova/model.hpp"

namespace py = pybind11;
using namespace convnova;

namespace {

ModelConfig model_config(const std::string& json) {
  auto c = model_config_from_json(Json::parse(json));
  c.validate();
  return c;
}

RunConfig run_config(const std::string& json) { return run_config_from_json(Json::parse(json)); }

py::array_t<double> to_numpy(const Tensor<double>& t) {
  py::array_t<double> out(t.shape());
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::dict report_dict(const MetricReport& r) {
  py::dict d;
  d["n_examples"] = r.n_examples;
  for (const char* name : {"loss", "mcc", "f1", "top1", "auroc"})
    if (auto v = r.get(name)) d[name] = *v;
  std::vector<std::vector<std::size_t>> cm(r.confusion.classes(), std::vector<std::size_t>(r.confusion.classes()));
  for (std::size_t t = 0; t < cm.size(); ++t)
    for (std::size_t p = 0; p < cm.size(); ++p) cm[t][p] = r.confusion(t, p);
  d["confusion"] = cm;
  return d;
}

/// Double-precision model handle.
class Model {
 public:
  Model(const std::string& config_json, std::uint64_t seed, double init_std)
      : config_(model_config(config_json)), params_(init_params<double>(config_, seed, init_std)) {}
  Model(ModelConfig config, ModelParams<Tensor<double>> params) : config_(config), params_(std::move(params)) {}

  static Model load(const fs::path& path) {
    auto ck = load_checkpoint<double>(path);
    return Model(ck.header.config, std::move(ck.params));
  }

  void save(const fs::path& path) const { save_checkpoint(path, params_, config_); }
  std::string config() const { return to_json(config_).dump(); }
  std::size_t n_params() const { return count_scalars(params_); }

  py::array_t<double> features(const std::string& seq) const {
    return to_numpy(model_forward(one_hot<double>(NucSeq::normalized(seq)), params_, config_));
  }

  py::array_t<double> logits(const std::string& seq) const {
    const auto x = one_hot<double>(NucSeq::normalized(seq));
    return to_numpy(head_logits(model_forward(x, params_, config_), params_, config_));
  }

  std::size_t receptive_field_empirical(std::size_t length, std::uint64_t seed) const {
    return convnova::receptive_field_empirical(params_, config_, length, seed);
  }

 private:
  ModelConfig config_;
  ModelParams<Tensor<double>> params_;
};

}  // namespace

PYBIND11_MODULE(_convnova, m) {
  m.doc() = "Dilated gated convolution models for DNA sequences";

  static py::exception<Error> error(m, "Error", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      error((e.cause() + ": " + e.what()).c_str());
    } catch (const Json::exception& e) {
      error((std::string("bad_config: ") + e.what()).c_str());
    }
  });

  m.def("dilation_schedule", &dilation_schedule, py::arg("dilation_base"), py::arg("n_gcb"),
        py::arg("stage_size"));
  m.def("param_count", [](const std::string& cfg) { return param_count(model_config(cfg)); });
  m.def("receptive_field", [](const std::string& cfg) { return receptive_field_analytic(model_config(cfg)); });
  m.def(
      "plan_dilation",
      [](std::size_t length, double fraction, std::size_t kernel_size, std::size_t n_gcb, std::size_t stage_size,
         std::size_t stem_kernel) {
        const auto p = plan_dilation_for_fraction(length, fraction, kernel_size, n_gcb, stage_size, stem_kernel);
        return py::dict(py::arg("dilation_base") = p.dilation_base, py::arg("receptive_field") = p.receptive_field,
                        py::arg("feasible") = p.feasible);
      },
      py::arg("length"), py::arg("fraction"), py::arg("kernel_size") = 9, py::arg("n_gcb") = 5,
      py::arg("stage_size") = 5, py::arg("stem_kernel") = 9);
  m.def("one_hot", [](const std::string& seq) { return to_numpy(one_hot<double>(NucSeq::normalized(seq))); });

  py::class_<Model>(m, "Model")
      .def(py::init<const std::string&, std::uint64_t, double>(), py::arg("config"), py::arg("seed") = 0,
           py::arg("init_std") = kInitStddev)
      .def_static("load", &Model::load, py::arg("path"))
      .def("save", &Model::save, py::arg("path"))
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("n_params", &Model::n_params)
      .def("features", &Model::features, py::arg("sequence"))
      .def("logits", &Model::logits, py::arg("sequence"))
      .def("receptive_field_empirical", &Model::receptive_field_empirical, py::arg("length"), py::arg("seed") = 0);

  m.def("mcc_binary", py::overload_cast<double, double, double, double>(&mcc_binary), py::arg("tp"), py::arg("fp"),
        py::arg("fn"), py::arg("tn"));
  m.def(
      "mcc",
      [](const std::vector<std::int32_t>& truth, const std::vector<std::int32_t>& pred, std::size_t classes) {
        const auto c = Confusion::from(truth, pred, classes);
        return classes == 2 ? mcc_binary(c) : mcc_multiclass(c);
      },
      py::arg("truth"), py::arg("pred"), py::arg("classes"));
  m.def("f1_binary", py::overload_cast<double, double, double>(&f1_binary), py::arg("tp"), py::arg("fp"),
        py::arg("fn"));
  m.def("auroc", &auroc, py::arg("scores"), py::arg("labels"));

  m.def(
      "pretrain",
      [](const std::string& cfg, const fs::path& data, const fs::path& out_dir) {
        py::gil_scoped_release release;
        const auto r = cmd_pretrain({run_config(cfg), data, out_dir}).result;
        return std::make_pair(r.epoch_losses, r.step_losses);
      },
      py::arg("config"), py::arg("data"), py::arg("out_dir"));
  m.def(
      "finetune",
      [](const std::string& cfg, const fs::path& data, const fs::path& out_dir, std::optional<fs::path> valid,
         std::optional<fs::path> checkpoint, std::vector<std::string> metrics) {
        FinetuneRequest req;
        req.config = run_config(cfg);
        req.data = data;
        req.out_dir = out_dir;
        req.valid = valid;
        req.checkpoint = checkpoint;
        req.metrics = metrics;
        FinetuneOutcome out;
        {
          py::gil_scoped_release release;
          out = cmd_finetune(req);
        }
        return py::make_tuple(out.result.best_epoch, report_dict(out.result.best));
      },
      py::arg("config"), py::arg("data"), py::arg("out_dir"), py::arg("valid") = py::none(),
      py::arg("checkpoint") = py::none(), py::arg("metrics") = kAllMetrics);
  m.def(
      "evaluate",
      [](const fs::path& checkpoint, const fs::path& data, const fs::path& out, std::vector<std::string> metrics,
         std::size_t workers) { return report_dict(cmd_eval({checkpoint, data, metrics, out, workers})); },
      py::arg("checkpoint"), py::arg("data"), py::arg("out"), py::arg("metrics") = kAllMetrics,
      py::arg("workers") = 1);
  m.def(
      "bench",
      [](const std::string& cfg, const std::vector<std::size_t>& lengths, std::size_t repeats, const fs::path& out,
         std::uint64_t seed) {
        BenchRequest req{model_config(cfg), "f32", lengths, repeats, seed, out};
        std::vector<py::dict> rows;
        for (const auto& r : cmd_bench(req))
          rows.push_back(py::dict(py::arg("sequence_length") = r.length,
                                  py::arg("median_seconds") = r.median_seconds, py::arg("batch_size") = r.batch_size,
                                  py::arg("repeats") = r.repeats, py::arg("n_params") = r.n_params,
                                  py::arg("ok") = r.ok, py::arg("error") = r.error));
        return rows;
      },
      py::arg("config"), py::arg("lengths"), py::arg("repeats"), py::arg("out"), py::arg("seed") = 0);
  m.def(
      "synth",
      [](const std::string& generator, const std::map<std::string, std::string>& params, std::uint64_t seed,
         const fs::path& out) {
        const auto r = cmd_synth({generator, params, seed, out});
        return py::make_tuple(r.n_records, r.manifest);
      },
      py::arg("generator"), py::arg("params"), py::arg("seed"), py::arg("out"));
  m.def("hash_file", &hash_file, py::arg("path"));
}
