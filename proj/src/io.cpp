#include "convnova/io.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <istream>
#include <iterator>
#include <new>
#include <ostream>
#include <sstream>

#include "convnova/error.hpp"
#include "convnova/genome.hpp"

namespace convnova {

namespace {

std::size_t as_size(const Json& v, const std::string& key) {
  require(v.is_number_unsigned(), "bad_config", "config key '" + key + "' must be a non-negative integer");
  return v.get<std::size_t>();
}

double as_double(const Json& v, const std::string& key) {
  require(v.is_number(), "bad_config", "config key '" + key + "' must be a number");
  return v.get<double>();
}

std::string as_string(const Json& v, const std::string& key) {
  require(v.is_string(), "bad_config", "config key '" + key + "' must be a string");
  return v.get<std::string>();
}

void require_object(const Json& j, const std::string& what) {
  require(j.is_object(), "bad_config", what + " must be a JSON object");
}

std::string read_all(std::istream& in) { return {std::istreambuf_iterator<char>(in), {}}; }

std::ifstream open_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "io", "cannot open '" + path.string() + "'");
  return in;
}

std::ofstream create_binary(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "io", "cannot write '" + path.string() + "'");
  return out;
}

template <typename U>
void put_le(std::string& buf, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(std::string_view bytes, std::size_t pos) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= U(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  return v;
}

template <typename T>
using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

template <typename T>
std::string dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  fail("bad_checkpoint", "unsupported tensor dtype '" + dtype + "'");
}

template <typename S, typename T>
void decode_into(std::string_view bytes, Tensor<T>& out) {
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(std::bit_cast<S>(get_le<Bits<S>>(bytes, i * sizeof(S))));
}

struct ParsedCheckpoint {
  CheckpointHeader header;
  std::string_view payload;
};

ParsedCheckpoint parse_checkpoint(std::string_view bytes) {
  constexpr std::size_t prefix = kCheckpointMagic.size() + 4 + 8;
  require(bytes.size() >= prefix && bytes.substr(0, kCheckpointMagic.size()) == kCheckpointMagic, "bad_magic",
          "not a checkpoint (missing CNVN magic)");
  const auto version = get_le<std::uint32_t>(bytes, 4);
  require(version == kCheckpointVersion, "bad_version",
          "unsupported checkpoint version " + std::to_string(version) + " (expected " +
              std::to_string(kCheckpointVersion) + ")");
  const auto header_len = get_le<std::uint64_t>(bytes, 8);
  require(header_len <= bytes.size() - prefix, "bad_checkpoint", "checkpoint header is truncated");

  Json j;
  try {
    j = Json::parse(bytes.substr(prefix, header_len));
  } catch (const Json::exception& e) {
    fail("bad_checkpoint", std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  ParsedCheckpoint out;
  out.payload = bytes.substr(prefix + header_len);
  try {
    out.header.config = model_config_from_json(j.at("model"));
    out.header.meta = j.value("meta", Json::object());
    for (const auto& t : j.at("tensors")) {
      TensorEntry e;
      e.name = t.at("name").get<std::string>();
      e.shape = t.at("shape").get<Shape>();
      e.dtype = t.at("dtype").get<std::string>();
      e.offset = t.at("offset").get<std::uint64_t>();
      e.length = t.at("length").get<std::uint64_t>();
      out.header.tensors.push_back(std::move(e));
    }
  } catch (const Json::exception& e) {
    fail("bad_checkpoint", std::string("malformed checkpoint header: ") + e.what());
  }
  out.header.config.validate();

  std::uint64_t expected_offset = 0;
  for (const auto& e : out.header.tensors) {
    require(e.offset == expected_offset, "bad_checkpoint",
            "tensor '" + e.name + "' does not start where the previous one ends");
    require(e.length == shape_numel(e.shape) * dtype_size(e.dtype), "bad_checkpoint",
            "tensor '" + e.name + "' byte length does not match its shape");
    expected_offset += e.length;
  }
  require(expected_offset == out.payload.size(), "bad_checkpoint",
          "payload length mismatch: manifest covers " + std::to_string(expected_offset) + " bytes, file has " +
              std::to_string(out.payload.size()));
  return out;
}

}  // namespace

Json to_json(const ModelConfig& c) {
  return Json{{"hidden_dim", c.hidden_dim},     {"n_gcb", c.n_gcb},
              {"stage_size", c.stage_size},     {"dilation_base", c.dilation_base},
              {"kernel_size", c.kernel_size},   {"stem_kernel", c.stem_kernel},
              {"variant", to_string(c.variant)}, {"alphabet_size", c.alphabet_size},
              {"head", to_string(c.head)},       {"n_classes", c.n_classes},
              {"unet_depth", c.unet_depth}};
}

Json to_json(const TrainConfig& c) {
  return Json{{"learning_rate", c.learning_rate},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"weight_decay", c.weight_decay},
              {"eps", c.eps},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"max_steps", c.max_steps},
              {"lr_schedule", c.lr_schedule},
              {"seed", c.seed},
              {"precision", c.precision},
              {"mask_rate", c.mask_rate},
              {"window", c.window},
              {"window_stride", c.window_stride},
              {"train_fraction", c.train_fraction},
              {"select_metric", c.select_metric},
              {"workers", c.workers},
              {"init_std", c.init_std}};
}

ModelConfig model_config_from_json(const Json& j) {
  require_object(j, "model config");
  ModelConfig c;
  bool classes_given = false;
  for (const auto& [key, v] : j.items()) {
    if (key == "hidden_dim") c.hidden_dim = as_size(v, key);
    else if (key == "n_gcb") c.n_gcb = as_size(v, key);
    else if (key == "stage_size") c.stage_size = as_size(v, key);
    else if (key == "dilation_base") c.dilation_base = as_size(v, key);
    else if (key == "kernel_size") c.kernel_size = as_size(v, key);
    else if (key == "stem_kernel") c.stem_kernel = as_size(v, key);
    else if (key == "variant") c.variant = parse_variant(as_string(v, key));
    else if (key == "alphabet_size") c.alphabet_size = as_size(v, key);
    else if (key == "head") c.head = parse_head(as_string(v, key));
    else if (key == "n_classes") c.n_classes = as_size(v, key), classes_given = true;
    else if (key == "unet_depth") c.unet_depth = as_size(v, key);
    else fail("bad_config", "unknown model config key '" + key + "'");
  }
  if (!classes_given && c.head == HeadKind::sequence_class) c.n_classes = 2;
  return c;
}

TrainConfig train_config_from_json(const Json& j) {
  require_object(j, "train config");
  TrainConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "learning_rate") c.learning_rate = as_double(v, key);
    else if (key == "beta1") c.beta1 = as_double(v, key);
    else if (key == "beta2") c.beta2 = as_double(v, key);
    else if (key == "weight_decay") c.weight_decay = as_double(v, key);
    else if (key == "eps") c.eps = as_double(v, key);
    else if (key == "batch_size") c.batch_size = as_size(v, key);
    else if (key == "epochs") c.epochs = as_size(v, key);
    else if (key == "max_steps") c.max_steps = as_size(v, key);
    else if (key == "lr_schedule") c.lr_schedule = as_string(v, key);
    else if (key == "seed") c.seed = as_size(v, key);
    else if (key == "precision") c.precision = as_string(v, key);
    else if (key == "mask_rate") c.mask_rate = as_double(v, key);
    else if (key == "window") c.window = as_size(v, key);
    else if (key == "window_stride") c.window_stride = as_size(v, key);
    else if (key == "train_fraction") c.train_fraction = as_double(v, key);
    else if (key == "select_metric") c.select_metric = as_string(v, key);
    else if (key == "workers") c.workers = as_size(v, key);
    else if (key == "init_std") c.init_std = as_double(v, key);
    else fail("bad_config", "unknown train config key '" + key + "'");
  }
  return c;
}

Json to_json(const RunConfig& c) { return Json{{"model", to_json(c.model)}, {"train", to_json(c.train)}}; }

RunConfig run_config_from_json(const Json& j) {
  require_object(j, "config");
  RunConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "model") c.model = model_config_from_json(v);
    else if (key == "train") c.train = train_config_from_json(v);
    else fail("bad_config", "unknown config section '" + key + "'");
  }
  c.model.validate();
  c.train.validate();
  return c;
}

Json read_json(const std::filesystem::path& path) {
  auto in = open_binary(path);
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    fail("bad_config", path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const Json& j) {
  auto out = create_binary(path);
  out << j.dump(2) << '\n';
  require(out.good(), "io", "failed writing '" + path.string() + "'");
}

RunConfig load_run_config(const std::filesystem::path& path) {
  const Json j = read_json(path);
  try {
    return run_config_from_json(j);
  } catch (const Error& e) {
    fail(e.cause(), path.string() + ": " + e.what());
  }
}

template <typename T>
void save_checkpoint(std::ostream& out, const ModelParams<Tensor<T>>& params, const ModelConfig& config,
                     const Json& meta) {
  config.validate();
  Json tensors = Json::array();
  std::string payload;
  for_each_param(params, [&](const std::string& name, const Tensor<T>& t) {
    tensors.push_back(Json{{"name", name},
                           {"shape", t.shape()},
                           {"dtype", dtype_name<T>()},
                           {"offset", payload.size()},
                           {"length", t.size() * sizeof(T)}});
    for (T v : t.data()) put_le(payload, std::bit_cast<Bits<T>>(v));
  });
  const std::string header =
      Json{{"model", to_json(config)}, {"tensors", tensors}, {"meta", meta}}.dump();
  std::string prefix(kCheckpointMagic);
  put_le(prefix, kCheckpointVersion);
  put_le(prefix, static_cast<std::uint64_t>(header.size()));
  out << prefix << header << payload;
  require(out.good(), "io", "failed writing checkpoint");
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<Tensor<T>>& params,
                     const ModelConfig& config, const Json& meta) {
  auto out = create_binary(path);
  save_checkpoint(out, params, config, meta);
}

template <typename T>
Checkpoint<T> load_checkpoint(std::istream& in) {
  const std::string bytes = read_all(in);
  auto parsed = parse_checkpoint(bytes);
  Checkpoint<T> out{parsed.header, zero_params<T>(parsed.header.config)};
  std::size_t i = 0;
  const auto& entries = out.header.tensors;
  for_each_param(out.params, [&](const std::string& name, Tensor<T>& t) {
    require(i < entries.size(), "bad_checkpoint", "checkpoint is missing tensor '" + name + "'");
    const auto& e = entries[i++];
    require(e.name == name, "bad_checkpoint", "expected tensor '" + name + "', found '" + e.name + "'");
    require(e.shape == t.shape(), "bad_checkpoint",
            "tensor '" + name + "' has shape " + shape_str(e.shape) + ", config implies " + shape_str(t.shape()));
    const auto data = parsed.payload.substr(e.offset, e.length);
    if (e.dtype == "f32")
      decode_into<float>(data, t);
    else
      decode_into<double>(data, t);
  });
  require(i == entries.size(), "bad_checkpoint", "checkpoint has tensors the config does not use");
  return out;
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  auto in = open_binary(path);
  try {
    return load_checkpoint<T>(in);
  } catch (const Error& e) {
    fail(e.cause(), path.string() + ": " + e.what());
  }
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  auto in = open_binary(path);
  const std::string bytes = read_all(in);
  try {
    return parse_checkpoint(bytes).header;
  } catch (const Error& e) {
    fail(e.cause(), path.string() + ": " + e.what());
  }
}

std::string git_blob_sha1(std::string_view content) {
  const std::string prefix = "blob " + std::to_string(content.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  require(ctx != nullptr, "io", "cannot allocate a digest context");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, prefix.data(), prefix.size()) == 1 &&
                  EVP_DigestUpdate(ctx, content.data(), content.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, digest, &len) == 1;
  EVP_MD_CTX_free(ctx);
  require(ok, "io", "SHA-1 computation failed");
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

std::string hash_file(const std::filesystem::path& path) {
  auto in = open_binary(path);
  return git_blob_sha1(read_all(in));
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

namespace {

Json files_json(const std::vector<InputFile>& files) {
  Json out = Json::array();
  for (const auto& f : files) out.push_back(Json{{"path", f.path}, {"sha1", f.hash}});
  return out;
}

std::vector<InputFile> files_from_json(const Json& j) {
  std::vector<InputFile> out;
  for (const auto& f : j) out.push_back({f.at("path").get<std::string>(), f.at("sha1").get<std::string>()});
  return out;
}

}  // namespace

Json to_json(const RunManifest& m) {
  return Json{{"command", m.command},         {"config", m.config},     {"seed", m.seed},
              {"started", m.started},         {"finished", m.finished}, {"inputs", files_json(m.inputs)},
              {"outputs", files_json(m.outputs)}};
}

RunManifest manifest_from_json(const Json& j) {
  RunManifest m;
  try {
    m.command = j.at("command").get<std::string>();
    m.config = j.at("config");
    m.seed = j.at("seed").get<std::uint64_t>();
    m.started = j.value("started", "");
    m.finished = j.value("finished", "");
    m.inputs = files_from_json(j.value("inputs", Json::array()));
    m.outputs = files_from_json(j.value("outputs", Json::array()));
  } catch (const Json::exception& e) {
    fail("bad_manifest", std::string("malformed run manifest: ") + e.what());
  }
  return m;
}

void write_manifest(const std::filesystem::path& path, const RunManifest& m) { write_json(path, to_json(m)); }

RunManifest read_manifest(const std::filesystem::path& path) {
  auto in = open_binary(path);
  try {
    return manifest_from_json(Json::parse(in));
  } catch (const Json::exception& e) {
    fail("bad_manifest", path.string() + ": " + e.what());
  }
}

void write_loss_csv(std::ostream& out, const std::string& index_name, const std::vector<std::string>& columns,
                    const std::vector<std::vector<double>>& rows) {
  std::ostringstream s;
  s.precision(17);
  s << index_name;
  for (const auto& c : columns) s << ',' << c;
  s << '\n';
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i].size() == columns.size(), "shape_mismatch", "loss csv row has the wrong number of columns");
    s << i + 1;
    for (double v : rows[i]) s << ',' << v;
    s << '\n';
  }
  out << s.str();
}

template <typename T>
std::vector<BenchRow> bench_throughput(const ModelParams<Tensor<T>>& params, const ModelConfig& config,
                                       const std::vector<std::size_t>& lengths, std::size_t repeats,
                                       std::uint64_t seed) {
  require(repeats >= kMinBenchRepeats, "bad_argument",
          "repeats must be >= " + std::to_string(kMinBenchRepeats) + ", got " + std::to_string(repeats));
  require(!lengths.empty(), "bad_argument", "no benchmark lengths given");
  for (std::size_t i = 0; i < lengths.size(); ++i)
    require(lengths[i] >= 1 && (i == 0 || lengths[i] > lengths[i - 1]), "bad_argument",
            "benchmark lengths must be positive and strictly ascending");
  const std::size_t n_params = count_scalars(params);
  std::vector<BenchRow> rows;
  std::vector<std::vector<double>> times(lengths.size());
  for (std::size_t length : lengths) rows.push_back({length, 0.0, 1, repeats, n_params, true, {}});
  // Round r times every length once, so slow drift in machine load hits all lengths alike.
  for (std::size_t r = 0; r <= repeats; ++r) {
    for (std::size_t i = 0; i < lengths.size(); ++i) {
      if (!rows[i].ok) continue;
      try {
        Rng rng(seed + lengths[i]);
        Tensor<T> x({lengths[i], config.alphabet_size});
        for (std::size_t t = 0; t < lengths[i]; ++t) x.at(t, rng.below(4)) = T(1);
        const auto start = std::chrono::steady_clock::now();
        const auto logits = head_logits(model_forward(x, params, config), params, config);
        const auto stop = std::chrono::steady_clock::now();
        require(logits.size() > 0, "bench", "empty forward output");
        if (r > 0) times[i].push_back(std::chrono::duration<double>(stop - start).count());
      } catch (const std::bad_alloc&) {
        rows[i].ok = false;
        rows[i].error = "out of memory";
      } catch (const std::exception& e) {
        rows[i].ok = false;
        rows[i].error = e.what();
      }
    }
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i].ok) continue;
    auto& t = times[i];
    std::sort(t.begin(), t.end());
    const std::size_t m = t.size() / 2;
    rows[i].median_seconds = t.size() % 2 ? t[m] : 0.5 * (t[m - 1] + t[m]);
  }
  return rows;
}

void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows) {
  std::ostringstream s;
  s.precision(9);
  s << "sequence_length,median_seconds,batch_size,repeats,n_params,status\n";
  for (const auto& r : rows) {
    std::string status = r.ok ? "ok" : "failed: " + r.error;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    s << r.length << ',';
    if (r.ok) s << r.median_seconds;
    s << ',' << r.batch_size << ',' << r.repeats << ',' << r.n_params << ',' << status << '\n';
  }
  out << s.str();
}

std::vector<BenchRow> read_bench_csv(std::istream& in) {
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line.starts_with("sequence_length,"), "bad_csv",
          "bench csv lacks its header");
  std::vector<BenchRow> rows;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; cells.size() < 5 && std::getline(ss, cell, ',');) cells.push_back(cell);
    std::string status;
    std::getline(ss, status);
    require(cells.size() == 5, "bad_csv", "bench csv line " + std::to_string(lineno) + " has too few fields");
    BenchRow r;
    try {
      r.length = std::stoull(cells[0]);
      r.ok = status == "ok";
      r.median_seconds = r.ok ? std::stod(cells[1]) : 0.0;
      r.batch_size = std::stoull(cells[2]);
      r.repeats = std::stoull(cells[3]);
      r.n_params = std::stoull(cells[4]);
    } catch (const std::exception&) {
      fail("bad_csv", "bench csv line " + std::to_string(lineno) + " has a malformed number");
    }
    if (!r.ok) r.error = status.starts_with("failed: ") ? status.substr(8) : status;
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<DoublingRatio> doubling_ratios(const std::vector<BenchRow>& rows) {
  std::vector<DoublingRatio> out;
  for (const auto& r : rows) {
    if (!r.ok) continue;
    for (const auto& s : rows)
      if (s.ok && s.length == 2 * r.length) out.push_back({r.length, s.median_seconds / r.median_seconds});
  }
  return out;
}

#define CONVNOVA_INSTANTIATE(T)                                                                              \
  template void save_checkpoint<T>(std::ostream&, const ModelParams<Tensor<T>>&, const ModelConfig&,        \
                                   const Json&);                                                             \
  template void save_checkpoint<T>(const std::filesystem::path&, const ModelParams<Tensor<T>>&,              \
                                   const ModelConfig&, const Json&);                                         \
  template Checkpoint<T> load_checkpoint<T>(std::istream&);                                                  \
  template Checkpoint<T> load_checkpoint<T>(const std::filesystem::path&);                                   \
  template std::vector<BenchRow> bench_throughput<T>(const ModelParams<Tensor<T>>&, const ModelConfig&,     \
                                                     const std::vector<std::size_t>&, std::size_t, std::uint64_t);

CONVNOVA_INSTANTIATE(float)
CONVNOVA_INSTANTIATE(double)

}  // namespace convnova
