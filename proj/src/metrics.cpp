#include "convnova/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "convnova/error.hpp"

namespace convnova {

Confusion::Confusion(std::size_t classes) : k_(classes), counts_(classes * classes, 0) {
  require(classes >= 1, "bad_argument", "confusion matrix needs at least one class");
}

Confusion Confusion::from(const std::vector<std::int32_t>& truth, const std::vector<std::int32_t>& pred,
                          std::size_t classes) {
  require(truth.size() == pred.size(), "shape_mismatch", "confusion: truth and prediction lengths differ");
  Confusion c(classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    require(truth[i] >= 0 && pred[i] >= 0, "bad_label", "confusion: negative class index");
    c.add(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(pred[i]));
  }
  return c;
}

void Confusion::add(std::size_t truth, std::size_t pred, std::size_t count) {
  require(truth < k_ && pred < k_, "bad_label", "confusion: class index out of range");
  counts_[truth * k_ + pred] += count;
}

std::size_t Confusion::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::size_t{0}); }

std::size_t Confusion::row_sum(std::size_t truth) const {
  std::size_t s = 0;
  for (std::size_t p = 0; p < k_; ++p) s += (*this)(truth, p);
  return s;
}

std::size_t Confusion::col_sum(std::size_t pred) const {
  std::size_t s = 0;
  for (std::size_t t = 0; t < k_; ++t) s += (*this)(t, pred);
  return s;
}

double mcc_binary(double tp, double fp, double fn, double tn) {
  const double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (denom == 0.0) return 0.0;
  return (tp * tn - fp * fn) / std::sqrt(denom);
}

double mcc_binary(const Confusion& c) {
  require(c.classes() == 2, "bad_argument", "mcc_binary needs a 2 x 2 confusion matrix");
  require(c.total() > 0, "empty_confusion", "mcc_binary: confusion matrix is empty");
  return mcc_binary(double(c(1, 1)), double(c(0, 1)), double(c(1, 0)), double(c(0, 0)));
}

double mcc_multiclass(const Confusion& c) {
  require(c.total() > 0, "empty_confusion", "mcc_multiclass: confusion matrix is empty");
  const double n = double(c.total());
  double trace = 0, tp_sum = 0, tt = 0, pp = 0;
  for (std::size_t k = 0; k < c.classes(); ++k) {
    const double t = double(c.row_sum(k));
    const double p = double(c.col_sum(k));
    trace += double(c(k, k));
    tp_sum += t * p;
    tt += t * t;
    pp += p * p;
  }
  const double denom = std::sqrt(n * n - pp) * std::sqrt(n * n - tt);
  if (denom == 0.0) return 0.0;
  return (n * trace - tp_sum) / denom;
}

double f1_binary(double tp, double fp, double fn) {
  const double denom = 2 * tp + fp + fn;
  return denom == 0.0 ? 0.0 : 2 * tp / denom;
}

double f1_binary(const Confusion& c) {
  require(c.classes() == 2, "bad_argument", "f1_binary needs a 2 x 2 confusion matrix");
  return f1_binary(double(c(1, 1)), double(c(0, 1)), double(c(1, 0)));
}

double macro_f1(const Confusion& c) {
  double total = 0;
  for (std::size_t k = 0; k < c.classes(); ++k) {
    const double tp = double(c(k, k));
    total += f1_binary(tp, double(c.col_sum(k)) - tp, double(c.row_sum(k)) - tp);
  }
  return total / double(c.classes());
}

std::size_t argmax(const std::vector<double>& scores) {
  require(!scores.empty(), "bad_argument", "argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

double top1(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& truth) {
  require(pred.size() == truth.size() && !pred.empty(), "bad_argument", "top1: need equal nonempty vectors");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == truth[i];
  return double(hits) / double(pred.size());
}

double auroc(const std::vector<double>& scores, const std::vector<std::int32_t>& labels) {
  require(scores.size() == labels.size(), "shape_mismatch", "auroc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double positive_ranks = 0, n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * double(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      const auto label = labels[order[k]];
      require(label == 0 || label == 1, "bad_label", "auroc: labels must be 0 or 1");
      if (label == 1) {
        positive_ranks += midrank;
        n_pos += 1;
      } else {
        n_neg += 1;
      }
    }
    i = j;
  }
  require(n_pos > 0 && n_neg > 0, "single_class", "auroc: both classes must be present");
  return (positive_ranks - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg);
}

MultiLabelAuroc multilabel_auroc(const std::vector<std::vector<double>>& scores,
                                 const std::vector<std::vector<std::int32_t>>& labels) {
  require(!scores.empty() && scores.size() == labels.size(), "shape_mismatch",
          "multilabel_auroc: need matching nonempty score and label rows");
  const std::size_t n_labels = scores.front().size();
  MultiLabelAuroc out;
  for (std::size_t j = 0; j < n_labels; ++j) {
    std::vector<double> s;
    std::vector<std::int32_t> l;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      require(scores[i].size() == n_labels && labels[i].size() == n_labels, "shape_mismatch",
              "multilabel_auroc: ragged rows");
      s.push_back(scores[i][j]);
      l.push_back(labels[i][j]);
    }
    out.per_label.push_back(auroc(s, l));
  }
  out.macro = std::accumulate(out.per_label.begin(), out.per_label.end(), 0.0) / double(n_labels);
  return out;
}

std::optional<double> MetricReport::get(const std::string& name) const {
  if (name == "mcc") return mcc;
  if (name == "f1") return f1;
  if (name == "top1") return top1;
  if (name == "auroc") return auroc;
  if (name == "loss") return loss;
  fail("bad_metric", "unknown metric '" + name + "'");
}

MetricReport compute_report(const std::vector<std::vector<double>>& probs, const std::vector<std::int32_t>& labels,
                            std::size_t classes, const std::vector<std::string>& metrics) {
  require(probs.size() == labels.size() && !probs.empty(), "shape_mismatch",
          "report: need one probability row per label");
  MetricReport r;
  r.n_examples = labels.size();
  std::vector<std::int32_t> pred;
  for (const auto& p : probs) {
    require(p.size() == classes, "shape_mismatch", "report: probability row has the wrong width");
    pred.push_back(static_cast<std::int32_t>(argmax(p)));
  }
  r.confusion = Confusion::from(labels, pred, classes);
  const bool binary = classes == 2;
  for (const auto& m : metrics) {
    if (m == "mcc") {
      r.mcc = binary ? mcc_binary(r.confusion) : mcc_multiclass(r.confusion);
    } else if (m == "f1") {
      r.f1 = binary ? f1_binary(r.confusion) : macro_f1(r.confusion);
    } else if (m == "top1") {
      r.top1 = top1(pred, labels);
    } else if (m == "auroc") {
      double total = 0;
      std::size_t used = 0;
      for (std::size_t k = binary ? 1 : 0; k < classes; ++k) {
        if (r.confusion.row_sum(k) == 0 || r.confusion.row_sum(k) == r.n_examples) continue;
        std::vector<double> s;
        std::vector<std::int32_t> l;
        for (std::size_t i = 0; i < labels.size(); ++i) {
          s.push_back(probs[i][k]);
          l.push_back(labels[i] == static_cast<std::int32_t>(k));
        }
        total += auroc(s, l);
        ++used;
      }
      require(used > 0, "single_class", "auroc: both classes must be present");
      r.auroc = total / double(used);
    } else {
      fail("bad_metric", "unknown metric '" + m + "'");
    }
  }
  return r;
}

void write_report(std::ostream& out, const MetricReport& report) {
  std::ostringstream s;
  s.precision(17);
  s << "n_examples=" << report.n_examples << '\n';
  s << "classes=" << report.confusion.classes() << '\n';
  const std::pair<const char*, const std::optional<double>*> fields[] = {
      {"loss", &report.loss}, {"mcc", &report.mcc}, {"f1", &report.f1}, {"top1", &report.top1},
      {"auroc", &report.auroc}};
  for (const auto& [name, value] : fields)
    if (*value) s << name << '=' << **value << '\n';
  for (std::size_t t = 0; t < report.confusion.classes(); ++t)
    for (std::size_t p = 0; p < report.confusion.classes(); ++p)
      s << "confusion." << t << '.' << p << '=' << report.confusion(t, p) << '\n';
  out << s.str();
}

MetricReport read_report(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, "bad_report", "report line " + std::to_string(lineno) + " has no '='");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto number = [&](const std::string& key) { return std::stod(kv.at(key)); };
  require(kv.count("n_examples") && kv.count("classes"), "bad_report", "report lacks n_examples or classes");
  MetricReport r;
  r.n_examples = std::stoull(kv["n_examples"]);
  const std::size_t k = std::stoull(kv["classes"]);
  r.confusion = Confusion(k);
  for (std::size_t t = 0; t < k; ++t)
    for (std::size_t p = 0; p < k; ++p) {
      const auto key = "confusion." + std::to_string(t) + "." + std::to_string(p);
      if (kv.count(key)) r.confusion.add(t, p, std::stoull(kv[key]));
    }
  if (kv.count("loss")) r.loss = number("loss");
  if (kv.count("mcc")) r.mcc = number("mcc");
  if (kv.count("f1")) r.f1 = number("f1");
  if (kv.count("top1")) r.top1 = number("top1");
  if (kv.count("auroc")) r.auroc = number("auroc");
  return r;
}

}  // namespace convnova
