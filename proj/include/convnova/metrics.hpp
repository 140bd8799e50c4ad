#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace convnova {

/// Square confusion matrix, rows = truth, columns = prediction.
class Confusion {
 public:
  explicit Confusion(std::size_t classes);
  static Confusion from(const std::vector<std::int32_t>& truth, const std::vector<std::int32_t>& pred,
                        std::size_t classes);

  void add(std::size_t truth, std::size_t pred, std::size_t count = 1);
  std::size_t classes() const noexcept { return k_; }
  std::size_t operator()(std::size_t truth, std::size_t pred) const { return counts_[truth * k_ + pred]; }
  std::size_t total() const;
  std::size_t row_sum(std::size_t truth) const;
  std::size_t col_sum(std::size_t pred) const;

  friend bool operator==(const Confusion&, const Confusion&) = default;

 private:
  std::size_t k_;
  std::vector<std::size_t> counts_;
};

/// Binary MCC with class 1 as positive; 0 when any marginal is empty.
double mcc_binary(const Confusion& c);
double mcc_binary(double tp, double fp, double fn, double tn);
/// Gorodkin's R_K over a K x K confusion matrix; 0 on a zero denominator.
double mcc_multiclass(const Confusion& c);

/// 2TP / (2TP + FP + FN) for class 1; 0 on a zero denominator.
double f1_binary(const Confusion& c);
double f1_binary(double tp, double fp, double fn);
/// Unweighted mean of per-class F1.
double macro_f1(const Confusion& c);

/// Index of the largest value, lowest index on ties.
std::size_t argmax(const std::vector<double>& scores);
double top1(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& truth);

/// Mann-Whitney AUROC with midranks for ties. Labels are 0/1 and both must occur.
double auroc(const std::vector<double>& scores, const std::vector<std::int32_t>& labels);

struct MultiLabelAuroc {
  std::vector<double> per_label;
  double macro = 0.0;
};

/// Per-label AUROC over scores[i][j] / labels[i][j] and their mean.
MultiLabelAuroc multilabel_auroc(const std::vector<std::vector<double>>& scores,
                                 const std::vector<std::vector<std::int32_t>>& labels);

struct MetricReport {
  std::size_t n_examples = 0;
  Confusion confusion{1};
  std::optional<double> mcc;
  std::optional<double> f1;
  std::optional<double> top1;
  std::optional<double> auroc;
  std::optional<double> loss;

  /// Named metric value, if it was computed.
  std::optional<double> get(const std::string& name) const;
};

/// Metric names understood by `compute_report`.
inline const std::vector<std::string> kAllMetrics = {"mcc", "f1", "top1", "auroc"};

/// Builds a report from class probabilities. Binary tasks use positive-class
/// F1 and the class-1 probability for AUROC; multiclass tasks use R_K, macro F1
/// and the mean one-vs-rest AUROC over classes present in the labels.
MetricReport compute_report(const std::vector<std::vector<double>>& probs, const std::vector<std::int32_t>& labels,
                            std::size_t classes, const std::vector<std::string>& metrics);

/// "key=value" lines: n_examples, each computed metric, confusion.<t>.<p>.
void write_report(std::ostream& out, const MetricReport& report);
MetricReport read_report(std::istream& in);

}  // namespace convnova
