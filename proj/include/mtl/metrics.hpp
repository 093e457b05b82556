#pragma once

// Task metrics: top-k accuracy, image-wise mean average precision, MAE in
// calendar years, interval accuracy, confusion matrices. Ties rank the lower
// class id first everywhere, so results are reproducible across platforms.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mtl/errors.hpp"
#include "mtl/model.hpp"
#include "mtl/types.hpp"

namespace mtl {

struct ConfusionMatrix {
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts;  // true x pred
  std::vector<std::string> labels;  // optional, size K or empty

  std::int64_t total() const { return counts.sum(); }
  std::int64_t trace() const { return counts.trace(); }
};

template <class S>
double topk_accuracy(const Mat<S>& scores, const IndexVec& truth, int k) {
  const Index batch = scores.rows();
  const Index num_classes = scores.cols();
  if (k < 1 || k > num_classes) {
    throw std::invalid_argument("topk_accuracy: k out of range");
  }
  if (truth.size() != batch) {
    throw std::invalid_argument("topk_accuracy: truth length != batch");
  }
  Index hits = 0;
  for (Index b = 0; b < batch; ++b) {
    const int t = truth[b];
    if (t < 0 || t >= num_classes) {
      throw std::invalid_argument("topk_accuracy: truth index out of range");
    }
    // rank of the true class under (score desc, id asc)
    Index rank = 0;
    const S st = scores(b, t);
    for (Index j = 0; j < num_classes; ++j) {
      if (scores(b, j) > st || (scores(b, j) == st && j < t)) ++rank;
    }
    if (rank < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(batch);
}

// Image-wise mean average precision: per-sample AP over the ranked label
// list, averaged over samples that carry at least one positive label.
template <class S>
double sample_map(const Mat<S>& scores, const Mat<S>& truth) {
  if (scores.rows() != truth.rows() || scores.cols() != truth.cols()) {
    throw std::invalid_argument("sample_map: shape mismatch");
  }
  const Index num_classes = scores.cols();
  std::vector<Index> order(static_cast<std::size_t>(num_classes));
  double ap_sum = 0.0;
  Index evaluated = 0;
  for (Index b = 0; b < scores.rows(); ++b) {
    Index positives = 0;
    for (Index j = 0; j < num_classes; ++j) {
      if (truth(b, j) != S(0)) ++positives;
    }
    if (positives == 0) continue;  // unlabeled rows are skipped
    std::iota(order.begin(), order.end(), Index(0));
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index c) {
      if (scores(b, a) != scores(b, c)) return scores(b, a) > scores(b, c);
      return a < c;
    });
    double ap = 0.0;
    Index found = 0;
    for (Index r = 0; r < num_classes; ++r) {
      if (truth(b, order[static_cast<std::size_t>(r)]) != S(0)) {
        ++found;
        ap += static_cast<double>(found) / static_cast<double>(r + 1);
      }
    }
    ap_sum += ap / static_cast<double>(positives);
    ++evaluated;
  }
  if (evaluated == 0) {
    throw UndefinedMetricError("sample_map: no row carries a positive label");
  }
  return ap_sum / static_cast<double>(evaluated);
}

// Label-wise (macro) variant: per-label AP over the sample ranking, averaged
// over labels with at least one positive. Offered alongside the headline
// image-wise metric.
template <class S>
double label_map(const Mat<S>& scores, const Mat<S>& truth) {
  if (scores.rows() != truth.rows() || scores.cols() != truth.cols()) {
    throw std::invalid_argument("label_map: shape mismatch");
  }
  const Index batch = scores.rows();
  std::vector<Index> order(static_cast<std::size_t>(batch));
  double ap_sum = 0.0;
  Index evaluated = 0;
  for (Index k = 0; k < scores.cols(); ++k) {
    Index positives = 0;
    for (Index b = 0; b < batch; ++b) {
      if (truth(b, k) != S(0)) ++positives;
    }
    if (positives == 0) continue;
    std::iota(order.begin(), order.end(), Index(0));
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index c) {
      if (scores(a, k) != scores(c, k)) return scores(a, k) > scores(c, k);
      return a < c;
    });
    double ap = 0.0;
    Index found = 0;
    for (Index r = 0; r < batch; ++r) {
      if (truth(order[static_cast<std::size_t>(r)], k) != S(0)) {
        ++found;
        ap += static_cast<double>(found) / static_cast<double>(r + 1);
      }
    }
    ap_sum += ap / static_cast<double>(positives);
    ++evaluated;
  }
  if (evaluated == 0) {
    throw UndefinedMetricError("label_map: no label carries a positive sample");
  }
  return ap_sum / static_cast<double>(evaluated);
}

// De-standardizes both sides and reports the mean absolute difference in
// calendar years.
double mae_years(const VecD& pred_std, const VecD& truth_std,
                 double train_mean, double train_std);

// Fraction of predictions within +-tolerance years; the boundary counts as a
// hit (closed interval).
double interval_accuracy(const VecD& pred_years, const VecD& truth_years,
                         double tolerance = 50.0);

ConfusionMatrix confusion_matrix(const IndexVec& pred, const IndexVec& truth,
                                 int n_classes);

// Copy with the main diagonal zeroed.
ConfusionMatrix confusion_offdiagonal(const ConfusionMatrix& cm);

// CSV with a header row of class labels; rows are true classes.
void write_confusion_csv(const ConfusionMatrix& cm, std::ostream& out);

// Parses the CSV layout produced by write_confusion_csv.
ConfusionMatrix read_confusion_csv(std::istream& in);

struct TaskMetrics {
  std::string task;
  TaskKind kind = TaskKind::Multiclass;
  Index n_evaluated = 0;
  // multiclass
  std::optional<double> top1;
  std::optional<double> top3;
  std::optional<ConfusionMatrix> confusion;
  // multilabel
  std::optional<double> map;
  std::optional<double> map_label_wise;
  // regression
  std::optional<double> mae;
  std::optional<double> interval_acc;
};

struct MetricsReport {
  std::string split;
  Index n_samples = 0;
  std::vector<TaskMetrics> per_task;
};

std::string metrics_report_to_json(const MetricsReport& report);

}  // namespace mtl
