#include "mtl/metrics.hpp"

#include <istream>

#include <json.hpp>

namespace mtl {

using nlohmann::json;

double mae_years(const VecD& pred_std, const VecD& truth_std,
                 double train_mean, double train_std) {
  if (train_std <= 0.0) {
    throw std::invalid_argument("mae_years: train_std must be > 0");
  }
  if (pred_std.size() != truth_std.size()) {
    throw std::invalid_argument("mae_years: length mismatch");
  }
  if (pred_std.size() == 0) {
    throw std::invalid_argument("mae_years: empty input");
  }
  const VecD pred_years = (pred_std.array() * train_std + train_mean).matrix();
  const VecD truth_years =
      (truth_std.array() * train_std + train_mean).matrix();
  return (pred_years - truth_years).array().abs().mean();
}

double interval_accuracy(const VecD& pred_years, const VecD& truth_years,
                         double tolerance) {
  if (pred_years.size() != truth_years.size()) {
    throw std::invalid_argument("interval_accuracy: length mismatch");
  }
  if (pred_years.size() == 0) {
    throw std::invalid_argument("interval_accuracy: empty input");
  }
  const Index hits =
      ((pred_years - truth_years).array().abs() <= tolerance).count();
  return static_cast<double>(hits) / static_cast<double>(pred_years.size());
}

ConfusionMatrix confusion_matrix(const IndexVec& pred, const IndexVec& truth,
                                 int n_classes) {
  if (pred.size() != truth.size()) {
    throw std::invalid_argument("confusion_matrix: length mismatch");
  }
  if (n_classes < 1) {
    throw std::invalid_argument("confusion_matrix: n_classes must be >= 1");
  }
  ConfusionMatrix cm;
  cm.counts.setZero(n_classes, n_classes);
  for (Index i = 0; i < pred.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= n_classes || pred[i] < 0 ||
        pred[i] >= n_classes) {
      throw std::invalid_argument("confusion_matrix: index out of range");
    }
    ++cm.counts(truth[i], pred[i]);
  }
  return cm;
}

ConfusionMatrix confusion_offdiagonal(const ConfusionMatrix& cm) {
  ConfusionMatrix out = cm;
  out.counts.diagonal().setZero();
  return out;
}

namespace {

// labels may contain separators; quote per RFC 4180 when needed
std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string quoted = "\"";
  for (char c : s) {
    if (c == '"') quoted += "\"\"";
    else quoted += c;
  }
  quoted += '"';
  return quoted;
}

}  // namespace

void write_confusion_csv(const ConfusionMatrix& cm, std::ostream& out) {
  const Index k = cm.counts.rows();
  auto label = [&](Index i) {
    return static_cast<std::size_t>(i) < cm.labels.size()
               ? cm.labels[static_cast<std::size_t>(i)]
               : "class_" + std::to_string(i);
  };
  out << "true\\pred";
  for (Index j = 0; j < k; ++j) out << ',' << csv_field(label(j));
  out << '\n';
  for (Index i = 0; i < k; ++i) {
    out << csv_field(label(i));
    for (Index j = 0; j < k; ++j) out << ',' << cm.counts(i, j);
    out << '\n';
  }
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  fields.push_back(std::move(field));
  return fields;
}

}  // namespace

ConfusionMatrix read_confusion_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) {
    throw DataError("confusion CSV: empty input");
  }
  const std::vector<std::string> header = split_csv_line(line);
  if (header.size() < 2) {
    throw DataError("confusion CSV: header has no class labels");
  }
  const auto k = static_cast<Index>(header.size() - 1);
  ConfusionMatrix cm;
  cm.labels.assign(header.begin() + 1, header.end());
  cm.counts.setZero(k, k);
  for (Index row = 0; row < k; ++row) {
    if (!std::getline(in, line)) {
      throw DataError("confusion CSV: expected " + std::to_string(k) +
                      " data rows, got " + std::to_string(row));
    }
    const std::vector<std::string> fields = split_csv_line(line);
    if (static_cast<Index>(fields.size()) != k + 1) {
      throw DataError("confusion CSV: row " + std::to_string(row + 1) +
                      " has " + std::to_string(fields.size() - 1) +
                      " cells, expected " + std::to_string(k));
    }
    for (Index col = 0; col < k; ++col) {
      try {
        cm.counts(row, col) =
            std::stoll(fields[static_cast<std::size_t>(col) + 1]);
      } catch (const std::exception&) {
        throw DataError("confusion CSV: bad count at row " +
                        std::to_string(row + 1));
      }
    }
  }
  return cm;
}

std::string metrics_report_to_json(const MetricsReport& report) {
  json tasks = json::array();
  for (const TaskMetrics& tm : report.per_task) {
    json obj = {{"task", tm.task},
                {"kind", to_string(tm.kind)},
                {"n_evaluated", tm.n_evaluated}};
    if (tm.top1) obj["top1"] = *tm.top1;
    if (tm.top3) obj["top3"] = *tm.top3;
    if (tm.map) obj["map"] = *tm.map;
    if (tm.map_label_wise) obj["map_label_wise"] = *tm.map_label_wise;
    if (tm.mae) obj["mae_years"] = *tm.mae;
    if (tm.interval_acc) obj["interval_accuracy"] = *tm.interval_acc;
    tasks.push_back(std::move(obj));
  }
  json doc = {{"split", report.split},
              {"n_samples", report.n_samples},
              {"tasks", tasks}};
  return doc.dump(2);
}

}  // namespace mtl
