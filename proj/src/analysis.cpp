#include "mtl/analysis.hpp"

#include <algorithm>

namespace mtl {

CooccurrenceTable build_cooccurrence(std::span<const MetadataRecord> records,
                                     double bin_width,
                                     const std::string& third_task) {
  if (bin_width <= 0.0) {
    throw std::invalid_argument("build_cooccurrence: bin width must be > 0");
  }
  if (third_task != "material" && third_task != "type") {
    throw std::invalid_argument(
        "build_cooccurrence: third task must be material or type");
  }
  CooccurrenceTable table;
  table.bin_width = bin_width;
  table.third_task = third_task;
  const bool use_material = third_task == "material";

  for (const MetadataRecord& rec : records) {
    if (!rec.artist || !rec.has_period) continue;
    const auto& raw_third = use_material ? rec.materials : rec.types;
    if (raw_third.empty()) continue;
    const long bin = table.bin_of(resolve_period(rec.period_lo, rec.period_hi));
    for (const std::string& raw : raw_third) {
      const std::string third =
          use_material ? stem_material_label(raw) : raw;
      if (third.empty()) continue;
      ++table.joint[{*rec.artist, bin, third}];
      ++table.period_third[{bin, third}];
      ++table.artist_marginal[*rec.artist];
      ++table.third_marginal[third];
      ++table.total;
    }
  }
  return table;
}

ConditionalProbability conditional_probability(const CooccurrenceTable& table,
                                               const std::string& artist,
                                               double year,
                                               const std::string& third) {
  const long bin = table.bin_of(year);
  const auto cond = table.period_third.find({bin, third});
  if (cond == table.period_third.end() || cond->second == 0) {
    throw UndefinedProbabilityError(
        "undefined probability: no observations with period bin " +
        std::to_string(bin) + " and " + table.third_task + " \"" + third +
        "\"");
  }
  ConditionalProbability result;
  result.conditioning_count = cond->second;
  const auto joint = table.joint.find({artist, bin, third});
  result.joint_count = joint == table.joint.end() ? 0 : joint->second;
  result.value = static_cast<double>(result.joint_count) /
                 static_cast<double>(result.conditioning_count);
  return result;
}

std::vector<ConfusionPair> top_confusions(const ConfusionMatrix& cm, int n) {
  if (n < 1) {
    throw std::invalid_argument("top_confusions: n must be >= 1");
  }
  std::vector<ConfusionPair> cells;
  const Index k = cm.counts.rows();
  for (Index t = 0; t < k; ++t) {
    for (Index p = 0; p < k; ++p) {
      if (t == p || cm.counts(t, p) == 0) continue;
      cells.push_back({static_cast<int>(t), static_cast<int>(p),
                       cm.counts(t, p), cm.counts(p, t)});
    }
  }
  std::sort(cells.begin(), cells.end(),
            [](const ConfusionPair& a, const ConfusionPair& b) {
              if (a.count != b.count) return a.count > b.count;
              if (a.true_class != b.true_class) {
                return a.true_class < b.true_class;
              }
              return a.pred_class < b.pred_class;
            });
  if (static_cast<int>(cells.size()) > n) {
    cells.resize(static_cast<std::size_t>(n));
  }
  return cells;
}

Index export_shared_features(const MultiTaskModel<float>& model,
                             const FeatureDataset& dataset, Split split,
                             const std::filesystem::path& path) {
  std::vector<Index> rows;
  for (Index i = 0; i < dataset.size(); ++i) {
    if (dataset.split[static_cast<std::size_t>(i)] == split) rows.push_back(i);
  }
  if (rows.empty()) {
    throw std::invalid_argument("export_shared_features: split \"" +
                                to_string(split) + "\" is empty");
  }
  MatF gathered(static_cast<Index>(rows.size()), dataset.dim());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    gathered.row(static_cast<Index>(r)) = dataset.features.row(rows[r]);
  }
  const MatF activations = relu(dense_forward(model.shared, gathered));
  save_feature_matrix(path, activations);
  return activations.rows();
}

}  // namespace mtl
