#pragma once

// Label entanglement analysis: empirical conditional probabilities over
// (artist, period-bin, material/type) co-occurrences, ranked confusion pairs,
// and shared-layer feature export.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "mtl/data.hpp"
#include "mtl/metrics.hpp"
#include "mtl/model.hpp"

namespace mtl {

struct CooccurrenceTable {
  double bin_width = 25.0;
  std::string third_task = "material";  // "material" or "type"
  std::int64_t total = 0;
  std::map<std::tuple<std::string, long, std::string>, std::int64_t> joint;
  std::map<std::pair<long, std::string>, std::int64_t> period_third;  // (t2, t3)
  std::map<std::string, std::int64_t> artist_marginal;
  std::map<std::string, std::int64_t> third_marginal;

  long bin_of(double year) const {
    return static_cast<long>(std::floor(year / bin_width));
  }
};

// Counts one (artist, period-bin, third-label) tuple per third-label set
// element, over records that carry all three attributes. Material labels are
// stemmed to match vocabulary construction.
CooccurrenceTable build_cooccurrence(std::span<const MetadataRecord> records,
                                     double bin_width = 25.0,
                                     const std::string& third_task = "material");

struct ConditionalProbability {
  double value = 0.0;
  std::int64_t joint_count = 0;         // #(t1, t2, t3)
  std::int64_t conditioning_count = 0;  // #(t2, t3)
};

// P(T1 = artist | T2 = bin(year), T3 = third) = #(t1,t2,t3) / #(t2,t3).
// An unseen conditioning pair is undefined, not zero.
ConditionalProbability conditional_probability(const CooccurrenceTable& table,
                                               const std::string& artist,
                                               double year,
                                               const std::string& third);

struct ConfusionPair {
  int true_class = 0;
  int pred_class = 0;
  std::int64_t count = 0;
  std::int64_t symmetric_count = 0;  // cm[pred][true]
};

// Off-diagonal cells ranked by count descending, ties by (row, col)
// ascending; at most n entries.
std::vector<ConfusionPair> top_confusions(const ConfusionMatrix& cm, int n);

// Shared-layer activations of one split, written as an OMFT feature file
// (N x H). Returns the number of exported rows.
Index export_shared_features(const MultiTaskModel<float>& model,
                             const FeatureDataset& dataset, Split split,
                             const std::filesystem::path& path);

}  // namespace mtl
