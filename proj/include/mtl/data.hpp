#pragma once

// Dataset ingestion: binary feature matrices, JSON-Lines metadata, label
// vocabularies, period resolution, stratified splitting and the synthetic
// correlated-task generator.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mtl/errors.hpp"
#include "mtl/types.hpp"

namespace mtl {

enum class Split : std::uint8_t { Train, Val, Test, Excluded };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

// One metadata line. A period is stored as an interval; exact years have
// lo == hi. Missing fields mean "unlabeled for that task".
struct MetadataRecord {
  std::string id;
  std::optional<std::string> artist;
  std::vector<std::string> types;
  std::vector<std::string> materials;
  bool has_period = false;
  double period_lo = 0.0;
  double period_hi = 0.0;
  // Ground-truth generative parameters, present on synthetic data only.
  bool has_truth = false;
  double truth_artist_year = 0.0;
  int truth_primary_type = -1;
  int truth_primary_material = -1;
};

struct LabelVocabulary {
  std::vector<std::string> labels;        // id -> label
  std::vector<std::int64_t> frequencies;  // id -> count
  std::unordered_map<std::string, int> index;

  int size() const { return static_cast<int>(labels.size()); }
  std::optional<int> id_of(const std::string& label) const {
    auto it = index.find(label);
    if (it == index.end()) return std::nullopt;
    return it->second;
  }
};

struct SplitAssignment {
  std::vector<Split> tags;  // parallel to the samples it was built from
  std::uint64_t seed = 0;
  std::array<double, 3> ratios{0.7, 0.2, 0.1};
};

struct FeatureDataset {
  MatF features;  // N x D
  std::vector<std::string> sample_ids;
  std::vector<int> artist;  // class id, -1 = unlabeled
  std::vector<std::vector<int>> types;
  std::vector<std::vector<int>> materials;
  std::vector<std::uint8_t> has_period;
  std::vector<double> period_year;
  std::vector<Split> split;
  // z-score parameters for the regression target, from the train split
  double period_mean = 0.0;
  double period_std = 1.0;

  Index size() const { return features.rows(); }
  Index dim() const { return features.cols(); }
};

// ---- feature files ("OMFT": magic, u32 version=1, u64 N, u64 D, then
// N*D little-endian float32, row-major) ----

MatF load_feature_matrix(const std::filesystem::path& path);
void save_feature_matrix(const std::filesystem::path& path, const MatF& m);

// ---- metadata (UTF-8 JSON Lines) ----

std::vector<MetadataRecord> load_metadata_jsonl(
    const std::filesystem::path& path);
void save_metadata_jsonl(const std::filesystem::path& path,
                         std::span<const MetadataRecord> records);

// ---- vocabularies ----

// Builds the vocabulary for task in {"artist", "type", "material"}. Labels
// below min_samples are dropped, "unknown"/"anonymous" (case-insensitive)
// never receive ids, material labels are stemmed word-wise first. Ids run by
// descending frequency, ties broken lexicographically.
LabelVocabulary build_label_vocab(std::span<const MetadataRecord> records,
                                  const std::string& task, int min_samples);

// Lowercases and strips {"ings","ing","es","s"} in priority order while the
// stem keeps >= 3 characters; rules are re-applied until nothing matches, so
// the map is idempotent.
std::string stem_material_token(const std::string& token);

// Word-wise stemming of a whole material label.
std::string stem_material_label(const std::string& label);

// Exact years pass through; an interval [a, b] maps to its mean.
double resolve_period(double lo, double hi);

// ---- splitting ----

// Per anchor class of size m: train gets floor(r_train*m), test gets
// floor(r_test*m), validation the remainder; every partition keeps at least
// one sample. Samples with anchor class -1 are excluded. Classes below three
// samples raise a StratificationError naming the class.
SplitAssignment stratified_split(std::span<const int> anchor_class_ids,
                                 int n_classes,
                                 std::span<const std::string> class_names,
                                 std::array<double, 3> ratios,
                                 std::uint64_t seed);

void save_split(const std::filesystem::path& path,
                std::span<const std::string> sample_ids,
                const SplitAssignment& assignment);

struct LoadedSplit {
  std::map<std::string, Split> assignments;
  std::uint64_t seed = 0;
  std::array<double, 3> ratios{0.7, 0.2, 0.1};
};

LoadedSplit load_split(const std::filesystem::path& path);

// Tags every dataset sample from the loaded map; ids absent from the map are
// excluded.
void apply_split(FeatureDataset& dataset, const LoadedSplit& split);

// ---- assembly ----

struct TaskVocabularies {
  std::optional<LabelVocabulary> artist;
  std::optional<LabelVocabulary> type;
  std::optional<LabelVocabulary> material;
};

// Joins features with metadata by position (row i <-> record i) and encodes
// labels through the vocabularies. Labels outside a vocabulary become
// unlabeled for that task.
FeatureDataset assemble_dataset(MatF features,
                                std::span<const MetadataRecord> records,
                                const TaskVocabularies& vocabs);

// Mean/std of the period label over the train split; std degenerates to 1
// when the split has no spread.
void compute_period_stats(FeatureDataset& dataset);

// ---- synthetic data ----

struct SyntheticData {
  MatF features;
  std::vector<MetadataRecord> records;
};

// Each synthetic artist has a Gaussian feature prototype and an evenly spaced
// mean year; period/type/material labels interpolate between fully
// artist-determined (entanglement 1) and independent uniform (entanglement 0).
SyntheticData generate_synthetic(int n_classes, int samples_per_class, int dim,
                                 double entanglement, std::uint64_t seed);

}  // namespace mtl
