#include "mtl/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "binary_io.hpp"
#include "mtl/rng.hpp"

namespace mtl {

using nlohmann::json;

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Excluded: return "excluded";
  }
  return "excluded";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  if (s == "excluded") return Split::Excluded;
  throw DataError("unknown split tag \"" + s + "\"");
}

// ---------------------------------------------------------------- features

namespace {

constexpr char kFeatureMagic[4] = {'O', 'M', 'F', 'T'};
constexpr std::uint32_t kFeatureVersion = 1;

using RowMajorF =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

MatF load_feature_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open feature file " + path.string());
  }
  detail::BinaryReader reader(in, path.string());
  reader.expect_magic(kFeatureMagic);
  const std::uint32_t version = reader.read_u32("version");
  if (version != kFeatureVersion) {
    throw FormatError(path.string() + ": unsupported version " +
                      std::to_string(version) + " at byte offset 4");
  }
  const std::uint64_t rows = reader.read_u64("row count");
  const std::uint64_t cols = reader.read_u64("column count");
  if (rows == 0 || cols == 0) {
    throw FormatError(path.string() + ": degenerate dimension " +
                      std::to_string(rows) + "x" + std::to_string(cols) +
                      " at byte offset 8");
  }
  if (rows > (1ull << 32) || cols > (1ull << 32) ||
      rows * cols > (1ull << 34)) {
    throw FormatError(path.string() + ": implausible dimensions " +
                      std::to_string(rows) + "x" + std::to_string(cols));
  }
  RowMajorF staged(static_cast<Index>(rows), static_cast<Index>(cols));
  reader.read_bytes(staged.data(), rows * cols * sizeof(float), "payload");
  return MatF(staged);
}

void save_feature_matrix(const std::filesystem::path& path, const MatF& m) {
  if (m.rows() == 0 || m.cols() == 0) {
    throw std::invalid_argument("save_feature_matrix: empty matrix");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw DataError("cannot create feature file " + path.string());
  }
  detail::BinaryWriter writer(out, path.string());
  writer.write_bytes(kFeatureMagic, 4);
  writer.write_u32(kFeatureVersion);
  writer.write_u64(static_cast<std::uint64_t>(m.rows()));
  writer.write_u64(static_cast<std::uint64_t>(m.cols()));
  const RowMajorF staged(m);
  writer.write_bytes(staged.data(),
                     static_cast<std::size_t>(staged.size()) * sizeof(float));
}

// ---------------------------------------------------------------- metadata

namespace {

MetadataRecord parse_record(const json& obj, const std::string& path,
                            std::size_t line_no) {
  const std::string where =
      path + ":" + std::to_string(line_no) + ": ";
  if (!obj.is_object()) {
    throw DataError(where + "expected a JSON object");
  }
  MetadataRecord rec;
  if (!obj.contains("id") || !obj["id"].is_string()) {
    throw DataError(where + "missing string field \"id\"");
  }
  rec.id = obj["id"].get<std::string>();
  if (obj.contains("artist")) {
    if (!obj["artist"].is_string()) {
      throw DataError(where + "\"artist\" must be a string");
    }
    rec.artist = obj["artist"].get<std::string>();
  }
  for (const char* field : {"types", "materials"}) {
    if (!obj.contains(field)) continue;
    if (!obj[field].is_array()) {
      throw DataError(where + "\"" + field + "\" must be an array");
    }
    auto& dst = std::string(field) == "types" ? rec.types : rec.materials;
    for (const auto& v : obj[field]) {
      if (!v.is_string()) {
        throw DataError(where + "\"" + field + "\" entries must be strings");
      }
      dst.push_back(v.get<std::string>());
    }
  }
  if (obj.contains("period")) {
    const auto& p = obj["period"];
    if (p.is_number()) {
      rec.has_period = true;
      rec.period_lo = rec.period_hi = p.get<double>();
    } else if (p.is_array() && p.size() == 2 && p[0].is_number() &&
               p[1].is_number()) {
      rec.has_period = true;
      rec.period_lo = p[0].get<double>();
      rec.period_hi = p[1].get<double>();
      if (rec.period_lo > rec.period_hi) {
        throw DataError(where + "period interval is reversed");
      }
    } else {
      throw DataError(where + "\"period\" must be a number or [a, b]");
    }
  }
  if (obj.contains("gen") && obj["gen"].is_object()) {
    const auto& g = obj["gen"];
    rec.has_truth = true;
    rec.truth_artist_year = g.value("artist_year", 0.0);
    rec.truth_primary_type = g.value("primary_type", -1);
    rec.truth_primary_material = g.value("primary_material", -1);
  }
  return rec;
}

}  // namespace

std::vector<MetadataRecord> load_metadata_jsonl(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("cannot open metadata file " + path.string());
  }
  std::vector<MetadataRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " +
                      e.what());
    }
    records.push_back(parse_record(obj, path.string(), line_no));
  }
  return records;
}

void save_metadata_jsonl(const std::filesystem::path& path,
                         std::span<const MetadataRecord> records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw DataError("cannot create metadata file " + path.string());
  }
  for (const MetadataRecord& rec : records) {
    json obj;
    obj["id"] = rec.id;
    if (rec.artist) obj["artist"] = *rec.artist;
    if (!rec.types.empty()) obj["types"] = rec.types;
    if (!rec.materials.empty()) obj["materials"] = rec.materials;
    if (rec.has_period) {
      if (rec.period_lo == rec.period_hi) {
        obj["period"] = rec.period_lo;
      } else {
        obj["period"] = json::array({rec.period_lo, rec.period_hi});
      }
    }
    if (rec.has_truth) {
      obj["gen"] = {{"artist_year", rec.truth_artist_year},
                    {"primary_type", rec.truth_primary_type},
                    {"primary_material", rec.truth_primary_material}};
    }
    out << obj.dump() << '\n';
  }
  if (!out) {
    throw DataError("write failed for " + path.string());
  }
}

// ------------------------------------------------------------- stemming

std::string stem_material_token(const std::string& token) {
  if (token.empty()) {
    throw std::invalid_argument("stem_material_token: empty token");
  }
  std::string stem;
  stem.reserve(token.size());
  for (char c : token) {
    stem.push_back(static_cast<char>(
        std::tolower(static_cast<unsigned char>(c))));
  }
  static const char* kSuffixes[] = {"ings", "ing", "es", "s"};
  // keep stripping until no rule applies, so stem(stem(x)) == stem(x)
  bool changed = true;
  while (changed) {
    changed = false;
    for (const char* suffix : kSuffixes) {
      const std::size_t len = std::char_traits<char>::length(suffix);
      if (stem.size() >= len + 3 &&
          stem.compare(stem.size() - len, len, suffix) == 0) {
        stem.resize(stem.size() - len);
        changed = true;
        break;
      }
    }
  }
  return stem;
}

std::string stem_material_label(const std::string& label) {
  std::istringstream words(label);
  std::string word;
  std::string out;
  while (words >> word) {
    if (!out.empty()) out.push_back(' ');
    out += stem_material_token(word);
  }
  return out;
}

double resolve_period(double lo, double hi) {
  if (lo > hi) {
    throw std::invalid_argument("resolve_period: interval [" +
                                std::to_string(lo) + ", " +
                                std::to_string(hi) + "] is reversed");
  }
  return (lo + hi) / 2.0;
}

// ------------------------------------------------------------ vocabulary

namespace {

bool is_excluded_token(const std::string& label) {
  std::string lower;
  lower.reserve(label.size());
  for (char c : label) {
    lower.push_back(static_cast<char>(
        std::tolower(static_cast<unsigned char>(c))));
  }
  return lower == "unknown" || lower == "anonymous";
}

}  // namespace

LabelVocabulary build_label_vocab(std::span<const MetadataRecord> records,
                                  const std::string& task, int min_samples) {
  if (min_samples < 1) {
    throw std::invalid_argument("build_label_vocab: min_samples must be >= 1");
  }
  std::map<std::string, std::int64_t> freq;
  auto add = [&](const std::string& raw) {
    const std::string label =
        task == "material" ? stem_material_label(raw) : raw;
    if (label.empty() || is_excluded_token(label)) return;
    ++freq[label];
  };
  for (const MetadataRecord& rec : records) {
    if (task == "artist") {
      if (rec.artist) add(*rec.artist);
    } else if (task == "type") {
      for (const auto& t : rec.types) add(t);
    } else if (task == "material") {
      for (const auto& m : rec.materials) add(m);
    } else {
      throw std::invalid_argument("build_label_vocab: no vocabulary for task '" +
                                  task + "'");
    }
  }

  std::vector<std::pair<std::string, std::int64_t>> kept;
  for (const auto& [label, count] : freq) {
    if (count >= min_samples) kept.emplace_back(label, count);
  }
  if (kept.empty()) {
    throw VocabularyError("task '" + task + "': no label reaches " +
                          std::to_string(min_samples) + " samples");
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  LabelVocabulary vocab;
  vocab.labels.reserve(kept.size());
  vocab.frequencies.reserve(kept.size());
  for (const auto& [label, count] : kept) {
    vocab.index.emplace(label, static_cast<int>(vocab.labels.size()));
    vocab.labels.push_back(label);
    vocab.frequencies.push_back(count);
  }
  return vocab;
}

// -------------------------------------------------------------- splitting

SplitAssignment stratified_split(std::span<const int> anchor_class_ids,
                                 int n_classes,
                                 std::span<const std::string> class_names,
                                 std::array<double, 3> ratios,
                                 std::uint64_t seed) {
  for (double r : ratios) {
    if (r <= 0.0) {
      throw std::invalid_argument("stratified_split: ratios must be positive");
    }
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) {
    throw std::invalid_argument("stratified_split: ratios must sum to 1");
  }
  if (n_classes < 1) {
    throw std::invalid_argument("stratified_split: no anchor classes");
  }

  std::vector<std::vector<std::size_t>> members(
      static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < anchor_class_ids.size(); ++i) {
    const int c = anchor_class_ids[i];
    if (c < 0) continue;  // excluded anchor label drops the sample everywhere
    if (c >= n_classes) {
      throw std::invalid_argument("stratified_split: class id out of range");
    }
    members[static_cast<std::size_t>(c)].push_back(i);
  }

  SplitAssignment assignment;
  assignment.seed = seed;
  assignment.ratios = ratios;
  assignment.tags.assign(anchor_class_ids.size(), Split::Excluded);

  for (int c = 0; c < n_classes; ++c) {
    auto& idx = members[static_cast<std::size_t>(c)];
    const auto m = static_cast<std::int64_t>(idx.size());
    if (m < 3) {
      const std::string name =
          static_cast<std::size_t>(c) < class_names.size()
              ? "\"" + class_names[static_cast<std::size_t>(c)] + "\""
              : "#" + std::to_string(c);
      throw StratificationError(
          "anchor class " + name + " has " + std::to_string(m) +
          " samples; stratification needs at least 3");
    }
    auto train = static_cast<std::int64_t>(
        std::floor(ratios[0] * static_cast<double>(m)));
    train = std::clamp<std::int64_t>(train, 1, m - 2);
    auto test = static_cast<std::int64_t>(
        std::floor(ratios[2] * static_cast<double>(m)));
    test = std::clamp<std::int64_t>(test, 1, m - 1 - train);
    const std::int64_t val = m - train - test;

    Rng rng(mix64(seed ^ mix64(static_cast<std::uint64_t>(c) + 1)));
    rng.shuffle(idx);
    for (std::int64_t r = 0; r < m; ++r) {
      const Split tag = r < train              ? Split::Train
                        : r < train + val      ? Split::Val
                                               : Split::Test;
      assignment.tags[idx[static_cast<std::size_t>(r)]] = tag;
    }
  }
  return assignment;
}

void save_split(const std::filesystem::path& path,
                std::span<const std::string> sample_ids,
                const SplitAssignment& assignment) {
  if (sample_ids.size() != assignment.tags.size()) {
    throw std::invalid_argument("save_split: id/tag count mismatch");
  }
  json assignments = json::object();
  for (std::size_t i = 0; i < sample_ids.size(); ++i) {
    assignments[sample_ids[i]] = to_string(assignment.tags[i]);
  }
  json doc = {{"seed", assignment.seed},
              {"ratios", assignment.ratios},
              {"assignments", assignments}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw DataError("cannot create split file " + path.string());
  }
  out << doc.dump(2) << '\n';
  if (!out) {
    throw DataError("write failed for " + path.string());
  }
}

LoadedSplit load_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("cannot open split file " + path.string());
  }
  json doc;
  try {
    in >> doc;
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (!doc.is_object() || !doc.contains("assignments") ||
      !doc["assignments"].is_object()) {
    throw DataError(path.string() + ": missing \"assignments\" object");
  }
  LoadedSplit split;
  split.seed = doc.value("seed", 0ull);
  if (doc.contains("ratios") && doc["ratios"].is_array() &&
      doc["ratios"].size() == 3) {
    for (int i = 0; i < 3; ++i) {
      split.ratios[static_cast<std::size_t>(i)] =
          doc["ratios"][static_cast<std::size_t>(i)].get<double>();
    }
  }
  for (const auto& [id, tag] : doc["assignments"].items()) {
    if (!tag.is_string()) {
      throw DataError(path.string() + ": assignment for \"" + id +
                      "\" is not a string");
    }
    split.assignments.emplace(id, split_from_string(tag.get<std::string>()));
  }
  return split;
}

void apply_split(FeatureDataset& dataset, const LoadedSplit& split) {
  for (Index i = 0; i < dataset.size(); ++i) {
    const auto it =
        split.assignments.find(dataset.sample_ids[static_cast<std::size_t>(i)]);
    dataset.split[static_cast<std::size_t>(i)] =
        it == split.assignments.end() ? Split::Excluded : it->second;
  }
}

// --------------------------------------------------------------- assembly

FeatureDataset assemble_dataset(MatF features,
                                std::span<const MetadataRecord> records,
                                const TaskVocabularies& vocabs) {
  if (static_cast<std::size_t>(features.rows()) != records.size()) {
    throw DataError("feature rows (" + std::to_string(features.rows()) +
                    ") != metadata records (" +
                    std::to_string(records.size()) + ")");
  }
  if (!features.allFinite()) {
    throw DataError("feature matrix contains NaN/Inf");
  }
  FeatureDataset ds;
  ds.features = std::move(features);
  const std::size_t n = records.size();
  ds.sample_ids.reserve(n);
  ds.artist.assign(n, -1);
  ds.types.resize(n);
  ds.materials.resize(n);
  ds.has_period.assign(n, 0);
  ds.period_year.assign(n, 0.0);
  ds.split.assign(n, Split::Excluded);

  for (std::size_t i = 0; i < n; ++i) {
    const MetadataRecord& rec = records[i];
    ds.sample_ids.push_back(rec.id);
    if (vocabs.artist && rec.artist) {
      if (auto id = vocabs.artist->id_of(*rec.artist)) ds.artist[i] = *id;
    }
    if (vocabs.type) {
      for (const auto& t : rec.types) {
        if (auto id = vocabs.type->id_of(t)) ds.types[i].push_back(*id);
      }
      std::sort(ds.types[i].begin(), ds.types[i].end());
      ds.types[i].erase(std::unique(ds.types[i].begin(), ds.types[i].end()),
                        ds.types[i].end());
    }
    if (vocabs.material) {
      for (const auto& m : rec.materials) {
        if (auto id = vocabs.material->id_of(stem_material_label(m))) {
          ds.materials[i].push_back(*id);
        }
      }
      std::sort(ds.materials[i].begin(), ds.materials[i].end());
      ds.materials[i].erase(
          std::unique(ds.materials[i].begin(), ds.materials[i].end()),
          ds.materials[i].end());
    }
    if (rec.has_period) {
      ds.has_period[i] = 1;
      ds.period_year[i] = resolve_period(rec.period_lo, rec.period_hi);
    }
  }
  return ds;
}

void compute_period_stats(FeatureDataset& dataset) {
  double sum = 0.0;
  std::int64_t count = 0;
  for (Index i = 0; i < dataset.size(); ++i) {
    const auto u = static_cast<std::size_t>(i);
    if (dataset.split[u] == Split::Train && dataset.has_period[u]) {
      sum += dataset.period_year[u];
      ++count;
    }
  }
  if (count == 0) return;
  const double mean = sum / static_cast<double>(count);
  double sq = 0.0;
  for (Index i = 0; i < dataset.size(); ++i) {
    const auto u = static_cast<std::size_t>(i);
    if (dataset.split[u] == Split::Train && dataset.has_period[u]) {
      const double d = dataset.period_year[u] - mean;
      sq += d * d;
    }
  }
  const double std_dev = std::sqrt(sq / static_cast<double>(count));
  dataset.period_mean = mean;
  dataset.period_std = std_dev > 1e-12 ? std_dev : 1.0;
}

// -------------------------------------------------------------- synthetic

namespace {

std::string padded_label(const std::string& prefix, int value, int width) {
  std::string digits = std::to_string(value);
  if (static_cast<int>(digits.size()) < width) {
    digits.insert(0, static_cast<std::size_t>(width) - digits.size(), '0');
  }
  return prefix + digits;
}

}  // namespace

SyntheticData generate_synthetic(int n_classes, int samples_per_class, int dim,
                                 double entanglement, std::uint64_t seed) {
  if (n_classes < 1 || samples_per_class < 1 || dim < 1) {
    throw std::invalid_argument("generate_synthetic: sizes must be positive");
  }
  if (entanglement < 0.0 || entanglement > 1.0) {
    throw std::invalid_argument(
        "generate_synthetic: entanglement must be in [0, 1]");
  }

  constexpr int kTypes = 8;
  constexpr int kMaterials = 12;
  constexpr double kYearLo = 1400.0;
  constexpr double kYearHi = 1900.0;
  constexpr double kFeatureNoise = 0.8;
  const double e = entanglement;

  const int class_width =
      std::max(2, static_cast<int>(std::to_string(n_classes - 1).size()));

  Rng rng(mix64(seed ^ fnv1a("synthetic")));
  MatF prototypes(n_classes, dim);
  for (int c = 0; c < n_classes; ++c) {
    for (int d = 0; d < dim; ++d) {
      prototypes(c, d) = static_cast<float>(rng.normal());
    }
  }

  const Index n = static_cast<Index>(n_classes) * samples_per_class;
  SyntheticData out;
  out.features.resize(n, dim);
  out.records.reserve(static_cast<std::size_t>(n));

  Index row = 0;
  for (int c = 0; c < n_classes; ++c) {
    // spread mean years evenly so each artist has a stable period signature
    const double artist_year =
        kYearLo + (c + 0.5) * (kYearHi - kYearLo) / n_classes;
    const int primary_type = c % kTypes;
    const int primary_material = c % kMaterials;

    for (int k = 0; k < samples_per_class; ++k, ++row) {
      for (int d = 0; d < dim; ++d) {
        out.features(row, d) =
            prototypes(c, d) +
            static_cast<float>(kFeatureNoise * rng.normal());
      }

      MetadataRecord rec;
      rec.id = padded_label("s", static_cast<int>(row), 6);
      rec.artist = padded_label("artist_", c, class_width);

      auto pick = [&](int primary, int cardinality) {
        return rng.uniform01() < e
                   ? primary
                   : static_cast<int>(rng.below(
                         static_cast<std::uint64_t>(cardinality)));
      };
      std::vector<int> type_ids{pick(primary_type, kTypes)};
      if (rng.uniform01() < (1.0 - e) * 0.5) {
        type_ids.push_back(
            static_cast<int>(rng.below(static_cast<std::uint64_t>(kTypes))));
      }
      std::vector<int> material_ids{pick(primary_material, kMaterials)};
      if (rng.uniform01() < (1.0 - e) * 0.5) {
        material_ids.push_back(static_cast<int>(
            rng.below(static_cast<std::uint64_t>(kMaterials))));
      }
      std::sort(type_ids.begin(), type_ids.end());
      type_ids.erase(std::unique(type_ids.begin(), type_ids.end()),
                     type_ids.end());
      std::sort(material_ids.begin(), material_ids.end());
      material_ids.erase(
          std::unique(material_ids.begin(), material_ids.end()),
          material_ids.end());
      for (int t : type_ids) rec.types.push_back(padded_label("type_", t, 2));
      for (int m : material_ids) {
        rec.materials.push_back(padded_label("mat_", m, 2));
      }

      // entanglement 1: the artist's year exactly; 0: uniform over the range
      const double year =
          e * artist_year +
          (1.0 - e) * (rng.uniform(kYearLo, kYearHi) + 15.0 * rng.normal());
      rec.has_period = true;
      rec.period_lo = rec.period_hi = year;

      rec.has_truth = true;
      rec.truth_artist_year = artist_year;
      rec.truth_primary_type = primary_type;
      rec.truth_primary_material = primary_material;
      out.records.push_back(std::move(rec));
    }
  }
  return out;
}

}  // namespace mtl
