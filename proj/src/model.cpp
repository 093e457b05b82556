#include "mtl/model.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "binary_io.hpp"

namespace mtl {

using nlohmann::json;

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Multiclass: return "multiclass";
    case TaskKind::Multilabel: return "multilabel";
    case TaskKind::Regression: return "regression";
  }
  return "multiclass";
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "multiclass") return TaskKind::Multiclass;
  if (s == "multilabel") return TaskKind::Multilabel;
  if (s == "regression") return TaskKind::Regression;
  throw DataError("unknown task kind \"" + s + "\"");
}

// ------------------------------------------------------------- calibration

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

CalibrationResult calibrate_weights_scales(std::span<const TaskSpec> specs,
                                           std::span<const double> val_losses,
                                           const CalibrationOptions& options) {
  if (specs.empty() || specs.size() != val_losses.size()) {
    throw std::invalid_argument(
        "calibrate_weights_scales: loss count != task count");
  }
  for (double loss : val_losses) {
    if (!(loss > 0.0)) {
      throw std::invalid_argument(
          "calibrate_weights_scales: validation losses must be > 0");
    }
  }

  const std::size_t n = specs.size();
  std::vector<double> class_losses;
  for (std::size_t i = 0; i < n; ++i) {
    if (specs[i].kind != TaskKind::Regression) {
      class_losses.push_back(val_losses[i]);
    }
  }

  CalibrationResult result;
  result.scales.assign(n, 1.0);
  if (!class_losses.empty()) {
    const double med_class = median(class_losses);
    for (std::size_t i = 0; i < n; ++i) {
      if (specs[i].kind != TaskKind::Regression) continue;
      double s = med_class / val_losses[i];
      if (options.round_scales_to_power_of_ten) {
        s = std::pow(10.0, std::round(std::log10(s)));
      }
      result.scales[i] = s;
    }
  }

  std::vector<double> scaled(n);
  for (std::size_t i = 0; i < n; ++i) {
    scaled[i] = result.scales[i] * val_losses[i];
  }
  const double med = median(scaled);
  result.weights.resize(n);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    result.weights[i] = med / scaled[i];
    sum += result.weights[i];
  }
  const double norm = static_cast<double>(n) / sum;
  for (double& w : result.weights) w *= norm;
  return result;
}

// -------------------------------------------------------------- checkpoint

namespace {

constexpr char kModelMagic[4] = {'O', 'M', 'T', 'L'};
constexpr std::uint32_t kModelVersion = 1;

using RowMajorF =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void write_layer(detail::BinaryWriter& writer, const DenseLayer<float>& layer) {
  const RowMajorF staged(layer.weights);
  writer.write_bytes(staged.data(),
                     static_cast<std::size_t>(staged.size()) * sizeof(float));
  writer.write_bytes(layer.bias.data(),
                     static_cast<std::size_t>(layer.bias.size()) *
                         sizeof(float));
}

void read_layer(detail::BinaryReader& reader, DenseLayer<float>& layer) {
  RowMajorF staged(layer.out_dim(), layer.in_dim());
  reader.read_bytes(staged.data(),
                    static_cast<std::size_t>(staged.size()) * sizeof(float),
                    "layer weights");
  layer.weights = staged;
  reader.read_bytes(layer.bias.data(),
                    static_cast<std::size_t>(layer.bias.size()) *
                        sizeof(float),
                    "layer bias");
}

json specs_to_json(std::span<const TaskSpec> specs) {
  json arr = json::array();
  for (const TaskSpec& spec : specs) {
    json obj = {{"name", spec.name},
                {"kind", to_string(spec.kind)},
                {"output_dim", spec.output_dim},
                {"weight", spec.weight},
                {"scale", spec.scale}};
    if (!spec.class_weights.empty()) obj["class_weights"] = spec.class_weights;
    arr.push_back(std::move(obj));
  }
  return arr;
}

std::vector<TaskSpec> specs_from_json(const json& arr,
                                      const std::string& path) {
  if (!arr.is_array()) {
    throw FormatError(path + ": task spec trailer is not an array");
  }
  std::vector<TaskSpec> specs;
  for (const auto& obj : arr) {
    TaskSpec spec;
    spec.name = obj.at("name").get<std::string>();
    spec.kind = task_kind_from_string(obj.at("kind").get<std::string>());
    spec.output_dim = obj.at("output_dim").get<int>();
    spec.weight = obj.at("weight").get<double>();
    spec.scale = obj.at("scale").get<double>();
    if (obj.contains("class_weights")) {
      spec.class_weights = obj["class_weights"].get<std::vector<double>>();
    }
    specs.push_back(std::move(spec));
  }
  return specs;
}

}  // namespace

void save_model(const MultiTaskModel<float>& model,
                const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw DataError("cannot create checkpoint " + path.string());
  }
  detail::BinaryWriter writer(out, path.string());
  writer.write_bytes(kModelMagic, 4);
  writer.write_u32(kModelVersion);
  writer.write_u64(static_cast<std::uint64_t>(model.input_dim()));
  writer.write_u64(static_cast<std::uint64_t>(model.hidden_dim()));
  writer.write_u64(model.n_tasks());
  for (const auto& head : model.heads) {
    writer.write_u64(static_cast<std::uint64_t>(head.out_dim()));
  }
  write_layer(writer, model.shared);
  for (const auto& head : model.heads) {
    write_layer(writer, head);
  }
  const std::string trailer = specs_to_json(model.task_specs).dump();
  writer.write_u64(trailer.size());
  writer.write_bytes(trailer.data(), trailer.size());
}

MultiTaskModel<float> load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open checkpoint " + path.string());
  }
  detail::BinaryReader reader(in, path.string());
  reader.expect_magic(kModelMagic);
  const std::uint32_t version = reader.read_u32("version");
  if (version != kModelVersion) {
    throw FormatError(path.string() + ": unsupported version " +
                      std::to_string(version) + " at byte offset 4");
  }
  const auto input_dim = static_cast<Index>(reader.read_u64("input dim"));
  const auto hidden_dim = static_cast<Index>(reader.read_u64("hidden dim"));
  const auto n_tasks = reader.read_u64("task count");
  if (input_dim < 1 || hidden_dim < 1 || n_tasks < 1 || n_tasks > 4096) {
    throw FormatError(path.string() + ": implausible dimensions at byte offset 8");
  }
  std::vector<Index> head_dims;
  head_dims.reserve(n_tasks);
  for (std::uint64_t i = 0; i < n_tasks; ++i) {
    const auto k = static_cast<Index>(reader.read_u64("head dim"));
    if (k < 1) {
      throw FormatError(path.string() + ": head dimension < 1 at byte offset " +
                        std::to_string(reader.offset() - 8));
    }
    head_dims.push_back(k);
  }

  MultiTaskModel<float> model;
  model.shared = DenseLayer<float>(hidden_dim, input_dim);
  read_layer(reader, model.shared);
  for (Index k : head_dims) {
    DenseLayer<float> head(k, hidden_dim);
    read_layer(reader, head);
    model.heads.push_back(std::move(head));
  }

  const std::uint64_t trailer_len = reader.read_u64("trailer length");
  if (trailer_len > (1ull << 30)) {
    throw FormatError(path.string() + ": implausible trailer length");
  }
  std::string trailer(trailer_len, '\0');
  reader.read_bytes(trailer.data(), trailer_len, "task spec trailer");
  json arr;
  try {
    arr = json::parse(trailer);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": task spec trailer: " + e.what());
  }
  model.task_specs = specs_from_json(arr, path.string());
  if (model.task_specs.size() != model.heads.size()) {
    throw FormatError(path.string() + ": trailer task count != head count");
  }
  for (std::size_t i = 0; i < model.heads.size(); ++i) {
    if (model.task_specs[i].output_dim != model.heads[i].out_dim()) {
      throw FormatError(path.string() + ": trailer output_dim mismatch for task '" +
                        model.task_specs[i].name + "'");
    }
  }
  return model;
}

}  // namespace mtl
