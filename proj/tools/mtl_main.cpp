// mtl: multi-task training over precomputed feature vectors.
//
// Subcommands: synth, split, train, eval, bench, analyze.
// Exit codes: 0 success, 1 usage error, 2 data/format error, 3 runtime error.

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mtl/analysis.hpp"
#include "mtl/data.hpp"
#include "mtl/engine.hpp"
#include "mtl/errors.hpp"
#include "mtl/metrics.hpp"
#include "mtl/model.hpp"

namespace {

using nlohmann::json;

std::vector<std::string> split_list(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream stream(csv);
  std::string item;
  while (std::getline(stream, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::array<double, 3> parse_ratios(const std::string& csv) {
  const auto parts = split_list(csv);
  if (parts.size() != 3) {
    throw mtl::UsageError("--ratios wants three comma-separated values");
  }
  std::array<double, 3> ratios{};
  for (int i = 0; i < 3; ++i) {
    try {
      ratios[static_cast<std::size_t>(i)] = std::stod(parts[static_cast<std::size_t>(i)]);
    } catch (const std::exception&) {
      throw mtl::UsageError("--ratios: \"" + parts[static_cast<std::size_t>(i)] +
                            "\" is not a number");
    }
  }
  for (double r : ratios) {
    if (r <= 0.0) throw mtl::UsageError("--ratios entries must be positive");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) {
    throw mtl::UsageError("--ratios must sum to 1");
  }
  return ratios;
}

void write_text_file(const std::filesystem::path& path,
                     const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw mtl::DataError("cannot create " + path.string());
  out << text;
  if (!text.empty() && text.back() != '\n') out << '\n';
  if (!out) throw mtl::DataError("write failed for " + path.string());
}

mtl::TaskVocabularies build_vocabs(std::span<const mtl::MetadataRecord> records,
                                   std::span<const std::string> tasks,
                                   int min_samples) {
  mtl::TaskVocabularies vocabs;
  for (const std::string& task : tasks) {
    if (task == "artist") {
      vocabs.artist = mtl::build_label_vocab(records, "artist", min_samples);
    } else if (task == "type") {
      vocabs.type = mtl::build_label_vocab(records, "type", min_samples);
    } else if (task == "material") {
      vocabs.material = mtl::build_label_vocab(records, "material", min_samples);
    } else if (task != "period") {
      throw mtl::UsageError("unknown task \"" + task +
                            "\" (expected artist, type, material or period)");
    }
  }
  return vocabs;
}

mtl::FeatureDataset load_dataset(const std::string& features_path,
                                 const std::string& meta_path,
                                 const std::string& splits_path,
                                 const mtl::TaskVocabularies& vocabs) {
  mtl::MatF features = mtl::load_feature_matrix(features_path);
  const auto records = mtl::load_metadata_jsonl(meta_path);
  mtl::FeatureDataset ds =
      mtl::assemble_dataset(std::move(features), records, vocabs);
  mtl::apply_split(ds, mtl::load_split(splits_path));
  mtl::compute_period_stats(ds);
  return ds;
}

// ------------------------------------------------------------ subcommands

struct SynthArgs {
  int classes = 10;
  int per_class = 50;
  int dim = 32;
  double entanglement = 0.8;
  std::uint64_t seed = 0;
  std::string out_features;
  std::string out_meta;
};

int run_synth(const SynthArgs& args) {
  if (args.entanglement < 0.0 || args.entanglement > 1.0) {
    throw mtl::UsageError("--entanglement must lie in [0, 1]");
  }
  if (args.classes < 1 || args.per_class < 1 || args.dim < 1) {
    throw mtl::UsageError("--classes, --per-class and --dim must be positive");
  }
  const mtl::SyntheticData synth = mtl::generate_synthetic(
      args.classes, args.per_class, args.dim, args.entanglement, args.seed);
  mtl::save_feature_matrix(args.out_features, synth.features);
  mtl::save_metadata_jsonl(args.out_meta, synth.records);
  std::cerr << "wrote " << synth.features.rows() << "x" << synth.features.cols()
            << " features and " << synth.records.size() << " records\n";
  return 0;
}

struct SplitArgs {
  std::string meta;
  std::string anchor_task = "artist";
  std::string ratios = "0.7,0.2,0.1";
  int min_samples = 3;
  std::uint64_t seed = 0;
  std::string out;
};

int run_split(const SplitArgs& args) {
  const auto ratios = parse_ratios(args.ratios);
  if (args.min_samples < 1) {
    throw mtl::UsageError("--min-samples must be >= 1");
  }
  const auto records = mtl::load_metadata_jsonl(args.meta);
  const mtl::LabelVocabulary vocab =
      mtl::build_label_vocab(records, args.anchor_task, args.min_samples);

  std::vector<int> anchor_ids;
  std::vector<std::string> ids;
  anchor_ids.reserve(records.size());
  for (const auto& rec : records) {
    ids.push_back(rec.id);
    int cls = -1;
    if (args.anchor_task == "artist" && rec.artist) {
      cls = vocab.id_of(*rec.artist).value_or(-1);
    }
    anchor_ids.push_back(cls);
  }
  const mtl::SplitAssignment assignment = mtl::stratified_split(
      anchor_ids, vocab.size(), vocab.labels, ratios, args.seed);
  mtl::save_split(args.out, ids, assignment);
  std::cerr << "split " << ids.size() << " samples over " << vocab.size()
            << " anchor classes\n";
  return 0;
}

struct TrainArgs {
  std::string features, meta, splits;
  std::string tasks = "artist,type,material,period";
  int hidden = 64;
  int batch = 32;
  int epochs = 30;
  double lr = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  bool calibrate = false;
  int min_samples = 1;
  std::string out_model, out_log;
};

int run_train(const TrainArgs& args) {
  const auto tasks = split_list(args.tasks);
  if (tasks.empty()) throw mtl::UsageError("--tasks is empty");
  if (args.hidden < 1 || args.batch < 1 || args.epochs < 1 || args.lr < 0.0) {
    throw mtl::UsageError("--hidden, --batch, --epochs must be positive and --lr >= 0");
  }
  const auto records = mtl::load_metadata_jsonl(args.meta);
  const auto vocabs = build_vocabs(records, tasks, args.min_samples);
  const mtl::FeatureDataset ds =
      load_dataset(args.features, args.meta, args.splits, vocabs);

  mtl::TrainConfig config;
  config.batch_size = args.batch;
  config.epochs = args.epochs;
  config.lr = args.lr;
  config.momentum = args.momentum;
  config.seed = args.seed;
  config.hidden = args.hidden;
  config.calibration = args.calibrate ? mtl::CalibrationMode::AfterWarmup
                                      : mtl::CalibrationMode::Off;

  const auto specs = mtl::build_task_specs(ds, vocabs, tasks);
  const mtl::TrainResult result = mtl::train(ds, specs, config);
  mtl::save_model(result.model, args.out_model);
  if (!args.out_log.empty()) {
    write_text_file(args.out_log, mtl::train_log_to_json(result.log));
  }
  std::cerr << "checkpoint written to " << args.out_model << " (best epoch "
            << result.log.best_epoch << ")\n";
  return 0;
}

struct EvalArgs {
  std::string model, features, meta, splits;
  std::string split = "test";
  int min_samples = 1;
  bool label_map = false;
  std::string report;
};

int run_eval(const EvalArgs& args) {
  const mtl::MultiTaskModel<float> model = mtl::load_model(args.model);
  std::vector<std::string> tasks;
  for (const auto& spec : model.task_specs) tasks.push_back(spec.name);

  const auto records = mtl::load_metadata_jsonl(args.meta);
  const auto vocabs = build_vocabs(records, tasks, args.min_samples);
  const mtl::FeatureDataset ds =
      load_dataset(args.features, args.meta, args.splits, vocabs);
  if (ds.dim() != model.input_dim()) {
    throw mtl::DataError("feature dimension " + std::to_string(ds.dim()) +
                         " != model input dimension " +
                         std::to_string(model.input_dim()));
  }
  for (const auto& spec : model.task_specs) {
    const mtl::LabelVocabulary* vocab =
        spec.name == "artist"     ? (vocabs.artist ? &*vocabs.artist : nullptr)
        : spec.name == "type"     ? (vocabs.type ? &*vocabs.type : nullptr)
        : spec.name == "material" ? (vocabs.material ? &*vocabs.material : nullptr)
                                  : nullptr;
    if (vocab && vocab->size() != spec.output_dim) {
      throw mtl::DataError("task '" + spec.name + "': vocabulary size " +
                           std::to_string(vocab->size()) +
                           " != model output dim " +
                           std::to_string(spec.output_dim));
    }
  }

  mtl::MetricsReport report = mtl::evaluate_epoch(
      model, ds, mtl::split_from_string(args.split), args.label_map);
  for (auto& tm : report.per_task) {
    if (tm.confusion && tm.task == "artist" && vocabs.artist) {
      tm.confusion->labels = vocabs.artist->labels;
    }
  }
  write_text_file(args.report, mtl::metrics_report_to_json(report));

  const std::filesystem::path report_path(args.report);
  for (const auto& tm : report.per_task) {
    if (!tm.confusion) continue;
    std::filesystem::path csv = report_path;
    csv.replace_extension(tm.task + ".confusion.csv");
    std::ofstream out(csv, std::ios::trunc);
    if (!out) throw mtl::DataError("cannot create " + csv.string());
    mtl::write_confusion_csv(*tm.confusion, out);
    std::cerr << "confusion matrix written to " << csv.string() << "\n";
  }
  std::cerr << "report written to " << args.report << "\n";
  return 0;
}

struct BenchArgs {
  int features_dims = 2048;
  int hidden = 512;
  std::string tasks_dims = "100,50,50,1";
  int batches = 200;
  int batch = 32;
  std::uint64_t seed = 0;
  std::string out;
};

int run_bench(const BenchArgs& args) {
  if (args.batches < 1 || args.batch < 1 || args.features_dims < 1 ||
      args.hidden < 1) {
    throw mtl::UsageError("--batches, --batch and dimensions must be >= 1");
  }
  const auto dims = split_list(args.tasks_dims);
  if (dims.size() < 2) {
    throw mtl::UsageError("benchmark needs at least 2 tasks in --tasks-dims");
  }
  std::vector<mtl::TaskSpec> specs;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    int k = 0;
    try {
      k = std::stoi(dims[i]);
    } catch (const std::exception&) {
      throw mtl::UsageError("--tasks-dims: \"" + dims[i] + "\" is not a number");
    }
    if (k < 1) throw mtl::UsageError("--tasks-dims entries must be >= 1");
    specs.push_back({"t" + std::to_string(i), mtl::TaskKind::Multiclass, k,
                     1.0, 1.0, {}});
  }
  const auto model = mtl::build_model<float>(args.features_dims, args.hidden,
                                             specs, args.seed);
  const mtl::BenchmarkReport report =
      mtl::benchmark_multitask_vs_single(model, args.batches, args.batch,
                                         args.seed);
  const std::string text = mtl::benchmark_report_to_json(report);
  if (args.out.empty()) {
    std::cout << text << "\n";
  } else {
    write_text_file(args.out, text);
  }
  std::cerr << "measured ratio " << report.measured_ratio << ", flop ratio "
            << report.flop_ratio << "\n";
  return 0;
}

struct AnalyzeArgs {
  std::string meta;
  double bin_width = 25.0;
  std::string third_task = "material";
  std::string query;
  std::string confusion;
  int top_confusions = 0;
  std::string model, features, splits;
  std::string split = "test";
  std::string export_features;
  int min_samples = 1;
  std::string out;
};

int run_analyze(const AnalyzeArgs& args) {
  json output = json::object();
  bool did_anything = false;

  if (!args.query.empty()) {
    if (args.meta.empty()) {
      throw mtl::UsageError("--query needs --meta");
    }
    const auto bar = args.query.find('|');
    const auto comma = args.query.find(',', bar == std::string::npos ? 0 : bar);
    if (bar == std::string::npos || comma == std::string::npos) {
      throw mtl::UsageError(
          "--query format is \"artist|year,label\" (e.g. \"artist_03|1625,mat_02\")");
    }
    const std::string artist = args.query.substr(0, bar);
    const std::string year_text = args.query.substr(bar + 1, comma - bar - 1);
    std::string third = args.query.substr(comma + 1);
    double year = 0.0;
    try {
      year = std::stod(year_text);
    } catch (const std::exception&) {
      throw mtl::UsageError("--query: \"" + year_text + "\" is not a year");
    }
    if (args.third_task == "material") third = mtl::stem_material_label(third);

    const auto records = mtl::load_metadata_jsonl(args.meta);
    const mtl::CooccurrenceTable table =
        mtl::build_cooccurrence(records, args.bin_width, args.third_task);
    const mtl::ConditionalProbability p =
        mtl::conditional_probability(table, artist, year, third);
    output["query"] = {{"artist", artist},
                       {"year", year},
                       {"period_bin", table.bin_of(year)},
                       {args.third_task, third}};
    output["probability"] = p.value;
    output["joint_count"] = p.joint_count;
    output["conditioning_count"] = p.conditioning_count;
    did_anything = true;
  }

  if (args.top_confusions > 0) {
    if (args.confusion.empty()) {
      throw mtl::UsageError("--top-confusions needs --confusion CSV");
    }
    std::ifstream in(args.confusion);
    if (!in) throw mtl::DataError("cannot open " + args.confusion);
    const mtl::ConfusionMatrix cm = mtl::read_confusion_csv(in);
    const auto pairs = mtl::top_confusions(cm, args.top_confusions);
    json ranked = json::array();
    for (const auto& pair : pairs) {
      auto label = [&](int c) {
        return static_cast<std::size_t>(c) < cm.labels.size()
                   ? cm.labels[static_cast<std::size_t>(c)]
                   : "class_" + std::to_string(c);
      };
      ranked.push_back({{"true", label(pair.true_class)},
                        {"pred", label(pair.pred_class)},
                        {"count", pair.count},
                        {"symmetric_count", pair.symmetric_count}});
    }
    output["top_confusions"] = ranked;
    did_anything = true;
  }

  if (!args.export_features.empty()) {
    if (args.model.empty() || args.features.empty() || args.splits.empty() ||
        args.meta.empty()) {
      throw mtl::UsageError(
          "--export-features needs --model, --features, --meta and --splits");
    }
    const auto model = mtl::load_model(args.model);
    std::vector<std::string> tasks;
    for (const auto& spec : model.task_specs) tasks.push_back(spec.name);
    const auto records = mtl::load_metadata_jsonl(args.meta);
    const auto vocabs = build_vocabs(records, tasks, args.min_samples);
    const mtl::FeatureDataset ds =
        load_dataset(args.features, args.meta, args.splits, vocabs);
    const mtl::Index rows = mtl::export_shared_features(
        model, ds, mtl::split_from_string(args.split), args.export_features);
    output["exported_rows"] = rows;
    output["exported_dim"] = model.hidden_dim();
    did_anything = true;
  }

  if (!did_anything) {
    throw mtl::UsageError(
        "analyze: pass --query, --top-confusions or --export-features");
  }
  const std::string text = output.dump(2);
  if (args.out.empty()) {
    std::cout << text << "\n";
  } else {
    write_text_file(args.out, text);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-task learning over precomputed feature vectors"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand(
      "synth", "generate a synthetic correlated-task dataset");
  synth_cmd->add_option("--classes", synth.classes, "number of artists");
  synth_cmd->add_option("--per-class", synth.per_class, "samples per artist");
  synth_cmd->add_option("--dim", synth.dim, "feature dimension");
  synth_cmd->add_option("--entanglement", synth.entanglement,
                        "label entanglement in [0,1]");
  synth_cmd->add_option("--seed", synth.seed, "generator seed");
  synth_cmd->add_option("--out-features", synth.out_features, "feature file")
      ->required();
  synth_cmd->add_option("--out-meta", synth.out_meta, "metadata JSONL")
      ->required();

  SplitArgs split;
  auto* split_cmd =
      app.add_subcommand("split", "stratified train/val/test split");
  split_cmd->add_option("--meta", split.meta, "metadata JSONL")->required();
  split_cmd->add_option("--anchor-task", split.anchor_task,
                        "task whose classes stratify the split");
  split_cmd->add_option("--ratios", split.ratios, "train,val,test ratios");
  split_cmd->add_option("--min-samples", split.min_samples,
                        "minimum samples per anchor class");
  split_cmd->add_option("--seed", split.seed, "shuffle seed");
  split_cmd->add_option("--out", split.out, "split JSON")->required();

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train a multi-task model");
  train_cmd->add_option("--features", train_args.features, "feature file")
      ->required();
  train_cmd->add_option("--meta", train_args.meta, "metadata JSONL")
      ->required();
  train_cmd->add_option("--splits", train_args.splits, "split JSON")
      ->required();
  train_cmd->add_option("--tasks", train_args.tasks,
                        "comma-separated task list");
  train_cmd->add_option("--hidden", train_args.hidden, "shared layer width");
  train_cmd->add_option("--batch", train_args.batch, "batch size");
  train_cmd->add_option("--epochs", train_args.epochs, "training epochs");
  train_cmd->add_option("--lr", train_args.lr, "learning rate");
  train_cmd->add_option("--momentum", train_args.momentum, "momentum");
  train_cmd->add_option("--seed", train_args.seed, "training seed");
  train_cmd->add_flag("--calibrate", train_args.calibrate,
                      "calibrate task weights after a warm-up epoch");
  train_cmd->add_option("--min-samples", train_args.min_samples,
                        "vocabulary threshold");
  train_cmd->add_option("--out-model", train_args.out_model, "checkpoint path")
      ->required();
  train_cmd->add_option("--out-log", train_args.out_log, "train log JSON");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--model", eval_args.model, "checkpoint path")
      ->required();
  eval_cmd->add_option("--features", eval_args.features, "feature file")
      ->required();
  eval_cmd->add_option("--meta", eval_args.meta, "metadata JSONL")->required();
  eval_cmd->add_option("--splits", eval_args.splits, "split JSON")->required();
  eval_cmd->add_option("--split", eval_args.split, "split to evaluate");
  eval_cmd->add_option("--min-samples", eval_args.min_samples,
                       "vocabulary threshold");
  eval_cmd->add_flag("--label-map", eval_args.label_map,
                     "also report label-wise (macro) MAP");
  eval_cmd->add_option("--report", eval_args.report, "metrics JSON")
      ->required();

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand(
      "bench", "multi-task vs single-task timing benchmark");
  bench_cmd->add_option("--features-dims", bench.features_dims,
                        "input feature dimension");
  bench_cmd->add_option("--hidden", bench.hidden, "shared layer width");
  bench_cmd->add_option("--tasks-dims", bench.tasks_dims,
                        "comma-separated head output dims");
  bench_cmd->add_option("--batches", bench.batches, "batches per pass");
  bench_cmd->add_option("--batch", bench.batch, "batch size");
  bench_cmd->add_option("--seed", bench.seed, "input seed");
  bench_cmd->add_option("--out", bench.out, "report JSON (default stdout)");

  AnalyzeArgs analyze;
  auto* analyze_cmd = app.add_subcommand(
      "analyze", "conditional probabilities, confusion ranking, feature export");
  analyze_cmd->add_option("--meta", analyze.meta, "metadata JSONL");
  analyze_cmd->add_option("--bin-width", analyze.bin_width,
                          "period bin width in years");
  analyze_cmd->add_option("--third-task", analyze.third_task,
                          "material or type");
  analyze_cmd->add_option("--query", analyze.query,
                          "conditional probability query: artist|year,label");
  analyze_cmd->add_option("--confusion", analyze.confusion,
                          "confusion CSV to rank");
  analyze_cmd->add_option("--top-confusions", analyze.top_confusions,
                          "how many confusion pairs to report");
  analyze_cmd->add_option("--model", analyze.model, "checkpoint path");
  analyze_cmd->add_option("--features", analyze.features, "feature file");
  analyze_cmd->add_option("--splits", analyze.splits, "split JSON");
  analyze_cmd->add_option("--split", analyze.split, "split to export");
  analyze_cmd->add_option("--export-features", analyze.export_features,
                          "write shared-layer activations to this OMFT file");
  analyze_cmd->add_option("--min-samples", analyze.min_samples,
                          "vocabulary threshold");
  analyze_cmd->add_option("--out", analyze.out, "output JSON (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*synth_cmd) return run_synth(synth);
    if (*split_cmd) return run_split(split);
    if (*train_cmd) return run_train(train_args);
    if (*eval_cmd) return run_eval(eval_args);
    if (*bench_cmd) return run_bench(bench);
    if (*analyze_cmd) return run_analyze(analyze);
  } catch (const mtl::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const mtl::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
