#include "mtl/engine.hpp"

#include <chrono>
#include <cmath>
#include <iostream>

#include <json.hpp>

#include "mtl/rng.hpp"

namespace mtl {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

int task_column(const std::string& name) {
  if (name == "artist") return 0;
  if (name == "type") return 1;
  if (name == "material") return 2;
  if (name == "period") return 3;
  throw std::invalid_argument("unknown task \"" + name +
                              "\" (expected artist, type, material or period)");
}

std::vector<Index> split_rows(const FeatureDataset& ds, Split split) {
  std::vector<Index> rows;
  for (Index i = 0; i < ds.size(); ++i) {
    if (ds.split[static_cast<std::size_t>(i)] == split) rows.push_back(i);
  }
  return rows;
}

// Encodes per-sample targets for one task list; rows without a label for a
// task are masked out of that task's loss.
class TargetEncoder {
 public:
  TargetEncoder(const FeatureDataset& ds, std::span<const TaskSpec> specs)
      : ds_(ds), specs_(specs.begin(), specs.end()) {}

  Batch<float> make_batch(std::span<const Index> rows) const {
    Batch<float> batch;
    batch.inputs.resize(static_cast<Index>(rows.size()), ds_.dim());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      batch.inputs.row(static_cast<Index>(r)) = ds_.features.row(rows[r]);
    }
    for (const TaskSpec& spec : specs_) {
      append_targets(batch, spec, rows);
    }
    return batch;
  }

 private:
  void append_targets(Batch<float>& batch, const TaskSpec& spec,
                      std::span<const Index> rows) const {
    const auto batch_size = static_cast<Index>(rows.size());
    std::vector<std::uint8_t> mask(rows.size(), 0);
    switch (spec.kind) {
      case TaskKind::Multiclass: {
        IndexVec t = IndexVec::Zero(batch_size);
        for (Index r = 0; r < batch_size; ++r) {
          const int c = ds_.artist[static_cast<std::size_t>(
              rows[static_cast<std::size_t>(r)])];
          if (c >= 0 && c < spec.output_dim) {
            t[r] = c;
            mask[static_cast<std::size_t>(r)] = 1;
          }
        }
        batch.targets_per_task.emplace_back(std::move(t));
        break;
      }
      case TaskKind::Multilabel: {
        const auto& sets =
            spec.name == "type" ? ds_.types : ds_.materials;
        MatF t = MatF::Zero(batch_size, spec.output_dim);
        for (Index r = 0; r < batch_size; ++r) {
          const auto& ids = sets[static_cast<std::size_t>(
              rows[static_cast<std::size_t>(r)])];
          if (ids.empty()) continue;
          mask[static_cast<std::size_t>(r)] = 1;
          for (int id : ids) {
            if (id >= 0 && id < spec.output_dim) t(r, id) = 1.0f;
          }
        }
        batch.targets_per_task.emplace_back(std::move(t));
        break;
      }
      case TaskKind::Regression: {
        VecF t = VecF::Zero(batch_size);
        for (Index r = 0; r < batch_size; ++r) {
          const auto u = static_cast<std::size_t>(
              rows[static_cast<std::size_t>(r)]);
          if (ds_.has_period[u]) {
            t[r] = static_cast<float>(
                (ds_.period_year[u] - ds_.period_mean) / ds_.period_std);
            mask[static_cast<std::size_t>(r)] = 1;
          }
        }
        batch.targets_per_task.emplace_back(std::move(t));
        break;
      }
    }
    batch.valid_per_task.push_back(std::move(mask));
  }

  const FeatureDataset& ds_;
  std::vector<TaskSpec> specs_;
};

struct RunningLosses {
  std::vector<double> weighted_raw;  // sum of raw * n_valid
  std::vector<std::int64_t> n_valid;

  explicit RunningLosses(std::size_t n_tasks)
      : weighted_raw(n_tasks, 0.0), n_valid(n_tasks, 0) {}

  template <class S>
  void add(const std::vector<TaskLoss<S>>& losses) {
    for (std::size_t i = 0; i < losses.size(); ++i) {
      weighted_raw[i] +=
          static_cast<double>(losses[i].raw) * losses[i].n_valid;
      n_valid[i] += losses[i].n_valid;
    }
  }

  std::vector<double> means() const {
    std::vector<double> out(weighted_raw.size(), 0.0);
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (n_valid[i] > 0) {
        out[i] = weighted_raw[i] / static_cast<double>(n_valid[i]);
      }
    }
    return out;
  }
};

LossSummary summarize(std::span<const double> raw,
                      std::span<const TaskSpec> specs) {
  LossSummary summary;
  summary.per_task_raw.assign(raw.begin(), raw.end());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    summary.per_task_weighted.push_back(specs[i].weight * specs[i].scale *
                                        raw[i]);
    summary.total += summary.per_task_weighted.back();
  }
  return summary;
}

std::vector<double> pass_losses(const MultiTaskModel<float>& model,
                                const TargetEncoder& encoder,
                                std::span<const Index> rows, int batch_size) {
  RunningLosses running(model.n_tasks());
  for (std::size_t start = 0; start < rows.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop =
        std::min(rows.size(), start + static_cast<std::size_t>(batch_size));
    const Batch<float> batch =
        encoder.make_batch(rows.subspan(start, stop - start));
    const ForwardResult<float> fwd = forward_all_tasks(model, batch.inputs);
    running.add(compute_task_losses(model, fwd, batch));
  }
  return running.means();
}

struct ParamSnapshot {
  DenseLayer<float> shared;
  std::vector<DenseLayer<float>> heads;

  static ParamSnapshot of(const MultiTaskModel<float>& model) {
    return {model.shared, model.heads};
  }
  void restore(MultiTaskModel<float>& model) const {
    model.shared = shared;
    model.heads = heads;
  }
};

}  // namespace

std::vector<TaskSpec> build_task_specs(const FeatureDataset& dataset,
                                       const TaskVocabularies& vocabs,
                                       std::span<const std::string> tasks) {
  if (tasks.empty()) {
    throw std::invalid_argument("build_task_specs: no tasks requested");
  }
  std::vector<TaskSpec> specs;
  for (const std::string& name : tasks) {
    TaskSpec spec;
    spec.name = name;
    switch (task_column(name)) {
      case 0: {
        if (!vocabs.artist) {
          throw std::invalid_argument("task artist requires a vocabulary");
        }
        spec.kind = TaskKind::Multiclass;
        spec.output_dim = vocabs.artist->size();
        // inverse train-split frequency, normalized to mean 1
        std::vector<std::int64_t> counts(
            static_cast<std::size_t>(spec.output_dim), 0);
        for (Index i = 0; i < dataset.size(); ++i) {
          const auto u = static_cast<std::size_t>(i);
          if (dataset.split[u] == Split::Train && dataset.artist[u] >= 0) {
            ++counts[static_cast<std::size_t>(dataset.artist[u])];
          }
        }
        spec.class_weights.resize(counts.size());
        double sum = 0.0;
        for (std::size_t k = 0; k < counts.size(); ++k) {
          spec.class_weights[k] =
              1.0 / static_cast<double>(std::max<std::int64_t>(counts[k], 1));
          sum += spec.class_weights[k];
        }
        const double norm = static_cast<double>(counts.size()) / sum;
        for (double& w : spec.class_weights) w *= norm;
        break;
      }
      case 1:
      case 2: {
        const auto& vocab = name == "type" ? vocabs.type : vocabs.material;
        if (!vocab) {
          throw std::invalid_argument("task " + name +
                                      " requires a vocabulary");
        }
        spec.kind = TaskKind::Multilabel;
        spec.output_dim = vocab->size();
        break;
      }
      case 3:
        spec.kind = TaskKind::Regression;
        spec.output_dim = 1;
        // the regression loss runs an order of magnitude hotter than the
        // classification losses; scale it down by ten unless calibration
        // picks a different factor
        spec.scale = 0.1;
        break;
    }
    specs.push_back(std::move(spec));
  }
  validate_specs(specs);
  return specs;
}

TrainResult train(const FeatureDataset& dataset, std::vector<TaskSpec> specs,
                  const TrainConfig& config) {
  validate_specs(specs);
  if (config.batch_size < 1 || config.epochs < 1 || config.lr < 0.0) {
    throw std::invalid_argument("train: invalid batch size, epochs or lr");
  }
  const std::vector<Index> train_rows = split_rows(dataset, Split::Train);
  if (train_rows.empty()) {
    throw std::invalid_argument("train: the train split is empty");
  }
  const std::vector<Index> val_rows = split_rows(dataset, Split::Val);

  TrainResult result;
  result.model = build_model<float>(dataset.dim(), config.hidden,
                                    std::move(specs), config.seed);
  MultiTaskModel<float>& model = result.model;
  const TargetEncoder encoder(dataset, model.task_specs);
  SgdState<float> state = SgdState<float>::zeros_like(model);
  Rng shuffle_rng(sub_seed(config.seed, "shuffle"));

  // With calibration the first epoch is a warm-up; checkpoints compete from
  // the first epoch trained under the final weights.
  const int first_candidate =
      config.calibration == CalibrationMode::AfterWarmup
          ? std::min(2, config.epochs)
          : 1;
  ParamSnapshot best = ParamSnapshot::of(model);
  double best_total = std::numeric_limits<double>::infinity();
  int best_epoch = 0;

  std::vector<Index> order = train_rows;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto epoch_start = Clock::now();
    if (config.shuffle) shuffle_rng.shuffle(order);

    RunningLosses running(model.n_tasks());
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(
          order.size(), start + static_cast<std::size_t>(config.batch_size));
      const Batch<float> batch = encoder.make_batch(
          std::span<const Index>(order).subspan(start, stop - start));
      const ForwardResult<float> fwd = forward_all_tasks(model, batch.inputs);
      std::vector<TaskLoss<float>> losses =
          compute_task_losses(model, fwd, batch);
      running.add(losses);
      combined_loss(losses, model.task_specs);  // scales grads by w_i*s_i
      const GradientBundle<float> grads =
          backward_pass(model, batch.inputs, fwd, losses);
      optimizer_step(model.shared, grads.layers[0], state.velocity[0],
                     static_cast<float>(config.lr),
                     static_cast<float>(config.momentum));
      for (std::size_t h = 0; h < model.heads.size(); ++h) {
        optimizer_step(model.heads[h], grads.layers[h + 1],
                       state.velocity[h + 1], static_cast<float>(config.lr),
                       static_cast<float>(config.momentum));
      }
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.train = summarize(running.means(), model.task_specs);
    const std::vector<double> val_raw =
        val_rows.empty()
            ? entry.train.per_task_raw
            : pass_losses(model, encoder, val_rows, config.batch_size);
    entry.val = summarize(val_raw, model.task_specs);
    entry.seconds = seconds_since(epoch_start);

    if (config.progress) {
      std::cerr << "epoch " << epoch << " |";
      for (std::size_t i = 0; i < model.n_tasks(); ++i) {
        std::cerr << ' ' << model.task_specs[i].name << ' '
                  << entry.train.per_task_raw[i];
      }
      std::cerr << " | total " << entry.train.total << " | " << entry.seconds
                << "s\n";
    }

    if (epoch == 1 && config.calibration == CalibrationMode::AfterWarmup) {
      std::vector<double> positive = val_raw;
      for (double& v : positive) v = std::max(v, 1e-12);
      const CalibrationResult calib =
          calibrate_weights_scales(model.task_specs, positive);
      for (std::size_t i = 0; i < model.task_specs.size(); ++i) {
        model.task_specs[i].weight = calib.weights[i];
        model.task_specs[i].scale = calib.scales[i];
      }
    }

    if (epoch >= first_candidate) {
      const LossSummary val_now = summarize(val_raw, model.task_specs);
      if (val_now.total < best_total) {
        best_total = val_now.total;
        best_epoch = epoch;
        best = ParamSnapshot::of(model);
      }
    }
    result.log.epochs.push_back(std::move(entry));
  }

  best.restore(model);
  result.log.best_epoch = best_epoch;
  result.log.best_val_total = best_total;
  for (const TaskSpec& spec : model.task_specs) {
    result.log.final_weights.push_back(spec.weight);
    result.log.final_scales.push_back(spec.scale);
  }
  return result;
}

std::vector<double> split_losses(const MultiTaskModel<float>& model,
                                 const FeatureDataset& dataset, Split split,
                                 int batch_size) {
  const std::vector<Index> rows = split_rows(dataset, split);
  if (rows.empty()) {
    throw std::invalid_argument("split_losses: split \"" + to_string(split) +
                                "\" is empty");
  }
  const TargetEncoder encoder(dataset, model.task_specs);
  return pass_losses(model, encoder, rows, batch_size);
}

MetricsReport evaluate_epoch(const MultiTaskModel<float>& model,
                             const FeatureDataset& dataset, Split split,
                             bool label_wise_map) {
  const std::vector<Index> rows = split_rows(dataset, split);
  MetricsReport report;
  report.split = to_string(split);
  report.n_samples = static_cast<Index>(rows.size());
  if (rows.empty()) return report;

  // one pass over the split, scores collected per task
  std::vector<MatF> scores;
  scores.reserve(model.n_tasks());
  for (const auto& head : model.heads) {
    scores.emplace_back(static_cast<Index>(rows.size()), head.out_dim());
  }
  constexpr std::size_t kEvalBatch = 256;
  MatF inputs;
  for (std::size_t start = 0; start < rows.size(); start += kEvalBatch) {
    const std::size_t stop = std::min(rows.size(), start + kEvalBatch);
    inputs.resize(static_cast<Index>(stop - start), dataset.dim());
    for (std::size_t r = start; r < stop; ++r) {
      inputs.row(static_cast<Index>(r - start)) = dataset.features.row(rows[r]);
    }
    const ForwardResult<float> fwd = forward_all_tasks(model, inputs);
    for (std::size_t i = 0; i < model.n_tasks(); ++i) {
      scores[i].middleRows(static_cast<Index>(start),
                           static_cast<Index>(stop - start)) = fwd.head_out[i];
    }
  }

  for (std::size_t i = 0; i < model.n_tasks(); ++i) {
    const TaskSpec& spec = model.task_specs[i];
    TaskMetrics tm;
    tm.task = spec.name;
    tm.kind = spec.kind;
    switch (spec.kind) {
      case TaskKind::Multiclass: {
        std::vector<Index> labeled;
        for (std::size_t r = 0; r < rows.size(); ++r) {
          const int c = dataset.artist[static_cast<std::size_t>(rows[r])];
          if (c >= 0 && c < spec.output_dim) {
            labeled.push_back(static_cast<Index>(r));
          }
        }
        tm.n_evaluated = static_cast<Index>(labeled.size());
        if (labeled.empty()) break;
        MatF s(tm.n_evaluated, spec.output_dim);
        IndexVec truth(tm.n_evaluated);
        IndexVec pred(tm.n_evaluated);
        for (Index r = 0; r < tm.n_evaluated; ++r) {
          const Index row = labeled[static_cast<std::size_t>(r)];
          s.row(r) = scores[i].row(row);
          truth[r] = dataset.artist[static_cast<std::size_t>(
              rows[static_cast<std::size_t>(row)])];
          Index arg = 0;
          s.row(r).maxCoeff(&arg);  // first max = lowest class id on ties
          pred[r] = static_cast<int>(arg);
        }
        tm.top1 = topk_accuracy(s, truth, 1);
        tm.top3 = topk_accuracy(s, truth, std::min(3, spec.output_dim));
        tm.confusion = confusion_matrix(pred, truth, spec.output_dim);
        break;
      }
      case TaskKind::Multilabel: {
        const auto& sets = spec.name == "type" ? dataset.types
                                               : dataset.materials;
        std::vector<Index> labeled;
        for (std::size_t r = 0; r < rows.size(); ++r) {
          if (!sets[static_cast<std::size_t>(rows[r])].empty()) {
            labeled.push_back(static_cast<Index>(r));
          }
        }
        tm.n_evaluated = static_cast<Index>(labeled.size());
        if (labeled.empty()) break;
        MatF s(tm.n_evaluated, spec.output_dim);
        MatF truth = MatF::Zero(tm.n_evaluated, spec.output_dim);
        for (Index r = 0; r < tm.n_evaluated; ++r) {
          const Index row = labeled[static_cast<std::size_t>(r)];
          s.row(r) = scores[i].row(row);
          for (int id : sets[static_cast<std::size_t>(
                   rows[static_cast<std::size_t>(row)])]) {
            if (id >= 0 && id < spec.output_dim) truth(r, id) = 1.0f;
          }
        }
        tm.map = sample_map(s, truth);
        if (label_wise_map) tm.map_label_wise = label_map(s, truth);
        break;
      }
      case TaskKind::Regression: {
        std::vector<Index> labeled;
        for (std::size_t r = 0; r < rows.size(); ++r) {
          if (dataset.has_period[static_cast<std::size_t>(rows[r])]) {
            labeled.push_back(static_cast<Index>(r));
          }
        }
        tm.n_evaluated = static_cast<Index>(labeled.size());
        if (labeled.empty()) break;
        VecD pred_std(tm.n_evaluated);
        VecD truth_std(tm.n_evaluated);
        for (Index r = 0; r < tm.n_evaluated; ++r) {
          const Index row = labeled[static_cast<std::size_t>(r)];
          pred_std[r] = static_cast<double>(scores[i](row, 0));
          truth_std[r] =
              (dataset.period_year[static_cast<std::size_t>(
                   rows[static_cast<std::size_t>(row)])] -
               dataset.period_mean) /
              dataset.period_std;
        }
        tm.mae = mae_years(pred_std, truth_std, dataset.period_mean,
                           dataset.period_std);
        const VecD pred_years =
            (pred_std.array() * dataset.period_std + dataset.period_mean)
                .matrix();
        const VecD truth_years =
            (truth_std.array() * dataset.period_std + dataset.period_mean)
                .matrix();
        tm.interval_acc = interval_accuracy(pred_years, truth_years, 50.0);
        break;
      }
    }
    report.per_task.push_back(std::move(tm));
  }
  return report;
}

// -------------------------------------------------------------- benchmark

BenchmarkReport benchmark_multitask_vs_single(const MultiTaskModel<float>& model,
                                              int n_batches, int batch_size,
                                              std::uint64_t seed) {
  if (model.n_tasks() < 2) {
    throw std::invalid_argument("benchmark needs at least 2 tasks");
  }
  if (n_batches < 1 || batch_size < 1) {
    throw std::invalid_argument("benchmark: batches and batch size must be >= 1");
  }

  Rng rng(mix64(seed ^ fnv1a("bench")));
  MatF input(batch_size, model.input_dim());
  for (Index i = 0; i < input.size(); ++i) {
    input.data()[i] = static_cast<float>(rng.normal());
  }

  volatile float sink = 0.0f;  // keep the optimizer honest
  auto multi_pass = [&] {
    const ForwardResult<float> fwd = forward_all_tasks(model, input);
    float acc = 0.0f;
    for (const auto& out : fwd.head_out) acc += out.sum();
    sink = sink + acc;
  };
  auto single_pass = [&](std::size_t task) {
    const MatF act = relu(dense_forward(model.shared, input));
    sink = sink + dense_forward(model.heads[task], act).sum();
  };

  BenchmarkReport report;
  report.n_batches = n_batches;
  report.batch_size = batch_size;

  for (int w = 0; w < 3; ++w) multi_pass();
  auto start = Clock::now();
  for (int b = 0; b < n_batches; ++b) multi_pass();
  report.multi_seconds = seconds_since(start);

  for (std::size_t task = 0; task < model.n_tasks(); ++task) {
    for (int w = 0; w < 3; ++w) single_pass(task);
    start = Clock::now();
    for (int b = 0; b < n_batches; ++b) single_pass(task);
    report.single_seconds.push_back(seconds_since(start));
    report.sum_single_seconds += report.single_seconds.back();
  }
  report.measured_ratio = report.sum_single_seconds / report.multi_seconds;

  report.flops_multi =
      flop_count(model, static_cast<int>(model.n_tasks()), batch_size) *
      n_batches;
  std::int64_t sum_single = 0;
  for (int task = 0; task < static_cast<int>(model.n_tasks()); ++task) {
    const std::int64_t f =
        flop_count(model, std::span<const int>(&task, 1), batch_size) *
        n_batches;
    report.flops_single.push_back(f);
    sum_single += f;
  }
  report.flop_ratio = static_cast<double>(sum_single) /
                      static_cast<double>(report.flops_multi);
  return report;
}

// ------------------------------------------------------------ serializers

namespace {

json summary_to_json(const LossSummary& s) {
  return {{"per_task_raw", s.per_task_raw},
          {"per_task_weighted", s.per_task_weighted},
          {"total", s.total}};
}

}  // namespace

std::string train_log_to_json(const TrainLog& log) {
  json epochs = json::array();
  for (const EpochLog& e : log.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train", summary_to_json(e.train)},
                      {"val", summary_to_json(e.val)},
                      {"seconds", e.seconds}});
  }
  json doc = {{"epochs", epochs},
              {"final_weights", log.final_weights},
              {"final_scales", log.final_scales},
              {"best_epoch", log.best_epoch},
              {"best_val_total", log.best_val_total}};
  return doc.dump(2);
}

std::string benchmark_report_to_json(const BenchmarkReport& report) {
  json doc = {{"n_batches", report.n_batches},
              {"batch_size", report.batch_size},
              {"multi_seconds", report.multi_seconds},
              {"single_seconds", report.single_seconds},
              {"sum_single_seconds", report.sum_single_seconds},
              {"measured_ratio", report.measured_ratio},
              {"flops_multi", report.flops_multi},
              {"flops_single", report.flops_single},
              {"flop_ratio", report.flop_ratio}};
  return doc.dump(2);
}

}  // namespace mtl
