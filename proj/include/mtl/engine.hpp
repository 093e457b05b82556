#pragma once

// Training orchestration: epoch loop, batching, validation-driven weight
// calibration, best-checkpoint tracking and the multi-task vs single-task
// timing benchmark.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mtl/data.hpp"
#include "mtl/metrics.hpp"
#include "mtl/model.hpp"

namespace mtl {

enum class CalibrationMode { Off, AfterWarmup };

struct TrainConfig {
  int batch_size = 32;
  int epochs = 30;
  double lr = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  int hidden = 64;
  CalibrationMode calibration = CalibrationMode::Off;
  bool shuffle = true;
  bool progress = true;  // one line per epoch on stderr
};

struct LossSummary {
  std::vector<double> per_task_raw;
  std::vector<double> per_task_weighted;
  double total = 0.0;
};

struct EpochLog {
  int epoch = 0;
  LossSummary train;
  LossSummary val;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  std::vector<double> final_weights;
  std::vector<double> final_scales;
  int best_epoch = 0;
  double best_val_total = 0.0;
};

std::string train_log_to_json(const TrainLog& log);

struct TrainResult {
  MultiTaskModel<float> model;
  TrainLog log;
};

// Builds per-task class weights (inverse train-split frequency, normalized to
// mean 1 for multiclass) and output dims from the vocabularies.
std::vector<TaskSpec> build_task_specs(const FeatureDataset& dataset,
                                       const TaskVocabularies& vocabs,
                                       std::span<const std::string> tasks);

// Deterministic for a fixed seed. With calibration enabled, (w, s) are fitted
// once from validation losses after the first epoch and then frozen. Returns
// the parameters from the epoch with the best total validation loss.
TrainResult train(const FeatureDataset& dataset, std::vector<TaskSpec> specs,
                  const TrainConfig& config);

// Single read-only pass over one split; fills the per-task metric suite.
// label_wise_map additionally reports the macro MAP variant.
MetricsReport evaluate_epoch(const MultiTaskModel<float>& model,
                             const FeatureDataset& dataset, Split split,
                             bool label_wise_map = false);

// Per-task raw validation losses (mean over labeled samples), used for
// calibration and checkpoint selection.
std::vector<double> split_losses(const MultiTaskModel<float>& model,
                                 const FeatureDataset& dataset, Split split,
                                 int batch_size);

struct BenchmarkReport {
  int n_batches = 0;
  int batch_size = 0;
  double multi_seconds = 0.0;
  std::vector<double> single_seconds;
  double sum_single_seconds = 0.0;
  double measured_ratio = 0.0;  // sum of single-task passes / multi-task pass
  std::int64_t flops_multi = 0;
  std::vector<std::int64_t> flops_single;
  double flop_ratio = 0.0;
};

std::string benchmark_report_to_json(const BenchmarkReport& report);

// Times one multi-task evaluation pass against the sum of per-task passes
// (trunk recomputed each time) on random inputs; three warm-up passes are
// discarded before each measurement.
BenchmarkReport benchmark_multitask_vs_single(const MultiTaskModel<float>& model,
                                              int n_batches, int batch_size,
                                              std::uint64_t seed);

}  // namespace mtl
