#pragma once

#include <filesystem>
#include <map>
#include <vector>

#include "coupling_probe/coupling.hpp"
#include "coupling_probe/train.hpp"

namespace cprobe {

/// The fixed probe-prompt set: the first `count` validation sequences, cut to `length` tokens.
std::vector<Sequence> probe_prompts(const TaskData& data, int count = 4, int length = 16);

struct AnalysisOptions {
    Eigen::Index k = 0;  // 0 selects default_k(d_model)
    double p = 1.0;
    int jobs = 1;
    bool self_coupling = true;  // needs J^l_tt for every token, the expensive part
};

struct ModelMetrics {
    double depthwise_coupling = 0.0;  // final token, mean over prompts
    double self_coupling = std::numeric_limits<double>::quiet_NaN();
    double lss = 0.0;  // mean over every token of every prompt
    double ed = 0.0;   // mean over tokens with a defined ED
    Matrix adjacency;  // from the pooled final-token depth-wise records
};

ModelMetrics analyze_model(const ModelConfig& config, const ModelWeights& weights, const std::vector<Sequence>& prompts,
                           const AnalysisOptions& options);

struct EmergenceRow {
    int step;
    ModelMetrics metrics;
    double val_loss;
};

/// Loads every checkpoint of `run` from `checkpoint_dir` and analyzes it on the probe
/// prompts. A missing checkpoint raises IncompleteInput, a damaged one CorruptCheckpoint.
std::vector<EmergenceRow> emergence_experiment(const TrainRun& run, const TaskData& data,
                                               const std::filesystem::path& checkpoint_dir,
                                               const AnalysisOptions& options, int probe_count = 4,
                                               int probe_length = 16);

/// Long format: step, metric, value. Adjacency entries appear as adjacency_<l>_<l'>.
void write_emergence_csv(const std::vector<EmergenceRow>& rows, const std::filesystem::path& path);

struct SweepRow {
    int run_id;
    double hyperparam;
    double val_loss;
    double mean_coupling;
};

struct SweepResult {
    std::vector<SweepRow> rows;
    double spearman = std::numeric_limits<double>::quiet_NaN();
    bool spearman_defined = false;  // false when either column is constant
};

/// Spearman rank correlation with average ranks for ties; NaN when undefined.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

/// Trains every run and reports final mean depth-wise coupling against final validation
/// loss. `hyperparams[i]` labels run i. Needs at least four runs.
SweepResult correlation_sweep(const std::vector<TrainRun>& runs, const std::vector<double>& hyperparams,
                              const SyntheticTask& task, const TaskData& data, const AnalysisOptions& options,
                              int probe_count = 4, int probe_length = 16);

void write_sweep_csv(const SweepResult& result, const std::filesystem::path& path);

}  // namespace cprobe
