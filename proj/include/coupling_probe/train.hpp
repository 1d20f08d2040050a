#pragma once

#include <filesystem>
#include <map>
#include <vector>

#include "coupling_probe/tasks.hpp"
#include "coupling_probe/transformer.hpp"

namespace cprobe {

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled, applied as lr * wd * w
};

struct TrainRun {
    ModelConfig config;
    AdamConfig optimizer;
    int steps = 1000;
    int batch_size = 8;
    std::vector<int> checkpoint_steps;  // ascending, each in [0, steps]
    std::uint64_t seed = 0;
    double block_skip = 0.0;  // per-sequence probability of dropping each block while training
    int eval_every = 50;

    void validate() const;
};

/// Powers of two up to `steps` followed by a fixed stride, always including 0 and `steps`.
std::vector<int> default_checkpoint_steps(int steps, int stride = 1024);

/// Per-sequence block mask for stochastic depth; empty means every block runs unscaled.
struct BlockSkip {
    std::vector<bool> keep;
    double scale = 1.0;  // 1 / (1 - rate) on kept blocks
};

/// A zero-filled tensor set shaped like `w`, used as a gradient accumulator.
ModelWeights zeros_like(const ModelWeights& w);

/// Mean next-token cross-entropy over every predicted position of `batch`. When `grad`
/// is non-null the gradient of that mean is added to it. `skips` is empty or holds one
/// entry per sequence.
double batch_loss(const std::vector<Sequence>& batch, const ModelConfig& config, const ModelWeights& weights,
                  ModelWeights* grad = nullptr, const std::vector<BlockSkip>& skips = {});

class Adam {
public:
    Adam(const ModelWeights& shape, const AdamConfig& config);
    void step(ModelWeights& weights, const ModelWeights& grad);
    int steps_taken() const { return t_; }

private:
    AdamConfig config_;
    ModelWeights m_;
    ModelWeights v_;
    int t_ = 0;
};

struct LossPoint {
    int step;
    double train_loss;  // mean batch loss since the previous row
    double val_loss;
};

struct TrainResult {
    ModelWeights weights;
    std::vector<LossPoint> loss;
    std::map<int, ModelWeights> snapshots;            // weights at every checkpoint step
    std::map<int, std::filesystem::path> checkpoint_files;  // filled when an output dir is given
};

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int step);

/// Trains from init_weights(config, seed). With a non-empty `out_dir`, checkpoints and
/// loss.csv are written there. Throws TrainingDiverged on a non-finite loss.
TrainResult train(const TrainRun& run, const SyntheticTask& task, const TaskData& data,
                  const std::filesystem::path& out_dir = {});

void write_loss_csv(const std::vector<LossPoint>& loss, const std::filesystem::path& path);

}  // namespace cprobe
