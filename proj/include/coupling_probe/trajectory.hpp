#pragma once

#include <cstdint>
#include <vector>

#include "coupling_probe/jacobian.hpp"

namespace cprobe {

/// Consecutive points closer than this are treated as a repeated point.
inline constexpr double kLssStepGuard = 1e-12;

struct LineShape {
    double lss = 1.0;
    int steps_used = 0;     // L after skipping guarded steps
    int steps_skipped = 0;
};

/// Line-shape score of a trajectory given as rows x^0..x^L: the number of unit steps
/// divided by the end-to-end length of the path built from those unit steps.
LineShape line_shape_score(const Matrix& trajectory);

struct Expodistance {
    Vector alphas;  // ln(norm_l / norm_{l-1}), l = 1..L
    double ed = 0.0;  // population variance of alphas / mean^2; NaN when undefined
    bool undefined = false;  // |mean alpha| <= 1e-12
};

Expodistance expodistance(const Vector& norms);

/// Rows x_i^0..x_i^L of token `token`.
Matrix token_trajectory(const HiddenTrace& trace, Eigen::Index token);

/// n x (L + 1) matrix of Euclidean norms ||x_i^l||.
Matrix layer_norm_profile(const HiddenTrace& trace);

/// Coefficient of variation (population std / mean) of step lengths ||x^l - x^{l-1}||.
double step_length_cv(const Matrix& trajectory);

struct TrajectoryMetrics {
    Eigen::Index token = 0;
    LineShape line_shape;
    Expodistance expo;
    Vector norms;
    double step_cv = 0.0;
};

TrajectoryMetrics trajectory_metrics(const HiddenTrace& trace, Eigen::Index token);

/// Entropy in nats of softmax(logits).
double softmax_entropy(const Vector& logits);

/// Entropy of the next-token distribution from the last token at each layer 0..L.
Vector logit_entropy_profile(const HiddenTrace& trace, const ModelConfig& config, const ModelWeights& weights,
                             bool apply_final_ln = true);

struct PcaTrajectories {
    PcaFit fit;                      // fitted on the rows of X^L only
    std::vector<Matrix> projected;   // per token, (L + 1) x 2
};

PcaTrajectories pca_trajectories(const HiddenTrace& trace);

struct PerturbationResult {
    double scale = 0.0;
    double cos_first = 1.0;  // at the output of block 1
    double cos_last = 1.0;   // at X^L
};

/// Adds scale * N(0, I) noise to the last token's input embedding and reports the
/// cosine similarity of the perturbed last-token state with the clean one.
std::vector<PerturbationResult> perturbation_probe(std::span<const TokenId> tokens, const std::vector<double>& scales,
                                                   const ModelConfig& config, const ModelWeights& weights,
                                                   std::uint64_t seed);

struct SingularValueRow {
    int layer;
    int rank;  // 1-based
    double value;
};

/// Top-K singular values of J^l_{tt} for every layer in `layers`.
std::vector<SingularValueRow> singular_value_profile(const JacobianMap& jacobians, int token,
                                                     const std::vector<int>& layers, Eigen::Index k);

double cosine_similarity(const Vector& a, const Vector& b);

}  // namespace cprobe
