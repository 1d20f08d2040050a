#include "coupling_probe/experiments.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "coupling_probe/checkpoint.hpp"
#include "coupling_probe/trajectory.hpp"

namespace cprobe {

std::vector<Sequence> probe_prompts(const TaskData& data, int count, int length) {
    if (count < 1 || length < 2) throw Error(ErrorCode::InvalidInput, "probe set needs count >= 1 and length >= 2");
    if (static_cast<int>(data.val.size()) < count) {
        throw Error(ErrorCode::InsufficientData, "only " + std::to_string(data.val.size()) + " validation sequences");
    }
    std::vector<Sequence> out;
    for (int i = 0; i < count; ++i) {
        const Sequence& s = data.val[static_cast<std::size_t>(i)];
        out.emplace_back(s.begin(), s.begin() + std::min<std::ptrdiff_t>(length, static_cast<std::ptrdiff_t>(s.size())));
    }
    return out;
}

ModelMetrics analyze_model(const ModelConfig& config, const ModelWeights& weights, const std::vector<Sequence>& prompts,
                           const AnalysisOptions& options) {
    if (prompts.empty()) throw Error(ErrorCode::InsufficientData, "no probe prompts");
    const Eigen::Index k = options.k > 0 ? options.k : default_k(config.d_model);
    ModelMetrics out;
    std::vector<CouplingRecord> pooled;
    double depth_sum = 0.0, self_sum = 0.0, lss_sum = 0.0, ed_sum = 0.0;
    int depth_n = 0, self_n = 0, lss_n = 0, ed_n = 0;

    for (const Sequence& prompt : prompts) {
        const HiddenTrace trace = forward_trace(prompt, config, weights);
        const int n = static_cast<int>(trace.tokens());
        const int last = n - 1;

        std::vector<std::pair<int, int>> req;
        for (int l = 1; l <= config.n_layers; ++l) {
            if (options.self_coupling) {
                for (int t = 0; t < n; ++t) req.emplace_back(l, t);
            } else {
                req.emplace_back(l, last);
            }
        }
        const JacobianMap jac = compute_jacobians(trace, req, config, weights, options.jobs);
        SpectralCache cache(jac, k);

        const DepthwiseResult dw = depthwise_coupling(cache, last, options.p);
        if (std::isfinite(dw.mean_c)) {
            depth_sum += dw.mean_c;
            ++depth_n;
        }
        pooled.insert(pooled.end(), dw.records.begin(), dw.records.end());

        if (options.self_coupling && n > 1) {
            for (int l = 1; l <= config.n_layers; ++l) {
                const double c = mean_coupling(tokenwise_coupling(cache, SelfScheme{}, l, l, n, options.p));
                if (std::isfinite(c)) {
                    self_sum += c;
                    ++self_n;
                }
            }
        }

        for (int t = 0; t < n; ++t) {
            const TrajectoryMetrics tm = trajectory_metrics(trace, t);
            lss_sum += tm.line_shape.lss;
            ++lss_n;
            if (!tm.expo.undefined) {
                ed_sum += tm.expo.ed;
                ++ed_n;
            }
        }
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    out.depthwise_coupling = depth_n ? depth_sum / depth_n : nan;
    out.self_coupling = self_n ? self_sum / self_n : nan;
    out.lss = lss_sum / lss_n;
    out.ed = ed_n ? ed_sum / ed_n : nan;
    out.adjacency = adjacency_summary(pooled, config.n_layers);
    return out;
}

std::vector<EmergenceRow> emergence_experiment(const TrainRun& run, const TaskData& data,
                                               const std::filesystem::path& checkpoint_dir,
                                               const AnalysisOptions& options, int probe_count, int probe_length) {
    if (run.checkpoint_steps.empty()) throw Error(ErrorCode::InvalidConfig, "no checkpoint steps");
    const auto prompts = probe_prompts(data, probe_count, probe_length);
    for (int step : run.checkpoint_steps) {
        const auto p = checkpoint_path(checkpoint_dir, step);
        if (!std::filesystem::exists(p)) throw Error(ErrorCode::IncompleteInput, "missing checkpoint " + p.string());
    }
    std::vector<EmergenceRow> rows;
    for (int step : run.checkpoint_steps) {
        const Checkpoint ck = load_checkpoint(checkpoint_path(checkpoint_dir, step));
        const double vl = data.val.empty() ? std::numeric_limits<double>::quiet_NaN()
                                           : batch_loss(data.val, ck.config, ck.weights);
        rows.push_back({step, analyze_model(ck.config, ck.weights, prompts, options), vl});
    }
    return rows;
}

void write_emergence_csv(const std::vector<EmergenceRow>& rows, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out << "step,metric,value\n" << std::setprecision(17);
    auto emit = [&](int step, const std::string& metric, double v) {
        out << step << ',' << metric << ',';
        if (std::isfinite(v)) out << v;
        else out << "nan";
        out << '\n';
    };
    for (const auto& r : rows) {
        emit(r.step, "depthwise_coupling", r.metrics.depthwise_coupling);
        emit(r.step, "self_coupling", r.metrics.self_coupling);
        emit(r.step, "lss", r.metrics.lss);
        emit(r.step, "ed", r.metrics.ed);
        emit(r.step, "val_loss", r.val_loss);
        const Matrix& a = r.metrics.adjacency;
        for (Eigen::Index i = 0; i < a.rows(); ++i)
            for (Eigen::Index j = 0; j < a.cols(); ++j)
                emit(r.step, "adjacency_" + std::to_string(i + 1) + "_" + std::to_string(j + 1), a(i, j));
    }
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t q = i; q <= j; ++q) ranks[idx[q]] = r;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw Error(ErrorCode::ShapeMismatch, "spearman inputs differ in length");
    if (a.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!std::isfinite(a[i]) || !std::isfinite(b[i])) return std::numeric_limits<double>::quiet_NaN();
    }
    const auto ra = average_ranks(a);
    const auto rb = average_ranks(b);
    const Eigen::Map<const Vector> x(ra.data(), static_cast<Eigen::Index>(ra.size()));
    const Eigen::Map<const Vector> y(rb.data(), static_cast<Eigen::Index>(rb.size()));
    const Vector xc = x.array() - x.mean();
    const Vector yc = y.array() - y.mean();
    const double denom = xc.norm() * yc.norm();
    if (denom == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return xc.dot(yc) / denom;
}

SweepResult correlation_sweep(const std::vector<TrainRun>& runs, const std::vector<double>& hyperparams,
                              const SyntheticTask& task, const TaskData& data, const AnalysisOptions& options,
                              int probe_count, int probe_length) {
    if (runs.size() < 4) throw Error(ErrorCode::InsufficientData, "a sweep needs at least 4 runs");
    if (hyperparams.size() != runs.size()) throw Error(ErrorCode::ShapeMismatch, "one hyperparameter value per run");
    const auto prompts = probe_prompts(data, probe_count, probe_length);
    AnalysisOptions opts = options;
    opts.self_coupling = false;
    SweepResult result;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        const TrainResult tr = train(runs[i], task, data);
        const ModelMetrics m = analyze_model(runs[i].config, tr.weights, prompts, opts);
        const double vl = batch_loss(data.val, runs[i].config, tr.weights);
        result.rows.push_back({static_cast<int>(i), hyperparams[i], vl, m.depthwise_coupling});
    }
    std::vector<double> c, v;
    for (const auto& r : result.rows) {
        c.push_back(r.mean_coupling);
        v.push_back(r.val_loss);
    }
    result.spearman = spearman(c, v);
    result.spearman_defined = std::isfinite(result.spearman);
    return result;
}

void write_sweep_csv(const SweepResult& result, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out << "run_id,hyperparam,val_loss,mean_coupling\n" << std::setprecision(17);
    for (const auto& r : result.rows) out << r.run_id << ',' << r.hyperparam << ',' << r.val_loss << ',' << r.mean_coupling << '\n';
}

}  // namespace cprobe
