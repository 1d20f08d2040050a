#include "coupling_probe/jacobian.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

#include "coupling_probe/checkpoint.hpp"

namespace cprobe {

std::string to_string(const ConnectionId& id) {
    return "(l=" + std::to_string(id.layer) + ", t1=" + std::to_string(id.t_in) + ", t2=" + std::to_string(id.t_out) + ")";
}

namespace {

void check_connection(const HiddenTrace& trace, int layer, int t_in, const ModelConfig& config) {
    if (layer < 1 || layer > config.n_layers || layer > trace.layers()) {
        throw Error(ErrorCode::InvalidConnection, "layer " + std::to_string(layer) + " out of range");
    }
    if (t_in < 0 || t_in >= trace.tokens()) {
        throw Error(ErrorCode::InvalidConnection, "token " + std::to_string(t_in) + " out of range");
    }
}

template <typename S>
MatrixX<S> block_map(const MatrixX<S>& x, int layer, const ModelConfig& config, const ModelWeights& weights,
                     const JacobianOptions& options) {
    const int index = layer - 1;
    MatrixX<S> f = block_update<S>(x, index, config, weights);
    if (options.include_final_ln && index == config.n_layers - 1 && config.final_ln) {
        return block_output<S>(x, f, index, config, weights);
    }
    return f;
}

}  // namespace

std::vector<BlockJacobian> block_jacobian_row(const HiddenTrace& trace, int layer, int t_in, const ModelConfig& config,
                                              const ModelWeights& weights, const JacobianOptions& options) {
    check_connection(trace, layer, t_in, config);
    const Matrix& x = trace.X[static_cast<std::size_t>(layer - 1)];
    const Eigen::Index n = x.rows();
    const Eigen::Index d = x.cols();

    const Eigen::Index first = options.all_outputs ? 0 : t_in;
    std::vector<BlockJacobian> row;
    for (Eigen::Index t_out = first; t_out < n; ++t_out) {
        row.push_back({{layer, t_in, static_cast<int>(t_out)}, Matrix::Zero(d, d), {}});
    }

    MatrixX<Dual> seeded = x.cast<Dual>();
    for (Eigen::Index j = 0; j < d; ++j) {
        seeded(t_in, j).tan = 1.0;
        const MatrixX<Dual> out = block_map<Dual>(seeded, layer, config, weights, options);
        seeded(t_in, j).tan = 0.0;
        for (Eigen::Index t_out = first; t_out < n; ++t_out) {
            auto col = row[static_cast<std::size_t>(t_out - first)].J.col(j);
            for (Eigen::Index i = 0; i < d; ++i) col(i) = out(t_out, i).tan;
        }
    }
    for (const auto& bj : row) {
        if (!all_finite(bj.J)) throw Error(ErrorCode::NumericalOverflow, "non-finite tangent at " + to_string(bj.id));
    }
    return row;
}

Matrix fd_block_jacobian(const HiddenTrace& trace, int layer, int t_in, int t_out, double step,
                         const ModelConfig& config, const ModelWeights& weights, const JacobianOptions& options) {
    check_connection(trace, layer, t_in, config);
    if (t_out < 0 || t_out >= trace.tokens()) throw Error(ErrorCode::InvalidConnection, "output token out of range");
    const Matrix& x = trace.X[static_cast<std::size_t>(layer - 1)];
    return fd_jacobian([&](const Matrix& xp) { return block_map<double>(xp, layer, config, weights, options); }, x, t_in,
                       t_out, step);
}

TruncatedSVD jacobian_svd(const BlockJacobian& jacobian, Eigen::Index k) {
    return svd_truncate(svd_full(jacobian.J), k);
}

JacobianMap compute_jacobians(const HiddenTrace& trace, const std::vector<std::pair<int, int>>& requests,
                              const ModelConfig& config, const ModelWeights& weights, int jobs,
                              const JacobianOptions& options) {
    std::vector<std::vector<BlockJacobian>> rows(requests.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;

    auto worker = [&] {
        for (std::size_t i = next++; i < requests.size(); i = next++) {
            try {
                rows[i] = block_jacobian_row(trace, requests[i].first, requests[i].second, config, weights, options);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };

    const int workers = std::clamp(jobs, 1, std::max(1, static_cast<int>(requests.size())));
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    }
    if (failure) std::rethrow_exception(failure);

    JacobianMap out;
    for (auto& row : rows) {
        for (auto& bj : row) out.emplace(bj.id, std::move(bj));
    }
    return out;
}

void dump_jacobians(const JacobianMap& jacobians, const std::filesystem::path& manifest_path) {
    std::vector<NamedTensor> tensors;
    for (const auto& [id, bj] : jacobians) {
        tensors.push_back({"J_l" + std::to_string(id.layer) + "_t" + std::to_string(id.t_in) + "_" + std::to_string(id.t_out),
                           bj.J, false});
    }
    write_bundle(manifest_path, tensors);
}

}  // namespace cprobe
