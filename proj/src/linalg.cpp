#include "coupling_probe/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace cprobe {
namespace {

constexpr double kRotationTol = 1e-14;
constexpr int kMaxSweeps = 100;

// Columns below this fraction of ||M||_F are treated as exact zeros.
constexpr double kNegligibleColumn = 1e-18;

struct Hestenes {
    Matrix W;  // rows x cols, converges to U * diag(s)
    Matrix V;  // cols x cols
};

// Cyclic one-sided Jacobi on the columns of a matrix with rows >= cols.
Hestenes hestenes(const Matrix& m) {
    const Eigen::Index n = m.cols();
    Hestenes h{m, Matrix::Identity(n, n)};
    const double negligible = kNegligibleColumn * m.norm();
    const double negligible_sq = negligible * negligible;

    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        bool rotated = false;
        for (Eigen::Index p = 0; p + 1 < n; ++p) {
            for (Eigen::Index q = p + 1; q < n; ++q) {
                const double alpha = h.W.col(p).squaredNorm();
                const double beta = h.W.col(q).squaredNorm();
                if (alpha <= negligible_sq || beta <= negligible_sq) continue;
                const double gamma = h.W.col(p).dot(h.W.col(q));
                if (std::abs(gamma) <= kRotationTol * std::sqrt(alpha) * std::sqrt(beta)) continue;

                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;

                for (Matrix* target : {&h.W, &h.V}) {
                    auto cp = target->col(p);
                    auto cq = target->col(q);
                    for (Eigen::Index i = 0; i < target->rows(); ++i) {
                        const double a = cp(i);
                        const double b = cq(i);
                        cp(i) = c * a - s * b;
                        cq(i) = s * a + c * b;
                    }
                }
                rotated = true;
            }
        }
        if (!rotated) return h;
    }
    throw Error(ErrorCode::NumericalOverflow, "Jacobi SVD did not converge");
}

// Orthonormal vector orthogonal to the first `filled` columns of `basis`: the standard
// basis vector with the largest residual, first index on ties. With m missing columns the
// squared residuals sum to m, so the best one has norm at least sqrt(m / d).
Vector complete_basis(const Matrix& basis, const std::vector<bool>& filled) {
    const Eigen::Index d = basis.rows();
    Vector best;
    double best_norm = 0.0;
    for (Eigen::Index k = 0; k < d; ++k) {
        Vector candidate = Vector::Unit(d, k);
        for (int pass = 0; pass < 2; ++pass) {
            for (Eigen::Index j = 0; j < basis.cols(); ++j) {
                if (!filled[static_cast<std::size_t>(j)]) continue;
                candidate -= basis.col(j).dot(candidate) * basis.col(j);
            }
        }
        const double norm = candidate.norm();
        if (norm > 0.5) return candidate / norm;
        if (norm > best_norm) {
            best_norm = norm;
            best = candidate;
        }
    }
    if (best_norm < 0.5 / std::sqrt(static_cast<double>(d))) {
        throw Error(ErrorCode::NumericalOverflow, "failed to complete orthonormal basis");
    }
    return best / best_norm;
}

// Normalizes, completes, sorts and sign-fixes the raw Jacobi output of a square matrix.
SvdResult finish(Hestenes h, double frob) {
    const Eigen::Index n = h.W.cols();
    const double negligible = kNegligibleColumn * frob;

    Vector s(n);
    Matrix U(h.W.rows(), n);
    std::vector<bool> filled(static_cast<std::size_t>(n), false);
    for (Eigen::Index i = 0; i < n; ++i) {
        s(i) = h.W.col(i).norm();
        if (s(i) > negligible) {
            U.col(i) = h.W.col(i) / s(i);
            filled[static_cast<std::size_t>(i)] = true;
        } else {
            U.col(i).setZero();
        }
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        if (filled[static_cast<std::size_t>(i)]) continue;
        U.col(i) = complete_basis(U, filled);
        filled[static_cast<std::size_t>(i)] = true;
    }

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return s(a) > s(b); });

    SvdResult out{Matrix(U.rows(), n), Vector(n), Matrix(n, n)};
    for (Eigen::Index k = 0; k < n; ++k) {
        const Eigen::Index src = order[static_cast<std::size_t>(k)];
        out.s(k) = s(src);
        out.U.col(k) = U.col(src);
        out.V.col(k) = h.V.col(src);

        Eigen::Index argmax = 0;
        for (Eigen::Index i = 1; i < out.U.rows(); ++i) {
            if (std::abs(out.U(i, k)) > std::abs(out.U(argmax, k))) argmax = i;
        }
        if (out.U(argmax, k) < 0.0) {
            out.U.col(k) = -out.U.col(k);
            out.V.col(k) = -out.V.col(k);
        }
    }
    return out;
}

}  // namespace

SvdResult svd_full(const Matrix& m) {
    if (m.rows() != m.cols()) throw Error(ErrorCode::ShapeMismatch, "svd_full expects a square matrix");
    require_finite(m, "svd_full input");
    if (m.size() == 0) return {};
    return finish(hestenes(m), m.norm());
}

TruncatedSVD svd_truncate(const SvdResult& full, Eigen::Index k) {
    if (k < 1 || k > full.s.size()) {
        throw Error(ErrorCode::InvalidK, "K=" + std::to_string(k) + " outside [1, " + std::to_string(full.s.size()) + "]");
    }
    return {full.U.leftCols(k), full.s.head(k), full.V.leftCols(k)};
}

Matrix PcaFit::project(const Matrix& points) const {
    return (points.rowwise() - mean.transpose()) * components;
}

PcaFit pca_fit_2d(const Matrix& points) {
    if (points.rows() < 2) throw Error(ErrorCode::InsufficientData, "PCA needs at least two points");
    if (points.cols() < 2) throw Error(ErrorCode::InsufficientData, "PCA needs at least two dimensions");
    require_finite(points, "PCA points");

    PcaFit fit;
    fit.mean = points.colwise().mean().transpose();
    Matrix centered = points.rowwise() - fit.mean.transpose();

    const double total = centered.squaredNorm();
    if (total == 0.0) {
        fit.components = Matrix::Zero(points.cols(), 2);
        fit.degenerate_variance = true;
        return fit;
    }

    // Right singular vectors are unchanged by appending zero rows, so short-wide
    // clouds are padded to square before the column sweep.
    if (centered.rows() < centered.cols()) {
        Matrix padded = Matrix::Zero(centered.cols(), centered.cols());
        padded.topRows(centered.rows()) = centered;
        centered = std::move(padded);
    }
    const SvdResult svd = finish(hestenes(centered), centered.norm());
    fit.components = svd.V.leftCols(2);
    fit.captured_variance = svd.s.head(2).squaredNorm() / svd.s.squaredNorm();
    return fit;
}

}  // namespace cprobe
