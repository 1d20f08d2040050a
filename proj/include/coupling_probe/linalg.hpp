#pragma once

#include <Eigen/Dense>

#include "coupling_probe/error.hpp"

namespace cprobe {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
    return m.derived().array().isFinite().all();
}

/// Throws InvalidInput when `m` holds a NaN or infinity.
template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, const char* what) {
    if (!all_finite(m)) throw Error(ErrorCode::InvalidInput, std::string(what) + " has non-finite entries");
}

/// Full SVD M = U diag(s) V^T of a square matrix.
struct SvdResult {
    Matrix U;
    Vector s;
    Matrix V;
};

/// Leading K singular triplets of a matrix.
struct TruncatedSVD {
    Matrix U;  // d x K
    Vector s;  // K, non-increasing
    Matrix V;  // d x K

    Eigen::Index k() const { return s.size(); }
    /// True when the retained spectrum sums to less than 1e-12.
    bool degenerate() const { return s.sum() < 1e-12; }
};

/// One-sided (Hestenes) cyclic Jacobi SVD.
///
/// Singular values are returned non-increasing; equal values keep the order of the
/// column they converged in. Each pair (u_i, v_i) is sign-normalized so that the
/// largest-magnitude entry of u_i is positive (lowest index on ties). The result
/// depends only on the input bits.
SvdResult svd_full(const Matrix& m);

TruncatedSVD svd_truncate(const SvdResult& full, Eigen::Index k);

struct PcaFit {
    Vector mean;        // d
    Matrix components;  // d x 2, orthonormal columns (zero when degenerate)
    double captured_variance = 0.0;  // fraction of total variance in the two components
    bool degenerate_variance = false;

    /// Rows of `points` projected onto the components after centering.
    Matrix project(const Matrix& points) const;
};

PcaFit pca_fit_2d(const Matrix& points);

}  // namespace cprobe
