#include "coupling_probe/coupled_stack.hpp"

#include <random>

namespace cprobe {

std::vector<Matrix> build_coupled_stack(const CoupledStackSpec& spec) {
    const Eigen::Index d = spec.U.rows();
    if (d == 0 || spec.U.cols() != d) throw Error(ErrorCode::ShapeMismatch, "U must be square");
    require_finite(spec.U, "U");
    const double err = (spec.U.transpose() * spec.U - Matrix::Identity(d, d)).cwiseAbs().maxCoeff();
    if (err > 1e-10) throw Error(ErrorCode::InvalidBasis, "U is not orthogonal (max |U^T U - I| = " + std::to_string(err) + ")");
    std::vector<Matrix> maps;
    for (const Vector& s : spec.spectra) {
        if (s.size() != d) throw Error(ErrorCode::ShapeMismatch, "spectrum length differs from d");
        if (!all_finite(s) || (s.array() < 0.0).any()) throw Error(ErrorCode::InvalidInput, "spectra must be finite and >= 0");
        maps.push_back(spec.U * s.asDiagonal() * spec.U.transpose());
    }
    return maps;
}

Matrix random_orthogonal(Eigen::Index d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    Matrix g(d, d);
    for (Eigen::Index j = 0; j < d; ++j)
        for (Eigen::Index i = 0; i < d; ++i) g(i, j) = normal(rng);
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ();
    // sign fix so the distribution is Haar
    const Vector diag = qr.matrixQR().diagonal();
    for (Eigen::Index j = 0; j < d; ++j)
        if (diag(j) < 0.0) q.col(j) *= -1.0;
    return q;
}

Matrix iterate_stack(const std::vector<Matrix>& maps, const Vector& x0) {
    Matrix traj(static_cast<Eigen::Index>(maps.size()) + 1, x0.size());
    traj.row(0) = x0.transpose();
    Vector x = x0;
    for (std::size_t l = 0; l < maps.size(); ++l) {
        x = x + maps[l] * x;
        traj.row(static_cast<Eigen::Index>(l) + 1) = x.transpose();
    }
    return traj;
}

}  // namespace cprobe
