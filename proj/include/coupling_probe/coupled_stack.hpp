#pragma once

#include <cstdint>
#include <vector>

#include "coupling_probe/linalg.hpp"

namespace cprobe {

/// Maps J_l = U diag(spectra[l]) U^T sharing one orthogonal basis U.
struct CoupledStackSpec {
    Matrix U;
    std::vector<Vector> spectra;  // one non-negative vector of length d per layer
};

std::vector<Matrix> build_coupled_stack(const CoupledStackSpec& spec);

/// Haar-distributed orthogonal matrix from the QR of a Gaussian matrix.
Matrix random_orthogonal(Eigen::Index d, std::uint64_t seed);

/// Iterates x^{l+1} = (I + J_l) x^l and returns the rows x^0..x^L.
Matrix iterate_stack(const std::vector<Matrix>& maps, const Vector& x0);

}  // namespace cprobe
