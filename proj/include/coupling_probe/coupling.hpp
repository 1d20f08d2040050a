#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "coupling_probe/jacobian.hpp"

namespace cprobe {

enum class CouplingKind { depthwise, token_self, token_fixed_input, token_fixed_output, cross_B };

std::string to_string(CouplingKind kind);

struct CouplingRecord {
    ConnectionId probe;  // the Jacobian being expressed
    ConnectionId basis;  // the Jacobian supplying the singular bases
    Eigen::Index k = 0;
    double p = 1.0;
    Matrix A;  // K x K, raw signed (the B matrix for cross_B records)
    double m = 0.0;
    double c = 1.0;
    CouplingKind kind = CouplingKind::depthwise;
    /// Probe spectrum sums below 1e-12; m and c are NaN and the record is skipped by means.
    bool degenerate = false;
};

/// A = U_K^T J V_K.
Matrix coupling_matrix(const Matrix& probe, const TruncatedSVD& basis);

/// B = V_K^T J U_K.
Matrix cross_coupling_matrix(const Matrix& probe, const TruncatedSVD& basis);

struct Miscoupling {
    double m;
    double c;
};

/// m = ||A - diag(s)||_F / ||s||_p and c = 1 - m. `p` may be +infinity.
/// Throws DegenerateSpectrum when ||s||_p is zero.
Miscoupling miscoupling(const Matrix& a, const Vector& probe_top_k, double p = 1.0);

/// Default K = max(1, round(d_model / 10)).
Eigen::Index default_k(int d_model);

/// Memoizes truncated SVDs of the Jacobians in a map for one K.
class SpectralCache {
public:
    SpectralCache(const JacobianMap& jacobians, Eigen::Index k);

    const BlockJacobian& jacobian(const ConnectionId& id) const;
    const TruncatedSVD& svd(const ConnectionId& id);
    Eigen::Index k() const { return k_; }
    const JacobianMap& jacobians() const { return jacobians_; }

private:
    const JacobianMap& jacobians_;
    Eigen::Index k_;
    std::map<ConnectionId, TruncatedSVD> svds_;
};

/// One record comparing `probe` against the bases of `basis`. Connections with
/// t_in > t_out are rejected with InvalidConnection.
CouplingRecord couple(SpectralCache& cache, const ConnectionId& probe, const ConnectionId& basis, double p,
                      CouplingKind kind);

struct DepthwiseResult {
    std::vector<CouplingRecord> records;
    double mean_c = 0.0;  // over l != l', non-degenerate records
};

/// Compares J^l_{tt} with J^{l'}_{tt} for every ordered pair l != l' within `layers`
/// (all layers present in the map when empty).
DepthwiseResult depthwise_coupling(SpectralCache& cache, int token, double p, std::vector<int> layers = {});

struct SelfScheme {};
struct FixedInputScheme {
    int t_in;
};
struct FixedOutputScheme {
    int t_out;
};
using TokenScheme = std::variant<SelfScheme, FixedInputScheme, FixedOutputScheme>;

/// Token-wise coupling between layer `layer` (probe) and `basis_layer` (basis). Pairs
/// where probe and basis are the same connection are skipped.
std::vector<CouplingRecord> tokenwise_coupling(SpectralCache& cache, const TokenScheme& scheme, int layer,
                                               int basis_layer, Eigen::Index n_tokens, double p);

/// Cross (B-matrix) coupling of `probe` against `basis`.
CouplingRecord cross_couple(SpectralCache& cache, const ConnectionId& probe, const ConnectionId& basis, double p);

/// Mean c over non-degenerate records, NaN when there are none.
double mean_coupling(const std::vector<CouplingRecord>& records);

/// L x L matrix of mean c per (probe layer, basis layer); diagonal 1, NaN where no
/// record covers a pair. Throws InsufficientData on an empty record set.
Matrix adjacency_summary(const std::vector<CouplingRecord>& records, int n_layers);

}  // namespace cprobe
