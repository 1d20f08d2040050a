#include <cmath>

#include <gtest/gtest.h>

#include "coupling_probe/coupling.hpp"
#include "test_util.hpp"

using namespace cprobe;

namespace {

Matrix diag(std::initializer_list<double> values) {
    Vector v(static_cast<Eigen::Index>(values.size()));
    Eigen::Index i = 0;
    for (double x : values) v(i++) = x;
    return v.asDiagonal();
}

Matrix random_orthogonal(Eigen::Index d, std::uint64_t seed) {
    Eigen::HouseholderQR<Matrix> qr(testutil::gaussian(d, d, seed));
    return qr.householderQ() * Matrix::Identity(d, d);
}

JacobianMap single_token_stack(const std::vector<Matrix>& js, int token = 0) {
    JacobianMap map;
    for (std::size_t l = 0; l < js.size(); ++l) {
        const ConnectionId id{static_cast<int>(l) + 1, token, token};
        map.emplace(id, BlockJacobian{id, js[l], {}});
    }
    return map;
}

double m_of(const Matrix& probe, const Matrix& basis, Eigen::Index k, double p = 1.0) {
    const auto b = svd_truncate(svd_full(basis), k);
    const auto own = svd_truncate(svd_full(probe), k);
    return miscoupling(coupling_matrix(probe, b), own.s, p).m;
}

}  // namespace

TEST(CouplingMatrix, SelfDiagonalizes) {
    const Matrix J = testutil::gaussian(10, 10, 1);
    const auto svd = svd_truncate(svd_full(J), 4);
    EXPECT_LE((coupling_matrix(J, svd) - Matrix(svd.s.asDiagonal())).norm(), 1e-10);
}

TEST(CouplingMatrix, SharedBasisConstruction) {
    const Matrix U = random_orthogonal(6, 2);
    const Matrix J = U * diag({6, 5, 4, 3, 2, 1}) * U.transpose();
    const Matrix Jb = U * diag({9, 7, 5, 3, 1, 0.5}) * U.transpose();
    const auto basis = svd_truncate(svd_full(Jb), 3);
    EXPECT_LE((coupling_matrix(J, basis) - diag({6, 5, 4})).norm(), 1e-10);
}

TEST(CouplingMatrix, HandComputedMismatch) {
    const auto basis = svd_truncate(svd_full(diag({1, 2, 4, 3})), 2);
    const Matrix A = coupling_matrix(diag({4, 3, 2, 1}), basis);
    EXPECT_LE((A - diag({2, 1})).norm(), 1e-15);
}

TEST(CouplingMatrix, ShapeMismatch) {
    const auto basis = svd_truncate(svd_full(Matrix::Identity(3, 3)), 2);
    EXPECT_THROW(coupling_matrix(Matrix::Identity(4, 4), basis), Error);
}

TEST(Miscoupling, PerfectAndHandCase) {
    const auto perfect = miscoupling(diag({3, 2}), Eigen::Vector2d(3, 2));
    EXPECT_EQ(perfect.m, 0.0);
    EXPECT_EQ(perfect.c, 1.0);

    const auto hand = miscoupling(diag({2, 1}), Eigen::Vector2d(4, 3), 1.0);
    EXPECT_NEAR(hand.m, 2.0 * std::sqrt(2.0) / 7.0, 1e-12);
    EXPECT_NEAR(hand.c, 1.0 - 2.0 * std::sqrt(2.0) / 7.0, 1e-12);

    const auto p2 = miscoupling(diag({2, 1}), Eigen::Vector2d(4, 3), 2.0);
    EXPECT_NEAR(p2.m, std::sqrt(8.0) / 5.0, 1e-12);
    const auto pinf = miscoupling(diag({2, 1}), Eigen::Vector2d(4, 3), INFINITY);
    EXPECT_NEAR(pinf.m, std::sqrt(8.0) / 4.0, 1e-12);
}

TEST(Miscoupling, ZeroSpectrumIsDegenerate) {
    try {
        miscoupling(Matrix::Zero(2, 2), Vector::Zero(2));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::DegenerateSpectrum);
    }
}

TEST(CouplingProperties, SelfIdentityOverRandomMatrices) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const Matrix J = testutil::gaussian(16, 16, 100 + seed);
        EXPECT_NEAR(1.0 - m_of(J, J, 4), 1.0, 1e-10);
    }
}

TEST(CouplingProperties, BasisRotationExactness) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Matrix U = random_orthogonal(8, seed);
        const Matrix J = U * diag({8, 7, 6, 5, 4, 3, 2, 1}) * U.transpose();
        const Matrix Jb = U * diag({2.5, 2.2, 1.9, 1.4, 1.1, 0.8, 0.3, 0.1}) * U.transpose();
        EXPECT_LE(m_of(J, Jb, 3), 1e-8);
    }
}

TEST(CouplingProperties, OrthogonalInvariance) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Matrix J = testutil::gaussian(12, 12, 200 + seed);
        const Matrix Jb = testutil::gaussian(12, 12, 300 + seed);
        const Matrix Q = random_orthogonal(12, 400 + seed);
        EXPECT_NEAR(m_of(J, Jb, 3), m_of(Q * J * Q.transpose(), Q * Jb * Q.transpose(), 3), 1e-10);
    }
}

TEST(CouplingProperties, ScaleCovariance) {
    const Matrix J = testutil::gaussian(12, 12, 5);
    const Matrix Jb = testutil::gaussian(12, 12, 6);
    const auto basis = svd_truncate(svd_full(Jb), 3);
    for (double alpha : {0.01, 3.0, 1e4}) {
        const Matrix A1 = coupling_matrix(J, basis);
        const Matrix A2 = coupling_matrix(alpha * J, basis);
        EXPECT_LE((A2 - alpha * A1).norm(), 1e-12 * alpha * A1.norm());
        EXPECT_NEAR(m_of(J, Jb, 3), m_of(alpha * J, Jb, 3), 1e-12);
    }
}

TEST(CouplingProperties, RangeOfMandC) {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 40; ++trial) {
        const Eigen::Index d = 2 + static_cast<Eigen::Index>(rng() % 10);
        const Eigen::Index k = 1 + static_cast<Eigen::Index>(rng() % d);
        const double m = m_of(testutil::gaussian(d, d, rng()), testutil::gaussian(d, d, rng()), k);
        EXPECT_GE(m, 0.0);
        EXPECT_LE(1.0 - m, 1.0);
    }
}

TEST(CouplingProperties, MonotoneDegradationOnDiagonalFamily) {
    // Rotating the basis' leading direction from e1 towards e3 moves spectrum mass off
    // the probe's top-K coordinates.
    const Matrix J = diag({4, 3, 2, 1});
    double previous = -1.0;
    for (int step = 0; step <= 10; ++step) {
        const double theta = step * (M_PI / 2.0) / 10.0;
        Matrix R = Matrix::Identity(4, 4);
        R(0, 0) = std::cos(theta);
        R(2, 0) = std::sin(theta);
        R(0, 2) = -std::sin(theta);
        R(2, 2) = std::cos(theta);
        const Matrix Jb = R * J * R.transpose();
        const double m = m_of(J, Jb, 2);
        EXPECT_GT(m, previous);
        previous = m;
    }
}

TEST(CrossCoupling, SymmetricPsdOwnBasis) {
    const Matrix G = testutil::gaussian(6, 6, 3);
    const Matrix J = G * G.transpose();
    const auto svd = svd_truncate(svd_full(J), 3);
    const Matrix A = coupling_matrix(J, svd);
    const Matrix B = cross_coupling_matrix(J, svd);
    EXPECT_LE((B - A).norm(), 1e-10);
    EXPECT_LE((B - Matrix(svd.s.asDiagonal())).norm(), 1e-10);
}

TEST(CrossCoupling, SwappedBasisPicksTransposedEntry) {
    Matrix J(2, 2);
    J << 1, 2, 3, 4;
    TruncatedSVD basis{Matrix(Vector::Unit(2, 0)), Vector::Ones(1), Matrix(Vector::Unit(2, 1))};
    EXPECT_EQ(coupling_matrix(J, basis)(0, 0), 2.0);
    EXPECT_EQ(cross_coupling_matrix(J, basis)(0, 0), 3.0);
}

TEST(CrossCoupling, MatchesDirectTripleProduct) {
    const Matrix J = testutil::gaussian(9, 9, 10);
    const auto basis = svd_truncate(svd_full(testutil::gaussian(9, 9, 11)), 4);
    Matrix direct = Matrix::Zero(4, 4);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            for (int a = 0; a < 9; ++a)
                for (int b = 0; b < 9; ++b) direct(i, j) += basis.V(a, i) * J(a, b) * basis.U(b, j);
    EXPECT_LE((cross_coupling_matrix(J, basis) - direct).norm(), 1e-12);
}

TEST(RandomBaseline, MatchesMonteCarloOracle) {
    // Frozen from tests/oracles/random_coupling_baseline.py (numpy, 20000 trials).
    constexpr double kOracleMean = 0.678254;
    std::mt19937_64 rng(77);
    std::vector<double> cs;
    for (int trial = 0; trial < 100; ++trial) {
        const Matrix J = testutil::gaussian(100, 100, rng());
        const Matrix Jb = testutil::gaussian(100, 100, rng());
        cs.push_back(1.0 - m_of(J, Jb, 10));
    }
    const Eigen::Map<const Vector> v(cs.data(), 100);
    const double mean = v.mean();
    const double se = std::sqrt((v.array() - mean).square().sum() / 99.0) / 10.0;
    EXPECT_LE(std::abs(mean - kOracleMean), 2.0 * se) << "mean " << mean << " se " << se;
}

TEST(Depthwise, SharedBasisStackIsPerfectlyCoupled) {
    const Matrix U = random_orthogonal(16, 8);
    std::vector<Matrix> js;
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> unif(0.1, 3.0);
    for (int l = 0; l < 5; ++l) {
        Vector s(16);
        for (auto& x : s) x = unif(rng);
        std::sort(s.begin(), s.end(), std::greater<>());
        js.push_back(U * s.asDiagonal() * U.transpose());
    }
    const auto map = single_token_stack(js, 2);
    SpectralCache cache(map, 3);
    const auto result = depthwise_coupling(cache, 2, 1.0);
    EXPECT_EQ(result.records.size(), 20u);
    for (const auto& r : result.records) {
        EXPECT_NEAR(r.c, 1.0, 1e-8);
        EXPECT_NE(r.probe.layer, r.basis.layer);
    }
    EXPECT_NEAR(result.mean_c, 1.0, 1e-8);

    const Matrix adj = adjacency_summary(result.records, 5);
    EXPECT_LE((adj - Matrix::Ones(5, 5)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Depthwise, MissingJacobianListsIds) {
    const auto map = single_token_stack({Matrix::Identity(3, 3), Matrix::Identity(3, 3)});
    SpectralCache cache(map, 1);
    try {
        depthwise_coupling(cache, 0, 1.0, {1, 2, 3});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::IncompleteInput);
        EXPECT_NE(std::string(e.what()).find("l=3"), std::string::npos);
    }
}

TEST(Depthwise, DegenerateRecordsAreFlaggedAndExcluded) {
    const auto map = single_token_stack({Matrix::Zero(3, 3), diag({3, 2, 1}), diag({3, 2, 1})});
    SpectralCache cache(map, 2);
    const auto result = depthwise_coupling(cache, 0, 1.0);
    int degenerate = 0;
    for (const auto& r : result.records) degenerate += r.degenerate;
    EXPECT_EQ(degenerate, 2);
    // A zero basis has identity singular vectors, which diagonal probes fit exactly.
    EXPECT_NEAR(result.mean_c, 1.0, 1e-12);
}

TEST(Tokenwise, SchemesAndErrors) {
    JacobianMap map;
    const int n = 3;
    for (int l = 1; l <= 2; ++l)
        for (int t1 = 0; t1 < n; ++t1)
            for (int t2 = t1; t2 < n; ++t2) {
                const ConnectionId id{l, t1, t2};
                map.emplace(id, BlockJacobian{id, testutil::gaussian(6, 6, 1000 + 100 * l + 10 * t1 + t2), {}});
            }
    SpectralCache cache(map, 2);

    // Probe equal to basis is perfectly coupled.
    EXPECT_NEAR(couple(cache, {1, 0, 2}, {1, 0, 2}, 1.0, CouplingKind::token_self).c, 1.0, 1e-10);
    EXPECT_THROW(couple(cache, {1, 2, 1}, {1, 0, 1}, 1.0, CouplingKind::token_fixed_output), Error);

    const auto self_same = tokenwise_coupling(cache, SelfScheme{}, 1, 1, n, 1.0);
    EXPECT_EQ(self_same.size(), 6u);
    const auto self_cross = tokenwise_coupling(cache, SelfScheme{}, 1, 2, n, 1.0);
    EXPECT_EQ(self_cross.size(), 9u);
    for (const auto& r : self_cross) {
        EXPECT_EQ(r.kind, CouplingKind::token_self);
        EXPECT_EQ(r.probe.t_in, r.probe.t_out);
    }

    const auto fixed_in = tokenwise_coupling(cache, FixedInputScheme{1}, 1, 2, n, 1.0);
    EXPECT_EQ(fixed_in.size(), 4u);
    for (const auto& r : fixed_in) EXPECT_TRUE(r.probe.t_in == 1 && r.basis.t_in == 1);

    const auto fixed_out = tokenwise_coupling(cache, FixedOutputScheme{1}, 2, 2, n, 1.0);
    EXPECT_EQ(fixed_out.size(), 2u);
    for (const auto& r : fixed_out) EXPECT_TRUE(r.probe.t_out == 1 && r.basis.t_out == 1);

    try {
        tokenwise_coupling(cache, FixedInputScheme{5}, 1, 2, n, 1.0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidConnection);
    }
}

TEST(Adjacency, ReproducesSingleRecords) {
    std::vector<CouplingRecord> records;
    for (int l = 1; l <= 3; ++l)
        for (int lb = 1; lb <= 3; ++lb) {
            if (l == lb) continue;
            CouplingRecord r;
            r.probe = {l, 0, 0};
            r.basis = {lb, 0, 0};
            r.c = 0.1 * l + 0.01 * lb;
            records.push_back(r);
        }
    const Matrix adj = adjacency_summary(records, 3);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(adj(i, j), i == j ? 1.0 : 0.1 * (i + 1) + 0.01 * (j + 1));

    try {
        adjacency_summary({}, 3);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InsufficientData);
    }
}
