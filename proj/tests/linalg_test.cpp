#include <random>

#include <gtest/gtest.h>

#include "coupling_probe/linalg.hpp"

using namespace cprobe;

namespace {

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return m;
}

double reconstruction_error(const Matrix& m, const SvdResult& svd) {
    return (m - svd.U * svd.s.asDiagonal() * svd.V.transpose()).norm();
}

void expect_valid_svd(const Matrix& m, const SvdResult& svd, double tol) {
    const Eigen::Index d = m.rows();
    EXPECT_LE(reconstruction_error(m, svd), tol * std::max(1.0, m.norm()));
    EXPECT_LE((svd.U.transpose() * svd.U - Matrix::Identity(d, d)).norm(), tol);
    EXPECT_LE((svd.V.transpose() * svd.V - Matrix::Identity(d, d)).norm(), tol);
    for (Eigen::Index i = 0; i < d; ++i) {
        EXPECT_GE(svd.s(i), 0.0);
        if (i + 1 < d) EXPECT_GE(svd.s(i), svd.s(i + 1));
    }
}

}  // namespace

TEST(SvdFull, DiagonalPsd) {
    Matrix m = Vector(Eigen::Vector2d(3, 1)).asDiagonal();
    const auto svd = svd_full(m);
    EXPECT_EQ(svd.s, Vector(Eigen::Vector2d(3, 1)));
    EXPECT_EQ(svd.U, Matrix::Identity(2, 2));
    EXPECT_EQ(svd.V, Matrix::Identity(2, 2));
}

TEST(SvdFull, NegativeDiagonal) {
    Matrix m = Vector(Eigen::Vector2d(1, -2)).asDiagonal();
    const auto svd = svd_full(m);
    EXPECT_EQ(svd.s, Vector(Eigen::Vector2d(2, 1)));
    EXPECT_EQ(reconstruction_error(m, svd), 0.0);
}

TEST(SvdFull, RandomGaussian64) {
    const Matrix m = gaussian(64, 64, 7);
    const auto svd = svd_full(m);
    expect_valid_svd(m, svd, 1e-10);

    // Independent route: Eigen's divide-and-conquer SVD.
    Eigen::BDCSVD<Matrix> oracle(m);
    EXPECT_LE((svd.s - oracle.singularValues()).norm(), 1e-10 * svd.s(0));
}

TEST(SvdFull, SignConvention) {
    const Matrix m = gaussian(12, 12, 3);
    const auto svd = svd_full(m);
    for (Eigen::Index k = 0; k < 12; ++k) {
        Eigen::Index arg = 0;
        svd.U.col(k).cwiseAbs().maxCoeff(&arg);
        EXPECT_GT(svd.U(arg, k), 0.0);
    }
}

TEST(SvdFull, RankDeficientAndZero) {
    Matrix low = gaussian(10, 3, 11) * gaussian(3, 10, 12);
    expect_valid_svd(low, svd_full(low), 1e-10);

    const auto zero = svd_full(Matrix::Zero(5, 5));
    EXPECT_EQ(zero.s, Vector::Zero(5));
    EXPECT_EQ(zero.U, Matrix::Identity(5, 5));
}

TEST(SvdFull, NullDirectionSpreadOverAllCoordinates) {
    // the missing left singular vector has no large coordinate
    const Eigen::Index d = 64;
    const Vector v = Vector::Ones(d) / std::sqrt(static_cast<double>(d));
    const Matrix Q = Eigen::HouseholderQR<Matrix>(gaussian(d, d, 8)).householderQ() * Matrix::Identity(d, d);
    const Matrix m = (Matrix::Identity(d, d) - v * v.transpose()) * Q;
    const auto svd = svd_full(m);
    EXPECT_LE(reconstruction_error(m, svd), 1e-12);
    EXPECT_LE((svd.U.transpose() * svd.U - Matrix::Identity(d, d)).norm(), 1e-12);
    EXPECT_LE(svd.s(d - 1), 1e-12);
    EXPECT_NEAR(std::abs(svd.U.col(d - 1).dot(v)), 1.0, 1e-12);
}

TEST(SvdFull, Errors) {
    try {
        svd_full(Matrix::Zero(2, 3));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
    }
    Matrix bad = Matrix::Identity(3, 3);
    bad(1, 2) = std::numeric_limits<double>::quiet_NaN();
    try {
        svd_full(bad);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidInput);
    }
}

TEST(SvdFull, PropertyRandomShapesAndDeterminism) {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 25; ++trial) {
        const auto d = static_cast<Eigen::Index>(1 + rng() % 40);
        Matrix m = gaussian(d, d, rng());
        if (trial % 5 == 0) m *= 1e6;
        if (trial % 7 == 0) m.col(0) = m.col(d - 1);  // repeated column
        const auto a = svd_full(m);
        expect_valid_svd(m, a, 1e-10);
        const auto b = svd_full(m);
        EXPECT_EQ(a.U, b.U);
        EXPECT_EQ(a.s, b.s);
        EXPECT_EQ(a.V, b.V);
    }
}

TEST(SvdTruncate, PrefixOfSpectrum) {
    Matrix m = Vector(Eigen::Vector4d(4, 3, 2, 1)).asDiagonal();
    const auto full = svd_full(m);
    const auto t2 = svd_truncate(full, 2);
    EXPECT_EQ(t2.s, Vector(Eigen::Vector2d(4, 3)));
    EXPECT_EQ(t2.U.cols(), 2);

    const auto t4 = svd_truncate(full, 4);
    EXPECT_EQ(t4.U, full.U);
    EXPECT_EQ(t4.s, full.s);
    EXPECT_EQ(t4.V, full.V);
}

TEST(SvdTruncate, TiedValuesKeepLowestIndex) {
    Matrix m = Matrix::Identity(3, 3) * 5.0;
    const auto t1 = svd_truncate(svd_full(m), 1);
    EXPECT_EQ(t1.s(0), 5.0);
    EXPECT_EQ(t1.U.col(0), Vector::Unit(3, 0));
}

TEST(SvdTruncate, RejectsOutOfRangeK) {
    const auto full = svd_full(Matrix::Identity(3, 3));
    for (Eigen::Index k : {Eigen::Index{0}, Eigen::Index{4}}) {
        try {
            svd_truncate(full, k);
            FAIL();
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), ErrorCode::InvalidK);
        }
    }
}

TEST(Pca, PlanarCloudIsIsometric) {
    Matrix points = Matrix::Zero(20, 5);
    const Matrix plane = gaussian(20, 2, 5);
    points.leftCols(2) = plane;
    const auto fit = pca_fit_2d(points);
    EXPECT_FALSE(fit.degenerate_variance);
    EXPECT_LE((fit.components.transpose() * fit.components - Matrix::Identity(2, 2)).norm(), 1e-12);
    EXPECT_LE(fit.components.bottomRows(3).norm(), 1e-12);

    const Matrix proj = fit.project(points);
    for (Eigen::Index i = 0; i < 20; ++i) {
        for (Eigen::Index j = i + 1; j < 20; ++j) {
            EXPECT_NEAR((proj.row(i) - proj.row(j)).norm(), (points.row(i) - points.row(j)).norm(), 1e-8);
        }
    }
    EXPECT_NEAR(fit.captured_variance, 1.0, 1e-12);
}

TEST(Pca, IdenticalPointsAreFlagged) {
    const Matrix points = Matrix::Ones(4, 3);
    const auto fit = pca_fit_2d(points);
    EXPECT_TRUE(fit.degenerate_variance);
    EXPECT_EQ(fit.components, Matrix::Zero(3, 2));
}

TEST(Pca, CapturedVarianceMatchesFullSvd) {
    const Matrix points = gaussian(100, 16, 9);
    const auto fit = pca_fit_2d(points);
    const Matrix centered = points.rowwise() - points.colwise().mean();
    Eigen::BDCSVD<Matrix> oracle(centered, Eigen::ComputeThinV);
    const Vector s = oracle.singularValues();
    EXPECT_NEAR(fit.captured_variance, s.head(2).squaredNorm() / s.squaredNorm(), 1e-12);
    // Same subspace as the oracle's top-2 right singular vectors.
    const Matrix overlap = fit.components.transpose() * oracle.matrixV().leftCols(2);
    EXPECT_NEAR(overlap.cwiseAbs().diagonal().sum(), 2.0, 1e-8);
}

TEST(Pca, FewerPointsThanDimensions) {
    const Matrix points = gaussian(5, 30, 4);
    const auto fit = pca_fit_2d(points);
    EXPECT_LE((fit.components.transpose() * fit.components - Matrix::Identity(2, 2)).norm(), 1e-10);
}

TEST(Pca, Errors) {
    try {
        pca_fit_2d(Matrix::Zero(1, 3));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InsufficientData);
    }
}
