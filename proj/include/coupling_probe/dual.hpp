#pragma once

#include <cmath>
#include <ostream>

#include <Eigen/Core>

namespace cprobe {

/// Forward-mode dual number a + b*eps with eps^2 = 0, carrying one tangent.
struct Dual {
    double val = 0.0;
    double tan = 0.0;

    constexpr Dual() = default;
    constexpr Dual(double v) : val(v) {}  // NOLINT(google-explicit-constructor)
    constexpr Dual(double v, double t) : val(v), tan(t) {}

    constexpr Dual& operator+=(const Dual& o) { val += o.val; tan += o.tan; return *this; }
    constexpr Dual& operator-=(const Dual& o) { val -= o.val; tan -= o.tan; return *this; }
    constexpr Dual& operator*=(const Dual& o) {
        tan = tan * o.val + val * o.tan;
        val *= o.val;
        return *this;
    }
    constexpr Dual& operator/=(const Dual& o) {
        const double v = val / o.val;
        tan = (tan - v * o.tan) / o.val;
        val = v;
        return *this;
    }
};

constexpr Dual operator+(Dual a, const Dual& b) { return a += b; }
constexpr Dual operator-(Dual a, const Dual& b) { return a -= b; }
constexpr Dual operator*(Dual a, const Dual& b) { return a *= b; }
constexpr Dual operator/(Dual a, const Dual& b) { return a /= b; }
constexpr Dual operator-(const Dual& a) { return {-a.val, -a.tan}; }
constexpr Dual operator+(const Dual& a) { return a; }

// Comparisons look at the value part only.
constexpr bool operator==(const Dual& a, const Dual& b) { return a.val == b.val; }
constexpr bool operator!=(const Dual& a, const Dual& b) { return a.val != b.val; }
constexpr bool operator<(const Dual& a, const Dual& b) { return a.val < b.val; }
constexpr bool operator>(const Dual& a, const Dual& b) { return a.val > b.val; }
constexpr bool operator<=(const Dual& a, const Dual& b) { return a.val <= b.val; }
constexpr bool operator>=(const Dual& a, const Dual& b) { return a.val >= b.val; }

inline Dual exp(const Dual& a) {
    const double e = std::exp(a.val);
    return {e, e * a.tan};
}
inline Dual log(const Dual& a) { return {std::log(a.val), a.tan / a.val}; }
inline Dual sqrt(const Dual& a) {
    const double r = std::sqrt(a.val);
    return {r, a.tan / (2.0 * r)};
}
inline Dual tanh(const Dual& a) {
    const double t = std::tanh(a.val);
    return {t, (1.0 - t * t) * a.tan};
}
inline Dual sin(const Dual& a) { return {std::sin(a.val), std::cos(a.val) * a.tan}; }
inline Dual cos(const Dual& a) { return {std::cos(a.val), -std::sin(a.val) * a.tan}; }
inline Dual abs(const Dual& a) { return a.val < 0.0 ? -a : a; }
inline bool isfinite(const Dual& a) { return std::isfinite(a.val) && std::isfinite(a.tan); }

inline std::ostream& operator<<(std::ostream& os, const Dual& a) {
    return os << a.val << "+" << a.tan << "e";
}

/// Value part of a plain or dual scalar.
inline double value_of(double x) { return x; }
inline double value_of(const Dual& x) { return x.val; }

}  // namespace cprobe

namespace Eigen {

template <>
struct NumTraits<cprobe::Dual> : NumTraits<double> {
    using Real = cprobe::Dual;
    using NonInteger = cprobe::Dual;
    using Nested = cprobe::Dual;
    using Literal = cprobe::Dual;
    enum {
        IsComplex = 0,
        IsInteger = 0,
        IsSigned = 1,
        RequireInitialization = 0,
        ReadCost = 2,
        AddCost = 2,
        MulCost = 3,
    };
};

template <typename BinaryOp>
struct ScalarBinaryOpTraits<cprobe::Dual, double, BinaryOp> {
    using ReturnType = cprobe::Dual;
};
template <typename BinaryOp>
struct ScalarBinaryOpTraits<double, cprobe::Dual, BinaryOp> {
    using ReturnType = cprobe::Dual;
};

}  // namespace Eigen
