#include "ctxpatch/numerics.hpp"

#include <algorithm>
#include <cmath>

namespace ctxpatch {

const char* errc_name(Errc c) {
    switch (c) {
    case Errc::ZeroVector: return "ZeroVector";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::TokenOutOfRange: return "TokenOutOfRange";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::ZeroInputVector: return "ZeroInputVector";
    case Errc::ZeroPreOutputVector: return "ZeroPreOutputVector";
    case Errc::DegenerateActivation: return "DegenerateActivation";
    case Errc::ZeroGatedVector: return "ZeroGatedVector";
    case Errc::PoleEvaluation: return "PoleEvaluation";
    case Errc::BracketFailure: return "BracketFailure";
    case Errc::DegenerateProblem: return "DegenerateProblem";
    case Errc::LayerResidualExceeded: return "LayerResidualExceeded";
    case Errc::NotAProbabilityVector: return "NotAProbabilityVector";
    case Errc::UsageError: return "UsageError";
    case Errc::IoError: return "IoError";
    case Errc::ValidationError: return "ValidationError";
    }
    return "UnknownError";
}

const char* to_string(Precision p) {
    switch (p) {
    case Precision::Float64: return "f64";
    case Precision::Float32: return "f32";
    case Precision::Bf16Emulated: return "bf16";
    }
    return "?";
}

const char* to_string(Activation a) {
    switch (a) {
    case Activation::GeluTanh: return "gelu_tanh";
    case Activation::Silu: return "silu";
    case Activation::Relu: return "relu";
    }
    return "?";
}

Precision parse_precision(const std::string& s) {
    if (s == "f64" || s == "float64") return Precision::Float64;
    if (s == "f32" || s == "float32") return Precision::Float32;
    if (s == "bf16" || s == "bfloat16") return Precision::Bf16Emulated;
    fail(Errc::ValidationError, "unknown precision '" + s + "' (expected f64|f32|bf16)");
}

Activation parse_activation(const std::string& s) {
    if (s == "gelu_tanh" || s == "gelu") return Activation::GeluTanh;
    if (s == "silu") return Activation::Silu;
    if (s == "relu") return Activation::Relu;
    fail(Errc::ValidationError, "unknown activation '" + s + "' (expected gelu_tanh|silu|relu)");
}

double round_bf16(double x) {
    if (!std::isfinite(x) || x == 0.0) return x; // NaN/Inf/signed zero pass through
    int e;                                       // |x| = f * 2^e, f in [0.5, 1)
    std::frexp(x, &e);
    if (e > 128) return x > 0 ? HUGE_VAL : -HUGE_VAL; // |x| >= 2^128
    if (e < -125) {
        // subnormal range: fixed quantum 2^-133; carry into 2^-126 is handled by ldexp
        double r = std::nearbyint(std::ldexp(x, 133)); // ties-to-even under default mode
        return std::ldexp(r, -133);
    }
    // normal binade: quantum 2^(e-8); scaled magnitude lies in [128, 256]
    double r = std::nearbyint(std::ldexp(x, 8 - e));
    double out = std::ldexp(r, e - 8); // r == 256 carries into the next binade
    if (out >= 0x1p128) return HUGE_VAL; // carry past the largest finite bf16
    if (out <= -0x1p128) return -HUGE_VAL;
    return out;
}

namespace fp {

double round(Precision p, double x) {
    switch (p) {
    case Precision::Float64: return x;
    case Precision::Float32: return static_cast<double>(static_cast<float>(x));
    case Precision::Bf16Emulated: return round_bf16(x);
    }
    return x;
}

double add(Precision p, double a, double b) {
    switch (p) {
    case Precision::Float64: return a + b;
    case Precision::Float32: return static_cast<double>(static_cast<float>(a) + static_cast<float>(b));
    case Precision::Bf16Emulated: return round_bf16(a + b);
    }
    return a + b;
}

double sub(Precision p, double a, double b) {
    switch (p) {
    case Precision::Float64: return a - b;
    case Precision::Float32: return static_cast<double>(static_cast<float>(a) - static_cast<float>(b));
    case Precision::Bf16Emulated: return round_bf16(a - b);
    }
    return a - b;
}

double mul(Precision p, double a, double b) {
    switch (p) {
    case Precision::Float64: return a * b;
    case Precision::Float32: return static_cast<double>(static_cast<float>(a) * static_cast<float>(b));
    case Precision::Bf16Emulated: return round_bf16(a * b);
    }
    return a * b;
}

double div(Precision p, double a, double b) {
    switch (p) {
    case Precision::Float64: return a / b;
    case Precision::Float32: return static_cast<double>(static_cast<float>(a) / static_cast<float>(b));
    case Precision::Bf16Emulated: return round_bf16(a / b);
    }
    return a / b;
}

double sqrt(Precision p, double a) {
    switch (p) {
    case Precision::Float64: return std::sqrt(a);
    case Precision::Float32: return static_cast<double>(std::sqrt(static_cast<float>(a)));
    case Precision::Bf16Emulated: return round_bf16(std::sqrt(a));
    }
    return std::sqrt(a);
}

double exp(Precision p, double a) {
    switch (p) {
    case Precision::Float64: return std::exp(a);
    case Precision::Float32: return static_cast<double>(std::exp(static_cast<float>(a)));
    case Precision::Bf16Emulated: return round_bf16(std::exp(a));
    }
    return std::exp(a);
}

double tanh(Precision p, double a) {
    switch (p) {
    case Precision::Float64: return std::tanh(a);
    case Precision::Float32: return static_cast<double>(std::tanh(static_cast<float>(a)));
    case Precision::Bf16Emulated: return round_bf16(std::tanh(a));
    }
    return std::tanh(a);
}

} // namespace fp

double apply_activation(Activation kind, double x, Precision p) {
    switch (kind) {
    case Activation::GeluTanh: {
        // 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))
        const double ck = fp::round(p, 0.044715);
        const double cs = fp::round(p, 0.7978845608028654); // sqrt(2/pi)
        double x2 = fp::mul(p, x, x);
        double x3 = fp::mul(p, x2, x);
        double inner = fp::add(p, x, fp::mul(p, ck, x3));
        double t = fp::tanh(p, fp::mul(p, cs, inner));
        return fp::mul(p, fp::mul(p, 0.5, x), fp::add(p, 1.0, t));
    }
    case Activation::Silu: {
        // x * sigmoid(x) = x / (1 + exp(-x))
        double den = fp::add(p, 1.0, fp::exp(p, fp::sub(p, 0.0, x)));
        return fp::div(p, x, den);
    }
    case Activation::Relu:
        return x > 0.0 ? x : fp::round(p, 0.0);
    }
    return x;
}

DenseVector rmsnorm(const DenseVector& v, double eps, Precision p) {
    const size_t n = v.len();
    if (n == 0) fail(Errc::DimensionMismatch, "rmsnorm of empty vector");
    double ss = 0.0;
    for (size_t i = 0; i < n; ++i) ss = fp::add(p, ss, fp::mul(p, v[i], v[i]));
    if (eps == 0.0 && ss == 0.0) fail(Errc::ZeroVector, "rmsnorm of zero vector with eps == 0");
    double ms = fp::div(p, ss, fp::round(p, static_cast<double>(n)));
    double denom = fp::sqrt(p, fp::add(p, ms, fp::round(p, eps)));
    DenseVector out(n);
    for (size_t i = 0; i < n; ++i) out[i] = fp::div(p, v[i], denom);
    return out;
}

DenseVector softmax(const DenseVector& v, Precision p) {
    const size_t n = v.len();
    if (n == 0) fail(Errc::DimensionMismatch, "softmax of empty vector");
    double mx = v[0];
    for (size_t i = 1; i < n; ++i) mx = std::max(mx, v[i]);
    DenseVector out(n);
    double sum = 0.0;
    for (size_t i = 0; i < n; ++i) {
        out[i] = fp::exp(p, fp::sub(p, v[i], mx));
        sum = fp::add(p, sum, out[i]);
    }
    for (size_t i = 0; i < n; ++i) out[i] = fp::div(p, out[i], sum);
    return out;
}

DenseVector map_activation(Activation kind, const DenseVector& v, Precision p) {
    DenseVector out(v.len());
    for (size_t i = 0; i < v.len(); ++i) out[i] = apply_activation(kind, v[i], p);
    return out;
}

void check_same_len(const DenseVector& a, const DenseVector& b, const char* what) {
    if (a.len() != b.len())
        fail(Errc::DimensionMismatch, std::string(what) + ": " + std::to_string(a.len()) + " vs " + std::to_string(b.len()));
}

DenseVector vec_add(const DenseVector& a, const DenseVector& b, Precision p) {
    check_same_len(a, b, "vec_add");
    DenseVector out(a.len());
    for (size_t i = 0; i < a.len(); ++i) out[i] = fp::add(p, a[i], b[i]);
    return out;
}

DenseVector vec_sub(const DenseVector& a, const DenseVector& b, Precision p) {
    check_same_len(a, b, "vec_sub");
    DenseVector out(a.len());
    for (size_t i = 0; i < a.len(); ++i) out[i] = fp::sub(p, a[i], b[i]);
    return out;
}

DenseVector vec_mul(const DenseVector& a, const DenseVector& b, Precision p) {
    check_same_len(a, b, "vec_mul");
    DenseVector out(a.len());
    for (size_t i = 0; i < a.len(); ++i) out[i] = fp::mul(p, a[i], b[i]);
    return out;
}

double rms(const DenseVector& v) {
    double ss = 0.0;
    for (size_t i = 0; i < v.len(); ++i) ss += v[i] * v[i];
    return std::sqrt(ss / static_cast<double>(v.len()));
}

} // namespace ctxpatch
