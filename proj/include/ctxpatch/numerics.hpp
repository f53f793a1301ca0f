#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "ctxpatch/errors.hpp"

namespace ctxpatch {

// Arithmetic mode for every scalar primitive. Float64/Float32 compute natively
// at that width; Bf16Emulated rounds the result of every scalar add/mul/div/
// activation to the nearest bfloat16 value (8-bit exponent, 7-bit mantissa,
// round-to-nearest-even).
enum class Precision { Float64, Float32, Bf16Emulated };

enum class Activation { GeluTanh, Silu, Relu };

const char* to_string(Precision p);
const char* to_string(Activation a);
Precision parse_precision(const std::string& s);
Activation parse_activation(const std::string& s);

// Nearest bfloat16-representable value, ties to even mantissa. Idempotent,
// monotone; NaN/Inf pass through, overflow saturates to +/-inf.
double round_bf16(double x);

struct DenseVector {
    std::vector<double> data;

    DenseVector() = default;
    explicit DenseVector(size_t n, double fill = 0.0) : data(n, fill) {}
    DenseVector(std::initializer_list<double> xs) : data(xs) {}

    size_t len() const { return data.size(); }
    double& operator[](size_t i) { return data[i]; }
    double operator[](size_t i) const { return data[i]; }

    bool operator==(const DenseVector&) const = default;
};

// Row-major dense matrix.
struct DenseMatrix {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<double> data;

    DenseMatrix() = default;
    DenseMatrix(size_t r, size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& at(size_t i, size_t j) { return data[i * cols + j]; }
    double at(size_t i, size_t j) const { return data[i * cols + j]; }
    const double* row(size_t i) const { return data.data() + i * cols; }
    double* row(size_t i) { return data.data() + i * cols; }

    bool operator==(const DenseMatrix&) const = default;
};

// SplitMix64. Identical seed -> identical stream on every platform.
struct Rng {
    uint64_t state = 0;

    explicit Rng(uint64_t seed) : state(seed) {}

    uint64_t next_u64() {
        state += 0x9E3779B97F4A7C15ull;
        uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1), 53 random bits
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in (-a, a); uses only multiplies so streams are bit-stable
    double next_symmetric(double a) { return (2.0 * next_unit() - 1.0) * a; }

    uint32_t next_below(uint32_t n) { return static_cast<uint32_t>(next_u64() % n); }
};

// Scalar primitives under a precision mode. Operands are assumed to already be
// representable in the mode (all stored values are rounded on creation).
namespace fp {

double round(Precision p, double x);
double add(Precision p, double a, double b);
double sub(Precision p, double a, double b);
double mul(Precision p, double a, double b);
double div(Precision p, double a, double b);
double sqrt(Precision p, double a);
double exp(Precision p, double a);
double tanh(Precision p, double a);

} // namespace fp

double apply_activation(Activation kind, double x, Precision p = Precision::Float64);

// v / sqrt(mean(v_i^2) + eps). ZeroVector if eps == 0 and v == 0.
DenseVector rmsnorm(const DenseVector& v, double eps, Precision p = Precision::Float64);

// max-subtracted, normalized exponentials; a probability vector for any finite input
DenseVector softmax(const DenseVector& v, Precision p = Precision::Float64);

DenseVector map_activation(Activation kind, const DenseVector& v, Precision p = Precision::Float64);

// elementwise helpers
DenseVector vec_add(const DenseVector& a, const DenseVector& b, Precision p = Precision::Float64);
DenseVector vec_sub(const DenseVector& a, const DenseVector& b, Precision p = Precision::Float64);
DenseVector vec_mul(const DenseVector& a, const DenseVector& b, Precision p = Precision::Float64);

double rms(const DenseVector& v); // plain Float64 root-mean-square

void check_same_len(const DenseVector& a, const DenseVector& b, const char* what);

} // namespace ctxpatch
