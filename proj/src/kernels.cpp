#include "ctxpatch/kernels.hpp"

#include <cstdint>

namespace ctxpatch {
namespace kernels {

namespace {

inline double row_dot(const double* w, const double* x, size_t n, Precision p) {
    // sequential reduction; accumulation order is fixed so the result does not
    // depend on thread count
    switch (p) {
    case Precision::Float64: {
        double acc = 0.0;
        for (size_t j = 0; j < n; ++j) acc += w[j] * x[j];
        return acc;
    }
    case Precision::Float32: {
        float acc = 0.0f;
        for (size_t j = 0; j < n; ++j)
            acc += static_cast<float>(w[j]) * static_cast<float>(x[j]);
        return static_cast<double>(acc);
    }
    case Precision::Bf16Emulated: {
        double acc = 0.0;
        for (size_t j = 0; j < n; ++j) acc = round_bf16(acc + round_bf16(w[j] * x[j]));
        return acc;
    }
    }
    return 0.0;
}

inline void check_matvec(const DenseMatrix& w, const DenseVector& x) {
    if (w.cols != x.len())
        fail(Errc::DimensionMismatch,
             "matvec: matrix cols " + std::to_string(w.cols) + " vs vector " + std::to_string(x.len()));
}

inline void check_matvec_t(const DenseMatrix& w, const DenseVector& x) {
    if (w.rows != x.len())
        fail(Errc::DimensionMismatch,
             "matvec_t: matrix rows " + std::to_string(w.rows) + " vs vector " + std::to_string(x.len()));
}

inline void check_rank1(const DenseMatrix& w, const DenseVector& u, const DenseVector& v) {
    if (w.rows != u.len() || w.cols != v.len())
        fail(Errc::DimensionMismatch,
             "rank1_update: matrix " + std::to_string(w.rows) + "x" + std::to_string(w.cols) +
                 " vs outer product " + std::to_string(u.len()) + "x" + std::to_string(v.len()));
}

} // namespace

DenseVector matvec(const DenseMatrix& w, const DenseVector& x, Precision p) {
    check_matvec(w, x);
    DenseVector y(w.rows);
    const int64_t rows = static_cast<int64_t>(w.rows);
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < rows; ++i)
        y[static_cast<size_t>(i)] = row_dot(w.row(static_cast<size_t>(i)), x.data.data(), w.cols, p);
    return y;
}

DenseVector matvec_t(const DenseMatrix& w, const DenseVector& x, Precision p) {
    check_matvec_t(w, x);
    DenseVector y(w.cols);
    const int64_t cols = static_cast<int64_t>(w.cols);
#pragma omp parallel for schedule(static)
    for (int64_t j = 0; j < cols; ++j) {
        const size_t jj = static_cast<size_t>(j);
        switch (p) {
        case Precision::Float64: {
            double acc = 0.0;
            for (size_t i = 0; i < w.rows; ++i) acc += w.at(i, jj) * x[i];
            y[jj] = acc;
            break;
        }
        case Precision::Float32: {
            float acc = 0.0f;
            for (size_t i = 0; i < w.rows; ++i)
                acc += static_cast<float>(w.at(i, jj)) * static_cast<float>(x[i]);
            y[jj] = static_cast<double>(acc);
            break;
        }
        case Precision::Bf16Emulated: {
            double acc = 0.0;
            for (size_t i = 0; i < w.rows; ++i) acc = round_bf16(acc + round_bf16(w.at(i, jj) * x[i]));
            y[jj] = acc;
            break;
        }
        }
    }
    return y;
}

void rank1_update(DenseMatrix& w, const DenseVector& u, const DenseVector& v, Precision p) {
    check_rank1(w, u, v);
    const int64_t rows = static_cast<int64_t>(w.rows);
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < rows; ++i) {
        double* wr = w.row(static_cast<size_t>(i));
        const double ui = u[static_cast<size_t>(i)];
        for (size_t j = 0; j < w.cols; ++j) wr[j] = fp::add(p, wr[j], fp::mul(p, ui, v[j]));
    }
}

double dot(const DenseVector& a, const DenseVector& b, Precision p) {
    check_same_len(a, b, "dot");
    return row_dot(a.data.data(), b.data.data(), a.len(), p);
}

namespace ref {

DenseVector matvec(const DenseMatrix& w, const DenseVector& x, Precision p) {
    check_matvec(w, x);
    DenseVector y(w.rows);
    for (size_t i = 0; i < w.rows; ++i) y[i] = row_dot(w.row(i), x.data.data(), w.cols, p);
    return y;
}

DenseVector matvec_t(const DenseMatrix& w, const DenseVector& x, Precision p) {
    check_matvec_t(w, x);
    DenseVector y(w.cols);
    for (size_t j = 0; j < w.cols; ++j) {
        double acc = 0.0;
        float accf = 0.0f;
        for (size_t i = 0; i < w.rows; ++i) {
            switch (p) {
            case Precision::Float64: acc += w.at(i, j) * x[i]; break;
            case Precision::Float32: accf += static_cast<float>(w.at(i, j)) * static_cast<float>(x[i]); break;
            case Precision::Bf16Emulated: acc = round_bf16(acc + round_bf16(w.at(i, j) * x[i])); break;
            }
        }
        y[j] = (p == Precision::Float32) ? static_cast<double>(accf) : acc;
    }
    return y;
}

void rank1_update(DenseMatrix& w, const DenseVector& u, const DenseVector& v, Precision p) {
    check_rank1(w, u, v);
    for (size_t i = 0; i < w.rows; ++i) {
        double* wr = w.row(i);
        for (size_t j = 0; j < w.cols; ++j) wr[j] = fp::add(p, wr[j], fp::mul(p, u[i], v[j]));
    }
}

double dot(const DenseVector& a, const DenseVector& b, Precision p) {
    check_same_len(a, b, "dot");
    return row_dot(a.data.data(), b.data.data(), a.len(), p);
}

} // namespace ref

} // namespace kernels
} // namespace ctxpatch
