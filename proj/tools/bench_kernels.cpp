#include "ctxpatch/kernels.hpp"

#include <chrono>
#include <cstdio>

// Times the OpenMP row-parallel kernels against the serial reference and
// checks that both produce bitwise-identical results.

using namespace ctxpatch;

namespace {

double now_ms() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double, std::milli>(clock::now().time_since_epoch()).count();
}

DenseMatrix rand_mat(size_t r, size_t c, Rng& rng) {
    DenseMatrix w(r, c);
    for (double& e : w.data) e = rng.next_symmetric(1.0);
    return w;
}

DenseVector rand_vec(size_t n, Rng& rng) {
    DenseVector v(n);
    for (size_t i = 0; i < n; ++i) v[i] = rng.next_symmetric(1.0);
    return v;
}

template <typename F> double time_best_ms(F&& f, int reps) {
    double best = 1e300;
    for (int i = 0; i < reps; ++i) {
        const double t0 = now_ms();
        f();
        best = std::min(best, now_ms() - t0);
    }
    return best;
}

} // namespace

int main() {
    Rng rng(1234);
    std::printf("%-22s %10s %12s %12s %9s %9s\n", "kernel", "size", "serial(ms)", "openmp(ms)",
                "speedup", "bitwise");
    bool all_match = true;

    for (size_t n : {256, 512, 1024}) {
        const DenseMatrix w = rand_mat(n, n, rng);
        const DenseVector x = rand_vec(n, rng);
        for (Precision p : {Precision::Float64, Precision::Bf16Emulated}) {
            DenseVector ys, yp;
            const double ts = time_best_ms([&] { ys = kernels::ref::matvec(w, x, p); }, 5);
            const double tp = time_best_ms([&] { yp = kernels::matvec(w, x, p); }, 5);
            const bool match = ys == yp;
            all_match = all_match && match;
            std::printf("%-22s %7zux%-3zu %12.3f %12.3f %8.2fx %9s\n",
                        (std::string("matvec/") + to_string(p)).c_str(), n, n, ts, tp, ts / tp,
                        match ? "yes" : "NO");
        }

        const DenseVector u = rand_vec(n, rng);
        const DenseVector v = rand_vec(n, rng);
        for (Precision p : {Precision::Float64, Precision::Bf16Emulated}) {
            DenseMatrix ws = w, wp = w;
            const double ts = time_best_ms([&] { kernels::ref::rank1_update(ws, u, v, p); }, 5);
            const double tp = time_best_ms([&] { kernels::rank1_update(wp, u, v, p); }, 5);
            const bool match = ws == wp;
            all_match = all_match && match;
            std::printf("%-22s %7zux%-3zu %12.3f %12.3f %8.2fx %9s\n",
                        (std::string("rank1/") + to_string(p)).c_str(), n, n, ts, tp, ts / tp,
                        match ? "yes" : "NO");
        }
    }

    if (!all_match) {
        std::printf("FAIL: OpenMP and serial kernels disagree\n");
        return 1;
    }
    return 0;
}
