#include "ctxpatch/rmsinv.hpp"

#include <cmath>
#include <limits>

namespace ctxpatch {

namespace {

// smallest m_k² over coordinates that actually constrain the problem; the
// coordinates with g_k m_k == 0 contribute no pole (their y_k is forced to 0)
double pole_bound(const DenseVector& g, const DenseVector& m) {
    check_same_len(g, m, "rmsinv");
    double mu_max = std::numeric_limits<double>::infinity();
    bool any = false;
    for (size_t k = 0; k < g.len(); ++k) {
        if (g[k] * m[k] == 0.0) continue;
        any = true;
        mu_max = std::min(mu_max, m[k] * m[k]);
    }
    if (!any) fail(Errc::DegenerateProblem, "all g_k * m_k == 0: any unit-RMS vector is optimal");
    return mu_max;
}

} // namespace

double f_mu(double mu, const DenseVector& g, const DenseVector& m) {
    check_same_len(g, m, "f_mu");
    const size_t n = g.len();
    double acc = 0.0;
    for (size_t k = 0; k < n; ++k) {
        const double num = g[k] * m[k];
        if (num == 0.0) continue;
        const double den = m[k] * m[k] - mu;
        if (den == 0.0) fail(Errc::PoleEvaluation, "f_mu evaluated at pole mu = m_k^2, k = " + std::to_string(k));
        const double t = num / den;
        acc += t * t;
    }
    return acc / static_cast<double>(n) - 1.0;
}

double solve_mu(const DenseVector& g, const DenseVector& m, double tol, int max_iter) {
    const double mu_max = pole_bound(g, m);

    // upper bracket: walk toward the pole until F > 0
    double eta = 1e-6 * (1.0 + std::fabs(mu_max));
    double hi = mu_max - eta;
    double f_hi = f_mu(hi, g, m);
    int budget = max_iter;
    while (f_hi <= 0.0 && budget-- > 0) {
        eta *= 0.5;
        const double next = mu_max - eta;
        if (next == hi) break; // ulp floor at the pole
        hi = next;
        f_hi = f_mu(hi, g, m);
    }
    if (f_hi == 0.0) return hi;
    if (f_hi < 0.0) fail(Errc::BracketFailure, "no F > 0 point found below the pole");

    // lower bracket: double the step down from mu_max - 1 until F < 0
    double step = 1.0;
    double lo = mu_max - step;
    double f_lo = f_mu(lo, g, m);
    budget = max_iter;
    while (f_lo >= 0.0 && budget-- > 0) {
        step *= 2.0;
        lo = mu_max - step;
        f_lo = f_mu(lo, g, m);
    }
    if (f_lo == 0.0) return lo;
    if (f_lo > 0.0) fail(Errc::BracketFailure, "no F < 0 point found within iteration budget");
    // monotonicity gives lo < root < hi here, a valid bisection bracket

    double mid = hi;
    for (int it = 0; it < max_iter; ++it) {
        mid = 0.5 * (lo + hi);
        if (mid == lo || mid == hi) break; // bracket narrowed to adjacent doubles
        const double f_mid = f_mu(mid, g, m);
        if (f_mid == 0.0) return mid;
        if (f_mid < 0.0)
            lo = mid;
        else
            hi = mid;
        if ((hi - lo) <= tol * (1.0 + std::fabs(mid)) && std::fabs(f_mid) <= tol) break;
    }
    return 0.5 * (lo + hi);
}

DenseVector invert_rmsnorm(const DenseVector& g, const DenseVector& m, double c, double tol) {
    if (!(c > 0.0) || !std::isfinite(c))
        fail(Errc::DegenerateProblem, "constraint RMS value must be positive and finite");
    const double mu = solve_mu(g, m, tol);
    DenseVector x(g.len());
    for (size_t k = 0; k < g.len(); ++k) {
        const double num = g[k] * m[k];
        x[k] = (num == 0.0) ? 0.0 : c * (num / (m[k] * m[k] - mu));
    }
    return x;
}

} // namespace ctxpatch
