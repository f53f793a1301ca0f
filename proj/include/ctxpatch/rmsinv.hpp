#pragma once

#include "ctxpatch/numerics.hpp"

// Analytical inversion of scaled RMSNorm: find x with RMS(x) = C minimizing
// ‖m ⊙ (x / RMS(x)) − g‖².  The stationarity conditions reduce to a scalar
// root-find for the Lagrange multiplier μ:
//
//   F(μ) = (1/n) Σ_k (g_k m_k)² / (m_k² − μ)² − 1,   μ < min{m_k² : g_k m_k ≠ 0}
//
// F is strictly increasing on that interval with lim_{μ→−∞} F = −1 and
// F → +∞ at the pole, so the root exists, is unique, and bisection converges.
// The solution is y_k = g_k m_k / (m_k² − μ*) (0 where g_k m_k == 0), x = C·y.
//
// All internal arithmetic is Float64 regardless of the caller's precision
// mode; callers round the result if they need a narrower format.

namespace ctxpatch {

inline constexpr double rmsinv_default_tol = 1e-12;
inline constexpr int rmsinv_default_max_iter = 200;

// F(μ); PoleEvaluation if μ equals some m_k² with g_k m_k ≠ 0
double f_mu(double mu, const DenseVector& g, const DenseVector& m);

// root of F; DegenerateProblem if all g_k m_k == 0, BracketFailure if no sign
// change is found within the iteration budget
double solve_mu(const DenseVector& g, const DenseVector& m, double tol = rmsinv_default_tol,
                int max_iter = rmsinv_default_max_iter);

DenseVector invert_rmsnorm(const DenseVector& g, const DenseVector& m, double c,
                           double tol = rmsinv_default_tol);

} // namespace ctxpatch
