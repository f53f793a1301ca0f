#pragma once

#include "ctxpatch/numerics.hpp"

// Dense kernels used by the forward pass and the patch compilers.
//
// The hot loops are parallelized over output rows with OpenMP.  Each output
// element is still a single sequential reduction, so results are bitwise
// identical for any thread count and identical to the serial reference
// implementations kept in kernels::ref for testing and benchmarking.

namespace ctxpatch {
namespace kernels {

// y = W x            (W: rows x cols, x: cols)
DenseVector matvec(const DenseMatrix& w, const DenseVector& x, Precision p);

// y = W^T x          (W: rows x cols, x: rows)
DenseVector matvec_t(const DenseMatrix& w, const DenseVector& x, Precision p);

// W += u v^T         (u: rows, v: cols); every add/mul rounded at precision p
void rank1_update(DenseMatrix& w, const DenseVector& u, const DenseVector& v, Precision p);

// sequential <a, b>
double dot(const DenseVector& a, const DenseVector& b, Precision p);

namespace ref {

DenseVector matvec(const DenseMatrix& w, const DenseVector& x, Precision p);
DenseVector matvec_t(const DenseMatrix& w, const DenseVector& x, Precision p);
void rank1_update(DenseMatrix& w, const DenseVector& u, const DenseVector& v, Precision p);
double dot(const DenseVector& a, const DenseVector& b, Precision p);

} // namespace ref

} // namespace kernels
} // namespace ctxpatch
