#pragma once

#include <stdexcept>
#include <string>

#include "dfl/tensor.hpp"

namespace dfl {

/// Thrown when a matrix that must be positive definite is not; carries the
/// offending eigenvalue so callers can report how far off it was.
struct NotPositiveDefinite : std::runtime_error {
    NotPositiveDefinite(const std::string& what, double smallest)
        : std::runtime_error(what), smallest_eigenvalue(smallest) {}
    double smallest_eigenvalue;
};

struct EigResult {
    Tensor values;   // [n], descending
    Tensor vectors;  // [n,n], column j pairs with values[j]
};

/// Full eigendecomposition of a symmetric matrix via cyclic Jacobi sweeps.
/// Converges when the off-diagonal Frobenius norm drops below 1e-12. Sized
/// for the small kernel/covariance matrices used here (n <= 64). Throws if
/// the input is not symmetric to 1e-9.
EigResult sym_eig(const Tensor& a);

/// log det of a symmetric positive definite matrix (sum of log eigenvalues).
/// Throws NotPositiveDefinite if any eigenvalue is <= 0.
double logdet_psd(const Tensor& a);

/// Inverse of a symmetric positive definite matrix via its eigensystem,
/// V diag(1/lambda) V^T; result is exactly symmetric by construction.
Tensor psd_inverse(const Tensor& a);

}  // namespace dfl
