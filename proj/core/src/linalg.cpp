#include "dfl/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace dfl {

namespace {

void check_square_symmetric(const Tensor& a, const char* who) {
    if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
        throw std::invalid_argument(std::string(who) + ": need a square matrix, got " + shape_str(a.shape()));
    }
    const int n = a.dim(0);
    if (n > 64) {
        throw std::invalid_argument(std::string(who) + ": matrix of size " + std::to_string(n) +
                                    " exceeds the 64x64 kernel-size budget");
    }
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            if (std::abs(a(i, j) - a(j, i)) > 1e-9) {
                throw std::invalid_argument(std::string(who) + ": matrix is not symmetric at (" +
                                            std::to_string(i) + "," + std::to_string(j) + ")");
            }
        }
    }
}

double offdiag_frobenius(const Tensor& a) {
    const int n = a.dim(0);
    double s = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
}

}  // namespace

EigResult sym_eig(const Tensor& input) {
    check_square_symmetric(input, "sym_eig");
    const int n = input.dim(0);
    Tensor a = input;
    // enforce exact symmetry so rotations stay consistent
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const double m = 0.5 * (a(i, j) + a(j, i));
            a(i, j) = m;
            a(j, i) = m;
        }

    Tensor v({n, n});
    for (int i = 0; i < n; ++i) v(i, i) = 1.0;

    const int max_sweeps = 128;
    for (int sweep = 0; sweep < max_sweeps && offdiag_frobenius(a) >= 1e-12; ++sweep) {
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double app = a(p, p);
                const double aqq = a(q, q);
                const double tau = (aqq - app) / (2.0 * apq);
                // smaller-magnitude root keeps rotations stable
                const double t = (tau >= 0.0) ? 1.0 / (tau + std::sqrt(1.0 + tau * tau))
                                              : 1.0 / (tau - std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a(p, k);
                    const double aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                a(p, q) = 0.0;
                a(q, p) = 0.0;
                for (int k = 0; k < n; ++k) {
                    const double vkp = v(k, p);
                    const double vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int x, int y) { return a(x, x) > a(y, y); });

    EigResult r{Tensor({n}), Tensor({n, n})};
    for (int j = 0; j < n; ++j) {
        r.values[static_cast<std::size_t>(j)] = a(order[j], order[j]);
        for (int i = 0; i < n; ++i) r.vectors(i, j) = v(i, order[j]);
    }
    return r;
}

double logdet_psd(const Tensor& a) {
    const EigResult eig = sym_eig(a);
    const int n = a.dim(0);
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        const double lam = eig.values[static_cast<std::size_t>(i)];
        if (lam <= 0.0) {
            throw NotPositiveDefinite(
                "logdet_psd: matrix is not positive definite (smallest eigenvalue " + std::to_string(lam) + ")", lam);
        }
        s += std::log(lam);
    }
    return s;
}

Tensor psd_inverse(const Tensor& a) {
    const EigResult eig = sym_eig(a);
    const int n = a.dim(0);
    for (int i = 0; i < n; ++i) {
        const double lam = eig.values[static_cast<std::size_t>(i)];
        if (lam <= 0.0) {
            throw NotPositiveDefinite(
                "psd_inverse: matrix is not positive definite (smallest eigenvalue " + std::to_string(lam) + ")", lam);
        }
    }
    Tensor inv({n, n});
    for (int i = 0; i < n; ++i) {
        for (int j = i; j < n; ++j) {
            double s = 0.0;
            for (int k = 0; k < n; ++k) {
                s += eig.vectors(i, k) * eig.vectors(j, k) / eig.values[static_cast<std::size_t>(k)];
            }
            inv(i, j) = s;
            inv(j, i) = s;
        }
    }
    return inv;
}

}  // namespace dfl
