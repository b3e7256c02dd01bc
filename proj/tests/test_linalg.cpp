#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "dfl/linalg.hpp"
#include "dfl/rng.hpp"
#include "doctest.h"

using namespace dfl;

namespace {

Tensor random_symmetric(int n, Rng& rng) {
    Tensor a({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = i; j < n; ++j) {
            double v = rng.normal();
            a(i, j) = v;
            a(j, i) = v;
        }
    return a;
}

}  // namespace

TEST_CASE("2x2 hand eigensystem") {
    Tensor a({2, 2}, {1.0, 0.5, 0.5, 1.0});
    EigResult e = sym_eig(a);
    CHECK(e.values[0] == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(e.values[1] == doctest::Approx(0.5).epsilon(1e-12));
    // column 0 is the (1,1)/sqrt(2) direction up to sign
    CHECK(std::abs(e.vectors(0, 0)) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
    CHECK(e.vectors(0, 0) == doctest::Approx(e.vectors(1, 0)).epsilon(1e-12));
}

TEST_CASE("eigen reconstruction and orthonormality") {
    Rng rng(21);
    Tensor a = random_symmetric(8, rng);
    EigResult e = sym_eig(a);

    for (int j = 1; j < 8; ++j) CHECK(e.values[j] <= e.values[j - 1]);  // descending

    // V^T V = I
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) {
            double s = 0;
            for (int k = 0; k < 8; ++k) s += e.vectors(k, i) * e.vectors(k, j);
            CHECK(s == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-9).scale(1.0));
        }

    // V diag(lambda) V^T = A
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) {
            double s = 0;
            for (int k = 0; k < 8; ++k) s += e.vectors(i, k) * e.values[k] * e.vectors(j, k);
            CHECK(s == doctest::Approx(a(i, j)).epsilon(1e-9).scale(1.0));
        }
}

TEST_CASE("logdet of 2x2 with det 0.75") {
    Tensor a({2, 2}, {1.0, 0.5, 0.5, 1.0});
    CHECK(logdet_psd(a) == doctest::Approx(std::log(0.75)).epsilon(1e-12));
}

TEST_CASE("logdet rejects indefinite input") {
    Tensor a({2, 2}, {1.0, 2.0, 2.0, 1.0});  // eigenvalues 3, -1
    CHECK_THROWS_AS(logdet_psd(a), NotPositiveDefinite);
    try {
        logdet_psd(a);
    } catch (const NotPositiveDefinite& e) {
        CHECK(e.smallest_eigenvalue == doctest::Approx(-1.0).epsilon(1e-9));
    }
}

TEST_CASE("sym_eig rejects asymmetric input") {
    Tensor a({2, 2}, {1.0, 0.5, 0.6, 1.0});
    CHECK_THROWS(sym_eig(a));
}

TEST_CASE("psd inverse") {
    Rng rng(22);
    Tensor b = Tensor::randn({5, 5}, rng);
    Tensor a({5, 5});
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
            double s = i == j ? 0.5 : 0.0;
            for (int k = 0; k < 5; ++k) s += b(i, k) * b(j, k);
            a(i, j) = s;
        }
    Tensor inv = psd_inverse(a);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
            CHECK(inv(i, j) == inv(j, i));  // exactly symmetric by construction
            double s = 0;
            for (int k = 0; k < 5; ++k) s += a(i, k) * inv(k, j);
            CHECK(s == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-8).scale(1.0));
        }
}
