#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <functional>
#include <vector>

#include "dfl/autodiff.hpp"
#include "dfl/linalg.hpp"
#include "dfl/rng.hpp"
#include "doctest.h"

using namespace dfl;

namespace {

using Build = std::function<Var(Tape&, std::vector<Var>&)>;

double eval_at(const std::vector<Tensor>& leaves, const Build& build) {
    Tape tape;
    std::vector<Var> vs;
    for (const auto& t : leaves) vs.push_back(tape.leaf(t, false));
    return build(tape, vs).value().scalar_value();
}

// Central finite differences against the analytic gradient of every leaf
// element. Leaves the root untouched so builders can pick any composition.
void check_grads(std::vector<Tensor> leaves, const Build& build, double tol = 2e-6) {
    Tape tape;
    std::vector<Var> vs;
    for (const auto& t : leaves) vs.push_back(tape.leaf(t));
    Var root = build(tape, vs);
    REQUIRE(root.value().is_scalar());
    tape.backward(root);
    std::vector<Tensor> grads;
    for (const auto& v : vs) grads.push_back(v.grad());

    const double eps = 1e-5;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        for (std::size_t i = 0; i < leaves[li].size(); ++i) {
            const double keep = leaves[li][i];
            leaves[li][i] = keep + eps;
            const double up = eval_at(leaves, build);
            leaves[li][i] = keep - eps;
            const double dn = eval_at(leaves, build);
            leaves[li][i] = keep;
            const double fd = (up - dn) / (2 * eps);
            const double an = grads[li].empty() ? 0.0 : grads[li][i];
            CHECK(std::abs(an - fd) <= tol * std::max({1.0, std::abs(an), std::abs(fd)}));
        }
    }
}

}  // namespace

TEST_CASE("elementwise primitives") {
    Rng rng(1);
    Tensor a = Tensor::randn({2, 3}, rng);
    Tensor b = Tensor::randn({2, 3}, rng);
    check_grads({a, b}, [](Tape& t, std::vector<Var>& v) { return t.sum(t.add(v[0], v[1])); });
    check_grads({a, b}, [](Tape& t, std::vector<Var>& v) { return t.sum(t.sub(v[0], v[1])); });
    check_grads({a, b}, [](Tape& t, std::vector<Var>& v) { return t.sum(t.mul(v[0], v[1])); });
    check_grads({a}, [](Tape& t, std::vector<Var>& v) { return t.sum(t.affine(v[0], 2.5, -1.0)); });
    check_grads({a}, [](Tape& t, std::vector<Var>& v) { return t.sum(t.tanh(v[0])); });
    check_grads({a}, [](Tape& t, std::vector<Var>& v) { return t.sum(t.exp(v[0])); });
    // keep arguments strictly positive for log and fractional powers
    check_grads({a}, [](Tape& t, std::vector<Var>& v) { return t.sum(t.log(t.add(t.exp(v[0]), t.constant(Tensor::full({2, 3}, 0.5))))); });
    check_grads({a}, [](Tape& t, std::vector<Var>& v) { return t.sum(t.pow_const(t.exp(v[0]), 1.7)); });
}

TEST_CASE("linear and structural primitives") {
    Rng rng(2);
    Tensor a = Tensor::randn({3, 4}, rng);
    Tensor b = Tensor::randn({4, 2}, rng);
    Tensor bias = Tensor::randn({4}, rng);
    Tensor mix = Tensor::randn({3, 2}, rng);
    check_grads({a, b, mix}, [](Tape& t, std::vector<Var>& v) { return t.dot(t.matmul(v[0], v[1]), v[2]); });
    check_grads({a, bias}, [](Tape& t, std::vector<Var>& v) { return t.sum(t.tanh(t.bias_add(v[0], v[1]))); });
    check_grads({a}, [](Tape& t, std::vector<Var>& v) { return t.sum(t.mul(t.reshape(v[0], {4, 3}), t.constant(Tensor::full({4, 3}, 0.7)))); });

    Tensor p = Tensor::randn({2, 3}, rng);
    Tensor q = Tensor::randn({3, 3}, rng);
    check_grads({p, q}, [](Tape& t, std::vector<Var>& v) {
        Var cat = t.concat0({v[0], v[1]});  // [5,3]
        return t.norm2(t.slice0(cat, 1, 4));
    });
}

TEST_CASE("conv2d gradients") {
    Rng rng(3);
    Tensor x = Tensor::randn({2, 4, 4}, rng);
    Tensor w = scaled(Tensor::randn({3, 2, 3, 3}, rng), 0.4);
    Tensor b = Tensor::randn({3}, rng);
    check_grads({x, w, b}, [](Tape& t, std::vector<Var>& v) { return t.sum(t.tanh(t.conv2d(v[0], v[1], v[2]))); });
}

TEST_CASE("reductions and normalize") {
    Rng rng(4);
    Tensor a = Tensor::randn({6}, rng);
    Tensor b = Tensor::randn({6}, rng);
    Tensor s = Tensor::randn({1}, rng);
    check_grads({a}, [](Tape& t, std::vector<Var>& v) { return t.mean(t.mul(v[0], v[0])); });
    check_grads({a, b}, [](Tape& t, std::vector<Var>& v) { return t.dot(v[0], v[1]); });
    check_grads({a}, [](Tape& t, std::vector<Var>& v) { return t.norm2(v[0]); });
    check_grads({a, s}, [](Tape& t, std::vector<Var>& v) { return t.sum(t.scale_by(v[0], v[1])); });
    check_grads({a, b}, [](Tape& t, std::vector<Var>& v) { return t.dot(t.normalize(v[0]), v[1]); });
    // normalize of the zero vector is smoothed as x / sqrt(|x|^2 + 1e-12);
    // at zero the gradient of sum(normalize(x)) is exactly 1e6 per coordinate
    // (too sharp for finite differences, so check the closed form)
    {
        Tape t;
        Var z = t.leaf(Tensor({3}));
        t.backward(t.dot(t.normalize(z), t.constant(Tensor::full({3}, 1.0))));
        const Tensor g = z.grad();
        REQUIRE(g.size() == 3);
        for (std::size_t i = 0; i < 3; ++i) CHECK(g[i] == doctest::Approx(1e6).epsilon(1e-9));
    }
}

TEST_CASE("logdet gradient with symmetric pair perturbation") {
    Rng rng(5);
    // PSD leaf: M = B B^T + I, perturbed symmetrically
    Tensor bmat = Tensor::randn({4, 4}, rng);
    Tensor m({4, 4});
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            double s = 0;
            for (int k = 0; k < 4; ++k) s += bmat(i, k) * bmat(j, k);
            m(i, j) = s + (i == j ? 1.0 : 0.0);
        }

    Tape tape;
    Var vm = tape.leaf(m);
    Var root = tape.logdet_psd(vm);
    CHECK(root.value().scalar_value() == doctest::Approx(logdet_psd(m)).epsilon(1e-10));
    tape.backward(root);
    Tensor g = vm.grad();

    const double eps = 1e-6;
    auto value_with = [&](const Tensor& mm) {
        Tape t2;
        return t2.logdet_psd(t2.constant(mm)).value().scalar_value();
    };
    for (int i = 0; i < 4; ++i)
        for (int j = i; j < 4; ++j) {
            Tensor up = m, dn = m;
            up(i, j) += eps;
            dn(i, j) -= eps;
            if (i != j) {
                up(j, i) += eps;
                dn(j, i) -= eps;
            }
            const double fd = (value_with(up) - value_with(dn)) / (2 * eps);
            const double an = i == j ? g(i, i) : g(i, j) + g(j, i);
            CHECK(an == doctest::Approx(fd).epsilon(1e-5));
        }
}

TEST_CASE("repeated backward recomputes from scratch") {
    Rng rng(6);
    Tensor a = Tensor::randn({5}, rng);
    Tape tape;
    Var va = tape.leaf(a);
    Var r1 = tape.dot(va, va);
    Var r2 = tape.sum(tape.tanh(va));

    tape.backward(r1);
    Tensor g1 = va.grad();
    tape.backward(r1);
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(va.grad()[i] == g1[i]);  // no accumulation across calls

    tape.backward(r2);
    Tensor g2 = va.grad();
    Tape fresh;
    Var wa = fresh.leaf(a);
    fresh.backward(fresh.sum(fresh.tanh(wa)));
    for (std::size_t i = 0; i < g2.size(); ++i) CHECK(g2[i] == wa.grad()[i]);
}

TEST_CASE("backward only touches the root's subgraph") {
    Rng rng(7);
    Tensor a = Tensor::randn({4}, rng);
    Tensor b = Tensor::randn({4}, rng);
    Tape tape;
    Var va = tape.leaf(a);
    Var vb = tape.leaf(b);
    Var r1 = tape.dot(va, va);
    Var r2 = tape.dot(vb, vb);
    (void)r2;
    tape.backward(r1);
    CHECK(norm2(va.grad()) > 0);
    CHECK((vb.grad().empty() || norm2(vb.grad()) == 0.0));
}

TEST_CASE("api misuse throws") {
    Tape tape;
    Var a = tape.leaf(Tensor({2, 2}, {1, 2, 3, 4}));
    CHECK_THROWS(tape.backward(a));  // non-scalar root
    CHECK_THROWS(tape.add(a, tape.leaf(Tensor({3}))));
    Var other{};
    CHECK_THROWS(tape.add(a, other));
}
