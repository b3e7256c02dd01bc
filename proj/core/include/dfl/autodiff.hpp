#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "dfl/tensor.hpp"

namespace dfl {

class Tape;

/// Lightweight handle to a node on a tape. Copyable; the tape owns the data.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor& value() const;
    const Tensor& grad() const;  // zeros until backward() reaches this node
};

/// Reverse-mode autodiff over Tensors. A tape is built fresh for every
/// evaluation: record leaves, compose primitives, call backward() on a scalar
/// root, read leaf grads. backward() recomputes all grads from scratch, so a
/// single tape supports repeated backward passes (e.g. finite-difference
/// harnesses) without stale accumulation.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    Var leaf(Tensor value, bool requires_grad = true);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    // elementwise
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var affine(Var x, double scale, double shift);  // scale*x + shift
    Var scale(Var x, double s) { return affine(x, s, 0.0); }
    Var tanh(Var x);
    Var exp(Var x);
    Var log(Var x);
    Var pow_const(Var x, double p);

    // linear / structural
    Var matmul(Var a, Var b);
    Var bias_add(Var x, Var b);  // x[m,n] + b[n], broadcast over rows
    Var conv2d(Var x, Var w, Var b);
    Var concat0(const std::vector<Var>& parts);
    Var slice0(Var x, int begin, int end);
    Var reshape(Var x, std::vector<int> shape);

    // reductions to scalar
    Var sum(Var x);
    Var mean(Var x);
    Var dot(Var a, Var b);
    Var norm2(Var x);
    Var logdet_psd(Var x);

    // scalar-node scaling and the unit-normalize composite built on it
    Var scale_by(Var x, Var s);  // s must be scalar
    Var normalize(Var x);        // x / sqrt(dot(x,x) + 1e-12)

    /// Propagate d(root)/d(node) into every node. root must be scalar.
    void backward(Var root);
    void zero_grad();

    std::size_t size() const { return nodes_.size(); }
    const Tensor& value_of(int id) const;
    const Tensor& grad_of(int id);

private:
    struct Node {
        const char* op = "";
        Tensor value;
        Tensor grad;
        bool needs = false;
        std::function<void(Tape&, int)> pull;
    };

    Var push(const char* op, Tensor value, std::vector<int> parents, std::function<void(Tape&, int)> pull);
    int check(Var v, const char* op) const;
    Tensor& grad_buf(int id);
    void accum(int id, const Tensor& g);
    bool needs(int id) const { return nodes_[static_cast<std::size_t>(id)].needs; }

    std::deque<Node> nodes_;
};

inline Var operator+(Var a, Var b) { return a.tape->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape->mul(a, b); }
inline Var operator*(double s, Var x) { return x.tape->scale(x, s); }

}  // namespace dfl
