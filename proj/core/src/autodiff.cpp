#include "dfl/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "dfl/linalg.hpp"

namespace dfl {

const Tensor& Var::value() const { return tape->value_of(id); }
const Tensor& Var::grad() const { return tape->grad_of(id); }

const Tensor& Tape::value_of(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

const Tensor& Tape::grad_of(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
}

Tensor& Tape::grad_buf(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
}

void Tape::accum(int id, const Tensor& g) {
    if (!needs(id)) return;
    axpy(1.0, g, grad_buf(id));
}

int Tape::check(Var v, const char* op) const {
    if (v.tape != this) throw std::logic_error(std::string("tape ") + op + ": var belongs to a different tape");
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
        throw std::logic_error(std::string("tape ") + op + ": invalid node id");
    }
    return v.id;
}

Var Tape::push(const char* op, Tensor value, std::vector<int> parents, std::function<void(Tape&, int)> pull) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    for (int p : parents) n.needs = n.needs || needs(p);
    if (n.needs) n.pull = std::move(pull);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    if (value.empty()) throw std::invalid_argument("tape leaf: empty tensor");
    Node n;
    n.op = "leaf";
    n.value = std::move(value);
    n.needs = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::add(Var a, Var b) {
    const int pa = check(a, "add"), pb = check(b, "add");
    return push("add", dfl::add(value_of(pa), value_of(pb)), {pa, pb}, [pa, pb](Tape& t, int self) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
        t.accum(pa, g);
        t.accum(pb, g);
    });
}

Var Tape::sub(Var a, Var b) {
    const int pa = check(a, "sub"), pb = check(b, "sub");
    return push("sub", dfl::sub(value_of(pa), value_of(pb)), {pa, pb}, [pa, pb](Tape& t, int self) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
        t.accum(pa, g);
        if (t.needs(pb)) axpy(-1.0, g, t.grad_buf(pb));
    });
}

Var Tape::mul(Var a, Var b) {
    const int pa = check(a, "mul"), pb = check(b, "mul");
    return push("mul", dfl::mul(value_of(pa), value_of(pb)), {pa, pb}, [pa, pb](Tape& t, int self) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
        if (t.needs(pa)) axpy(1.0, dfl::mul(g, t.value_of(pb)), t.grad_buf(pa));
        if (t.needs(pb)) axpy(1.0, dfl::mul(g, t.value_of(pa)), t.grad_buf(pb));
    });
}

Var Tape::affine(Var x, double scale, double shift) {
    const int px = check(x, "affine");
    const Tensor& xv = value_of(px);
    Tensor out = xv;
    for (auto& v : out.vec()) v = scale * v + shift;
    return push("affine", std::move(out), {px}, [px, scale](Tape& t, int self) {
        if (t.needs(px)) axpy(scale, t.nodes_[static_cast<std::size_t>(self)].grad, t.grad_buf(px));
    });
}

Var Tape::tanh(Var x) {
    const int px = check(x, "tanh");
    Tensor out = value_of(px);
    for (auto& v : out.vec()) v = std::tanh(v);
    return push("tanh", std::move(out), {px}, [px](Tape& t, int self) {
        if (!t.needs(px)) return;
        const Node& n = t.nodes_[static_cast<std::size_t>(self)];
        Tensor& gx = t.grad_buf(px);
        for (std::size_t i = 0; i < n.value.size(); ++i) gx[i] += n.grad[i] * (1.0 - n.value[i] * n.value[i]);
    });
}

Var Tape::exp(Var x) {
    const int px = check(x, "exp");
    Tensor out = value_of(px);
    for (auto& v : out.vec()) v = std::exp(v);
    return push("exp", std::move(out), {px}, [px](Tape& t, int self) {
        if (!t.needs(px)) return;
        const Node& n = t.nodes_[static_cast<std::size_t>(self)];
        Tensor& gx = t.grad_buf(px);
        for (std::size_t i = 0; i < n.value.size(); ++i) gx[i] += n.grad[i] * n.value[i];
    });
}

Var Tape::log(Var x) {
    const int px = check(x, "log");
    Tensor out = value_of(px);
    for (auto& v : out.vec()) v = std::log(v);
    return push("log", std::move(out), {px}, [px](Tape& t, int self) {
        if (!t.needs(px)) return;
        const Node& n = t.nodes_[static_cast<std::size_t>(self)];
        const Tensor& xv = t.value_of(px);
        Tensor& gx = t.grad_buf(px);
        for (std::size_t i = 0; i < n.value.size(); ++i) gx[i] += n.grad[i] / xv[i];
    });
}

Var Tape::pow_const(Var x, double p) {
    const int px = check(x, "pow_const");
    Tensor out = value_of(px);
    for (auto& v : out.vec()) v = std::pow(v, p);
    return push("pow_const", std::move(out), {px}, [px, p](Tape& t, int self) {
        if (!t.needs(px)) return;
        const Node& n = t.nodes_[static_cast<std::size_t>(self)];
        const Tensor& xv = t.value_of(px);
        Tensor& gx = t.grad_buf(px);
        for (std::size_t i = 0; i < n.value.size(); ++i) gx[i] += n.grad[i] * p * std::pow(xv[i], p - 1.0);
    });
}

Var Tape::matmul(Var a, Var b) {
    const int pa = check(a, "matmul"), pb = check(b, "matmul");
    const Tensor& av = value_of(pa);
    const Tensor& bv = value_of(pb);
    Tensor out = dfl::matmul(av, bv);
    const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    return push("matmul", std::move(out), {pa, pb}, [pa, pb, m, k, n](Tape& t, int self) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
        if (t.needs(pa)) mm_nt(g.data(), t.value_of(pb).data(), t.grad_buf(pa).data(), m, n, k);
        if (t.needs(pb)) mm_tn(t.value_of(pa).data(), g.data(), t.grad_buf(pb).data(), k, m, n);
    });
}

Var Tape::bias_add(Var x, Var b) {
    const int px = check(x, "bias_add"), pb = check(b, "bias_add");
    const Tensor& xv = value_of(px);
    const Tensor& bv = value_of(pb);
    if (xv.rank() != 2 || bv.rank() != 1 || xv.dim(1) != bv.dim(0)) {
        throw std::invalid_argument("tape bias_add: need x[m,n] and b[n], got " + shape_str(xv.shape()) + " and " +
                                    shape_str(bv.shape()));
    }
    const int m = xv.dim(0), n = xv.dim(1);
    Tensor out = xv;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out(i, j) += bv[static_cast<std::size_t>(j)];
    return push("bias_add", std::move(out), {px, pb}, [px, pb, m, n](Tape& t, int self) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
        t.accum(px, g);
        if (t.needs(pb)) {
            Tensor& gb = t.grad_buf(pb);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) gb[static_cast<std::size_t>(j)] += g(i, j);
        }
    });
}

Var Tape::conv2d(Var x, Var w, Var b) {
    const int px = check(x, "conv2d"), pw = check(w, "conv2d"), pb = check(b, "conv2d");
    Tensor out = dfl::conv2d(value_of(px), value_of(pw), value_of(pb));
    return push("conv2d", std::move(out), {px, pw, pb}, [px, pw, pb](Tape& t, int self) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
        Tensor dump_x, dump_w, dump_b;
        Tensor& gx = t.needs(px) ? t.grad_buf(px) : dump_x;
        Tensor& gw = t.needs(pw) ? t.grad_buf(pw) : dump_w;
        Tensor& gb = t.needs(pb) ? t.grad_buf(pb) : dump_b;
        conv2d_backward(t.value_of(px), t.value_of(pw), g, gx, gw, gb);
    });
}

Var Tape::concat0(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("tape concat0: no parts");
    std::vector<int> ids;
    ids.reserve(parts.size());
    for (Var p : parts) ids.push_back(check(p, "concat0"));
    const Tensor& first = value_of(ids[0]);
    if (first.rank() < 1) throw std::invalid_argument("tape concat0: parts must have rank >= 1");
    std::vector<int> shape = first.shape();
    std::size_t total0 = 0;
    for (int id : ids) {
        const Tensor& t = value_of(id);
        if (t.rank() != first.rank()) throw std::invalid_argument("tape concat0: rank mismatch");
        for (int ax = 1; ax < first.rank(); ++ax) {
            if (t.dim(ax) != first.dim(ax)) {
                throw std::invalid_argument("tape concat0: trailing shape mismatch " + shape_str(t.shape()) + " vs " +
                                            shape_str(first.shape()));
            }
        }
        total0 += static_cast<std::size_t>(t.dim(0));
    }
    shape[0] = static_cast<int>(total0);
    Tensor out(shape);
    std::size_t off = 0;
    for (int id : ids) {
        const Tensor& t = value_of(id);
        std::copy(t.vec().begin(), t.vec().end(), out.vec().begin() + static_cast<std::ptrdiff_t>(off));
        off += t.size();
    }
    return push("concat0", std::move(out), ids, [ids](Tape& t, int self) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
        std::size_t off = 0;
        for (int id : ids) {
            const std::size_t n = t.value_of(id).size();
            if (t.needs(id)) {
                Tensor& gp = t.grad_buf(id);
                for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
            }
            off += n;
        }
    });
}

Var Tape::slice0(Var x, int begin, int end) {
    const int px = check(x, "slice0");
    const Tensor& xv = value_of(px);
    if (xv.rank() < 1) throw std::invalid_argument("tape slice0: need rank >= 1");
    if (begin < 0 || end <= begin || end > xv.dim(0)) {
        throw std::invalid_argument("tape slice0: range [" + std::to_string(begin) + "," + std::to_string(end) +
                                    ") out of bounds for dim0=" + std::to_string(xv.dim(0)));
    }
    const std::size_t stride = xv.size() / static_cast<std::size_t>(xv.dim(0));
    std::vector<int> shape = xv.shape();
    shape[0] = end - begin;
    Tensor out(shape);
    std::copy(xv.vec().begin() + static_cast<std::ptrdiff_t>(stride * static_cast<std::size_t>(begin)),
              xv.vec().begin() + static_cast<std::ptrdiff_t>(stride * static_cast<std::size_t>(end)),
              out.vec().begin());
    return push("slice0", std::move(out), {px}, [px, begin, stride](Tape& t, int self) {
        if (!t.needs(px)) return;
        const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
        Tensor& gx = t.grad_buf(px);
        const std::size_t off = stride * static_cast<std::size_t>(begin);
        for (std::size_t i = 0; i < g.size(); ++i) gx[off + i] += g[i];
    });
}

Var Tape::reshape(Var x, std::vector<int> shape) {
    const int px = check(x, "reshape");
    Tensor out = value_of(px).reshaped(shape);
    return push("reshape", std::move(out), {px}, [px](Tape& t, int self) {
        if (!t.needs(px)) return;
        const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
        Tensor& gx = t.grad_buf(px);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

Var Tape::sum(Var x) {
    const int px = check(x, "sum");
    return push("sum", Tensor::scalar(dfl::sum(value_of(px))), {px}, [px](Tape& t, int self) {
        if (!t.needs(px)) return;
        const double g = t.nodes_[static_cast<std::size_t>(self)].grad.scalar_value();
        Tensor& gx = t.grad_buf(px);
        for (auto& v : gx.vec()) v += g;
    });
}

Var Tape::mean(Var x) {
    const int px = check(x, "mean");
    return push("mean", Tensor::scalar(dfl::mean(value_of(px))), {px}, [px](Tape& t, int self) {
        if (!t.needs(px)) return;
        const double g = t.nodes_[static_cast<std::size_t>(self)].grad.scalar_value() /
                         static_cast<double>(t.value_of(px).size());
        Tensor& gx = t.grad_buf(px);
        for (auto& v : gx.vec()) v += g;
    });
}

Var Tape::dot(Var a, Var b) {
    const int pa = check(a, "dot"), pb = check(b, "dot");
    return push("dot", Tensor::scalar(dfl::dot(value_of(pa), value_of(pb))), {pa, pb}, [pa, pb](Tape& t, int self) {
        const double g = t.nodes_[static_cast<std::size_t>(self)].grad.scalar_value();
        if (t.needs(pa)) axpy(g, t.value_of(pb), t.grad_buf(pa));
        if (t.needs(pb)) axpy(g, t.value_of(pa), t.grad_buf(pb));
    });
}

Var Tape::norm2(Var x) {
    const int px = check(x, "norm2");
    const double r = dfl::norm2(value_of(px));
    return push("norm2", Tensor::scalar(r), {px}, [px, r](Tape& t, int self) {
        if (!t.needs(px) || r == 0.0) return;  // zero vector: subgradient 0
        const double g = t.nodes_[static_cast<std::size_t>(self)].grad.scalar_value();
        axpy(g / r, t.value_of(px), t.grad_buf(px));
    });
}

Var Tape::logdet_psd(Var x) {
    const int px = check(x, "logdet_psd");
    const double v = dfl::logdet_psd(value_of(px));
    return push("logdet_psd", Tensor::scalar(v), {px}, [px](Tape& t, int self) {
        if (!t.needs(px)) return;
        const double g = t.nodes_[static_cast<std::size_t>(self)].grad.scalar_value();
        axpy(g, psd_inverse(t.value_of(px)), t.grad_buf(px));
    });
}

Var Tape::scale_by(Var x, Var s) {
    const int px = check(x, "scale_by"), ps = check(s, "scale_by");
    if (!value_of(ps).is_scalar()) {
        throw std::invalid_argument("tape scale_by: scale must be scalar, got " + shape_str(value_of(ps).shape()));
    }
    const double sv = value_of(ps).scalar_value();
    return push("scale_by", scaled(value_of(px), sv), {px, ps}, [px, ps, sv](Tape& t, int self) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(self)].grad;
        if (t.needs(px)) axpy(sv, g, t.grad_buf(px));
        if (t.needs(ps)) t.grad_buf(ps)[0] += dfl::dot(g, t.value_of(px));
    });
}

Var Tape::normalize(Var x) {
    Var sq = dot(x, x);
    Var inv = pow_const(affine(sq, 1.0, 1e-12), -0.5);
    return scale_by(x, inv);
}

void Tape::backward(Var root) {
    const int r = check(root, "backward");
    if (!value_of(r).is_scalar()) {
        throw std::invalid_argument("tape backward: root must be scalar, got " + shape_str(value_of(r).shape()));
    }
    zero_grad();
    grad_buf(r)[0] = 1.0;
    for (int id = r; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.needs || n.grad.empty() || !n.pull) continue;
        n.pull(*this, id);
    }
}

void Tape::zero_grad() {
    for (auto& n : nodes_) n.grad = Tensor();
}

}  // namespace dfl
