#include "dfl/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "dfl/rng.hpp"

namespace dfl {

namespace {

std::size_t checked_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("Tensor: non-positive dim in shape " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

}  // namespace

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(checked_numel(shape_), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_numel(shape_) != data_.size()) {
        throw std::invalid_argument("Tensor: shape " + shape_str(shape_) + " does not match data length " +
                                    std::to_string(data_.size()));
    }
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = value;
    return t;
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = rng.normal();
    return t;
}

int Tensor::dim(int axis) const {
    if (axis < 0 || axis >= rank()) throw std::out_of_range("Tensor::dim: axis out of range");
    return shape_[static_cast<std::size_t>(axis)];
}

double Tensor::scalar_value() const {
    if (data_.size() != 1) throw std::logic_error("Tensor::scalar_value: tensor has size " + std::to_string(size()));
    return data_[0];
}

double Tensor::operator()(int i, int j) const {
    return data_[static_cast<std::size_t>(i) * static_cast<std::size_t>(shape_[1]) + static_cast<std::size_t>(j)];
}

double& Tensor::operator()(int i, int j) {
    return data_[static_cast<std::size_t>(i) * static_cast<std::size_t>(shape_[1]) + static_cast<std::size_t>(j)];
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor Tensor::reshaped(std::vector<int> new_shape) const {
    if (checked_numel(new_shape) != data_.size()) {
        throw std::invalid_argument("Tensor::reshaped: cannot view " + shape_str(shape_) + " as " +
                                    shape_str(new_shape));
    }
    return Tensor(std::move(new_shape), data_);
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

std::size_t shape_numel(const std::vector<int>& shape) { return checked_numel(shape); }

namespace {

void require_same(const char* op, const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same("add", a, b);
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same("sub", a, b);
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same("mul", a, b);
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    return out;
}

Tensor scaled(const Tensor& a, double s) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
    return out;
}

void axpy(double a, const Tensor& x, Tensor& y) {
    require_same("axpy", x, y);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

double dot(const Tensor& a, const Tensor& b) {
    require_same("dot", a, b);
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

double sum(const Tensor& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i];
    return s;
}

double mean(const Tensor& a) {
    if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
    return sum(a) / static_cast<double>(a.size());
}

void mm_nn(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

void mm_nt(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<std::size_t>(j) * k;
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] += s;
        }
    }
}

void mm_tn(const double* a, const double* b, double* c, int m, int k, int n) {
    // a is k x m (interpreted transposed), b is k x n, c is m x n
    for (int p = 0; p < k; ++p) {
        const double* ap = a + static_cast<std::size_t>(p) * m;
        const double* bp = b + static_cast<std::size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const double av = ap[i];
            if (av == 0.0) continue;
            double* ci = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw std::invalid_argument("matmul: expected rank-2 operands, got " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    }
    if (a.dim(1) != b.dim(0)) {
        throw std::invalid_argument("matmul: inner dims disagree, " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    }
    Tensor out({a.dim(0), b.dim(1)});
    mm_nn(a.data(), b.data(), out.data(), a.dim(0), a.dim(1), b.dim(1));
    return out;
}

namespace {

void check_conv_shapes(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1) {
        throw std::invalid_argument("conv2d: expected x[C,H,W], w[Co,Ci,kh,kw], b[Co], got " +
                                    shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " +
                                    shape_str(b.shape()));
    }
    if (w.dim(1) != x.dim(0) || w.dim(0) != b.dim(0)) {
        throw std::invalid_argument("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                                    shape_str(w.shape()));
    }
    if (w.dim(2) % 2 == 0 || w.dim(3) % 2 == 0) {
        throw std::invalid_argument("conv2d: kernel dims must be odd, got " + shape_str(w.shape()));
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
    check_conv_shapes(x, w, b);
    const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int ph = kh / 2, pw = kw / 2;
    Tensor out({co, h, wd});
    for (int o = 0; o < co; ++o) {
        double* op = out.data() + static_cast<std::size_t>(o) * h * wd;
        const double bias = b[static_cast<std::size_t>(o)];
        for (int i = 0; i < h * wd; ++i) op[i] = bias;
        for (int c = 0; c < ci; ++c) {
            const double* xp = x.data() + static_cast<std::size_t>(c) * h * wd;
            const double* wp = w.data() + (static_cast<std::size_t>(o) * ci + c) * kh * kw;
            for (int u = 0; u < kh; ++u) {
                for (int v = 0; v < kw; ++v) {
                    const double wv = wp[u * kw + v];
                    if (wv == 0.0) continue;
                    const int di = u - ph, dj = v - pw;
                    const int i0 = std::max(0, -di), i1 = std::min(h, h - di);
                    const int j0 = std::max(0, -dj), j1 = std::min(wd, wd - dj);
                    for (int i = i0; i < i1; ++i) {
                        const double* xr = xp + (i + di) * wd + dj;
                        double* orow = op + i * wd;
                        for (int j = j0; j < j1; ++j) orow[j] += wv * xr[j];
                    }
                }
            }
        }
    }
    return out;
}

void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& grad_out,
                     Tensor& grad_x, Tensor& grad_w, Tensor& grad_b) {
    check_conv_shapes(x, w, grad_b.empty() ? Tensor({w.dim(0)}) : grad_b);
    const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int ph = kh / 2, pw = kw / 2;
    if (grad_x.empty()) grad_x = Tensor(x.shape());
    if (grad_w.empty()) grad_w = Tensor(w.shape());
    if (grad_b.empty()) grad_b = Tensor({co});
    for (int o = 0; o < co; ++o) {
        const double* gp = grad_out.data() + static_cast<std::size_t>(o) * h * wd;
        double gb = 0.0;
        for (int i = 0; i < h * wd; ++i) gb += gp[i];
        grad_b[static_cast<std::size_t>(o)] += gb;
        for (int c = 0; c < ci; ++c) {
            const double* xp = x.data() + static_cast<std::size_t>(c) * h * wd;
            double* gxp = grad_x.data() + static_cast<std::size_t>(c) * h * wd;
            const double* wp = w.data() + (static_cast<std::size_t>(o) * ci + c) * kh * kw;
            double* gwp = grad_w.data() + (static_cast<std::size_t>(o) * ci + c) * kh * kw;
            for (int u = 0; u < kh; ++u) {
                for (int v = 0; v < kw; ++v) {
                    const int di = u - ph, dj = v - pw;
                    const int i0 = std::max(0, -di), i1 = std::min(h, h - di);
                    const int j0 = std::max(0, -dj), j1 = std::min(wd, wd - dj);
                    const double wv = wp[u * kw + v];
                    double gw = 0.0;
                    for (int i = i0; i < i1; ++i) {
                        const double* xr = xp + (i + di) * wd + dj;
                        const double* grow = gp + i * wd;
                        double* gxr = gxp + (i + di) * wd + dj;
                        for (int j = j0; j < j1; ++j) {
                            gw += grow[j] * xr[j];
                            gxr[j] += grow[j] * wv;
                        }
                    }
                    gwp[u * kw + v] += gw;
                }
            }
        }
    }
}

}  // namespace dfl
