#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace dfl {

class Rng;

/// Dense row-major tensor of doubles. Once constructed a tensor is treated as
/// an immutable value by everything above the numeric layer; mutation is for
/// construction and optimizer updates only.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);  // zero-filled
    Tensor(std::vector<int> shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor randn(std::vector<int> shape, Rng& rng);

    bool empty() const { return data_.empty(); }
    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int axis) const;
    std::size_t size() const { return data_.size(); }
    bool is_scalar() const { return data_.size() == 1; }
    double scalar_value() const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }
    // rank-2 accessors
    double operator()(int i, int j) const;
    double& operator()(int i, int j);

    bool all_finite() const;
    Tensor reshaped(std::vector<int> new_shape) const;

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

std::string shape_str(const std::vector<int>& shape);
bool same_shape(const Tensor& a, const Tensor& b);
std::size_t shape_numel(const std::vector<int>& shape);

// Plain (non-differentiated) arithmetic used by optimizers, samplers and the
// autodiff kernels themselves.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scaled(const Tensor& a, double s);
void axpy(double a, const Tensor& x, Tensor& y);  // y += a*x
double dot(const Tensor& a, const Tensor& b);
double norm2(const Tensor& a);
double sum(const Tensor& a);
double mean(const Tensor& a);

/// C = A(m,k) * B(k,n). Throws on rank/shape mismatch.
Tensor matmul(const Tensor& a, const Tensor& b);

// Accumulating matmul kernels over raw row-major buffers.
void mm_nn(const double* a, const double* b, double* c, int m, int k, int n);  // c += a*b
void mm_nt(const double* a, const double* b, double* c, int m, int k, int n);  // c += a*b^T, b is n x k
void mm_tn(const double* a, const double* b, double* c, int m, int k, int n);  // c += a^T*b, a is k x m

// 2-D convolution over [C,H,W] images with odd square kernels, zero padding,
// stride 1 (shape-preserving). w is [Co,Ci,kh,kw], b is [Co].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b);
void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& grad_out,
                     Tensor& grad_x, Tensor& grad_w, Tensor& grad_b);

}  // namespace dfl
