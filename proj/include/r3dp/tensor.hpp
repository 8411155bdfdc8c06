#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "r3dp/common.hpp"

namespace r3dp {

using Shape = std::vector<int>;

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily during backward
    bool requires_grad = false;
    bool consumed = false;  // backward has already run through this node
    uint64_t topo = 0;      // creation order; parents always precede children
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;  // null for leaves

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

// Gradient recording is on by default; a NoGradGuard suspends it for the
// current thread (frozen model inference, samplers, finite differences).
bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Dense row-major 64-bit tensor with an optional slot in a reverse-mode
// computation graph. Copies share the underlying node.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape);
    static Tensor full(const Shape& shape, double value);
    static Tensor from_data(const Shape& shape, std::vector<double> data);
    static Tensor scalar(double value);
    // Leaf that participates in gradients (a trainable parameter).
    static Tensor param(const Shape& shape, std::vector<double> data);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int dim(int i) const { return impl_->shape.at(static_cast<size_t>(i)); }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int numel() const { return static_cast<int>(impl_->data.size()); }

    const std::vector<double>& data() const { return impl_->data; }
    double at(int i) const { return impl_->data[static_cast<size_t>(i)]; }
    double item() const;

    // Mutable access to a leaf's storage (optimizer updates, loaders).
    std::vector<double>& raw_data();

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    void set_requires_grad(bool v);
    bool has_grad() const { return impl_ && impl_->grad.size() == impl_->data.size(); }
    const std::vector<double>& grad() const;
    void zero_grad();

    bool all_finite() const;
    // Same values, no graph attachment.
    Tensor detached() const;

    detail::TensorImpl* impl() const { return impl_.get(); }
    std::shared_ptr<detail::TensorImpl> impl_ptr() const { return impl_; }

    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

// ---- forward ops ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);           // elementwise
Tensor scale(const Tensor& a, double s);
Tensor matmul(const Tensor& a, const Tensor& b);        // [m,k]x[k,n]
Tensor bmm(const Tensor& a, const Tensor& b);           // [B,m,k]x[B,k,n]
Tensor transpose(const Tensor& a);                      // 2-D
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int start, int len);
Tensor softmax_last(const Tensor& a);
Tensor layer_norm_last(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps = 1e-12);
Tensor gelu(const Tensor& a);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_axis0(const Tensor& a);                      // [m,n] -> [n]
Tensor mean_axis0(const Tensor& a);                     // [m,n] -> [n]
Tensor add_rowvec(const Tensor& a, const Tensor& v);    // [m,n] + [n] per row
Tensor cosine(const Tensor& u, const Tensor& v);        // -> scalar
Tensor cosine_rows(const Tensor& a, const Tensor& b);   // [N,d],[N,d] -> [N]

// Applies a constant d x d matrix to each row: out[t] = mats[t] * x[t].
// mats is row-major [N, d, d]; the matrices carry no gradient.
Tensor per_token_transform(const Tensor& x, const std::vector<double>& mats);

// ---- reverse mode -----------------------------------------------------------

// Reverse-mode sweep from a scalar root. Every reachable requires_grad leaf
// receives its accumulated gradient; interior nodes are consumed and a second
// sweep through them raises a reuse error.
void backward(const Tensor& root);

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Max over all coordinates of |analytic - central difference| / max(1, |cd|).
double grad_check(const TensorFn& f, const std::vector<Tensor>& point, double eps);

}  // namespace r3dp
