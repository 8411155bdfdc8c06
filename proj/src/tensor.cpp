#include "r3dp/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace r3dp {

namespace {

std::atomic<uint64_t> g_topo_counter{1};
thread_local int g_no_grad_depth = 0;

int shape_numel(const Shape& shape) {
    long long n = 1;
    for (int d : shape) {
        if (d <= 0) raise(ErrorKind::Shape, "shape dimensions must be positive");
        n *= d;
    }
    if (n > (1ll << 31)) raise(ErrorKind::Shape, "tensor too large");
    return static_cast<int>(n);
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

void check_finite(const char* op, const Tensor& t) {
    for (double v : t.data()) {
        if (!std::isfinite(v)) {
            raise(ErrorKind::Validity, std::string(op) + ": non-finite input value");
        }
    }
}

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, std::vector<double> data) {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->topo = g_topo_counter.fetch_add(1, std::memory_order_relaxed);
    return impl;
}

// Records a graph node when gradients are enabled and any input needs them.
Tensor make_op(Shape shape, std::vector<double> data,
               std::initializer_list<Tensor> inputs,
               std::function<void(detail::TensorImpl&)> backward_fn) {
    auto impl = make_impl(std::move(shape), std::move(data));
    if (grad_enabled()) {
        bool needs = false;
        for (const Tensor& t : inputs) needs = needs || t.requires_grad();
        if (needs) {
            impl->requires_grad = true;
            for (const Tensor& t : inputs) impl->parents.push_back(t.impl_ptr());
            impl->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor(std::move(impl));
}

Tensor make_op(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
               std::function<void(detail::TensorImpl&)> backward_fn) {
    auto impl = make_impl(std::move(shape), std::move(data));
    if (grad_enabled()) {
        bool needs = false;
        for (const Tensor& t : inputs) needs = needs || t.requires_grad();
        if (needs) {
            impl->requires_grad = true;
            for (const Tensor& t : inputs) impl->parents.push_back(t.impl_ptr());
            impl->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor(std::move(impl));
}

void accum(detail::TensorImpl& dst, const std::vector<double>& g) {
    dst.ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) dst.grad[i] += g[i];
}

// Plain row-major matmul kernel: C[m,n] += A[m,k] * B[k,n].
void mm_accum(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* ci = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
void mm_bt_accum(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
void mm_at_accum(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        const double* bi = b + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            double* cp = c + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

}  // namespace

bool grad_enabled() { return g_no_grad_depth == 0; }
NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape) {
    return Tensor(make_impl(shape, std::vector<double>(shape_numel(shape), 0.0)));
}

Tensor Tensor::full(const Shape& shape, double value) {
    return Tensor(make_impl(shape, std::vector<double>(shape_numel(shape), value)));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data) {
    if (static_cast<int>(data.size()) != shape_numel(shape)) {
        raise(ErrorKind::Shape, "from_data: " + shape_str(shape) + " needs " +
                                    std::to_string(shape_numel(shape)) + " values, got " +
                                    std::to_string(data.size()));
    }
    return Tensor(make_impl(shape, std::move(data)));
}

Tensor Tensor::scalar(double value) { return Tensor(make_impl({}, {value})); }

Tensor Tensor::param(const Shape& shape, std::vector<double> data) {
    Tensor t = from_data(shape, std::move(data));
    t.impl()->requires_grad = true;
    return t;
}

double Tensor::item() const {
    if (numel() != 1) raise(ErrorKind::Contract, "item: tensor is not scalar");
    return impl_->data[0];
}

std::vector<double>& Tensor::raw_data() {
    if (impl_->backward_fn) {
        raise(ErrorKind::Contract, "raw_data: only leaves may be mutated");
    }
    return impl_->data;
}

void Tensor::set_requires_grad(bool v) {
    if (v && impl_->backward_fn) {
        raise(ErrorKind::Contract, "set_requires_grad: interior node");
    }
    impl_->requires_grad = v;
}

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) raise(ErrorKind::Contract, "grad: no gradient present");
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (impl_) impl_->grad.clear();
}

bool Tensor::all_finite() const {
    for (double v : impl_->data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor Tensor::detached() const {
    return Tensor(make_impl(impl_->shape, impl_->data));
}

// ---- elementwise ------------------------------------------------------------

static void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        raise(ErrorKind::Shape, std::string(op) + ": " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    check_finite("add", a);
    check_finite("add", b);
    std::vector<double> out(a.data());
    for (int i = 0; i < b.numel(); ++i) out[static_cast<size_t>(i)] += b.at(i);
    auto pa = a.impl_ptr(), pb = b.impl_ptr();
    return make_op(a.shape(), std::move(out), {a, b}, [pa, pb](detail::TensorImpl& self) {
        if (pa->requires_grad) accum(*pa, self.grad);
        if (pb->requires_grad) accum(*pb, self.grad);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    check_finite("sub", a);
    check_finite("sub", b);
    std::vector<double> out(a.data());
    for (int i = 0; i < b.numel(); ++i) out[static_cast<size_t>(i)] -= b.at(i);
    auto pa = a.impl_ptr(), pb = b.impl_ptr();
    return make_op(a.shape(), std::move(out), {a, b}, [pa, pb](detail::TensorImpl& self) {
        if (pa->requires_grad) accum(*pa, self.grad);
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    check_finite("mul", a);
    check_finite("mul", b);
    std::vector<double> out(a.data());
    for (int i = 0; i < b.numel(); ++i) out[static_cast<size_t>(i)] *= b.at(i);
    auto pa = a.impl_ptr(), pb = b.impl_ptr();
    return make_op(a.shape(), std::move(out), {a, b}, [pa, pb](detail::TensorImpl& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->data[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->data[i];
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    check_finite("scale", a);
    if (!std::isfinite(s)) raise(ErrorKind::Validity, "scale: non-finite scalar");
    std::vector<double> out(a.data());
    for (double& v : out) v *= s;
    auto pa = a.impl_ptr();
    return make_op(a.shape(), std::move(out), {a}, [pa, s](detail::TensorImpl& self) {
        pa->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * s;
    });
}

// ---- matrix products ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
        raise(ErrorKind::Shape,
              "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    check_finite("matmul", a);
    check_finite("matmul", b);
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    mm_accum(a.data().data(), b.data().data(), out.data(), m, k, n);
    auto pa = a.impl_ptr(), pb = b.impl_ptr();
    return make_op({m, n}, std::move(out), {a, b}, [pa, pb, m, k, n](detail::TensorImpl& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            mm_bt_accum(self.grad.data(), pb->data.data(), pa->grad.data(), m, n, k);
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            mm_at_accum(pa->data.data(), self.grad.data(), pb->grad.data(), m, k, n);
        }
    });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
        raise(ErrorKind::Shape, "bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    check_finite("bmm", a);
    check_finite("bmm", b);
    int B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<double> out(static_cast<size_t>(B) * m * n, 0.0);
    for (int q = 0; q < B; ++q) {
        mm_accum(a.data().data() + static_cast<size_t>(q) * m * k,
                 b.data().data() + static_cast<size_t>(q) * k * n,
                 out.data() + static_cast<size_t>(q) * m * n, m, k, n);
    }
    auto pa = a.impl_ptr(), pb = b.impl_ptr();
    return make_op({B, m, n}, std::move(out), {a, b},
                   [pa, pb, B, m, k, n](detail::TensorImpl& self) {
                       for (int q = 0; q < B; ++q) {
                           const double* g = self.grad.data() + static_cast<size_t>(q) * m * n;
                           if (pa->requires_grad) {
                               pa->ensure_grad();
                               mm_bt_accum(g, pb->data.data() + static_cast<size_t>(q) * k * n,
                                           pa->grad.data() + static_cast<size_t>(q) * m * k, m, n, k);
                           }
                           if (pb->requires_grad) {
                               pb->ensure_grad();
                               mm_at_accum(pa->data.data() + static_cast<size_t>(q) * m * k, g,
                                           pb->grad.data() + static_cast<size_t>(q) * k * n, m, k, n);
                           }
                       }
                   });
}

Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) raise(ErrorKind::Shape, "transpose: needs 2-D, got " + shape_str(a.shape()));
    check_finite("transpose", a);
    int m = a.dim(0), n = a.dim(1);
    std::vector<double> out(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(j) * m + i] = a.at(i * n + j);
    auto pa = a.impl_ptr();
    return make_op({n, m}, std::move(out), {a}, [pa, m, n](detail::TensorImpl& self) {
        pa->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                pa->grad[static_cast<size_t>(i) * n + j] += self.grad[static_cast<size_t>(j) * m + i];
    });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
    if (shape_numel(shape) != a.numel()) {
        raise(ErrorKind::Shape,
              "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    }
    auto pa = a.impl_ptr();
    return make_op(shape, a.data(), {a}, [pa](detail::TensorImpl& self) {
        accum(*pa, self.grad);
    });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) raise(ErrorKind::Contract, "concat: empty part list");
    int nd = parts[0].ndim();
    if (nd == 0 || nd > 2 || axis < 0 || axis >= nd) {
        raise(ErrorKind::Shape, "concat: axis " + std::to_string(axis) + " on ndim " +
                                    std::to_string(nd));
    }
    for (const Tensor& p : parts) {
        check_finite("concat", p);
        if (p.ndim() != nd) raise(ErrorKind::Shape, "concat: mixed ranks");
        for (int d = 0; d < nd; ++d) {
            if (d != axis && p.dim(d) != parts[0].dim(d)) {
                raise(ErrorKind::Shape, "concat: shape mismatch off the concat axis");
            }
        }
    }
    Shape out_shape = parts[0].shape();
    int total = 0;
    for (const Tensor& p : parts) total += p.dim(axis);
    out_shape[static_cast<size_t>(axis)] = total;

    std::vector<double> out;
    out.reserve(static_cast<size_t>(shape_numel(out_shape)));
    std::vector<int> offsets;
    if (nd == 1 || axis == 0) {
        int off = 0;
        for (const Tensor& p : parts) {
            offsets.push_back(off);
            out.insert(out.end(), p.data().begin(), p.data().end());
            off += p.numel();
        }
    } else {  // 2-D axis 1
        int rows = parts[0].dim(0);
        out.assign(static_cast<size_t>(rows) * total, 0.0);
        int col = 0;
        for (const Tensor& p : parts) {
            offsets.push_back(col);
            int w = p.dim(1);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < w; ++c)
                    out[static_cast<size_t>(r) * total + col + c] = p.at(r * w + c);
            col += w;
        }
    }
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    for (const Tensor& p : parts) impls.push_back(p.impl_ptr());
    return make_op(out_shape, std::move(out), parts,
                   [impls, offsets, axis, nd, total](detail::TensorImpl& self) {
                       for (size_t pi = 0; pi < impls.size(); ++pi) {
                           auto& p = *impls[pi];
                           if (!p.requires_grad) continue;
                           p.ensure_grad();
                           if (nd == 1 || axis == 0) {
                               int off = offsets[pi];
                               for (size_t i = 0; i < p.data.size(); ++i)
                                   p.grad[i] += self.grad[static_cast<size_t>(off) + i];
                           } else {
                               int rows = p.shape[0], w = p.shape[1], col = offsets[pi];
                               for (int r = 0; r < rows; ++r)
                                   for (int c = 0; c < w; ++c)
                                       p.grad[static_cast<size_t>(r) * w + c] +=
                                           self.grad[static_cast<size_t>(r) * total + col + c];
                           }
                       }
                   });
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
    int nd = a.ndim();
    if (nd == 0 || nd > 2 || axis < 0 || axis >= nd) {
        raise(ErrorKind::Shape, "slice: axis " + std::to_string(axis) + " on " + shape_str(a.shape()));
    }
    if (start < 0 || len <= 0 || start + len > a.dim(axis)) {
        raise(ErrorKind::Shape, "slice: range [" + std::to_string(start) + "," +
                                    std::to_string(start + len) + ") exceeds " +
                                    shape_str(a.shape()));
    }
    check_finite("slice", a);
    Shape out_shape = a.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    std::vector<double> out;
    if (nd == 1 || axis == 0) {
        int roww = (nd == 2) ? a.dim(1) : 1;
        out.assign(a.data().begin() + static_cast<size_t>(start) * roww,
                   a.data().begin() + static_cast<size_t>(start + len) * roww);
    } else {
        int rows = a.dim(0), w = a.dim(1);
        out.resize(static_cast<size_t>(rows) * len);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < len; ++c)
                out[static_cast<size_t>(r) * len + c] = a.at(r * w + start + c);
    }
    auto pa = a.impl_ptr();
    return make_op(out_shape, std::move(out), {a},
                   [pa, axis, start, len, nd](detail::TensorImpl& self) {
                       pa->ensure_grad();
                       if (nd == 1 || axis == 0) {
                           int roww = (nd == 2) ? pa->shape[1] : 1;
                           for (size_t i = 0; i < self.grad.size(); ++i)
                               pa->grad[static_cast<size_t>(start) * roww + i] += self.grad[i];
                       } else {
                           int rows = pa->shape[0], w = pa->shape[1];
                           for (int r = 0; r < rows; ++r)
                               for (int c = 0; c < len; ++c)
                                   pa->grad[static_cast<size_t>(r) * w + start + c] +=
                                       self.grad[static_cast<size_t>(r) * len + c];
                       }
                   });
}

// ---- row-wise nonlinear ops ---------------------------------------------------

Tensor softmax_last(const Tensor& a) {
    if (a.ndim() == 0) raise(ErrorKind::Shape, "softmax_last: scalar input");
    check_finite("softmax_last", a);
    int w = a.dim(a.ndim() - 1);
    int rows = a.numel() / w;
    std::vector<double> out(a.data().size());
    for (int r = 0; r < rows; ++r) {
        const double* x = a.data().data() + static_cast<size_t>(r) * w;
        double* y = out.data() + static_cast<size_t>(r) * w;
        double mx = x[0];
        for (int i = 1; i < w; ++i) mx = std::max(mx, x[i]);
        double z = 0.0;
        for (int i = 0; i < w; ++i) {
            y[i] = std::exp(x[i] - mx);
            z += y[i];
        }
        for (int i = 0; i < w; ++i) y[i] /= z;
    }
    auto pa = a.impl_ptr();
    std::vector<double> saved = out;
    return make_op(a.shape(), std::move(out), {a},
                   [pa, saved, rows, w](detail::TensorImpl& self) {
                       pa->ensure_grad();
                       for (int r = 0; r < rows; ++r) {
                           const double* y = saved.data() + static_cast<size_t>(r) * w;
                           const double* g = self.grad.data() + static_cast<size_t>(r) * w;
                           double dot = 0.0;
                           for (int i = 0; i < w; ++i) dot += y[i] * g[i];
                           double* gx = pa->grad.data() + static_cast<size_t>(r) * w;
                           for (int i = 0; i < w; ++i) gx[i] += y[i] * (g[i] - dot);
                       }
                   });
}

Tensor layer_norm_last(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.ndim() == 0) raise(ErrorKind::Shape, "layer_norm_last: scalar input");
    int w = x.dim(x.ndim() - 1);
    if (gamma.ndim() != 1 || gamma.dim(0) != w || beta.ndim() != 1 || beta.dim(0) != w) {
        raise(ErrorKind::Shape, "layer_norm_last: affine params must be [" + std::to_string(w) +
                                    "], got " + shape_str(gamma.shape()) + " / " +
                                    shape_str(beta.shape()));
    }
    check_finite("layer_norm_last", x);
    check_finite("layer_norm_last", gamma);
    check_finite("layer_norm_last", beta);
    int rows = x.numel() / w;
    std::vector<double> out(x.data().size());
    std::vector<double> xhat(x.data().size());
    std::vector<double> inv_std(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        const double* xi = x.data().data() + static_cast<size_t>(r) * w;
        double mu = 0.0;
        for (int i = 0; i < w; ++i) mu += xi[i];
        mu /= w;
        double var = 0.0;
        for (int i = 0; i < w; ++i) var += (xi[i] - mu) * (xi[i] - mu);
        var /= w;
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(r)] = is;
        for (int i = 0; i < w; ++i) {
            double xh = (xi[i] - mu) * is;
            xhat[static_cast<size_t>(r) * w + i] = xh;
            out[static_cast<size_t>(r) * w + i] = gamma.at(i) * xh + beta.at(i);
        }
    }
    auto px = x.impl_ptr(), pg = gamma.impl_ptr(), pb = beta.impl_ptr();
    return make_op(x.shape(), std::move(out), {x, gamma, beta},
                   [px, pg, pb, xhat, inv_std, rows, w](detail::TensorImpl& self) {
                       for (int r = 0; r < rows; ++r) {
                           const double* g = self.grad.data() + static_cast<size_t>(r) * w;
                           const double* xh = xhat.data() + static_cast<size_t>(r) * w;
                           if (pg->requires_grad) {
                               pg->ensure_grad();
                               for (int i = 0; i < w; ++i) pg->grad[static_cast<size_t>(i)] += g[i] * xh[i];
                           }
                           if (pb->requires_grad) {
                               pb->ensure_grad();
                               for (int i = 0; i < w; ++i) pb->grad[static_cast<size_t>(i)] += g[i];
                           }
                           if (px->requires_grad) {
                               px->ensure_grad();
                               double m1 = 0.0, m2 = 0.0;
                               for (int i = 0; i < w; ++i) {
                                   double gg = g[i] * pg->data[static_cast<size_t>(i)];
                                   m1 += gg;
                                   m2 += gg * xh[i];
                               }
                               m1 /= w;
                               m2 /= w;
                               double is = inv_std[static_cast<size_t>(r)];
                               double* gx = px->grad.data() + static_cast<size_t>(r) * w;
                               for (int i = 0; i < w; ++i) {
                                   double gg = g[i] * pg->data[static_cast<size_t>(i)];
                                   gx[i] += is * (gg - m1 - xh[i] * m2);
                               }
                           }
                       }
                   });
}

Tensor gelu(const Tensor& a) {
    check_finite("gelu", a);
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        double x = a.data()[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440));
    }
    auto pa = a.impl_ptr();
    return make_op(a.shape(), std::move(out), {a}, [pa](detail::TensorImpl& self) {
        pa->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            double x = pa->data[i];
            double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
            double pdf = 0.39894228040143267794 * std::exp(-0.5 * x * x);
            pa->grad[i] += self.grad[i] * (cdf + x * pdf);
        }
    });
}

// ---- reductions ---------------------------------------------------------------

Tensor sum_all(const Tensor& a) {
    check_finite("sum_all", a);
    double s = 0.0;
    for (double v : a.data()) s += v;
    auto pa = a.impl_ptr();
    return make_op({}, {s}, {a}, [pa](detail::TensorImpl& self) {
        pa->ensure_grad();
        for (double& g : pa->grad) g += self.grad[0];
    });
}

Tensor mean_all(const Tensor& a) {
    check_finite("mean_all", a);
    double s = 0.0;
    for (double v : a.data()) s += v;
    double inv = 1.0 / a.numel();
    auto pa = a.impl_ptr();
    return make_op({}, {s * inv}, {a}, [pa, inv](detail::TensorImpl& self) {
        pa->ensure_grad();
        for (double& g : pa->grad) g += self.grad[0] * inv;
    });
}

static Tensor axis0_reduce(const Tensor& a, bool mean) {
    if (a.ndim() != 2) raise(ErrorKind::Shape, "axis0 reduction: needs 2-D, got " + shape_str(a.shape()));
    check_finite("axis0 reduction", a);
    int m = a.dim(0), n = a.dim(1);
    double w = mean ? 1.0 / m : 1.0;
    std::vector<double> out(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(j)] += a.at(i * n + j);
    for (double& v : out) v *= w;
    auto pa = a.impl_ptr();
    return make_op({n}, std::move(out), {a}, [pa, m, n, w](detail::TensorImpl& self) {
        pa->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                pa->grad[static_cast<size_t>(i) * n + j] += self.grad[static_cast<size_t>(j)] * w;
    });
}

Tensor sum_axis0(const Tensor& a) { return axis0_reduce(a, false); }
Tensor mean_axis0(const Tensor& a) { return axis0_reduce(a, true); }

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    if (a.ndim() != 2 || v.ndim() != 1 || v.dim(0) != a.dim(1)) {
        raise(ErrorKind::Shape,
              "add_rowvec: " + shape_str(a.shape()) + " + " + shape_str(v.shape()));
    }
    check_finite("add_rowvec", a);
    check_finite("add_rowvec", v);
    int m = a.dim(0), n = a.dim(1);
    std::vector<double> out(a.data());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] += v.at(j);
    auto pa = a.impl_ptr(), pv = v.impl_ptr();
    return make_op(a.shape(), std::move(out), {a, v}, [pa, pv, m, n](detail::TensorImpl& self) {
        if (pa->requires_grad) accum(*pa, self.grad);
        if (pv->requires_grad) {
            pv->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    pv->grad[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(i) * n + j];
        }
    });
}

// ---- cosine similarity ----------------------------------------------------------

namespace {

// Shared kernel; the denominator is clamped at 1e-12 and the gradient is
// defined as zero in the clamped regime.
void cosine_kernel(const double* u, const double* v, int n, double& c, double& nu,
                   double& nv, bool& clamped) {
    double uu = 0.0, vv = 0.0, uv = 0.0;
    for (int i = 0; i < n; ++i) {
        uu += u[i] * u[i];
        vv += v[i] * v[i];
        uv += u[i] * v[i];
    }
    nu = std::sqrt(uu);
    nv = std::sqrt(vv);
    double denom = nu * nv;
    clamped = denom < 1e-12;
    c = uv / std::max(denom, 1e-12);
}

}  // namespace

Tensor cosine(const Tensor& u, const Tensor& v) {
    if (u.numel() != v.numel()) {
        raise(ErrorKind::Shape, "cosine: " + shape_str(u.shape()) + " vs " + shape_str(v.shape()));
    }
    check_finite("cosine", u);
    check_finite("cosine", v);
    int n = u.numel();
    double c, nu, nv;
    bool clamped;
    cosine_kernel(u.data().data(), v.data().data(), n, c, nu, nv, clamped);
    auto pu = u.impl_ptr(), pv = v.impl_ptr();
    return make_op({}, {c}, {u, v}, [pu, pv, n, c, nu, nv, clamped](detail::TensorImpl& self) {
        if (clamped) return;
        double g = self.grad[0];
        if (pu->requires_grad) {
            pu->ensure_grad();
            for (int i = 0; i < n; ++i)
                pu->grad[static_cast<size_t>(i)] +=
                    g * (pv->data[static_cast<size_t>(i)] / (nu * nv) -
                         c * pu->data[static_cast<size_t>(i)] / (nu * nu));
        }
        if (pv->requires_grad) {
            pv->ensure_grad();
            for (int i = 0; i < n; ++i)
                pv->grad[static_cast<size_t>(i)] +=
                    g * (pu->data[static_cast<size_t>(i)] / (nu * nv) -
                         c * pv->data[static_cast<size_t>(i)] / (nv * nv));
        }
    });
}

Tensor cosine_rows(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || a.shape() != b.shape()) {
        raise(ErrorKind::Shape,
              "cosine_rows: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    check_finite("cosine_rows", a);
    check_finite("cosine_rows", b);
    int m = a.dim(0), n = a.dim(1);
    std::vector<double> out(static_cast<size_t>(m));
    std::vector<double> nus(static_cast<size_t>(m)), nvs(static_cast<size_t>(m));
    std::vector<char> clamps(static_cast<size_t>(m));
    for (int r = 0; r < m; ++r) {
        double c, nu, nv;
        bool cl;
        cosine_kernel(a.data().data() + static_cast<size_t>(r) * n,
                      b.data().data() + static_cast<size_t>(r) * n, n, c, nu, nv, cl);
        out[static_cast<size_t>(r)] = c;
        nus[static_cast<size_t>(r)] = nu;
        nvs[static_cast<size_t>(r)] = nv;
        clamps[static_cast<size_t>(r)] = cl ? 1 : 0;
    }
    auto pa = a.impl_ptr(), pb = b.impl_ptr();
    std::vector<double> cs = out;
    return make_op({m}, std::move(out), {a, b},
                   [pa, pb, m, n, cs, nus, nvs, clamps](detail::TensorImpl& self) {
                       for (int r = 0; r < m; ++r) {
                           if (clamps[static_cast<size_t>(r)]) continue;
                           double g = self.grad[static_cast<size_t>(r)];
                           double c = cs[static_cast<size_t>(r)];
                           double nu = nus[static_cast<size_t>(r)], nv = nvs[static_cast<size_t>(r)];
                           const double* ua = pa->data.data() + static_cast<size_t>(r) * n;
                           const double* ub = pb->data.data() + static_cast<size_t>(r) * n;
                           if (pa->requires_grad) {
                               pa->ensure_grad();
                               double* ga = pa->grad.data() + static_cast<size_t>(r) * n;
                               for (int i = 0; i < n; ++i)
                                   ga[i] += g * (ub[i] / (nu * nv) - c * ua[i] / (nu * nu));
                           }
                           if (pb->requires_grad) {
                               pb->ensure_grad();
                               double* gb = pb->grad.data() + static_cast<size_t>(r) * n;
                               for (int i = 0; i < n; ++i)
                                   gb[i] += g * (ua[i] / (nu * nv) - c * ub[i] / (nv * nv));
                           }
                       }
                   });
}

Tensor per_token_transform(const Tensor& x, const std::vector<double>& mats) {
    if (x.ndim() != 2) raise(ErrorKind::Shape, "per_token_transform: needs 2-D tokens");
    int N = x.dim(0), d = x.dim(1);
    if (mats.size() != static_cast<size_t>(N) * d * d) {
        raise(ErrorKind::Shape, "per_token_transform: matrix buffer size mismatch");
    }
    check_finite("per_token_transform", x);
    std::vector<double> out(static_cast<size_t>(N) * d, 0.0);
    for (int t = 0; t < N; ++t) {
        const double* M = mats.data() + static_cast<size_t>(t) * d * d;
        const double* xi = x.data().data() + static_cast<size_t>(t) * d;
        double* yo = out.data() + static_cast<size_t>(t) * d;
        for (int i = 0; i < d; ++i) {
            double acc = 0.0;
            for (int j = 0; j < d; ++j) acc += M[static_cast<size_t>(i) * d + j] * xi[j];
            yo[i] = acc;
        }
    }
    auto px = x.impl_ptr();
    auto mats_copy = std::make_shared<std::vector<double>>(mats);
    return make_op({N, d}, std::move(out), {x}, [px, mats_copy, N, d](detail::TensorImpl& self) {
        px->ensure_grad();
        for (int t = 0; t < N; ++t) {
            const double* M = mats_copy->data() + static_cast<size_t>(t) * d * d;
            const double* g = self.grad.data() + static_cast<size_t>(t) * d;
            double* gx = px->grad.data() + static_cast<size_t>(t) * d;
            for (int j = 0; j < d; ++j) {
                double acc = 0.0;
                for (int i = 0; i < d; ++i) acc += M[static_cast<size_t>(i) * d + j] * g[i];
                gx[j] += acc;
            }
        }
    });
}

// ---- backward -------------------------------------------------------------------

void backward(const Tensor& root) {
    if (!root.defined()) raise(ErrorKind::Contract, "backward: undefined root");
    if (root.numel() != 1) {
        raise(ErrorKind::Contract, "backward: root must be scalar, got " +
                                       shape_str(root.shape()));
    }
    if (!root.requires_grad()) {
        raise(ErrorKind::Contract, "backward: root does not require gradients");
    }
    if (root.impl()->consumed) raise(ErrorKind::Reuse, "backward: graph already consumed");

    // Gather the reachable subgraph that carries gradients.
    std::vector<detail::TensorImpl*> order;
    std::unordered_set<detail::TensorImpl*> seen;
    std::vector<detail::TensorImpl*> stack{root.impl()};
    seen.insert(root.impl());
    while (!stack.empty()) {
        detail::TensorImpl* node = stack.back();
        stack.pop_back();
        order.push_back(node);
        for (auto& p : node->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(),
              [](const detail::TensorImpl* a, const detail::TensorImpl* b) { return a->topo > b->topo; });

    root.impl()->ensure_grad();
    root.impl()->grad[0] = 1.0;

    for (detail::TensorImpl* node : order) {
        if (!node->backward_fn) continue;  // leaf
        if (node->consumed) raise(ErrorKind::Reuse, "backward: graph already consumed");
        node->ensure_grad();
        node->backward_fn(*node);
        node->consumed = true;
        // Interior grads and saved closures are not needed again.
        node->grad.clear();
        node->grad.shrink_to_fit();
        node->backward_fn = nullptr;
        node->parents.clear();
    }
}

// ---- finite-difference check ------------------------------------------------------

double grad_check(const TensorFn& f, const std::vector<Tensor>& point, double eps) {
    if (!(eps > 0.0 && eps <= 1e-3)) {
        raise(ErrorKind::Contract, "grad_check: eps must be in (0, 1e-3]");
    }
    // Analytic pass on leaf copies that require gradients.
    std::vector<Tensor> leaves;
    leaves.reserve(point.size());
    for (const Tensor& p : point) leaves.push_back(Tensor::param(p.shape(), p.data()));
    Tensor out = f(leaves);
    if (out.numel() != 1) raise(ErrorKind::Contract, "grad_check: function must be scalar-valued");
    backward(out);

    double worst = 0.0;
    for (size_t pi = 0; pi < point.size(); ++pi) {
        std::vector<double> analytic = leaves[pi].has_grad()
                                           ? leaves[pi].grad()
                                           : std::vector<double>(point[pi].data().size(), 0.0);
        for (size_t ci = 0; ci < point[pi].data().size(); ++ci) {
            auto eval = [&](double delta) {
                NoGradGuard ng;
                std::vector<Tensor> args;
                args.reserve(point.size());
                for (size_t qi = 0; qi < point.size(); ++qi) {
                    std::vector<double> vals = point[qi].data();
                    if (qi == pi) vals[ci] += delta;
                    args.push_back(Tensor::from_data(point[qi].shape(), std::move(vals)));
                }
                double v = f(args).item();
                if (!std::isfinite(v)) {
                    raise(ErrorKind::Validity, "grad_check: function non-finite at perturbed point");
                }
                return v;
            };
            double cd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            double err = std::abs(analytic[ci] - cd) / std::max(1.0, std::abs(cd));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace r3dp
