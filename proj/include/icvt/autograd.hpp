#pragma once

#include <functional>
#include <unordered_set>

#include "icvt/tensor.hpp"

namespace icvt {

// Reverse-mode autograd on a define-by-run graph. Nodes hold their forward
// value plus a closure that distributes the incoming gradient to the inputs.
// backward() walks the graph in reverse topological order starting from a
// scalar root. Graphs are freed when the last Var handle goes away.

template <typename T>
struct Node {
    Tensor<T> val;
    Tensor<T> grad;  // allocated on demand
    bool needs_grad = false;
    std::vector<std::shared_ptr<Node<T>>> inputs;
    std::function<void(Node<T>&)> backward_fn;
    const char* op = "leaf";

    void ensure_grad() {
        if (!grad.defined() || grad.numel() != val.numel()) grad = Tensor<T>(val.shape);
    }
    void add_grad(const Tensor<T>& g) {
        ensure_grad();
        const T* src = g.data();
        T* dst = grad.data();
        int64_t n = grad.numel();
#pragma omp parallel for schedule(static) if (n > 131072)
        for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
    }
    // Hand the (possibly reshaped) gradient buffer to this node if it has no
    // gradient yet; callers may only donate buffers they will not read again.
    void take_grad(Tensor<T>&& g) {
        if (!grad.defined() || grad.numel() != val.numel()) {
            grad = g.reshaped(val.shape);
        } else {
            add_grad(g);
        }
    }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_leaf(Tensor<T> v, bool needs_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(v);
    n->needs_grad = needs_grad;
    return n;
}

template <typename T>
Var<T> make_const(Tensor<T> v) {
    return make_leaf(std::move(v), false);
}

namespace detail {

template <typename T>
Var<T> make_op(const char* name, Shape out_shape, std::vector<Var<T>> inputs) {
    auto n = std::make_shared<Node<T>>();
    n->op = name;
    n->val = Tensor<T>(std::move(out_shape));
    bool ng = false;
    for (auto& in : inputs) ng = ng || in->needs_grad;
    n->needs_grad = ng;
    if (ng) n->inputs = std::move(inputs);
    return n;
}

}  // namespace detail

template <typename T>
void backward(const Var<T>& root) {
    if (root->val.numel() != 1) throw std::logic_error("backward: root must be scalar");
    // iterative post-order DFS
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.push_back({root.get(), 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->inputs.size()) {
            Node<T>* child = node->inputs[idx++].get();
            if (child->needs_grad && !seen.count(child)) {
                seen.insert(child);
                stack.push_back({child, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad.fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && n->grad.defined()) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    if (a->val.shape != b->val.shape)
        throw std::invalid_argument("add: shape mismatch " + shape_str(a->val.shape) + " vs " +
                                    shape_str(b->val.shape));
    auto n = detail::make_op<T>("add", a->val.shape, {a, b});
    const T* pa = a->val.data();
    const T* pb = b->val.data();
    T* po = n->val.data();
    int64_t cnt = n->val.numel();
#pragma omp parallel for schedule(static) if (cnt > 65536)
    for (int64_t i = 0; i < cnt; ++i) po[i] = pa[i] + pb[i];
    if (n->needs_grad)
        n->backward_fn = [a, b](Node<T>& self) {
            if (a->needs_grad && b->needs_grad) {
                a->add_grad(self.grad);
                b->take_grad(std::move(self.grad));
            } else if (a->needs_grad) {
                a->take_grad(std::move(self.grad));
            } else if (b->needs_grad) {
                b->take_grad(std::move(self.grad));
            }
        };
    return n;
}

// b must be a suffix of a's shape (right-aligned); b is broadcast over the
// leading dims.
template <typename T>
Var<T> add_bc(Var<T> a, Var<T> b) {
    int64_t bn = b->val.numel();
    int64_t an = a->val.numel();
    if (bn == 0 || an % bn != 0)
        throw std::invalid_argument("add_bc: incompatible shapes");
    int off = a->val.ndim() - b->val.ndim();
    if (off < 0) throw std::invalid_argument("add_bc: b has more dims than a");
    for (int i = 0; i < b->val.ndim(); ++i)
        if (b->val.shape[i] != a->val.shape[i + off])
            throw std::invalid_argument("add_bc: b is not a suffix of a");
    auto n = detail::make_op<T>("add_bc", a->val.shape, {a, b});
    const T* pa = a->val.data();
    const T* pb = b->val.data();
    T* po = n->val.data();
    int64_t rows = an / bn;
#pragma omp parallel for schedule(static) if (an > 65536)
    for (int64_t r = 0; r < rows; ++r) {
        const T* pr = pa + r * bn;
        T* pw = po + r * bn;
#pragma omp simd
        for (int64_t j = 0; j < bn; ++j) pw[j] = pr[j] + pb[j];
    }
    if (n->needs_grad)
        n->backward_fn = [a, b, bn, rows](Node<T>& self) {
            if (b->needs_grad) {
                b->ensure_grad();
                T* gb = b->grad.data();
                const T* g = self.grad.data();
                // column-chunked so threads reduce disjoint ranges
                const int64_t chunk = 64;
#pragma omp parallel for schedule(static) if (rows * bn > 131072)
                for (int64_t j0 = 0; j0 < bn; j0 += chunk) {
                    int64_t j1 = std::min(bn, j0 + chunk);
                    for (int64_t r = 0; r < rows; ++r) {
                        const T* gr = g + r * bn;
                        for (int64_t j = j0; j < j1; ++j) gb[j] += gr[j];
                    }
                }
            }
            if (a->needs_grad) a->take_grad(std::move(self.grad));
        };
    return n;
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    if (a->val.shape != b->val.shape) throw std::invalid_argument("sub: shape mismatch");
    auto n = detail::make_op<T>("sub", a->val.shape, {a, b});
    for (int64_t i = 0; i < n->val.numel(); ++i) n->val[i] = a->val[i] - b->val[i];
    if (n->needs_grad)
        n->backward_fn = [a, b](Node<T>& self) {
            if (a->needs_grad) a->add_grad(self.grad);
            if (b->needs_grad) {
                b->ensure_grad();
                for (int64_t i = 0; i < self.grad.numel(); ++i) b->grad[i] -= self.grad[i];
            }
        };
    return n;
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    if (a->val.shape != b->val.shape) throw std::invalid_argument("mul: shape mismatch");
    auto n = detail::make_op<T>("mul", a->val.shape, {a, b});
    int64_t cnt = n->val.numel();
#pragma omp parallel for schedule(static) if (cnt > 65536)
    for (int64_t i = 0; i < cnt; ++i) n->val[i] = a->val[i] * b->val[i];
    if (n->needs_grad)
        n->backward_fn = [a, b](Node<T>& self) {
            int64_t m = self.grad.numel();
            if (a->needs_grad) {
                a->ensure_grad();
#pragma omp parallel for schedule(static) if (m > 65536)
                for (int64_t i = 0; i < m; ++i) a->grad[i] += self.grad[i] * b->val[i];
            }
            if (b->needs_grad) {
                b->ensure_grad();
#pragma omp parallel for schedule(static) if (m > 65536)
                for (int64_t i = 0; i < m; ++i) b->grad[i] += self.grad[i] * a->val[i];
            }
        };
    return n;
}

template <typename T>
Var<T> mul_scalar(Var<T> a, T c) {
    auto n = detail::make_op<T>("mul_scalar", a->val.shape, {a});
    int64_t cnt = n->val.numel();
#pragma omp parallel for schedule(static) if (cnt > 65536)
    for (int64_t i = 0; i < cnt; ++i) n->val[i] = a->val[i] * c;
    if (n->needs_grad)
        n->backward_fn = [a, c](Node<T>& self) {
            a->ensure_grad();
            int64_t m = self.grad.numel();
#pragma omp parallel for schedule(static) if (m > 65536)
            for (int64_t i = 0; i < m; ++i) a->grad[i] += self.grad[i] * c;
        };
    return n;
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
    auto n = detail::make_op<T>("add_scalar", a->val.shape, {a});
    for (int64_t i = 0; i < n->val.numel(); ++i) n->val[i] = a->val[i] + c;
    if (n->needs_grad)
        n->backward_fn = [a](Node<T>& self) { a->add_grad(self.grad); };
    return n;
}

// out[r,:] = a[r,:] * s[r], a viewed as (R, C) with R = numel(s)
template <typename T>
Var<T> row_scale(Var<T> a, Var<T> s) {
    int64_t R = s->val.numel();
    if (a->val.numel() % R != 0) throw std::invalid_argument("row_scale: shape mismatch");
    int64_t C = a->val.numel() / R;
    auto n = detail::make_op<T>("row_scale", a->val.shape, {a, s});
    for (int64_t r = 0; r < R; ++r) {
        T sv = s->val[r];
        for (int64_t c = 0; c < C; ++c) n->val[r * C + c] = a->val[r * C + c] * sv;
    }
    if (n->needs_grad)
        n->backward_fn = [a, s, R, C](Node<T>& self) {
            if (a->needs_grad) {
                a->ensure_grad();
                for (int64_t r = 0; r < R; ++r) {
                    T sv = s->val[r];
                    for (int64_t c = 0; c < C; ++c) a->grad[r * C + c] += self.grad[r * C + c] * sv;
                }
            }
            if (s->needs_grad) {
                s->ensure_grad();
                for (int64_t r = 0; r < R; ++r) {
                    T acc = 0;
                    for (int64_t c = 0; c < C; ++c) acc += self.grad[r * C + c] * a->val[r * C + c];
                    s->grad[r] += acc;
                }
            }
        };
    return n;
}

namespace detail {

// Resolve (..., M, K) x (K, N) or matching-batched (..., K, N).
struct MatmulDims {
    int64_t G, M, K, N;
    bool b_shared;
};

inline MatmulDims matmul_dims(const Shape& a, const Shape& b, bool nt) {
    if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("matmul: need >=2 dims");
    MatmulDims d{};
    d.M = a[a.size() - 2];
    int64_t aK = a[a.size() - 1];
    int64_t bK = nt ? b[b.size() - 1] : b[b.size() - 2];
    d.N = nt ? b[b.size() - 2] : b[b.size() - 1];
    if (aK != bK)
        throw std::invalid_argument("matmul: inner dim mismatch " + shape_str(a) + " vs " + shape_str(b));
    d.K = aK;
    d.G = 1;
    for (size_t i = 0; i + 2 < a.size(); ++i) d.G *= a[i];
    if (b.size() == 2) {
        d.b_shared = true;
    } else {
        int64_t gb = 1;
        for (size_t i = 0; i + 2 < b.size(); ++i) gb *= b[i];
        if (gb != d.G) throw std::invalid_argument("matmul: batch dims mismatch");
        d.b_shared = false;
    }
    return d;
}

}  // namespace detail

// out = a @ b ; a: (..., M, K), b: (K, N) shared or (..., K, N)
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    auto d = detail::matmul_dims(a->val.shape, b->val.shape, false);
    Shape os(a->val.shape.begin(), a->val.shape.end() - 1);
    os.push_back(d.N);
    auto n = detail::make_op<T>("matmul", os, {a, b});
    const T* pa = a->val.data();
    const T* pb = b->val.data();
    T* po = n->val.data();
    if (d.b_shared) {
        gemm(false, false, d.G * d.M, d.N, d.K, pa, d.K, pb, d.N, po, d.N, false);
    } else {
#pragma omp parallel for schedule(static) if (d.G > 1)
        for (int64_t g = 0; g < d.G; ++g)
            gemm_nn_serial(d.M, d.N, d.K, pa + g * d.M * d.K, d.K, pb + g * d.K * d.N, d.N,
                           po + g * d.M * d.N, d.N, false);
    }
    if (n->needs_grad)
        n->backward_fn = [a, b, d](Node<T>& self) {
            const T* g = self.grad.data();
            if (a->needs_grad) {
                a->ensure_grad();
                // dA = dC @ B^T   (NT form)
                if (d.b_shared) {
                    gemm(false, true, d.G * d.M, d.K, d.N, g, d.N, b->val.data(), d.N,
                         a->grad.data(), d.K, true);
                } else {
#pragma omp parallel for schedule(static) if (d.G > 1)
                    for (int64_t gi = 0; gi < d.G; ++gi)
                        gemm_nt_serial(d.M, d.K, d.N, g + gi * d.M * d.N, d.N,
                                       b->val.data() + gi * d.K * d.N, d.N,
                                       a->grad.data() + gi * d.M * d.K, d.K, true);
                }
            }
            if (b->needs_grad) {
                b->ensure_grad();
                // dB = A^T @ dC   (TN form)
                if (d.b_shared) {
                    gemm(true, false, d.K, d.N, d.G * d.M, a->val.data(), d.K, g, d.N,
                         b->grad.data(), d.N, true);
                } else {
#pragma omp parallel for schedule(static) if (d.G > 1)
                    for (int64_t gi = 0; gi < d.G; ++gi)
                        gemm_tn_serial(d.K, d.N, d.M, a->val.data() + gi * d.M * d.K, d.K,
                                       g + gi * d.M * d.N, d.N, b->grad.data() + gi * d.K * d.N,
                                       d.N, true);
                }
            }
        };
    return n;
}

// out = a @ b^T ; a: (..., M, K), b: (..., N, K) matching batch or (N, K)
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
    auto d = detail::matmul_dims(a->val.shape, b->val.shape, true);
    Shape os(a->val.shape.begin(), a->val.shape.end() - 1);
    os.push_back(d.N);
    auto n = detail::make_op<T>("matmul_nt", os, {a, b});
    const T* pa = a->val.data();
    const T* pb = b->val.data();
    T* po = n->val.data();
    if (d.b_shared) {
        gemm(false, true, d.G * d.M, d.N, d.K, pa, d.K, pb, d.K, po, d.N, false);
    } else {
#pragma omp parallel for schedule(static) if (d.G > 1)
        for (int64_t g = 0; g < d.G; ++g)
            gemm_nt_serial(d.M, d.N, d.K, pa + g * d.M * d.K, d.K, pb + g * d.N * d.K, d.K,
                           po + g * d.M * d.N, d.N, false);
    }
    if (n->needs_grad)
        n->backward_fn = [a, b, d](Node<T>& self) {
            const T* g = self.grad.data();
            if (a->needs_grad) {
                a->ensure_grad();
                // dA = dC @ B   (NN form)
                if (d.b_shared) {
                    gemm(false, false, d.G * d.M, d.K, d.N, g, d.N, b->val.data(), d.K,
                         a->grad.data(), d.K, true);
                } else {
#pragma omp parallel for schedule(static) if (d.G > 1)
                    for (int64_t gi = 0; gi < d.G; ++gi)
                        gemm_nn_serial(d.M, d.K, d.N, g + gi * d.M * d.N, d.N,
                                       b->val.data() + gi * d.N * d.K, d.K,
                                       a->grad.data() + gi * d.M * d.K, d.K, true);
                }
            }
            if (b->needs_grad) {
                b->ensure_grad();
                // dB = dC^T @ A  (TN form with dC as "A")
                if (d.b_shared) {
                    gemm(true, false, d.N, d.K, d.G * d.M, g, d.N, a->val.data(), d.K,
                         b->grad.data(), d.K, true);
                } else {
#pragma omp parallel for schedule(static) if (d.G > 1)
                    for (int64_t gi = 0; gi < d.G; ++gi)
                        gemm_tn_serial(d.N, d.K, d.M, g + gi * d.M * d.N, d.N,
                                       a->val.data() + gi * d.M * d.K, d.K,
                                       b->grad.data() + gi * d.N * d.K, d.K, true);
                }
            }
        };
    return n;
}

template <typename T>
Var<T> relu(Var<T> a) {
    auto n = detail::make_op<T>("relu", a->val.shape, {a});
    int64_t cnt = n->val.numel();
    const T* pa = a->val.data();
    T* po = n->val.data();
#pragma omp parallel for schedule(static) if (cnt > 65536)
    for (int64_t i = 0; i < cnt; ++i) po[i] = pa[i] > T(0) ? pa[i] : T(0);
    if (n->needs_grad)
        n->backward_fn = [a](Node<T>& self) {
            a->ensure_grad();
            int64_t m = self.grad.numel();
            const T* g = self.grad.data();
            const T* pv = a->val.data();
            T* ga = a->grad.data();
#pragma omp parallel for schedule(static) if (m > 65536)
            for (int64_t i = 0; i < m; ++i)
                if (pv[i] > T(0)) ga[i] += g[i];
        };
    return n;
}

// exact erf formulation
template <typename T>
Var<T> gelu(Var<T> a) {
    auto n = detail::make_op<T>("gelu", a->val.shape, {a});
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    int64_t cnt = n->val.numel();
    const T* pa = a->val.data();
    T* po = n->val.data();
#pragma omp parallel for schedule(static) if (cnt > 16384)
    for (int64_t i = 0; i < cnt; ++i) {
        double x = (double)pa[i];
        po[i] = (T)(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
    }
    if (n->needs_grad)
        n->backward_fn = [a](Node<T>& self) {
            a->ensure_grad();
            constexpr double inv_sqrt2 = 0.7071067811865475244;
            constexpr double inv_sqrt_2pi = 0.3989422804014326779;
            int64_t m = self.grad.numel();
            const T* g = self.grad.data();
            const T* pa2 = a->val.data();
            T* ga = a->grad.data();
#pragma omp parallel for schedule(static) if (m > 16384)
            for (int64_t i = 0; i < m; ++i) {
                double x = (double)pa2[i];
                double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
                ga[i] += g[i] * (T)(cdf + x * pdf);
            }
        };
    return n;
}

template <typename T>
Var<T> exp_op(Var<T> a) {
    auto n = detail::make_op<T>("exp", a->val.shape, {a});
    for (int64_t i = 0; i < n->val.numel(); ++i) n->val[i] = std::exp(a->val[i]);
    if (n->needs_grad)
        n->backward_fn = [a, n_weak = std::weak_ptr<Node<T>>(n)](Node<T>& self) {
            a->ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i) a->grad[i] += self.grad[i] * self.val[i];
        };
    return n;
}

// softmax over the last dim; -inf logits get exactly zero weight
template <typename T>
Var<T> softmax_last(Var<T> a) {
    int64_t C = a->val.dim(-1);
    int64_t R = a->val.numel() / C;
    auto n = detail::make_op<T>("softmax", a->val.shape, {a});
    const T* pa = a->val.data();
    T* po = n->val.data();
#pragma omp parallel for schedule(static) if (R > 64)
    for (int64_t r = 0; r < R; ++r) {
        const T* x = pa + r * C;
        T* y = po + r * C;
        T mx = -std::numeric_limits<T>::infinity();
        for (int64_t c = 0; c < C; ++c) mx = std::max(mx, x[c]);
        T sum = 0;
        for (int64_t c = 0; c < C; ++c) {
            y[c] = std::exp(x[c] - mx);
            sum += y[c];
        }
        T inv = T(1) / sum;
        for (int64_t c = 0; c < C; ++c) y[c] *= inv;
    }
    if (n->needs_grad)
        n->backward_fn = [a, R, C](Node<T>& self) {
            a->ensure_grad();
#pragma omp parallel for schedule(static) if (R > 64)
            for (int64_t r = 0; r < R; ++r) {
                const T* y = self.val.data() + r * C;
                const T* g = self.grad.data() + r * C;
                T* ga = a->grad.data() + r * C;
                T dot = 0;
                for (int64_t c = 0; c < C; ++c) dot += y[c] * g[c];
                for (int64_t c = 0; c < C; ++c) ga[c] += y[c] * (g[c] - dot);
            }
        };
    return n;
}

template <typename T>
Var<T> layer_norm(Var<T> a, Var<T> gamma, Var<T> beta, T eps = (T)1e-5) {
    int64_t C = a->val.dim(-1);
    int64_t R = a->val.numel() / C;
    if (gamma->val.numel() != C || beta->val.numel() != C)
        throw std::invalid_argument("layer_norm: gamma/beta size mismatch");
    auto n = detail::make_op<T>("layer_norm", a->val.shape, {a, gamma, beta});
    // save normalized activations and inverse stddev for backward
    auto xhat = std::make_shared<Tensor<T>>(a->val.shape);
    auto istd = std::make_shared<Tensor<T>>(Shape{R});
    const T* pa = a->val.data();
    const T* pg = gamma->val.data();
    const T* pb = beta->val.data();
    T* po = n->val.data();
#pragma omp parallel for schedule(static) if (R > 64)
    for (int64_t r = 0; r < R; ++r) {
        const T* x = pa + r * C;
        T* xh = xhat->data() + r * C;
        T mean = 0;
        for (int64_t c = 0; c < C; ++c) mean += x[c];
        mean /= (T)C;
        T var = 0;
        for (int64_t c = 0; c < C; ++c) {
            T d = x[c] - mean;
            var += d * d;
        }
        var /= (T)C;
        T is = T(1) / std::sqrt(var + eps);
        (*istd)[r] = is;
        T* y = po + r * C;
        for (int64_t c = 0; c < C; ++c) {
            xh[c] = (x[c] - mean) * is;
            y[c] = xh[c] * pg[c] + pb[c];
        }
    }
    if (n->needs_grad)
        n->backward_fn = [a, gamma, beta, xhat, istd, R, C](Node<T>& self) {
            const T* g = self.grad.data();
            if (gamma->needs_grad) {
                gamma->ensure_grad();
                for (int64_t r = 0; r < R; ++r)
                    for (int64_t c = 0; c < C; ++c)
                        gamma->grad[c] += g[r * C + c] * (*xhat)[r * C + c];
            }
            if (beta->needs_grad) {
                beta->ensure_grad();
                for (int64_t r = 0; r < R; ++r)
                    for (int64_t c = 0; c < C; ++c) beta->grad[c] += g[r * C + c];
            }
            if (a->needs_grad) {
                a->ensure_grad();
                const T* pg = gamma->val.data();
#pragma omp parallel for schedule(static) if (R > 64)
                for (int64_t r = 0; r < R; ++r) {
                    const T* gr = g + r * C;
                    const T* xh = xhat->data() + r * C;
                    T* ga = a->grad.data() + r * C;
                    T m1 = 0, m2 = 0;
                    for (int64_t c = 0; c < C; ++c) {
                        T gy = gr[c] * pg[c];
                        m1 += gy;
                        m2 += gy * xh[c];
                    }
                    m1 /= (T)C;
                    m2 /= (T)C;
                    T is = (*istd)[r];
                    for (int64_t c = 0; c < C; ++c) {
                        T gy = gr[c] * pg[c];
                        ga[c] += is * (gy - m1 - xh[c] * m2);
                    }
                }
            }
        };
    return n;
}

// table: (V, d), idx: N integer indices -> (N, d)
template <typename T>
Var<T> embedding(Var<T> table, const std::vector<int>& idx) {
    int64_t V = table->val.dim(0);
    int64_t d = table->val.dim(1);
    int64_t N = (int64_t)idx.size();
    for (int i : idx)
        if (i < 0 || i >= V) throw std::out_of_range("embedding: index out of range");
    auto n = detail::make_op<T>("embedding", Shape{N, d}, {table});
    for (int64_t r = 0; r < N; ++r)
        std::memcpy(n->val.data() + r * d, table->val.data() + (int64_t)idx[r] * d, sizeof(T) * d);
    if (n->needs_grad) {
        auto saved = std::make_shared<std::vector<int>>(idx);
        n->backward_fn = [table, saved, d](Node<T>& self) {
            table->ensure_grad();
            for (size_t r = 0; r < saved->size(); ++r) {
                T* dst = table->grad.data() + (int64_t)(*saved)[r] * d;
                const T* src = self.grad.data() + (int64_t)r * d;
                for (int64_t c = 0; c < d; ++c) dst[c] += src[c];
            }
        };
    }
    return n;
}

template <typename T>
Var<T> concat_last(Var<T> a, Var<T> b) {
    if (a->val.ndim() != b->val.ndim()) throw std::invalid_argument("concat_last: ndim mismatch");
    for (int i = 0; i + 1 < a->val.ndim(); ++i)
        if (a->val.shape[i] != b->val.shape[i]) throw std::invalid_argument("concat_last: shape mismatch");
    int64_t Ca = a->val.dim(-1), Cb = b->val.dim(-1);
    int64_t R = a->val.numel() / Ca;
    Shape os = a->val.shape;
    os.back() = Ca + Cb;
    auto n = detail::make_op<T>("concat_last", os, {a, b});
    for (int64_t r = 0; r < R; ++r) {
        std::memcpy(n->val.data() + r * (Ca + Cb), a->val.data() + r * Ca, sizeof(T) * Ca);
        std::memcpy(n->val.data() + r * (Ca + Cb) + Ca, b->val.data() + r * Cb, sizeof(T) * Cb);
    }
    if (n->needs_grad)
        n->backward_fn = [a, b, R, Ca, Cb](Node<T>& self) {
            if (a->needs_grad) {
                a->ensure_grad();
                for (int64_t r = 0; r < R; ++r)
                    for (int64_t c = 0; c < Ca; ++c)
                        a->grad[r * Ca + c] += self.grad[r * (Ca + Cb) + c];
            }
            if (b->needs_grad) {
                b->ensure_grad();
                for (int64_t r = 0; r < R; ++r)
                    for (int64_t c = 0; c < Cb; ++c)
                        b->grad[r * Cb + c] += self.grad[r * (Ca + Cb) + Ca + c];
            }
        };
    return n;
}

// concat 3D tensors along dim 1: (B,S1,d) + (B,S2,d) -> (B,S1+S2,d)
template <typename T>
Var<T> concat_dim1(Var<T> a, Var<T> b) {
    if (a->val.ndim() != 3 || b->val.ndim() != 3 || a->val.dim(0) != b->val.dim(0) ||
        a->val.dim(2) != b->val.dim(2))
        throw std::invalid_argument("concat_dim1: shape mismatch");
    int64_t B = a->val.dim(0), S1 = a->val.dim(1), S2 = b->val.dim(1), d = a->val.dim(2);
    auto n = detail::make_op<T>("concat_dim1", Shape{B, S1 + S2, d}, {a, b});
    for (int64_t bi = 0; bi < B; ++bi) {
        std::memcpy(n->val.data() + bi * (S1 + S2) * d, a->val.data() + bi * S1 * d,
                    sizeof(T) * S1 * d);
        std::memcpy(n->val.data() + (bi * (S1 + S2) + S1) * d, b->val.data() + bi * S2 * d,
                    sizeof(T) * S2 * d);
    }
    if (n->needs_grad)
        n->backward_fn = [a, b, B, S1, S2, d](Node<T>& self) {
            if (a->needs_grad) {
                a->ensure_grad();
                for (int64_t bi = 0; bi < B; ++bi)
                    for (int64_t i = 0; i < S1 * d; ++i)
                        a->grad[bi * S1 * d + i] += self.grad[bi * (S1 + S2) * d + i];
            }
            if (b->needs_grad) {
                b->ensure_grad();
                for (int64_t bi = 0; bi < B; ++bi)
                    for (int64_t i = 0; i < S2 * d; ++i)
                        b->grad[bi * S2 * d + i] += self.grad[(bi * (S1 + S2) + S1) * d + i];
            }
        };
    return n;
}

template <typename T>
Var<T> slice_last(Var<T> a, int64_t start, int64_t len) {
    int64_t C = a->val.dim(-1);
    if (start < 0 || start + len > C) throw std::out_of_range("slice_last: range");
    int64_t R = a->val.numel() / C;
    Shape os = a->val.shape;
    os.back() = len;
    auto n = detail::make_op<T>("slice_last", os, {a});
    for (int64_t r = 0; r < R; ++r)
        std::memcpy(n->val.data() + r * len, a->val.data() + r * C + start, sizeof(T) * len);
    if (n->needs_grad)
        n->backward_fn = [a, R, C, start, len](Node<T>& self) {
            a->ensure_grad();
            for (int64_t r = 0; r < R; ++r)
                for (int64_t c = 0; c < len; ++c)
                    a->grad[r * C + start + c] += self.grad[r * len + c];
        };
    return n;
}

template <typename T>
Var<T> reshape(Var<T> a, Shape s) {
    auto n = detail::make_op<T>("reshape", Shape{}, {a});
    n->val = a->val.reshaped(std::move(s));  // aliases the same store
    if (n->needs_grad)
        n->backward_fn = [a](Node<T>& self) {
            // this node's gradient buffer is dead after this call
            a->take_grad(std::move(self.grad));
        };
    return n;
}

// (A,B,C,D) -> (A,C,B,D); applying it twice is the identity permutation
template <typename T>
Var<T> permute_0213(Var<T> a) {
    if (a->val.ndim() != 4) throw std::invalid_argument("permute_0213: need 4D");
    int64_t A = a->val.shape[0], B = a->val.shape[1], C = a->val.shape[2], D = a->val.shape[3];
    auto n = detail::make_op<T>("permute_0213", Shape{A, C, B, D}, {a});
    const T* pa = a->val.data();
    T* po = n->val.data();
#pragma omp parallel for collapse(2) schedule(static) if (A * B * C * D > 65536)
    for (int64_t x = 0; x < A; ++x)
        for (int64_t y = 0; y < B; ++y)
            for (int64_t z = 0; z < C; ++z)
                std::memcpy(po + ((x * C + z) * B + y) * D, pa + ((x * B + y) * C + z) * D,
                            sizeof(T) * D);
    if (n->needs_grad)
        n->backward_fn = [a, A, B, C, D](Node<T>& self) {
            a->ensure_grad();
            const T* g = self.grad.data();
#pragma omp parallel for collapse(2) schedule(static) if (A * B * C * D > 65536)
            for (int64_t x = 0; x < A; ++x)
                for (int64_t z = 0; z < C; ++z)
                    for (int64_t y = 0; y < B; ++y) {
                        const T* src = g + ((x * C + z) * B + y) * D;
                        T* dst = a->grad.data() + ((x * B + y) * C + z) * D;
                        for (int64_t w = 0; w < D; ++w) dst[w] += src[w];
                    }
        };
    return n;
}

// replicate x (leading...) -> (reps, leading...)
template <typename T>
Var<T> tile_leading(Var<T> a, int64_t reps) {
    Shape os = a->val.shape;
    os.insert(os.begin(), reps);
    auto n = detail::make_op<T>("tile_leading", os, {a});
    int64_t sz = a->val.numel();
    for (int64_t r = 0; r < reps; ++r)
        std::memcpy(n->val.data() + r * sz, a->val.data(), sizeof(T) * sz);
    if (n->needs_grad)
        n->backward_fn = [a, reps, sz](Node<T>& self) {
            a->ensure_grad();
            for (int64_t r = 0; r < reps; ++r)
                for (int64_t i = 0; i < sz; ++i) a->grad[i] += self.grad[r * sz + i];
        };
    return n;
}

// logits (B*H, Tq, Tk) plus g (B, Tq, Tk) broadcast over H heads
template <typename T>
Var<T> add_per_batch(Var<T> logits, Var<T> g, int64_t heads) {
    int64_t n_l = logits->val.numel();
    int64_t n_g = g->val.numel();
    if (n_l != n_g * heads) throw std::invalid_argument("add_per_batch: shape mismatch");
    int64_t B = g->val.dim(0);
    int64_t block = n_g / B;  // Tq*Tk
    auto n = detail::make_op<T>("add_per_batch", logits->val.shape, {logits, g});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < heads; ++h) {
            const T* pl = logits->val.data() + (b * heads + h) * block;
            const T* pg = g->val.data() + b * block;
            T* po = n->val.data() + (b * heads + h) * block;
            for (int64_t i = 0; i < block; ++i) po[i] = pl[i] + pg[i];
        }
    if (n->needs_grad)
        n->backward_fn = [logits, g, heads, B, block](Node<T>& self) {
            if (logits->needs_grad) logits->add_grad(self.grad);
            if (g->needs_grad) {
                g->ensure_grad();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t h = 0; h < heads; ++h) {
                        const T* src = self.grad.data() + (b * heads + h) * block;
                        T* dst = g->grad.data() + b * block;
                        for (int64_t i = 0; i < block; ++i) dst[i] += src[i];
                    }
            }
        };
    return n;
}

template <typename T>
Var<T> sum_all(Var<T> a) {
    auto n = detail::make_op<T>("sum_all", Shape{1}, {a});
    // accumulate in double for stability of large reductions
    double acc = 0;
    for (int64_t i = 0; i < a->val.numel(); ++i) acc += (double)a->val[i];
    n->val[0] = (T)acc;
    if (n->needs_grad)
        n->backward_fn = [a](Node<T>& self) {
            a->ensure_grad();
            T g = self.grad[0];
            for (int64_t i = 0; i < a->grad.numel(); ++i) a->grad[i] += g;
        };
    return n;
}

template <typename T>
Var<T> mean_all(Var<T> a) {
    return mul_scalar(sum_all(a), T(1) / (T)a->val.numel());
}

// mean over the middle dim: (B, L, d) -> (B, d)
template <typename T>
Var<T> mean_mid(Var<T> a) {
    if (a->val.ndim() != 3) throw std::invalid_argument("mean_mid: need 3D");
    int64_t B = a->val.shape[0], L = a->val.shape[1], d = a->val.shape[2];
    auto n = detail::make_op<T>("mean_mid", Shape{B, d}, {a});
    T inv = T(1) / (T)L;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t l = 0; l < L; ++l)
            for (int64_t c = 0; c < d; ++c) n->val[b * d + c] += a->val[(b * L + l) * d + c] * inv;
    if (n->needs_grad)
        n->backward_fn = [a, B, L, d, inv](Node<T>& self) {
            a->ensure_grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t l = 0; l < L; ++l)
                    for (int64_t c = 0; c < d; ++c)
                        a->grad[(b * L + l) * d + c] += self.grad[b * d + c] * inv;
        };
    return n;
}

// Weighted token cross-entropy: logits (N, V), integer targets and per-row
// weights (N). Returns sum_n w_n * ce_n as a scalar. Rows with weight 0 are
// skipped entirely.
template <typename T>
Var<T> weighted_cross_entropy(Var<T> logits, const std::vector<int>& targets,
                              const std::vector<T>& weights) {
    int64_t V = logits->val.dim(-1);
    int64_t N = logits->val.numel() / V;
    if ((int64_t)targets.size() != N || (int64_t)weights.size() != N)
        throw std::invalid_argument("weighted_cross_entropy: target/weight count mismatch");
    auto probs = std::make_shared<Tensor<T>>(Shape{N, V});
    auto n = detail::make_op<T>("wce", Shape{1}, {logits});
    for (int64_t r = 0; r < N; ++r) {
        int t = targets[r];
        if (weights[r] != T(0) && (t < 0 || t >= V))
            throw std::out_of_range("weighted_cross_entropy: target index");
    }
    double total = 0;
#pragma omp parallel for schedule(static) reduction(+ : total) if (N * V > 16384)
    for (int64_t r = 0; r < N; ++r) {
        if (weights[r] == T(0)) continue;
        int t = targets[r];
        const T* x = logits->val.data() + r * V;
        T* p = probs->data() + r * V;
        T mx = x[0];
        for (int64_t v = 1; v < V; ++v) mx = std::max(mx, x[v]);
        double sum = 0;
        for (int64_t v = 0; v < V; ++v) {
            p[v] = std::exp(x[v] - mx);
            sum += (double)p[v];
        }
        T inv = (T)(1.0 / sum);
        for (int64_t v = 0; v < V; ++v) p[v] *= inv;
        total += (double)weights[r] * (std::log(sum) - (double)(x[t] - mx));
    }
    n->val[0] = (T)total;
    if (n->needs_grad) {
        auto tgt = std::make_shared<std::vector<int>>(targets);
        auto wts = std::make_shared<std::vector<T>>(weights);
        n->backward_fn = [logits, probs, tgt, wts, N, V](Node<T>& self) {
            logits->ensure_grad();
            T g = self.grad[0];
#pragma omp parallel for schedule(static) if (N * V > 16384)
            for (int64_t r = 0; r < N; ++r) {
                T w = (*wts)[r];
                if (w == T(0)) continue;
                const T* p = probs->data() + r * V;
                T* gl = logits->grad.data() + r * V;
                T gw = g * w;
                for (int64_t v = 0; v < V; ++v) gl[v] += gw * p[v];
                gl[(*tgt)[r]] -= gw;
            }
        };
    }
    return n;
}

// Weighted squared error: pred (N), targets/weights (N); sum_n w_n*(p_n-t_n)^2
template <typename T>
Var<T> weighted_mse(Var<T> pred, const std::vector<T>& targets, const std::vector<T>& weights) {
    int64_t N = pred->val.numel();
    if ((int64_t)targets.size() != N || (int64_t)weights.size() != N)
        throw std::invalid_argument("weighted_mse: size mismatch");
    auto n = detail::make_op<T>("wmse", Shape{1}, {pred});
    double total = 0;
    for (int64_t r = 0; r < N; ++r) {
        double d = (double)pred->val[r] - (double)targets[r];
        total += (double)weights[r] * d * d;
    }
    n->val[0] = (T)total;
    if (n->needs_grad) {
        auto tgt = std::make_shared<std::vector<T>>(targets);
        auto wts = std::make_shared<std::vector<T>>(weights);
        n->backward_fn = [pred, tgt, wts, N](Node<T>& self) {
            pred->ensure_grad();
            T g = self.grad[0];
            for (int64_t r = 0; r < N; ++r)
                pred->grad[r] += g * (*wts)[r] * T(2) * (pred->val[r] - (*tgt)[r]);
        };
    }
    return n;
}

// inverted-scale dropout; identity when training==false or p==0
template <typename T>
Var<T> dropout(Var<T> a, double p, Rng& rng, bool training) {
    if (!training || p <= 0.0) return a;
    auto mask = std::make_shared<Tensor<T>>(a->val.shape);
    T scale = (T)(1.0 / (1.0 - p));
    // cheap counter-based stream; one draw from the caller's rng seeds it
    uint64_t state = rng.next();
    uint64_t cutoff = (uint64_t)(p * 18446744073709551616.0);
    auto n = detail::make_op<T>("dropout", a->val.shape, {a});
    int64_t cnt = n->val.numel();
    const T* pa = a->val.data();
    T* pmask = mask->data();
    T* po = n->val.data();
#pragma omp parallel for schedule(static) if (cnt > 32768)
    for (int64_t i = 0; i < cnt; ++i) {
        T m = splitmix64(state + (uint64_t)i) < cutoff ? T(0) : scale;
        pmask[i] = m;
        po[i] = pa[i] * m;
    }
    if (n->needs_grad)
        n->backward_fn = [a, mask](Node<T>& self) {
            a->ensure_grad();
            int64_t m = self.grad.numel();
            const T* g = self.grad.data();
            const T* pmk = mask->data();
            T* ga = a->grad.data();
#pragma omp parallel for schedule(static) if (m > 65536)
            for (int64_t i = 0; i < m; ++i) ga[i] += g[i] * pmk[i];
        };
    return n;
}

}  // namespace icvt
