#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace icvt {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

// Dense row-major tensor. The storage pointer is shared so reshapes and
// graph nodes can alias the same buffer; treat buffers as frozen once they
// participate in a graph.
template <typename T>
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<T>> store;

    Tensor() = default;
    explicit Tensor(Shape s)
        : shape(std::move(s)), store(std::make_shared<std::vector<T>>(shape_numel(shape), T(0))) {}
    Tensor(Shape s, T fill)
        : shape(std::move(s)), store(std::make_shared<std::vector<T>>(shape_numel(shape), fill)) {}
    Tensor(Shape s, std::vector<T> vals) : shape(std::move(s)) {
        if ((int64_t)vals.size() != shape_numel(shape))
            throw std::invalid_argument("tensor init size mismatch " + shape_str(shape));
        store = std::make_shared<std::vector<T>>(std::move(vals));
    }

    bool defined() const { return store != nullptr; }
    int64_t numel() const { return store ? (int64_t)store->size() : 0; }
    int ndim() const { return (int)shape.size(); }
    int64_t dim(int i) const {
        int n = ndim();
        if (i < 0) i += n;
        assert(i >= 0 && i < n);
        return shape[i];
    }

    T* data() { return store->data(); }
    const T* data() const { return store->data(); }
    T& operator[](int64_t i) { return (*store)[i]; }
    const T& operator[](int64_t i) const { return (*store)[i]; }

    // shares storage
    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw std::invalid_argument("reshape numel mismatch: " + shape_str(shape) + " -> " + shape_str(s));
        Tensor out;
        out.shape = std::move(s);
        out.store = store;
        return out;
    }

    Tensor clone() const {
        Tensor out;
        out.shape = shape;
        out.store = std::make_shared<std::vector<T>>(*store);
        return out;
    }

    void fill(T v) { std::fill(store->begin(), store->end(), v); }
    void zero() { fill(T(0)); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape);
        for (int64_t i = 0; i < numel(); ++i) out[i] = (U)(*store)[i];
        return out;
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }
};

// Single RNG type used across the project so seeded runs are reproducible.
struct Rng {
    std::mt19937_64 gen;
    explicit Rng(uint64_t seed) : gen(seed) {}
    double uniform(double lo = 0.0, double hi = 1.0) {
        return std::uniform_real_distribution<double>(lo, hi)(gen);
    }
    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(gen);
    }
    // inclusive bounds
    int64_t randint(int64_t lo, int64_t hi) {
        return std::uniform_int_distribution<int64_t>(lo, hi)(gen);
    }
    bool bernoulli(double p) { return uniform() < p; }
    uint64_t next() { return gen(); }
};

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t mix_seeds(uint64_t a, uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

template <typename T>
Tensor<T> randn_tensor(Shape s, Rng& rng, double stddev = 1.0) {
    Tensor<T> t(std::move(s));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = (T)rng.normal(0.0, stddev);
    return t;
}

// ---------------------------------------------------------------------------
// GEMM kernels, row-major. C (MxN) = op(A) * op(B), optionally accumulating.
// NN: A MxK, B KxN.  NT: A MxK, B NxK.  TN: A KxM, B KxN.
// Eigen backs the products when available; the loops below are the portable
// fallback.
// ---------------------------------------------------------------------------

#if __has_include(<Eigen/Core>)
#define ICVT_HAVE_EIGEN 1
#endif

#ifdef ICVT_HAVE_EIGEN
}  // namespace icvt
#include <Eigen/Core>
namespace icvt {

namespace detail_gemm {
template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
inline void eigen_gemm(bool ta, bool tb, int64_t M, int64_t N, int64_t K, const T* A, int64_t lda,
                       const T* B, int64_t ldb, T* C, int64_t ldc, bool acc) {
    MMap<T> c(C, M, N, Eigen::OuterStride<>(ldc));
    CMap<T> a(A, ta ? K : M, ta ? M : K, Eigen::OuterStride<>(lda));
    CMap<T> b(B, tb ? N : K, tb ? K : N, Eigen::OuterStride<>(ldb));
    if (!ta && !tb) {
        if (acc) c.noalias() += a * b; else c.noalias() = a * b;
    } else if (!ta && tb) {
        if (acc) c.noalias() += a * b.transpose(); else c.noalias() = a * b.transpose();
    } else {
        if (acc) c.noalias() += a.transpose() * b; else c.noalias() = a.transpose() * b;
    }
}
}  // namespace detail_gemm
#endif

template <typename T>
inline void gemm_nn_serial(int64_t M, int64_t N, int64_t K, const T* A, int64_t lda,
                           const T* B, int64_t ldb, T* C, int64_t ldc, bool acc) {
#ifdef ICVT_HAVE_EIGEN
    detail_gemm::eigen_gemm(false, false, M, N, K, A, lda, B, ldb, C, ldc, acc);
    return;
#else
    for (int64_t i = 0; i < M; ++i) {
        T* c = C + i * ldc;
        if (!acc) std::memset(c, 0, sizeof(T) * N);
        const T* a = A + i * lda;
        for (int64_t k = 0; k < K; ++k) {
            T av = a[k];
            const T* b = B + k * ldb;
#pragma omp simd
            for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
#endif
}

template <typename T>
inline void gemm_nt_serial(int64_t M, int64_t N, int64_t K, const T* A, int64_t lda,
                           const T* B, int64_t ldb, T* C, int64_t ldc, bool acc) {
#ifdef ICVT_HAVE_EIGEN
    detail_gemm::eigen_gemm(false, true, M, N, K, A, lda, B, ldb, C, ldc, acc);
    return;
#endif
    for (int64_t i = 0; i < M; ++i) {
        const T* a = A + i * lda;
        T* c = C + i * ldc;
        int64_t j = 0;
        for (; j + 4 <= N; j += 4) {
            const T* b0 = B + (j + 0) * ldb;
            const T* b1 = B + (j + 1) * ldb;
            const T* b2 = B + (j + 2) * ldb;
            const T* b3 = B + (j + 3) * ldb;
            T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
#pragma omp simd reduction(+ : s0, s1, s2, s3)
            for (int64_t k = 0; k < K; ++k) {
                T av = a[k];
                s0 += av * b0[k];
                s1 += av * b1[k];
                s2 += av * b2[k];
                s3 += av * b3[k];
            }
            if (acc) { c[j] += s0; c[j + 1] += s1; c[j + 2] += s2; c[j + 3] += s3; }
            else     { c[j] = s0;  c[j + 1] = s1;  c[j + 2] = s2;  c[j + 3] = s3; }
        }
        for (; j < N; ++j) {
            const T* b = B + j * ldb;
            T s = 0;
#pragma omp simd reduction(+ : s)
            for (int64_t k = 0; k < K; ++k) s += a[k] * b[k];
            if (acc) c[j] += s; else c[j] = s;
        }
    }
}

template <typename T>
inline void gemm_tn_serial(int64_t M, int64_t N, int64_t K, const T* A, int64_t lda,
                           const T* B, int64_t ldb, T* C, int64_t ldc, bool acc) {
#ifdef ICVT_HAVE_EIGEN
    detail_gemm::eigen_gemm(true, false, M, N, K, A, lda, B, ldb, C, ldc, acc);
    return;
#endif
    // A is KxM, C[i,j] = sum_k A[k,i] * B[k,j]
    for (int64_t i = 0; i < M; ++i) {
        T* c = C + i * ldc;
        if (!acc) std::memset(c, 0, sizeof(T) * N);
        for (int64_t k = 0; k < K; ++k) {
            T av = A[k * lda + i];
            const T* b = B + k * ldb;
#pragma omp simd
            for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// Parallel entry point. Each element of C is produced by one thread with a
// fixed reduction order, so the result does not depend on the thread count.
template <typename T>
void gemm(bool ta, bool tb, int64_t M, int64_t N, int64_t K, const T* A, int64_t lda,
          const T* B, int64_t ldb, T* C, int64_t ldc, bool acc) {
    if (ta && tb) throw std::logic_error("gemm: TT form not supported");
#ifdef ICVT_HAVE_EIGEN
    // parallelize by row blocks; Eigen runs sequentially inside omp regions
    int64_t threads = 1;
#ifdef _OPENMP
    threads = omp_get_max_threads();
#endif
    if (threads > 1 && M >= 2 * threads && (M * N * K) > (1 << 16)) {
        int64_t chunk = (M + threads - 1) / threads;
#pragma omp parallel for schedule(static)
        for (int64_t i0 = 0; i0 < M; i0 += chunk) {
            int64_t mb = std::min(chunk, M - i0);
            const T* ap = ta ? A + i0 : A + i0 * lda;
            detail_gemm::eigen_gemm(ta, tb, mb, N, K, ap, lda, B, ldb, C + i0 * ldc, ldc, acc);
        }
    } else {
        detail_gemm::eigen_gemm(ta, tb, M, N, K, A, lda, B, ldb, C, ldc, acc);
    }
#else
    const int64_t grain = 8;
#pragma omp parallel for schedule(static) if (M >= grain && (M * N * K) > (1 << 15))
    for (int64_t i0 = 0; i0 < M; i0 += grain) {
        int64_t mb = std::min(grain, M - i0);
        if (!ta && !tb)
            gemm_nn_serial(mb, N, K, A + i0 * lda, lda, B, ldb, C + i0 * ldc, ldc, acc);
        else if (!ta && tb)
            gemm_nt_serial(mb, N, K, A + i0 * lda, lda, B, ldb, C + i0 * ldc, ldc, acc);
        else
            gemm_tn_serial(mb, N, K, A + i0, lda, B, ldb, C + i0 * ldc, ldc, acc);
    }
#endif
}

}  // namespace icvt
