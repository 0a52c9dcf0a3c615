#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "clad/errors.hpp"

namespace clad {

// ---------------------------------------------------------------------------
// Tensor: dense row-major n-d array of T (float or double). Data and gradient
// buffers are shared between copies; a tensor is a cheap value handle. Values
// are immutable once created except for explicit in-place parameter updates
// between tapes.
// ---------------------------------------------------------------------------

template <typename T>
class TensorT {
  public:
    using Buffer = std::shared_ptr<std::vector<T>>;

    TensorT() = default;

    static TensorT zeros(std::vector<int> shape) {
        TensorT t;
        t.shape_ = std::move(shape);
        t.check_shape();
        t.data_ = std::make_shared<std::vector<T>>(t.size(), T(0));
        return t;
    }

    static TensorT full(std::vector<int> shape, T value) {
        TensorT t = zeros(std::move(shape));
        std::fill(t.data_->begin(), t.data_->end(), value);
        return t;
    }

    // Rank-0 tensor holding one value.
    static TensorT scalar(T value) { return full({}, value); }

    static TensorT from(std::vector<int> shape, std::vector<T> values) {
        TensorT t;
        t.shape_ = std::move(shape);
        t.check_shape();
        if (values.size() != t.size()) {
            throw DimensionError("tensor data length " +
                                 std::to_string(values.size()) +
                                 " does not match shape product " +
                                 std::to_string(t.size()));
        }
        t.data_ = std::make_shared<std::vector<T>>(std::move(values));
        return t;
    }

    bool empty() const { return data_ == nullptr; }

    const std::vector<int>& shape() const { return shape_; }

    int dim(size_t axis) const { return shape_.at(axis); }

    size_t size() const { return data_ ? data_->size() : 0; }

    T* data() { return data_->data(); }
    const T* data() const { return data_->data(); }

    const Buffer& data_buffer() const { return data_; }
    const Buffer& grad_buffer() const { return grad_; }

    bool tracked() const { return grad_ != nullptr; }

    // Marks a leaf tensor as a differentiable parameter.
    void enable_grad() {
        if (!grad_) grad_ = std::make_shared<std::vector<T>>(size(), T(0));
    }

    const T* grad() const {
        if (!grad_) throw UsageError("tensor has no gradient buffer");
        return grad_->data();
    }

    T at(std::initializer_list<int> idx) const {
        return (*data_)[flat_index(idx)];
    }

    T item() const {
        if (size() != 1) {
            throw UsageError("item() requires a one-element tensor, got " +
                             std::to_string(size()) + " elements");
        }
        return (*data_)[0];
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (size_t i = 0; i < shape_.size(); ++i)
            os << (i ? "," : "") << shape_[i];
        os << ']';
        return os.str();
    }

  private:
    void check_shape() const {
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (shape_[i] <= 0) {
                throw DimensionError("axis " + std::to_string(i) +
                                     " must be positive, got " +
                                     std::to_string(shape_[i]));
            }
        }
    }

    size_t flat_index(std::initializer_list<int> idx) const {
        if (idx.size() != shape_.size())
            throw DimensionError("index rank does not match tensor rank");
        size_t flat = 0;
        size_t axis = 0;
        for (int i : idx) {
            flat = flat * static_cast<size_t>(shape_[axis]) +
                   static_cast<size_t>(i);
            ++axis;
        }
        return flat;
    }

    std::vector<int> shape_;
    Buffer data_;
    Buffer grad_;

    template <typename U>
    friend class TapeT;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

// ---------------------------------------------------------------------------
// Tape: ordered record of primitive ops, replayed in reverse to accumulate
// gradients. Define-by-run; one tape per forward pass, confined to a thread.
// ---------------------------------------------------------------------------

template <typename T>
class TapeT {
  public:
    TapeT() = default;
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    // Makes a tape the recording target for ops on tracked tensors.
    class Activate {
      public:
        explicit Activate(TapeT& tape) : prev_(active_) { active_ = &tape; }
        ~Activate() { active_ = prev_; }
        Activate(const Activate&) = delete;
        Activate& operator=(const Activate&) = delete;

      private:
        TapeT* prev_;
    };

    // Suppresses recording (used by the finite-difference oracle).
    class NoGrad {
      public:
        NoGrad() : prev_(active_) { active_ = nullptr; }
        ~NoGrad() { active_ = prev_; }
        NoGrad(const NoGrad&) = delete;
        NoGrad& operator=(const NoGrad&) = delete;

      private:
        TapeT* prev_;
    };

    static TapeT* active() { return active_; }

    void push(std::function<void()> backprop) {
        records_.push_back(std::move(backprop));
    }

    void note_grad(const typename TensorT<T>::Buffer& g) {
        if (g) grads_.push_back(g);
    }

    size_t size() const { return records_.size(); }
    bool consumed() const { return consumed_; }

    // Reverse accumulation from a one-element root. Zeroes every gradient
    // buffer seen by this tape first, so leaf gradients are exactly
    // d(root)/d(leaf) with no stale carry-over.
    void backward(const TensorT<T>& root) {
        if (consumed_)
            throw UsageError("backward called twice on the same tape without reset");
        if (root.size() != 1)
            throw UsageError("backward requires a one-element tensor, got " +
                             root.shape_str());
        if (!root.tracked())
            throw UsageError("backward root is not tracked on any tape");
        for (auto& g : grads_) std::fill(g->begin(), g->end(), T(0));
        (*root.grad_)[0] = T(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
        consumed_ = true;
    }

    // Clears gradients and permits replay; replaying an unmutated tape
    // yields identical gradients.
    void reset() {
        for (auto& g : grads_) std::fill(g->begin(), g->end(), T(0));
        consumed_ = false;
    }

  private:
    std::vector<std::function<void()>> records_;
    std::vector<typename TensorT<T>::Buffer> grads_;
    bool consumed_ = false;

    inline static thread_local TapeT* active_ = nullptr;
};

using Tape = TapeT<float>;
using TapeD = TapeT<double>;

// ---------------------------------------------------------------------------
// Primitive ops. Each returns a fresh tensor; if a tape is active and any
// input is tracked, a backward record is pushed. Outputs are checked finite.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void ensure_finite(const std::vector<T>& values, const char* op) {
    for (T v : values) {
        if (!std::isfinite(v))
            throw NumericError(std::string(op) +
                               " produced a non-finite value (overflow?)");
    }
}

template <typename T>
struct OpResult {
    TensorT<T> out;
    TapeT<T>* tape = nullptr;  // non-null iff a record should be pushed
};

// Allocates the output of an op and decides whether it is tracked.
template <typename T>
OpResult<T> make_output(std::vector<int> shape, std::vector<T> values,
                        const char* op,
                        std::initializer_list<const TensorT<T>*> inputs) {
    ensure_finite(values, op);
    OpResult<T> r;
    r.out = TensorT<T>::from(std::move(shape), std::move(values));
    TapeT<T>* tape = TapeT<T>::active();
    if (!tape) return r;
    bool any_tracked = false;
    for (const TensorT<T>* in : inputs)
        if (in->tracked()) any_tracked = true;
    if (!any_tracked) return r;
    r.out.enable_grad();
    for (const TensorT<T>* in : inputs) tape->note_grad(in->grad_buffer());
    tape->note_grad(r.out.grad_buffer());
    r.tape = tape;
    return r;
}

template <typename T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b,
                        const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " +
                             a.shape_str() + " vs " + b.shape_str());
}

template <typename T>
void require_rank(const TensorT<T>& t, size_t rank, const char* op,
                  const char* role) {
    if (t.shape().size() != rank)
        throw DimensionError(std::string(op) + ": " + role + " must have rank " +
                             std::to_string(rank) + ", got " + t.shape_str());
}

}  // namespace detail

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
    auto r = detail::make_output<T>(a.shape(), std::move(v), "add", {&a, &b});
    if (r.tape) {
        auto ga = a.grad_buffer(), gb = b.grad_buffer(), go = r.out.grad_buffer();
        r.tape->push([ga, gb, go] {
            for (size_t i = 0; i < go->size(); ++i) {
                if (ga) (*ga)[i] += (*go)[i];
                if (gb) (*gb)[i] += (*go)[i];
            }
        });
    }
    return r.out;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<T> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
    auto r = detail::make_output<T>(a.shape(), std::move(v), "sub", {&a, &b});
    if (r.tape) {
        auto ga = a.grad_buffer(), gb = b.grad_buffer(), go = r.out.grad_buffer();
        r.tape->push([ga, gb, go] {
            for (size_t i = 0; i < go->size(); ++i) {
                if (ga) (*ga)[i] += (*go)[i];
                if (gb) (*gb)[i] -= (*go)[i];
            }
        });
    }
    return r.out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<T> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
    auto r = detail::make_output<T>(a.shape(), std::move(v), "mul", {&a, &b});
    if (r.tape) {
        auto ga = a.grad_buffer(), gb = b.grad_buffer(), go = r.out.grad_buffer();
        auto da = a.data_buffer(), db = b.data_buffer();
        r.tape->push([ga, gb, go, da, db] {
            for (size_t i = 0; i < go->size(); ++i) {
                if (ga) (*ga)[i] += (*go)[i] * (*db)[i];
                if (gb) (*gb)[i] += (*go)[i] * (*da)[i];
            }
        });
    }
    return r.out;
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, T c) {
    std::vector<T> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + c;
    auto r = detail::make_output<T>(a.shape(), std::move(v), "add_scalar", {&a});
    if (r.tape) {
        auto ga = a.grad_buffer(), go = r.out.grad_buffer();
        r.tape->push([ga, go] {
            for (size_t i = 0; i < go->size(); ++i) (*ga)[i] += (*go)[i];
        });
    }
    return r.out;
}

// a - c, elementwise.
template <typename T>
TensorT<T> sub_scalar(const TensorT<T>& a, T c) {
    return add_scalar(a, static_cast<T>(-c));
}

// c - a, elementwise.
template <typename T>
TensorT<T> rsub_scalar(T c, const TensorT<T>& a) {
    std::vector<T> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = c - a.data()[i];
    auto r = detail::make_output<T>(a.shape(), std::move(v), "rsub_scalar", {&a});
    if (r.tape) {
        auto ga = a.grad_buffer(), go = r.out.grad_buffer();
        r.tape->push([ga, go] {
            for (size_t i = 0; i < go->size(); ++i) (*ga)[i] -= (*go)[i];
        });
    }
    return r.out;
}

template <typename T>
TensorT<T> mul_scalar(const TensorT<T>& a, T c) {
    std::vector<T> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * c;
    auto r = detail::make_output<T>(a.shape(), std::move(v), "mul_scalar", {&a});
    if (r.tape) {
        auto ga = a.grad_buffer(), go = r.out.grad_buffer();
        r.tape->push([ga, go, c] {
            for (size_t i = 0; i < go->size(); ++i) (*ga)[i] += (*go)[i] * c;
        });
    }
    return r.out;
}

// ReLU with the subgradient at 0 fixed to 0.
template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
    std::vector<T> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::max(T(0), a.data()[i]);
    auto r = detail::make_output<T>(a.shape(), std::move(v), "relu", {&a});
    if (r.tape) {
        auto ga = a.grad_buffer(), go = r.out.grad_buffer();
        auto da = a.data_buffer();
        r.tape->push([ga, go, da] {
            for (size_t i = 0; i < go->size(); ++i)
                if ((*da)[i] > T(0)) (*ga)[i] += (*go)[i];
        });
    }
    return r.out;
}

template <typename T>
TensorT<T> exp(const TensorT<T>& a) {
    std::vector<T> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::exp(a.data()[i]);
    auto r = detail::make_output<T>(a.shape(), std::move(v), "exp", {&a});
    if (r.tape) {
        auto ga = a.grad_buffer(), go = r.out.grad_buffer();
        auto dout = r.out.data_buffer();
        r.tape->push([ga, go, dout] {
            for (size_t i = 0; i < go->size(); ++i)
                (*ga)[i] += (*go)[i] * (*dout)[i];
        });
    }
    return r.out;
}

template <typename T>
TensorT<T> square(const TensorT<T>& a) {
    std::vector<T> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * a.data()[i];
    auto r = detail::make_output<T>(a.shape(), std::move(v), "square", {&a});
    if (r.tape) {
        auto ga = a.grad_buffer(), go = r.out.grad_buffer();
        auto da = a.data_buffer();
        r.tape->push([ga, go, da] {
            for (size_t i = 0; i < go->size(); ++i)
                (*ga)[i] += (*go)[i] * T(2) * (*da)[i];
        });
    }
    return r.out;
}

template <typename T>
TensorT<T> sum(const TensorT<T>& a) {
    T acc = std::accumulate(a.data(), a.data() + a.size(), T(0));
    auto r = detail::make_output<T>({}, std::vector<T>{acc}, "sum", {&a});
    if (r.tape) {
        auto ga = a.grad_buffer(), go = r.out.grad_buffer();
        r.tape->push([ga, go] {
            for (size_t i = 0; i < ga->size(); ++i) (*ga)[i] += (*go)[0];
        });
    }
    return r.out;
}

template <typename T>
TensorT<T> mean(const TensorT<T>& a) {
    T acc = std::accumulate(a.data(), a.data() + a.size(), T(0));
    T inv = T(1) / static_cast<T>(a.size());
    auto r = detail::make_output<T>({}, std::vector<T>{acc * inv}, "mean", {&a});
    if (r.tape) {
        auto ga = a.grad_buffer(), go = r.out.grad_buffer();
        r.tape->push([ga, go, inv] {
            for (size_t i = 0; i < ga->size(); ++i) (*ga)[i] += (*go)[0] * inv;
        });
    }
    return r.out;
}

// matmul: [m,k] x [k,n] -> [m,n], or [m,k] x [k] -> [m].
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_rank(a, 2, "matmul", "lhs");
    const bool vec = b.shape().size() == 1;
    if (!vec) detail::require_rank(b, 2, "matmul", "rhs");
    const int m = a.dim(0), k = a.dim(1);
    const int bk = b.dim(0);
    const int n = vec ? 1 : b.dim(1);
    if (k != bk)
        throw DimensionError("matmul: inner axis mismatch, lhs " +
                             a.shape_str() + " vs rhs " + b.shape_str());
    std::vector<T> v(static_cast<size_t>(m) * n, T(0));
    const T* pa = a.data();
    const T* pb = b.data();
    for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
            const T aik = pa[i * k + kk];
            for (int j = 0; j < n; ++j) v[i * n + j] += aik * pb[kk * n + j];
        }
    std::vector<int> out_shape = vec ? std::vector<int>{m}
                                     : std::vector<int>{m, n};
    auto r = detail::make_output<T>(std::move(out_shape), std::move(v),
                                    "matmul", {&a, &b});
    if (r.tape) {
        auto ga = a.grad_buffer(), gb = b.grad_buffer(), go = r.out.grad_buffer();
        auto da = a.data_buffer(), db = b.data_buffer();
        r.tape->push([ga, gb, go, da, db, m, k, n] {
            if (ga) {  // dA = dOut * B^T
                for (int i = 0; i < m; ++i)
                    for (int kk = 0; kk < k; ++kk) {
                        T acc = T(0);
                        for (int j = 0; j < n; ++j)
                            acc += (*go)[i * n + j] * (*db)[kk * n + j];
                        (*ga)[i * k + kk] += acc;
                    }
            }
            if (gb) {  // dB = A^T * dOut
                for (int kk = 0; kk < k; ++kk)
                    for (int i = 0; i < m; ++i) {
                        const T aik = (*da)[i * k + kk];
                        for (int j = 0; j < n; ++j)
                            (*gb)[kk * n + j] += aik * (*go)[i * n + j];
                    }
            }
        });
    }
    return r.out;
}

namespace detail {

// Valid kernel-offset range so that the input index stays inside [0, extent).
inline std::pair<int, int> out_range(int kpos, int kextent, int pad, int stride,
                                     int in_extent, int out_extent) {
    // in = out*stride - pad + kpos must lie in [0, in_extent)
    int lo = 0;
    int shift = pad - kpos;
    if (shift > 0) lo = (shift + stride - 1) / stride;
    int hi = out_extent - 1;
    int top = in_extent - 1 + pad - kpos;
    if (top < 0) return {1, 0};  // empty
    hi = std::min(hi, top / stride);
    (void)kextent;
    return {lo, hi};
}

}  // namespace detail

// 2-D convolution with zero padding. input [Ci,H,W], kernel [Co,Ci,kh,kw],
// bias [Co]; output [Co,H',W'] with H' = floor((H + 2*pad - kh)/stride) + 1.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& kernel,
                  const TensorT<T>& bias, int stride, int pad) {
    detail::require_rank(input, 3, "conv2d", "input");
    detail::require_rank(kernel, 4, "conv2d", "kernel");
    detail::require_rank(bias, 1, "conv2d", "bias");
    const int ci = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int co = kernel.dim(0), kci = kernel.dim(1);
    const int kh = kernel.dim(2), kw = kernel.dim(3);
    if (kci != ci)
        throw DimensionError("conv2d: kernel input-channel axis " +
                             std::to_string(kci) + " does not match input channels " +
                             std::to_string(ci));
    if (bias.dim(0) != co)
        throw DimensionError("conv2d: bias axis 0 is " +
                             std::to_string(bias.dim(0)) +
                             ", expected output channels " + std::to_string(co));
    if (kh % 2 == 0 || kw % 2 == 0)
        throw UsageError("conv2d: kernel extents must be odd, got " +
                         std::to_string(kh) + "x" + std::to_string(kw));
    if (stride <= 0) throw UsageError("conv2d: stride must be positive");
    if (pad < 0) throw UsageError("conv2d: pad must be non-negative");
    if (h + 2 * pad < kh || w + 2 * pad < kw)
        throw DimensionError("conv2d: padded input smaller than kernel");

    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (w + 2 * pad - kw) / stride + 1;
    std::vector<T> v(static_cast<size_t>(co) * oh * ow);
    const T* pin = input.data();
    const T* pk = kernel.data();
    const T* pb = bias.data();

    for (int c = 0; c < co; ++c)
        std::fill(v.begin() + static_cast<size_t>(c) * oh * ow,
                  v.begin() + static_cast<size_t>(c + 1) * oh * ow, pb[c]);
    for (int c = 0; c < co; ++c) {
        T* out_plane = v.data() + static_cast<size_t>(c) * oh * ow;
        for (int ic = 0; ic < ci; ++ic) {
            const T* in_plane = pin + static_cast<size_t>(ic) * h * w;
            const T* kplane =
                pk + (static_cast<size_t>(c) * ci + ic) * kh * kw;
            for (int ki = 0; ki < kh; ++ki) {
                auto [y0, y1] = detail::out_range(ki, kh, pad, stride, h, oh);
                for (int kj = 0; kj < kw; ++kj) {
                    auto [x0, x1] = detail::out_range(kj, kw, pad, stride, w, ow);
                    const T kval = kplane[ki * kw + kj];
                    for (int y = y0; y <= y1; ++y) {
                        const T* in_row =
                            in_plane + (y * stride - pad + ki) * w - pad + kj;
                        T* out_row = out_plane + y * ow;
                        for (int x = x0; x <= x1; ++x)
                            out_row[x] += kval * in_row[x * stride];
                    }
                }
            }
        }
    }

    auto r = detail::make_output<T>({co, oh, ow}, std::move(v), "conv2d",
                                    {&input, &kernel, &bias});
    if (r.tape) {
        auto gin = input.grad_buffer(), gk = kernel.grad_buffer();
        auto gb = bias.grad_buffer(), go = r.out.grad_buffer();
        auto din = input.data_buffer(), dk = kernel.data_buffer();
        r.tape->push([gin, gk, gb, go, din, dk, ci, h, w, co, kh, kw, stride,
                      pad, oh, ow] {
            const T* pgo = go->data();
            if (gb) {
                for (int c = 0; c < co; ++c) {
                    T acc = T(0);
                    const T* plane = pgo + static_cast<size_t>(c) * oh * ow;
                    for (int i = 0; i < oh * ow; ++i) acc += plane[i];
                    (*gb)[c] += acc;
                }
            }
            if (gk) {
                const T* pin = din->data();
                for (int c = 0; c < co; ++c) {
                    const T* go_plane = pgo + static_cast<size_t>(c) * oh * ow;
                    for (int ic = 0; ic < ci; ++ic) {
                        const T* in_plane = pin + static_cast<size_t>(ic) * h * w;
                        T* gk_plane = gk->data() +
                                      (static_cast<size_t>(c) * ci + ic) * kh * kw;
                        for (int ki = 0; ki < kh; ++ki) {
                            auto [y0, y1] =
                                detail::out_range(ki, kh, pad, stride, h, oh);
                            for (int kj = 0; kj < kw; ++kj) {
                                auto [x0, x1] =
                                    detail::out_range(kj, kw, pad, stride, w, ow);
                                T acc = T(0);
                                for (int y = y0; y <= y1; ++y) {
                                    const T* in_row = in_plane +
                                                      (y * stride - pad + ki) * w -
                                                      pad + kj;
                                    const T* go_row = go_plane + y * ow;
                                    for (int x = x0; x <= x1; ++x)
                                        acc += go_row[x] * in_row[x * stride];
                                }
                                gk_plane[ki * kw + kj] += acc;
                            }
                        }
                    }
                }
            }
            if (gin) {
                const T* pk = dk->data();
                for (int c = 0; c < co; ++c) {
                    const T* go_plane = pgo + static_cast<size_t>(c) * oh * ow;
                    for (int ic = 0; ic < ci; ++ic) {
                        T* gin_plane = gin->data() + static_cast<size_t>(ic) * h * w;
                        const T* kplane =
                            pk + (static_cast<size_t>(c) * ci + ic) * kh * kw;
                        for (int ki = 0; ki < kh; ++ki) {
                            auto [y0, y1] =
                                detail::out_range(ki, kh, pad, stride, h, oh);
                            for (int kj = 0; kj < kw; ++kj) {
                                auto [x0, x1] =
                                    detail::out_range(kj, kw, pad, stride, w, ow);
                                const T kval = kplane[ki * kw + kj];
                                for (int y = y0; y <= y1; ++y) {
                                    T* gin_row = gin_plane +
                                                 (y * stride - pad + ki) * w -
                                                 pad + kj;
                                    const T* go_row = go_plane + y * ow;
                                    for (int x = x0; x <= x1; ++x)
                                        gin_row[x * stride] += kval * go_row[x];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return r.out;
}

// Global average pool [C,H,W] -> [C].
template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& a) {
    detail::require_rank(a, 3, "global_avg_pool", "input");
    const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
    const T inv = T(1) / static_cast<T>(h * w);
    std::vector<T> v(c, T(0));
    for (int i = 0; i < c; ++i) {
        const T* plane = a.data() + static_cast<size_t>(i) * h * w;
        T acc = T(0);
        for (int j = 0; j < h * w; ++j) acc += plane[j];
        v[i] = acc * inv;
    }
    auto r = detail::make_output<T>({c}, std::move(v), "global_avg_pool", {&a});
    if (r.tape) {
        auto ga = a.grad_buffer(), go = r.out.grad_buffer();
        r.tape->push([ga, go, c, h, w, inv] {
            for (int i = 0; i < c; ++i) {
                const T g = (*go)[i] * inv;
                T* plane = ga->data() + static_cast<size_t>(i) * h * w;
                for (int j = 0; j < h * w; ++j) plane[j] += g;
            }
        });
    }
    return r.out;
}

// Nearest-neighbor 2x upsample [C,H,W] -> [C,2H,2W].
template <typename T>
TensorT<T> upsample_nearest2x(const TensorT<T>& a) {
    detail::require_rank(a, 3, "upsample_nearest2x", "input");
    const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
    std::vector<T> v(static_cast<size_t>(c) * 4 * h * w);
    for (int i = 0; i < c; ++i) {
        const T* in_plane = a.data() + static_cast<size_t>(i) * h * w;
        T* out_plane = v.data() + static_cast<size_t>(i) * 4 * h * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const T val = in_plane[y * w + x];
                T* o = out_plane + (2 * y) * (2 * w) + 2 * x;
                o[0] = val;
                o[1] = val;
                o[2 * w] = val;
                o[2 * w + 1] = val;
            }
    }
    auto r = detail::make_output<T>({c, 2 * h, 2 * w}, std::move(v),
                                    "upsample_nearest2x", {&a});
    if (r.tape) {
        auto ga = a.grad_buffer(), go = r.out.grad_buffer();
        r.tape->push([ga, go, c, h, w] {
            for (int i = 0; i < c; ++i) {
                T* gin_plane = ga->data() + static_cast<size_t>(i) * h * w;
                const T* go_plane = go->data() + static_cast<size_t>(i) * 4 * h * w;
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x) {
                        const T* g = go_plane + (2 * y) * (2 * w) + 2 * x;
                        gin_plane[y * w + x] +=
                            g[0] + g[1] + g[2 * w] + g[2 * w + 1];
                    }
            }
        });
    }
    return r.out;
}

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, std::vector<int> new_shape) {
    std::vector<T> v(a.data(), a.data() + a.size());
    size_t prod = 1;
    for (int d : new_shape) prod *= static_cast<size_t>(d);
    if (prod != a.size())
        throw DimensionError("reshape: new shape does not preserve element count");
    auto r = detail::make_output<T>(std::move(new_shape), std::move(v),
                                    "reshape", {&a});
    if (r.tape) {
        auto ga = a.grad_buffer(), go = r.out.grad_buffer();
        r.tape->push([ga, go] {
            for (size_t i = 0; i < go->size(); ++i) (*ga)[i] += (*go)[i];
        });
    }
    return r.out;
}

// Extracts row i of a [m,n] matrix as an [n] vector.
template <typename T>
TensorT<T> row(const TensorT<T>& a, int i) {
    detail::require_rank(a, 2, "row", "input");
    const int m = a.dim(0), n = a.dim(1);
    if (i < 0 || i >= m)
        throw UsageError("row: index " + std::to_string(i) +
                         " out of range for " + a.shape_str());
    std::vector<T> v(a.data() + static_cast<size_t>(i) * n,
                     a.data() + static_cast<size_t>(i + 1) * n);
    auto r = detail::make_output<T>({n}, std::move(v), "row", {&a});
    if (r.tape) {
        auto ga = a.grad_buffer(), go = r.out.grad_buffer();
        r.tape->push([ga, go, i, n] {
            for (int j = 0; j < n; ++j)
                (*ga)[static_cast<size_t>(i) * n + j] += (*go)[j];
        });
    }
    return r.out;
}

// Stacks equal-length vectors into an [m,n] matrix.
template <typename T>
TensorT<T> stack_rows(const std::vector<TensorT<T>>& rows) {
    if (rows.empty()) throw UsageError("stack_rows: empty input");
    const int n = rows[0].dim(0);
    for (const auto& t : rows) {
        detail::require_rank(t, 1, "stack_rows", "row");
        if (t.dim(0) != n)
            throw DimensionError("stack_rows: row length mismatch");
    }
    const int m = static_cast<int>(rows.size());
    std::vector<T> v;
    v.reserve(static_cast<size_t>(m) * n);
    for (const auto& t : rows) v.insert(v.end(), t.data(), t.data() + n);

    std::vector<const TensorT<T>*> ptrs;
    for (const auto& t : rows) ptrs.push_back(&t);
    // make_output needs an initializer_list; handle tracking manually here.
    detail::ensure_finite(v, "stack_rows");
    TensorT<T> out = TensorT<T>::from({m, n}, std::move(v));
    TapeT<T>* tape = TapeT<T>::active();
    bool any = false;
    for (auto* p : ptrs)
        if (p->tracked()) any = true;
    if (tape && any) {
        out.enable_grad();
        std::vector<typename TensorT<T>::Buffer> gs;
        for (auto* p : ptrs) {
            gs.push_back(p->grad_buffer());
            tape->note_grad(p->grad_buffer());
        }
        tape->note_grad(out.grad_buffer());
        auto go = out.grad_buffer();
        tape->push([gs, go, n] {
            for (size_t i = 0; i < gs.size(); ++i) {
                if (!gs[i]) continue;
                for (int j = 0; j < n; ++j)
                    (*gs[i])[j] += (*go)[i * static_cast<size_t>(n) + j];
            }
        });
    }
    return out;
}

// Mean of the table rows selected by ids: [V,td] x ids -> [td].
template <typename T>
TensorT<T> embed_mean(const TensorT<T>& table, const std::vector<int>& ids) {
    detail::require_rank(table, 2, "embed_mean", "table");
    if (ids.empty()) throw UsageError("embed_mean: empty id list");
    const int v_rows = table.dim(0), td = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= v_rows)
            throw UsageError("embed_mean: id " + std::to_string(id) +
                             " out of range for vocab of " +
                             std::to_string(v_rows));
    const T inv = T(1) / static_cast<T>(ids.size());
    std::vector<T> v(td, T(0));
    for (int id : ids) {
        const T* rowp = table.data() + static_cast<size_t>(id) * td;
        for (int j = 0; j < td; ++j) v[j] += rowp[j];
    }
    for (int j = 0; j < td; ++j) v[j] *= inv;
    auto r = detail::make_output<T>({td}, std::move(v), "embed_mean", {&table});
    if (r.tape) {
        auto gt = table.grad_buffer(), go = r.out.grad_buffer();
        auto ids_copy = ids;
        r.tape->push([gt, go, ids_copy, td, inv] {
            for (int id : ids_copy)
                for (int j = 0; j < td; ++j)
                    (*gt)[static_cast<size_t>(id) * td + j] += (*go)[j] * inv;
        });
    }
    return r.out;
}

// W [out,in] * x [in] + b [out].
template <typename T>
TensorT<T> affine(const TensorT<T>& weight, const TensorT<T>& bias,
                  const TensorT<T>& x) {
    return add(matmul(weight, x), bias);
}

// ---------------------------------------------------------------------------
// Central-difference gradient oracle: (f(x + h e_i) - f(x - h e_i)) / 2h.
// f must be a pure tensor-to-scalar function. Evaluation suppresses tape
// recording so the oracle stays independent of reverse accumulation.
// ---------------------------------------------------------------------------

template <typename T, typename F>
TensorT<T> finite_diff_grad(F&& f, const TensorT<T>& at, T h) {
    if (!(h > T(0))) throw UsageError("finite_diff_grad: h must be positive");
    typename TapeT<T>::NoGrad guard;
    TensorT<T> grad = TensorT<T>::zeros(at.shape());
    std::vector<T> base(at.data(), at.data() + at.size());
    for (size_t i = 0; i < base.size(); ++i) {
        std::vector<T> bumped = base;
        bumped[i] = base[i] + h;
        TensorT<T> hi = f(TensorT<T>::from(at.shape(), std::move(bumped)));
        if (hi.size() != 1)
            throw UsageError("finite_diff_grad: f must return a scalar");
        bumped = base;
        bumped[i] = base[i] - h;
        TensorT<T> lo = f(TensorT<T>::from(at.shape(), std::move(bumped)));
        if (lo.size() != 1)
            throw UsageError("finite_diff_grad: f must return a scalar");
        grad.data()[i] = (hi.item() - lo.item()) / (T(2) * h);
    }
    return grad;
}

}  // namespace clad
