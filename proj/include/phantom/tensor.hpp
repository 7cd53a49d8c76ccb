#pragma once

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// Each op records its inputs and a backward closure on the output node when
// gradient recording is enabled and at least one input requires a gradient.
// backward() walks the recorded graph in reverse topological order and then
// releases it, so a graph can be differentiated once.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <type_traits>
#include <utility>
#include <vector>

#include <cblas.h>

#include "phantom/errors.hpp"

namespace phantom {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape)
{
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

inline bool& grad_mode_flag()
{
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until a gradient reaches this node
    bool requires_grad = false;
    bool retain_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward;

    bool is_leaf() const { return !backward; }

    std::vector<T>& ensure_grad()
    {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad;
    }
};

template <class T>
void check_finite(std::span<const T> values, const char* where)
{
    // Branch-free exponent test so the scan vectorises.
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    constexpr Bits exponent = static_cast<Bits>(sizeof(T) == 4 ? 0x7f800000ull : 0x7ff0000000000000ull);
    Bits bad = 0;
    for (auto v : values) {
        Bits b;
        std::memcpy(&b, &v, sizeof b);
        bad |= static_cast<Bits>((b & exponent) == exponent);
    }
    if (bad) throw NumericError(std::string("non-finite value produced by ") + where);
}

template <class T>
class Tensor {
public:
    using Node = TensorNode<T>;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : node_(std::make_shared<Node>())
    {
        if (shape_numel(shape) != values.size()) {
            throw DimensionError("tensor data length " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        check_finite<T>(values, "tensor construction");
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false)
    {
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false)
    {
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false)
    {
        return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim() const { return node_->shape.size(); }
    std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const T> data() const { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }

    // In-place mutation is reserved for leaves (parameter updates between steps).
    std::span<T> mutable_data()
    {
        if (!node_->is_leaf()) throw ContractError("mutable_data() on a non-leaf tensor");
        return node_->value;
    }

    T item() const
    {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    T operator[](std::size_t i) const { return node_->value[i]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag)
    {
        if (!node_->is_leaf()) throw ContractError("set_requires_grad() on a non-leaf tensor");
        node_->requires_grad = flag;
    }
    void retain_grad() { node_->retain_grad = true; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() { node_->grad.clear(); }

    Tensor detach() const { return Tensor(node_->shape, node_->value, false); }

    template <class U>
    Tensor<U> cast() const
    {
        std::vector<U> out(node_->value.begin(), node_->value.end());
        return Tensor<U>(node_->shape, std::move(out), false);
    }

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::vector<Tensor<T>> inputs,
                      std::function<void(TensorNode<T>&)> backward, const char* op)
{
    check_finite<T>(values, op);
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->op = op;
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        node->parents.reserve(inputs.size());
        for (const auto& in : inputs) node->parents.push_back(in.node());
        node->backward = std::move(backward);
    }
    return Tensor<T>(std::move(node));
}

inline std::size_t normalize_axis(long axis, std::size_t rank)
{
    long r = static_cast<long>(rank);
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    }
    return static_cast<std::size_t>(axis);
}

struct BroadcastPlan {
    Shape out;
    std::vector<std::size_t> stride_a;
    std::vector<std::size_t> stride_b;
};

inline BroadcastPlan broadcast_plan(const Shape& a, const Shape& b)
{
    BroadcastPlan plan;
    std::size_t rank = std::max(a.size(), b.size());
    plan.out.assign(rank, 1);
    plan.stride_a.assign(rank, 0);
    plan.stride_b.assign(rank, 0);
    std::size_t sa = 1;
    std::size_t sb = 1;
    for (std::size_t k = 0; k < rank; ++k) {
        std::size_t d = rank - 1 - k;
        std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
        std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
        if (da != db && da != 1 && db != 1) {
            throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        plan.out[d] = std::max(da, db);
        plan.stride_a[d] = da == 1 ? 0 : sa;
        plan.stride_b[d] = db == 1 ? 0 : sb;
        sa *= da;
        sb *= db;
    }
    return plan;
}

// Visits every output element with the matching flat offsets into a and b.
template <class F>
void for_each_broadcast(const BroadcastPlan& plan, F&& f)
{
    const std::size_t rank = plan.out.size();
    if (rank == 0) {
        f(std::size_t{0}, std::size_t{0}, std::size_t{0});
        return;
    }
    const std::size_t inner = plan.out[rank - 1];
    const std::size_t as = plan.stride_a[rank - 1];
    const std::size_t bs = plan.stride_b[rank - 1];
    const std::size_t total = shape_numel(plan.out);
    if (total == 0) return;
    std::vector<std::size_t> idx(rank, 0);
    std::size_t ia = 0;
    std::size_t ib = 0;
    for (std::size_t base = 0; base < total; base += inner) {
        for (std::size_t j = 0; j < inner; ++j) f(base + j, ia + j * as, ib + j * bs);
        for (long d = static_cast<long>(rank) - 2; d >= 0; --d) {
            ++idx[d];
            ia += plan.stride_a[d];
            ib += plan.stride_b[d];
            if (idx[d] < plan.out[d]) break;
            ia -= plan.stride_a[d] * plan.out[d];
            ib -= plan.stride_b[d] * plan.out[d];
            idx[d] = 0;
        }
    }
}

// C[M,N] += op(A) op(B), row-major; op(A) is M x K, op(B) is K x N.
template <class T>
void gemm_accumulate(bool trans_a, bool trans_b, const T* A, const T* B, T* C, std::size_t M, std::size_t N,
                     std::size_t K)
{
    if (M == 0 || N == 0 || K == 0) return;
    const auto ta = trans_a ? CblasTrans : CblasNoTrans;
    const auto tb = trans_b ? CblasTrans : CblasNoTrans;
    const auto lda = static_cast<blasint>(trans_a ? M : K);
    const auto ldb = static_cast<blasint>(trans_b ? K : N);
    const auto m = static_cast<blasint>(M);
    const auto n = static_cast<blasint>(N);
    const auto k = static_cast<blasint>(K);
    if constexpr (std::is_same_v<T, float>) {
        cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, 1.0f, A, lda, B, ldb, 1.0f, C, n);
    } else {
        static_assert(std::is_same_v<T, double>, "tensors are float or double");
        cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, 1.0, A, lda, B, ldb, 1.0, C, n);
    }
}

template <class T>
void gemm_accumulate(const T* A, const T* B, T* C, std::size_t M, std::size_t N, std::size_t K)
{
    gemm_accumulate(false, false, A, B, C, M, N, K);
}

template <class T>
void transpose_into(const T* src, T* dst, std::size_t rows, std::size_t cols)
{
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

// Splits a shape around an axis into (outer, axis extent, inner).
inline void axis_extents(const Shape& shape, std::size_t axis, std::size_t& outer, std::size_t& mid,
                         std::size_t& inner)
{
    outer = 1;
    inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];
    mid = shape[axis];
    for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise kernels (numpy-style broadcasting)

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b)
{
    if (a.shape() == b.shape()) {
        std::vector<T> out(a.numel());
        const auto& av = a.values();
        const auto& bv = b.values();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
        return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
            for (auto& p : self.parents) {
                if (!p->requires_grad) continue;
                auto& g = p->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
        }, "add");
    }
    auto plan = detail::broadcast_plan(a.shape(), b.shape());
    std::vector<T> out(shape_numel(plan.out));
    const auto& av = a.values();
    const auto& bv = b.values();
    detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = av[ia] + bv[ib]; });
    return detail::make_result<T>(plan.out, std::move(out), {a, b}, [plan](TensorNode<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        T* ga = pa->requires_grad ? pa->ensure_grad().data() : nullptr;
        T* gb = pb->requires_grad ? pb->ensure_grad().data() : nullptr;
        const auto& g = self.grad;
        detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
            if (ga) ga[ia] += g[o];
            if (gb) gb[ib] += g[o];
        });
    }, "add");
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b)
{
    auto plan = detail::broadcast_plan(a.shape(), b.shape());
    std::vector<T> out(shape_numel(plan.out));
    const auto& av = a.values();
    const auto& bv = b.values();
    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    } else {
        detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = av[ia] * bv[ib]; });
    }
    return detail::make_result<T>(plan.out, std::move(out), {a, b}, [plan](TensorNode<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        T* ga = pa->requires_grad ? pa->ensure_grad().data() : nullptr;
        T* gb = pb->requires_grad ? pb->ensure_grad().data() : nullptr;
        const auto& av = pa->value;
        const auto& bv = pb->value;
        const auto& g = self.grad;
        detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
            if (ga) ga[ia] += g[o] * bv[ib];
            if (gb) gb[ib] += g[o] * av[ia];
        });
    }, "mul");
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor)
{
    return mul(a, Tensor<T>::scalar(factor));
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b)
{
    return add(a, scale(b, T(-1)));
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T value)
{
    return add(a, Tensor<T>::scalar(value));
}

template <class T>
Tensor<T> silu(const Tensor<T>& x)
{
    const auto& xv = x.values();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] / (T(1) + std::exp(-xv[i]));
    return detail::make_result<T>(x.shape(), std::move(out), {x}, [](TensorNode<T>& self) {
        auto& p = self.parents[0];
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            T v = p->value[i];
            T s = T(1) / (T(1) + std::exp(-v));
            g[i] += self.grad[i] * s * (T(1) + v * (T(1) - s));
        }
    }, "silu");
}

// tanh approximation
template <class T>
Tensor<T> gelu(const Tensor<T>& x)
{
    constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T kA = T(0.044715);
    const auto& xv = x.values();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        T v = xv[i];
        out[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
    }
    return detail::make_result<T>(x.shape(), std::move(out), {x}, [](TensorNode<T>& self) {
        auto& p = self.parents[0];
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            T v = p->value[i];
            T th = std::tanh(kC * (v + kA * v * v * v));
            T d = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * kC * (T(1) + T(3) * kA * v * v);
            g[i] += self.grad[i] * d;
        }
    }, "gelu");
}

// ---------------------------------------------------------------------------
// Shape kernels

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape)
{
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
    if (shape == a.shape()) return a;
    return detail::make_result<T>(std::move(shape), a.values(), {a}, [](TensorNode<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }, "reshape");
}

template <class T>
Tensor<T> permute(const Tensor<T>& a, std::vector<std::size_t> perm)
{
    const Shape& in = a.shape();
    const std::size_t rank = in.size();
    if (perm.size() != rank) throw DimensionError("permutation rank mismatch");
    {
        auto sorted = perm;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < rank; ++i)
            if (sorted[i] != i) throw DimensionError("invalid permutation");
    }
    std::vector<std::size_t> in_stride(rank, 1);
    for (long d = static_cast<long>(rank) - 2; d >= 0; --d) in_stride[d] = in_stride[d + 1] * in[d + 1];
    Shape out_shape(rank);
    detail::BroadcastPlan plan;  // reuse the strided walker: a = output (dense), b = input (permuted)
    plan.out.resize(rank);
    plan.stride_a.resize(rank);
    plan.stride_b.resize(rank);
    std::size_t s = 1;
    for (std::size_t d = 0; d < rank; ++d) out_shape[d] = in[perm[d]];
    for (long d = static_cast<long>(rank) - 1; d >= 0; --d) {
        plan.out[d] = out_shape[d];
        plan.stride_a[d] = s;
        plan.stride_b[d] = in_stride[perm[d]];
        s *= out_shape[d];
    }
    const auto& av = a.values();
    std::vector<T> out(av.size());
    detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t, std::size_t ib) { out[o] = av[ib]; });
    return detail::make_result<T>(out_shape, std::move(out), {a}, [plan](TensorNode<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t, std::size_t ib) { g[ib] += self.grad[o]; });
    }, "permute");
}

/// Swaps the last two axes.
template <class T>
Tensor<T> transpose(const Tensor<T>& a)
{
    if (a.dim() < 2) throw DimensionError("transpose needs rank >= 2");
    std::vector<std::size_t> perm(a.dim());
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[a.dim() - 1], perm[a.dim() - 2]);
    return permute(a, perm);
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, long axis_arg)
{
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    const Shape& ref = parts.front().shape();
    const std::size_t axis = detail::normalize_axis(axis_arg, ref.size());
    Shape out_shape = ref;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        if (p.dim() != ref.size()) throw DimensionError("concat rank mismatch");
        for (std::size_t d = 0; d < ref.size(); ++d) {
            if (d != axis && p.shape()[d] != ref[d]) {
                throw DimensionError("concat shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(ref));
            }
        }
        out_shape[axis] += p.shape()[axis];
    }
    if (parts.size() == 1) return parts.front();
    std::size_t outer, mid, inner;
    detail::axis_extents(out_shape, axis, outer, mid, inner);
    std::vector<T> out(shape_numel(out_shape));
    std::vector<std::size_t> widths;
    for (const auto& p : parts) widths.push_back(p.shape()[axis] * inner);
    const std::size_t row = mid * inner;
    for (std::size_t o = 0; o < outer; ++o) {
        std::size_t off = o * row;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            const T* src = parts[k].values().data() + o * widths[k];
            std::copy(src, src + widths[k], out.begin() + off);
            off += widths[k];
        }
    }
    return detail::make_result<T>(out_shape, std::move(out), parts, [widths, outer, row](TensorNode<T>& self) {
        for (std::size_t o = 0; o < outer; ++o) {
            std::size_t off = o * row;
            for (std::size_t k = 0; k < self.parents.size(); ++k) {
                auto& p = self.parents[k];
                if (p->requires_grad) {
                    auto& g = p->ensure_grad();
                    T* dst = g.data() + o * widths[k];
                    const T* src = self.grad.data() + off;
                    for (std::size_t i = 0; i < widths[k]; ++i) dst[i] += src[i];
                }
                off += widths[k];
            }
        }
    }, "concat");
}

template <class T>
Tensor<T> slice(const Tensor<T>& a, long axis_arg, std::size_t start, std::size_t length)
{
    const std::size_t axis = detail::normalize_axis(axis_arg, a.dim());
    if (start + length > a.shape()[axis]) {
        throw DimensionError("slice [" + std::to_string(start) + "," + std::to_string(start + length) +
                             ") out of range for " + shape_str(a.shape()));
    }
    if (start == 0 && length == a.shape()[axis]) return a;
    std::size_t outer, mid, inner;
    detail::axis_extents(a.shape(), axis, outer, mid, inner);
    Shape out_shape = a.shape();
    out_shape[axis] = length;
    std::vector<T> out(outer * length * inner);
    const auto& av = a.values();
    for (std::size_t o = 0; o < outer; ++o) {
        const T* src = av.data() + (o * mid + start) * inner;
        std::copy(src, src + length * inner, out.begin() + o * length * inner);
    }
    return detail::make_result<T>(out_shape, std::move(out), {a}, [=](TensorNode<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o) {
            T* dst = g.data() + (o * mid + start) * inner;
            const T* src = self.grad.data() + o * length * inner;
            for (std::size_t i = 0; i < length * inner; ++i) dst[i] += src[i];
        }
    }, "slice");
}

template <class T>
std::vector<Tensor<T>> split(const Tensor<T>& a, long axis_arg, const std::vector<std::size_t>& sizes)
{
    const std::size_t axis = detail::normalize_axis(axis_arg, a.dim());
    std::size_t total = 0;
    for (auto s : sizes) total += s;
    if (total != a.shape()[axis]) {
        throw DimensionError("split sizes sum to " + std::to_string(total) + " but axis extent is " +
                             std::to_string(a.shape()[axis]));
    }
    std::vector<Tensor<T>> parts;
    parts.reserve(sizes.size());
    std::size_t start = 0;
    for (auto s : sizes) {
        parts.push_back(slice(a, static_cast<long>(axis), start, s));
        start += s;
    }
    return parts;
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Supports [..., M, K] x [K, N] (shared right operand) and batched
/// [B..., M, K] x [B..., K, N] with identical batch prefixes.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b)
{
    if (a.dim() < 2 || b.dim() < 2) throw DimensionError("matmul needs rank >= 2 operands");
    const std::size_t K = a.shape().back();
    const std::size_t M = a.shape()[a.dim() - 2];
    if (b.shape()[b.dim() - 2] != K) {
        throw DimensionError("matmul inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t N = b.shape().back();
    if (b.dim() == 2) {
        const std::size_t R = a.numel() / K;
        Shape out_shape = a.shape();
        out_shape.back() = N;
        std::vector<T> out(R * N, T(0));
        detail::gemm_accumulate(a.values().data(), b.values().data(), out.data(), R, N, K);
        return detail::make_result<T>(out_shape, std::move(out), {a, b}, [R, N, K](TensorNode<T>& self) {
            auto& pa = self.parents[0];
            auto& pb = self.parents[1];
            const T* g = self.grad.data();
            if (pa->requires_grad) {
                detail::gemm_accumulate(false, true, g, pb->value.data(), pa->ensure_grad().data(), R, K, N);
            }
            if (pb->requires_grad) {
                detail::gemm_accumulate(true, false, pa->value.data(), g, pb->ensure_grad().data(), K, N, R);
            }
        }, "matmul");
    }
    if (a.dim() != b.dim() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
        throw DimensionError("batched matmul prefix mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t B = a.numel() / (M * K);
    Shape out_shape = a.shape();
    out_shape.back() = N;
    std::vector<T> out(B * M * N, T(0));
    for (std::size_t i = 0; i < B; ++i) {
        detail::gemm_accumulate(a.values().data() + i * M * K, b.values().data() + i * K * N, out.data() + i * M * N, M,
                                N, K);
    }
    return detail::make_result<T>(out_shape, std::move(out), {a, b}, [B, M, N, K](TensorNode<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        for (std::size_t i = 0; i < B; ++i) {
            const T* g = self.grad.data() + i * M * N;
            if (pa->requires_grad) {
                detail::gemm_accumulate(false, true, g, pb->value.data() + i * K * N,
                                        pa->ensure_grad().data() + i * M * K, M, K, N);
            }
            if (pb->requires_grad) {
                detail::gemm_accumulate(true, false, pa->value.data() + i * M * K, g,
                                        pb->ensure_grad().data() + i * K * N, K, N, M);
            }
        }
    }, "matmul");
}

// ---------------------------------------------------------------------------
// Normalization and reductions

template <class T>
Tensor<T> softmax(const Tensor<T>& logits, long axis_arg)
{
    const std::size_t axis = detail::normalize_axis(axis_arg, logits.dim());
    std::size_t outer, mid, inner;
    detail::axis_extents(logits.shape(), axis, outer, mid, inner);
    if (mid == 0) throw DimensionError("softmax over an empty axis");
    const auto& x = logits.values();
    std::vector<T> y(x.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * mid * inner + in;
            T mx = x[base];
            for (std::size_t k = 1; k < mid; ++k) mx = std::max(mx, x[base + k * inner]);
            T sum = 0;
            for (std::size_t k = 0; k < mid; ++k) {
                T e = std::exp(x[base + k * inner] - mx);
                y[base + k * inner] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (std::size_t k = 0; k < mid; ++k) y[base + k * inner] *= inv;
        }
    }
    return detail::make_result<T>(logits.shape(), y, {logits}, [y, outer, mid, inner](TensorNode<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        const auto& gy = self.grad;
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * mid * inner + in;
                T dot = 0;
                for (std::size_t k = 0; k < mid; ++k) dot += gy[base + k * inner] * y[base + k * inner];
                for (std::size_t k = 0; k < mid; ++k) {
                    const std::size_t i = base + k * inner;
                    g[i] += y[i] * (gy[i] - dot);
                }
            }
        }
    }, "softmax");
}

namespace detail {

template <class T>
Tensor<T> layer_norm_impl(const Tensor<T>& x, const Tensor<T>* scale, const Tensor<T>* shift, T eps)
{
    if (x.dim() == 0 || x.shape().back() == 0) throw DimensionError("layer_norm over a zero-length axis");
    const std::size_t D = x.shape().back();
    const std::size_t rows = x.numel() / D;
    if (scale && (scale->numel() != D || shift->numel() != D)) {
        throw DimensionError("layer_norm affine parameters must have " + std::to_string(D) + " elements");
    }
    const auto& xv = x.values();
    std::vector<T> xhat(xv.size());
    std::vector<T> rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * D;
        T mean = 0;
        for (std::size_t d = 0; d < D; ++d) mean += row[d];
        mean /= T(D);
        T var = 0;
        for (std::size_t d = 0; d < D; ++d) var += (row[d] - mean) * (row[d] - mean);
        var /= T(D);
        rstd[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t d = 0; d < D; ++d) xhat[r * D + d] = (row[d] - mean) * rstd[r];
    }
    std::vector<T> out = xhat;
    std::vector<Tensor<T>> inputs{x};
    if (scale) {
        const auto& sv = scale->values();
        const auto& bv = shift->values();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t d = 0; d < D; ++d) out[r * D + d] = xhat[r * D + d] * sv[d] + bv[d];
        inputs.push_back(*scale);
        inputs.push_back(*shift);
    }
    const bool affine = scale != nullptr;
    return make_result<T>(x.shape(), std::move(out), inputs,
                          [xhat = std::move(xhat), rstd = std::move(rstd), rows, D, affine](TensorNode<T>& self) {
        const auto& g = self.grad;
        const T* sv = affine ? self.parents[1]->value.data() : nullptr;
        if (affine) {
            auto& ps = self.parents[1];
            auto& pb = self.parents[2];
            if (ps->requires_grad) {
                auto& gs = ps->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t d = 0; d < D; ++d) gs[d] += g[r * D + d] * xhat[r * D + d];
            }
            if (pb->requires_grad) {
                auto& gb = pb->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t d = 0; d < D; ++d) gb[d] += g[r * D + d];
            }
        }
        auto& px = self.parents[0];
        if (!px->requires_grad) return;
        auto& gx = px->ensure_grad();
        std::vector<T> gs(D);
        for (std::size_t r = 0; r < rows; ++r) {
            T mean_g = 0;
            T mean_gx = 0;
            for (std::size_t d = 0; d < D; ++d) {
                gs[d] = affine ? g[r * D + d] * sv[d] : g[r * D + d];
                mean_g += gs[d];
                mean_gx += gs[d] * xhat[r * D + d];
            }
            mean_g /= T(D);
            mean_gx /= T(D);
            for (std::size_t d = 0; d < D; ++d)
                gx[r * D + d] += rstd[r] * (gs[d] - mean_g - xhat[r * D + d] * mean_gx);
        }
    }, "layer_norm");
}

}  // namespace detail

/// Normalizes over the last axis, without an affine transform.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps)
{
    return detail::layer_norm_impl<T>(x, nullptr, nullptr, eps);
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift, T eps)
{
    return detail::layer_norm_impl<T>(x, &scale, &shift, eps);
}

template <class T>
Tensor<T> mean(const Tensor<T>& a)
{
    if (a.numel() == 0) throw DimensionError("mean of an empty tensor");
    T s = 0;
    for (auto v : a.values()) s += v;
    const T n = T(a.numel());
    return detail::make_result<T>(Shape{}, {s / n}, {a}, [n](TensorNode<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        const T v = self.grad[0] / n;
        for (auto& x : g) x += v;
    }, "mean");
}

/// Mean over one axis; the axis is removed from the result.
template <class T>
Tensor<T> mean(const Tensor<T>& a, long axis_arg)
{
    const std::size_t axis = detail::normalize_axis(axis_arg, a.dim());
    std::size_t outer, mid, inner;
    detail::axis_extents(a.shape(), axis, outer, mid, inner);
    if (mid == 0) throw DimensionError("mean over an empty axis");
    Shape out_shape = a.shape();
    out_shape.erase(out_shape.begin() + static_cast<long>(axis));
    std::vector<T> out(outer * inner, T(0));
    const auto& av = a.values();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < mid; ++k)
            for (std::size_t in = 0; in < inner; ++in) out[o * inner + in] += av[(o * mid + k) * inner + in];
    const T n = T(mid);
    for (auto& v : out) v /= n;
    return detail::make_result<T>(out_shape, std::move(out), {a}, [outer, mid, inner, n](TensorNode<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t k = 0; k < mid; ++k)
                for (std::size_t in = 0; in < inner; ++in)
                    g[(o * mid + k) * inner + in] += self.grad[o * inner + in] / n;
    }, "mean");
}

template <class T>
Tensor<T> sum(const Tensor<T>& a)
{
    return scale(mean(a), T(a.numel()));
}

/// Mean of squared differences.
template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b)
{
    if (a.shape() != b.shape()) {
        throw DimensionError("mse shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    if (a.numel() == 0) throw DimensionError("mse of empty tensors");
    const auto& av = a.values();
    const auto& bv = b.values();
    T s = 0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        T d = av[i] - bv[i];
        s += d * d;
    }
    const T n = T(av.size());
    return detail::make_result<T>(Shape{}, {s / n}, {a, b}, [n](TensorNode<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const T k = T(2) * self.grad[0] / n;
        T* ga = pa->requires_grad ? pa->ensure_grad().data() : nullptr;
        T* gb = pb->requires_grad ? pb->ensure_grad().data() : nullptr;
        for (std::size_t i = 0; i < pa->value.size(); ++i) {
            const T d = k * (pa->value[i] - pb->value[i]);
            if (ga) ga[i] += d;
            if (gb) gb[i] -= d;
        }
    }, "mse");
}

// ---------------------------------------------------------------------------
// Reverse pass

/// Populates .grad on every requires_grad leaf reachable from a scalar loss,
/// then releases the recorded graph.
template <class T>
void backward(const Tensor<T>& loss)
{
    if (loss.numel() != 1) throw ContractError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;

    using Node = TensorNode<T>;
    std::vector<Node*> order;
    std::vector<std::shared_ptr<Node>> keep_alive;  // clearing parents below must not free pending nodes
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            const auto& parent = node->parents[next++];
            Node* p = parent.get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                keep_alive.push_back(parent);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->is_leaf()) continue;
        if (!node->grad.empty()) node->backward(*node);
        node->backward = nullptr;
        node->parents.clear();
        if (!node->retain_grad) {
            node->grad.clear();
            node->grad.shrink_to_fit();
        }
    }
}

}  // namespace phantom
