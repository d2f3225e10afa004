#pragma once

#include <array>
#include <functional>
#include <initializer_list>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vesselnet/tensor.hpp"

namespace vesselnet {

// Handle into a Tape; cheap to copy, invalid until assigned.
struct Var {
    std::int32_t id = -1;
    bool valid() const { return id >= 0; }
};

// Define-by-run reverse-mode tape. Every produced tensor is one node; the
// creation order is the topological order, so backward() is a single reverse
// sweep that visits each node exactly once. Gradients accumulate additively,
// which makes fan-out correct for free.
template <typename T>
class Tape {
public:
    using BackFn = std::function<void(Tape&, const TensorT<T>&)>;

    Var leaf(TensorT<T> value, std::string name = {}) {
        return emit(std::move(value), {}, nullptr, "leaf", std::move(name));
    }

    Var emit(TensorT<T> value, std::vector<Var> inputs, BackFn back,
             const char* op = "op", std::string name = {}) {
#ifndef NDEBUG
        if (!value.all_finite())
            throw NumericError(std::string("non-finite output of op '") + op + "'");
#endif
        for (Var v : inputs) check(v);
        Var out{static_cast<std::int32_t>(values_.size())};
        values_.push_back(std::move(value));
        nodes_.push_back(Node{std::move(inputs), std::move(back), op, std::move(name)});
        return out;
    }

    const TensorT<T>& value(Var v) const {
        check(v);
        return values_[v.id];
    }

    std::size_t size() const { return values_.size(); }
    const char* op_name(std::size_t i) const { return nodes_[i].op; }
    const std::string& var_name(std::size_t i) const { return nodes_[i].name; }

    // Root must be scalar-shaped. After the sweep, grad(v) is d(root)/d(v);
    // vars never touched by a path to root read back as zeros.
    void backward(Var root) {
        check(root);
        if (!values_[root.id].shape.scalar())
            throw ContractError("backward root must have shape (1,1,1,1), got " +
                                values_[root.id].shape.str());
        grads_.assign(values_.size(), TensorT<T>{});
        grads_[root.id] = TensorT<T>::scalar(T(1));
        for (std::int32_t i = root.id; i >= 0; --i) {
            if (grads_[i].empty()) continue;
            if (nodes_[i].back) {
                nodes_[i].back(*this, grads_[i]);
                // gout for node i is dead once its backward ran; parameters are
                // leaves so their slots are never released here.
                grads_[i] = TensorT<T>{};
            }
        }
        ran_backward_ = true;
    }

    // Zero tensor when the var is off every path to the root.
    TensorT<T> grad(Var v) const {
        check(v);
        if (!ran_backward_) throw ContractError("grad() before backward()");
        if (grads_[v.id].empty()) return TensorT<T>(values_[v.id].shape);
        return grads_[v.id];
    }

    void accumulate_grad(Var v, const TensorT<T>& g) {
        check(v);
        if (g.shape != values_[v.id].shape)
            throw ShapeError("gradient shape " + g.shape.str() + " != value shape " +
                             values_[v.id].shape.str());
        TensorT<T>& slot = grads_[v.id];
        if (slot.empty()) {
            slot = g;
        } else {
            for (std::size_t i = 0; i < slot.data.size(); ++i) slot.data[i] += g.data[i];
        }
    }

    // First tensor on the tape containing a non-finite value, for diagnostics.
    std::optional<std::pair<std::size_t, std::string>> first_non_finite() const {
        for (std::size_t i = 0; i < values_.size(); ++i) {
            if (!values_[i].all_finite()) {
                std::string label = nodes_[i].op;
                if (!nodes_[i].name.empty()) label += " '" + nodes_[i].name + "'";
                return std::make_pair(i, label);
            }
        }
        return std::nullopt;
    }

private:
    struct Node {
        std::vector<Var> inputs;
        BackFn back;
        const char* op;
        std::string name;
    };

    void check(Var v) const {
        if (!v.valid() || v.id >= static_cast<std::int32_t>(values_.size()))
            throw ContractError("invalid tape var");
    }

    std::vector<TensorT<T>> values_;
    std::vector<TensorT<T>> grads_;
    std::vector<Node> nodes_;
    bool ran_backward_ = false;
};

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
    if (!(a.shape == b.shape))
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape.str() + " vs " +
                         b.shape.str());
}
}  // namespace detail

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
    const auto& av = tape.value(a);
    const auto& bv = tape.value(b);
    detail::require_same_shape(av, bv, "add");
    TensorT<T> out(av.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] + bv.data[i];
    return tape.emit(std::move(out), {a, b},
                     [a, b](Tape<T>& t, const TensorT<T>& g) {
                         t.accumulate_grad(a, g);
                         t.accumulate_grad(b, g);
                     },
                     "add");
}

template <typename T>
Var sub(Tape<T>& tape, Var a, Var b) {
    const auto& av = tape.value(a);
    const auto& bv = tape.value(b);
    detail::require_same_shape(av, bv, "sub");
    TensorT<T> out(av.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] - bv.data[i];
    return tape.emit(std::move(out), {a, b},
                     [a, b](Tape<T>& t, const TensorT<T>& g) {
                         t.accumulate_grad(a, g);
                         TensorT<T> neg(g.shape);
                         for (std::size_t i = 0; i < g.data.size(); ++i) neg.data[i] = -g.data[i];
                         t.accumulate_grad(b, neg);
                     },
                     "sub");
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
    const auto& av = tape.value(a);
    const auto& bv = tape.value(b);
    detail::require_same_shape(av, bv, "mul");
    TensorT<T> out(av.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] * bv.data[i];
    return tape.emit(std::move(out), {a, b},
                     [a, b](Tape<T>& t, const TensorT<T>& g) {
                         const auto& avv = t.value(a);
                         const auto& bvv = t.value(b);
                         TensorT<T> ga(g.shape), gb(g.shape);
                         for (std::size_t i = 0; i < g.data.size(); ++i) {
                             ga.data[i] = g.data[i] * bvv.data[i];
                             gb.data[i] = g.data[i] * avv.data[i];
                         }
                         t.accumulate_grad(a, ga);
                         t.accumulate_grad(b, gb);
                     },
                     "mul");
}

template <typename T>
Var scalar_mul(Tape<T>& tape, Var a, T s) {
    const auto& av = tape.value(a);
    TensorT<T> out(av.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] * s;
    return tape.emit(std::move(out), {a},
                     [a, s](Tape<T>& t, const TensorT<T>& g) {
                         TensorT<T> ga(g.shape);
                         for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] = g.data[i] * s;
                         t.accumulate_grad(a, ga);
                     },
                     "scalar_mul");
}

template <typename T>
Var clamp(Tape<T>& tape, Var a, T lo, T hi) {
    if (!(lo < hi)) throw ContractError("clamp: lo must be < hi");
    const auto& av = tape.value(a);
    TensorT<T> out(av.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = std::min(hi, std::max(lo, av.data[i]));
    return tape.emit(std::move(out), {a},
                     [a, lo, hi](Tape<T>& t, const TensorT<T>& g) {
                         const auto& avv = t.value(a);
                         TensorT<T> ga(g.shape);
                         for (std::size_t i = 0; i < g.data.size(); ++i) {
                             bool inside = avv.data[i] >= lo && avv.data[i] <= hi;
                             ga.data[i] = inside ? g.data[i] : T(0);
                         }
                         t.accumulate_grad(a, ga);
                     },
                     "clamp");
}

// ---------------------------------------------------------------------------
// Reductions. Axes are named 0=n, 1=c, 2=h, 3=w; reduced dims keep size 1.
// ---------------------------------------------------------------------------

namespace detail {
inline std::array<bool, 4> axis_mask(std::initializer_list<int> axes) {
    std::array<bool, 4> mask{false, false, false, false};
    for (int a : axes) {
        if (a < 0 || a > 3) throw AxisError("axis out of range: " + std::to_string(a));
        if (mask[a]) throw AxisError("duplicate axis: " + std::to_string(a));
        mask[a] = true;
    }
    return mask;
}
}  // namespace detail

template <typename T>
Var reduce_sum(Tape<T>& tape, Var a, std::initializer_list<int> axes) {
    auto mask = detail::axis_mask(axes);
    const auto& av = tape.value(a);
    Shape in = av.shape;
    Shape out_shape{mask[0] ? 1 : in.n, mask[1] ? 1 : in.c, mask[2] ? 1 : in.h,
                    mask[3] ? 1 : in.w};
    TensorT<T> out(out_shape);
    for (int n = 0; n < in.n; ++n)
        for (int c = 0; c < in.c; ++c)
            for (int h = 0; h < in.h; ++h)
                for (int w = 0; w < in.w; ++w)
                    out.at(mask[0] ? 0 : n, mask[1] ? 0 : c, mask[2] ? 0 : h,
                           mask[3] ? 0 : w) += av.at(n, c, h, w);
    return tape.emit(std::move(out), {a},
                     [a, mask, in](Tape<T>& t, const TensorT<T>& g) {
                         TensorT<T> ga(in);
                         for (int n = 0; n < in.n; ++n)
                             for (int c = 0; c < in.c; ++c)
                                 for (int h = 0; h < in.h; ++h)
                                     for (int w = 0; w < in.w; ++w)
                                         ga.at(n, c, h, w) =
                                             g.at(mask[0] ? 0 : n, mask[1] ? 0 : c,
                                                  mask[2] ? 0 : h, mask[3] ? 0 : w);
                         t.accumulate_grad(a, ga);
                     },
                     "reduce_sum");
}

template <typename T>
Var reduce_mean(Tape<T>& tape, Var a, std::initializer_list<int> axes) {
    auto mask = detail::axis_mask(axes);
    const Shape in = tape.value(a).shape;
    std::int64_t count = 1;
    if (mask[0]) count *= in.n;
    if (mask[1]) count *= in.c;
    if (mask[2]) count *= in.h;
    if (mask[3]) count *= in.w;
    Var s = reduce_sum(tape, a, axes);
    return scalar_mul(tape, s, T(1) / static_cast<T>(count));
}

template <typename T>
Var sum_all(Tape<T>& tape, Var a) {
    return reduce_sum(tape, a, {0, 1, 2, 3});
}

template <typename T>
Var mean_all(Tape<T>& tape, Var a) {
    return reduce_mean(tape, a, {0, 1, 2, 3});
}

}  // namespace vesselnet
