#pragma once

#include <memory>
#include <optional>

#include "vesselnet/conv_kernel.hpp"
#include "vesselnet/rng.hpp"
#include "vesselnet/tape.hpp"

namespace vesselnet {

enum class Mode { kTrain, kEval };

struct DropBlockConfig {
    float drop_rate = 0.15f;
    int block_size = 7;

    bool operator==(const DropBlockConfig&) const = default;

    void validate() const {
        if (drop_rate < 0.0f || drop_rate >= 1.0f)
            throw ConfigError("dropblock: drop_rate must be in [0, 1)");
        if (block_size < 1 || block_size % 2 == 0)
            throw ConfigError("dropblock: block_size must be odd and >= 1");
    }
};

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, weight (out_c, in_c, k, k), optional bias.
// ---------------------------------------------------------------------------

template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var weight, std::optional<Var> bias, int stride,
           int pad) {
    const auto& xv = tape.value(x);
    const auto& wv = tape.value(weight);
    if (wv.shape.h != wv.shape.w) throw ShapeError("conv2d: kernel must be square");
    if (wv.shape.c != xv.shape.c)
        throw ShapeError("conv2d: weight expects " + std::to_string(wv.shape.c) +
                         " input channels, tensor has " + std::to_string(xv.shape.c));
    if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
    const T* bias_ptr = nullptr;
    if (bias) {
        const auto& bv = tape.value(*bias);
        if (bv.shape.c != wv.shape.n || bv.shape.n != 1 || bv.shape.h != 1 || bv.shape.w != 1)
            throw ShapeError("conv2d: bias must have shape (1, out_c, 1, 1)");
        bias_ptr = bv.data.data();
    }
    conv_detail::ConvDims d(xv.shape, wv.shape, stride, pad);
    TensorT<T> out(Shape{xv.shape.n, d.out_c, d.oh, d.ow});
    conv_detail::conv2d_forward(xv, wv, bias_ptr, stride, pad, out);

    std::vector<Var> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    return tape.emit(std::move(out), std::move(inputs),
                     [x, weight, bias, stride, pad](Tape<T>& t, const TensorT<T>& g) {
                         const auto& xvv = t.value(x);
                         const auto& wvv = t.value(weight);
                         TensorT<T> gx(xvv.shape);
                         TensorT<T> gw(wvv.shape);
                         TensorT<T> gb;
                         if (bias) gb = TensorT<T>(t.value(*bias).shape);
                         conv_detail::conv2d_backward(xvv, wvv, stride, pad, g, &gx, &gw,
                                                      bias ? &gb : nullptr);
                         t.accumulate_grad(x, gx);
                         t.accumulate_grad(weight, gw);
                         if (bias) t.accumulate_grad(*bias, gb);
                     },
                     "conv2d");
}

// "same" padding for odd kernels, stride 1
template <typename T>
Var conv2d_same(Tape<T>& tape, Var x, Var weight, std::optional<Var> bias) {
    const int k = tape.value(weight).shape.h;
    return conv2d(tape, x, weight, bias, 1, k / 2);
}

// ---------------------------------------------------------------------------
// conv2d_transpose, k=3 stride=2: insert zeros at odd grid sites to reach
// (2h, 2w), then run a same-padded stride-1 conv. Output is exactly (2h, 2w).
// ---------------------------------------------------------------------------

template <typename T>
Var zero_insert2x(Tape<T>& tape, Var x) {
    const auto& xv = tape.value(x);
    const Shape in = xv.shape;
    TensorT<T> out(Shape{in.n, in.c, 2 * in.h, 2 * in.w});
    for (int n = 0; n < in.n; ++n)
        for (int c = 0; c < in.c; ++c) {
            const T* src = xv.plane_ptr(n, c);
            T* dst = out.plane_ptr(n, c);
            for (int i = 0; i < in.h; ++i)
                for (int j = 0; j < in.w; ++j)
                    dst[std::int64_t(2 * i) * 2 * in.w + 2 * j] = src[std::int64_t(i) * in.w + j];
        }
    return tape.emit(std::move(out), {x},
                     [x, in](Tape<T>& t, const TensorT<T>& g) {
                         TensorT<T> gx(in);
                         for (int n = 0; n < in.n; ++n)
                             for (int c = 0; c < in.c; ++c) {
                                 const T* gp = g.plane_ptr(n, c);
                                 T* dst = gx.plane_ptr(n, c);
                                 for (int i = 0; i < in.h; ++i)
                                     for (int j = 0; j < in.w; ++j)
                                         dst[std::int64_t(i) * in.w + j] =
                                             gp[std::int64_t(2 * i) * 2 * in.w + 2 * j];
                             }
                         t.accumulate_grad(x, gx);
                     },
                     "zero_insert2x");
}

template <typename T>
Var conv2d_transpose2x(Tape<T>& tape, Var x, Var weight, std::optional<Var> bias) {
    if (tape.value(weight).shape.h != 3)
        throw ContractError("conv2d_transpose2x: kernel must be 3x3");
    Var z = zero_insert2x(tape, x);
    return conv2d(tape, z, weight, bias, 1, 1);
}

// ---------------------------------------------------------------------------
// maxpool2: 2x2 stride-2 max; gradient routed to the argmax, ties broken by
// first element in row-major scan order.
// ---------------------------------------------------------------------------

template <typename T>
Var maxpool2(Tape<T>& tape, Var x) {
    const auto& xv = tape.value(x);
    const Shape in = xv.shape;
    if (in.h % 2 != 0 || in.w % 2 != 0)
        throw ShapeError("maxpool2: spatial dims must be even, got " + in.str());
    const Shape os{in.n, in.c, in.h / 2, in.w / 2};
    TensorT<T> out(os);
    auto argmax = std::make_shared<std::vector<std::int64_t>>(os.numel());
    std::int64_t oi = 0;
    for (int n = 0; n < in.n; ++n)
        for (int c = 0; c < in.c; ++c) {
            const T* p = xv.plane_ptr(n, c);
            const std::int64_t base = (std::int64_t(n) * in.c + c) * in.h * in.w;
            for (int i = 0; i < os.h; ++i)
                for (int j = 0; j < os.w; ++j, ++oi) {
                    std::int64_t i00 = std::int64_t(2 * i) * in.w + 2 * j;
                    std::int64_t idx = i00;
                    T best = p[i00];
                    const std::int64_t cand[3] = {i00 + 1, i00 + in.w, i00 + in.w + 1};
                    for (std::int64_t cc : cand)
                        if (p[cc] > best) { best = p[cc]; idx = cc; }
                    out.data[oi] = best;
                    (*argmax)[oi] = base + idx;
                }
        }
    return tape.emit(std::move(out), {x},
                     [x, argmax, in](Tape<T>& t, const TensorT<T>& g) {
                         TensorT<T> gx(in);
                         for (std::size_t i = 0; i < g.data.size(); ++i)
                             gx.data[(*argmax)[i]] += g.data[i];
                         t.accumulate_grad(x, gx);
                     },
                     "maxpool2");
}

// ---------------------------------------------------------------------------
// group_norm: per (sample, group) normalization with population variance.
// ---------------------------------------------------------------------------

template <typename T>
Var group_norm(Tape<T>& tape, Var x, Var gamma, Var beta, int groups, T eps) {
    const auto& xv = tape.value(x);
    const Shape in = xv.shape;
    if (groups < 1 || in.c % groups != 0)
        throw ConfigError("group_norm: channels " + std::to_string(in.c) +
                          " not divisible by groups " + std::to_string(groups));
    const auto& gv = tape.value(gamma);
    const auto& bv = tape.value(beta);
    if (gv.shape.c != in.c || bv.shape.c != in.c)
        throw ShapeError("group_norm: gamma/beta must be per-channel");

    const int cpg = in.c / groups;
    const std::int64_t plane = std::int64_t(in.h) * in.w;
    const std::int64_t m = cpg * plane;

    auto mean = std::make_shared<std::vector<T>>(std::size_t(in.n) * groups);
    auto istd = std::make_shared<std::vector<T>>(std::size_t(in.n) * groups);
    TensorT<T> out(in);
    for (int n = 0; n < in.n; ++n)
        for (int g = 0; g < groups; ++g) {
            const T* base = xv.plane_ptr(n, g * cpg);
            double s = 0, s2 = 0;
            for (std::int64_t i = 0; i < m; ++i) {
                double v = static_cast<double>(base[i]);
                s += v;
                s2 += v * v;
            }
            double mu = s / double(m);
            double var = s2 / double(m) - mu * mu;
            if (var < 0) var = 0;
            T inv = T(1) / std::sqrt(static_cast<T>(var) + eps);
            (*mean)[std::size_t(n) * groups + g] = static_cast<T>(mu);
            (*istd)[std::size_t(n) * groups + g] = inv;
            T* o = out.plane_ptr(n, g * cpg);
            for (int ch = 0; ch < cpg; ++ch) {
                const T ga = gv.data[std::size_t(g) * cpg + ch];
                const T be = bv.data[std::size_t(g) * cpg + ch];
                const T* xi = base + ch * plane;
                T* oi = o + ch * plane;
                const T mu_t = static_cast<T>(mu);
                for (std::int64_t i = 0; i < plane; ++i)
                    oi[i] = ga * ((xi[i] - mu_t) * inv) + be;
            }
        }

    return tape.emit(
        std::move(out), {x, gamma, beta},
        [x, gamma, beta, groups, cpg, plane, m, mean, istd, in](Tape<T>& t,
                                                                const TensorT<T>& g) {
            const auto& xvv = t.value(x);
            const auto& gvv = t.value(gamma);
            TensorT<T> gx(in);
            TensorT<T> ggamma(t.value(gamma).shape);
            TensorT<T> gbeta(t.value(beta).shape);
            for (int n = 0; n < in.n; ++n)
                for (int grp = 0; grp < groups; ++grp) {
                    const T mu = (*mean)[std::size_t(n) * groups + grp];
                    const T inv = (*istd)[std::size_t(n) * groups + grp];
                    const T* xb = xvv.plane_ptr(n, grp * cpg);
                    const T* gb = g.plane_ptr(n, grp * cpg);
                    // S1 = sum(dxhat), S2 = sum(dxhat * xhat) over the group
                    double s1 = 0, s2 = 0;
                    for (int ch = 0; ch < cpg; ++ch) {
                        const T ga = gvv.data[std::size_t(grp) * cpg + ch];
                        const T* xi = xb + ch * plane;
                        const T* gi = gb + ch * plane;
                        for (std::int64_t i = 0; i < plane; ++i) {
                            double dxh = double(gi[i]) * double(ga);
                            double xh = double(xi[i] - mu) * double(inv);
                            s1 += dxh;
                            s2 += dxh * xh;
                        }
                    }
                    T* gxb = gx.plane_ptr(n, grp * cpg);
                    for (int ch = 0; ch < cpg; ++ch) {
                        const int c = grp * cpg + ch;
                        const T ga = gvv.data[c];
                        const T* xi = xb + ch * plane;
                        const T* gi = gb + ch * plane;
                        T* go = gxb + ch * plane;
                        double dg = 0, db = 0;
                        for (std::int64_t i = 0; i < plane; ++i) {
                            T xh = (xi[i] - mu) * inv;
                            T dxh = gi[i] * ga;
                            go[i] = inv * (dxh - static_cast<T>((s1 + double(xh) * s2) / double(m)));
                            dg += double(gi[i]) * double(xh);
                            db += double(gi[i]);
                        }
                        ggamma.data[c] += static_cast<T>(dg);
                        gbeta.data[c] += static_cast<T>(db);
                    }
                }
            t.accumulate_grad(x, gx);
            t.accumulate_grad(gamma, ggamma);
            t.accumulate_grad(beta, gbeta);
        },
        "group_norm");
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Var sigmoid(Tape<T>& tape, Var x) {
    const auto& xv = tape.value(x);
    TensorT<T> out(xv.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = sigmoid_scalar(xv.data[i]);
    return tape.emit(std::move(out), {x},
                     [x](Tape<T>& t, const TensorT<T>& g) {
                         const auto& xvv = t.value(x);
                         TensorT<T> gx(g.shape);
                         for (std::size_t i = 0; i < g.data.size(); ++i) {
                             T s = sigmoid_scalar(xvv.data[i]);
                             gx.data[i] = g.data[i] * s * (T(1) - s);
                         }
                         t.accumulate_grad(x, gx);
                     },
                     "sigmoid");
}

template <typename T>
Var silu(Tape<T>& tape, Var x) {
    const auto& xv = tape.value(x);
    TensorT<T> out(xv.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        T v = xv.data[i];
        out.data[i] = v * sigmoid_scalar(v);
    }
    return tape.emit(std::move(out), {x},
                     [x](Tape<T>& t, const TensorT<T>& g) {
                         const auto& xvv = t.value(x);
                         TensorT<T> gx(g.shape);
                         for (std::size_t i = 0; i < g.data.size(); ++i) {
                             T v = xvv.data[i];
                             T s = sigmoid_scalar(v);
                             gx.data[i] = g.data[i] * s * (T(1) + v * (T(1) - s));
                         }
                         t.accumulate_grad(x, gx);
                     },
                     "silu");
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
    const auto& xv = tape.value(x);
    TensorT<T> out(xv.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = xv.data[i] > T(0) ? xv.data[i] : T(0);
    return tape.emit(std::move(out), {x},
                     [x](Tape<T>& t, const TensorT<T>& g) {
                         const auto& xvv = t.value(x);
                         TensorT<T> gx(g.shape);
                         for (std::size_t i = 0; i < g.data.size(); ++i)
                             gx.data[i] = xvv.data[i] > T(0) ? g.data[i] : T(0);
                         t.accumulate_grad(x, gx);
                     },
                     "relu");
}

// ---------------------------------------------------------------------------
// Channel plumbing
// ---------------------------------------------------------------------------

template <typename T>
Var concat_channels(Tape<T>& tape, Var a, Var b) {
    const auto& av = tape.value(a);
    const auto& bv = tape.value(b);
    if (av.shape.n != bv.shape.n || av.shape.h != bv.shape.h || av.shape.w != bv.shape.w)
        throw ShapeError("concat_channels: spatial/batch mismatch " + av.shape.str() +
                         " vs " + bv.shape.str());
    const Shape os{av.shape.n, av.shape.c + bv.shape.c, av.shape.h, av.shape.w};
    TensorT<T> out(os);
    const std::int64_t plane = os.plane();
    for (int n = 0; n < os.n; ++n) {
        std::memcpy(out.plane_ptr(n, 0), av.plane_ptr(n, 0),
                    sizeof(T) * std::size_t(av.shape.c) * plane);
        std::memcpy(out.plane_ptr(n, av.shape.c), bv.plane_ptr(n, 0),
                    sizeof(T) * std::size_t(bv.shape.c) * plane);
    }
    const int ca = av.shape.c, cb = bv.shape.c;
    return tape.emit(std::move(out), {a, b},
                     [a, b, ca, cb](Tape<T>& t, const TensorT<T>& g) {
                         const Shape sa = t.value(a).shape;
                         const Shape sb = t.value(b).shape;
                         TensorT<T> ga(sa), gb(sb);
                         const std::int64_t plane = sa.plane();
                         for (int n = 0; n < sa.n; ++n) {
                             std::memcpy(ga.plane_ptr(n, 0), g.plane_ptr(n, 0),
                                         sizeof(T) * std::size_t(ca) * plane);
                             std::memcpy(gb.plane_ptr(n, 0), g.plane_ptr(n, ca),
                                         sizeof(T) * std::size_t(cb) * plane);
                         }
                         t.accumulate_grad(a, ga);
                         t.accumulate_grad(b, gb);
                     },
                     "concat_channels");
}

template <typename T>
Var channel_mean(Tape<T>& tape, Var x) {
    const auto& xv = tape.value(x);
    const Shape in = xv.shape;
    TensorT<T> out(Shape{in.n, 1, in.h, in.w});
    const std::int64_t plane = in.plane();
    const T invc = T(1) / static_cast<T>(in.c);
    for (int n = 0; n < in.n; ++n) {
        T* o = out.plane_ptr(n, 0);
        for (int c = 0; c < in.c; ++c) {
            const T* p = xv.plane_ptr(n, c);
            if (c == 0)
                for (std::int64_t i = 0; i < plane; ++i) o[i] = p[i];
            else
                for (std::int64_t i = 0; i < plane; ++i) o[i] += p[i];
        }
        for (std::int64_t i = 0; i < plane; ++i) o[i] *= invc;
    }
    return tape.emit(std::move(out), {x},
                     [x, in, invc](Tape<T>& t, const TensorT<T>& g) {
                         TensorT<T> gx(in);
                         const std::int64_t plane = in.plane();
                         for (int n = 0; n < in.n; ++n) {
                             const T* gp = g.plane_ptr(n, 0);
                             for (int c = 0; c < in.c; ++c) {
                                 T* d = gx.plane_ptr(n, c);
                                 for (std::int64_t i = 0; i < plane; ++i)
                                     d[i] = gp[i] * invc;
                             }
                         }
                         t.accumulate_grad(x, gx);
                     },
                     "channel_mean");
}

// Per-pixel max over channels; ties go to the lowest channel index.
template <typename T>
Var channel_max(Tape<T>& tape, Var x) {
    const auto& xv = tape.value(x);
    const Shape in = xv.shape;
    TensorT<T> out(Shape{in.n, 1, in.h, in.w});
    const std::int64_t plane = in.plane();
    auto arg = std::make_shared<std::vector<std::int32_t>>(std::size_t(in.n) * plane);
    for (int n = 0; n < in.n; ++n) {
        T* o = out.plane_ptr(n, 0);
        std::int32_t* am = arg->data() + std::int64_t(n) * plane;
        const T* p0 = xv.plane_ptr(n, 0);
        for (std::int64_t i = 0; i < plane; ++i) { o[i] = p0[i]; am[i] = 0; }
        for (int c = 1; c < in.c; ++c) {
            const T* p = xv.plane_ptr(n, c);
            for (std::int64_t i = 0; i < plane; ++i)
                if (p[i] > o[i]) { o[i] = p[i]; am[i] = c; }
        }
    }
    return tape.emit(std::move(out), {x},
                     [x, in, arg](Tape<T>& t, const TensorT<T>& g) {
                         TensorT<T> gx(in);
                         const std::int64_t plane = in.plane();
                         for (int n = 0; n < in.n; ++n) {
                             const T* gp = g.plane_ptr(n, 0);
                             const std::int32_t* am = arg->data() + std::int64_t(n) * plane;
                             for (std::int64_t i = 0; i < plane; ++i)
                                 gx.plane_ptr(n, am[i])[i] += gp[i];
                         }
                         t.accumulate_grad(x, gx);
                     },
                     "channel_max");
}

// x (n,c,h,w) * gate (n,1,h,w), gate broadcast over channels
template <typename T>
Var mul_gate(Tape<T>& tape, Var x, Var gate) {
    const auto& xv = tape.value(x);
    const auto& gv = tape.value(gate);
    if (gv.shape.c != 1 || gv.shape.n != xv.shape.n || gv.shape.h != xv.shape.h ||
        gv.shape.w != xv.shape.w)
        throw ShapeError("mul_gate: gate must be (n,1,h,w) matching x spatially");
    const Shape in = xv.shape;
    TensorT<T> out(in);
    const std::int64_t plane = in.plane();
    for (int n = 0; n < in.n; ++n) {
        const T* gp = gv.plane_ptr(n, 0);
        for (int c = 0; c < in.c; ++c) {
            const T* p = xv.plane_ptr(n, c);
            T* o = out.plane_ptr(n, c);
            for (std::int64_t i = 0; i < plane; ++i) o[i] = p[i] * gp[i];
        }
    }
    return tape.emit(std::move(out), {x, gate},
                     [x, gate, in](Tape<T>& t, const TensorT<T>& g) {
                         const auto& xvv = t.value(x);
                         const auto& gvv = t.value(gate);
                         TensorT<T> gx(in);
                         TensorT<T> gg(gvv.shape);
                         const std::int64_t plane = in.plane();
                         for (int n = 0; n < in.n; ++n) {
                             const T* gatep = gvv.plane_ptr(n, 0);
                             T* ggp = gg.plane_ptr(n, 0);
                             for (int c = 0; c < in.c; ++c) {
                                 const T* xp = xvv.plane_ptr(n, c);
                                 const T* gp = g.plane_ptr(n, c);
                                 T* gxp = gx.plane_ptr(n, c);
                                 for (std::int64_t i = 0; i < plane; ++i) {
                                     gxp[i] = gp[i] * gatep[i];
                                     ggp[i] += gp[i] * xp[i];
                                 }
                             }
                         }
                         t.accumulate_grad(x, gx);
                         t.accumulate_grad(gate, gg);
                     },
                     "mul_gate");
}

// ---------------------------------------------------------------------------
// DropBlock: contiguous square masking with survivor rescaling. One mask per
// sample, shared across channels. Identity in eval mode or at drop_rate 0.
// ---------------------------------------------------------------------------

template <typename T>
Var dropblock(Tape<T>& tape, Var x, const DropBlockConfig& cfg, Mode mode, Rng& rng) {
    cfg.validate();
    if (mode == Mode::kEval || cfg.drop_rate == 0.0f) return x;
    const auto& xv = tape.value(x);
    const Shape in = xv.shape;
    const int bs = cfg.block_size;
    if (bs > in.h || bs > in.w)
        throw ConfigError("dropblock: block_size " + std::to_string(bs) +
                          " exceeds spatial dims " + in.str());
    const std::int64_t plane = in.plane();
    const int r = bs / 2;
    const double hw = double(in.h) * in.w;
    const double valid = double(in.h - bs + 1) * double(in.w - bs + 1);
    const double gamma = double(cfg.drop_rate) / (double(bs) * bs) * hw / valid;

    // scaled mask per sample: 0 where dropped, count/count_nonzero elsewhere
    auto mask = std::make_shared<std::vector<T>>(std::size_t(in.n) * plane, T(1));
    for (int n = 0; n < in.n; ++n) {
        T* mp = mask->data() + std::int64_t(n) * plane;
        for (int ci = r; ci < in.h - r; ++ci)
            for (int cj = r; cj < in.w - r; ++cj)
                if (rng.uniform_double() < gamma)
                    for (int i = ci - r; i <= ci + r; ++i)
                        std::fill(mp + std::int64_t(i) * in.w + cj - r,
                                  mp + std::int64_t(i) * in.w + cj + r + 1, T(0));
        std::int64_t kept = 0;
        for (std::int64_t i = 0; i < plane; ++i) kept += (mp[i] != T(0));
        const T scale = kept > 0 ? static_cast<T>(hw / double(kept)) : T(0);
        for (std::int64_t i = 0; i < plane; ++i) mp[i] *= scale;
    }

    TensorT<T> out(in);
    for (int n = 0; n < in.n; ++n) {
        const T* mp = mask->data() + std::int64_t(n) * plane;
        for (int c = 0; c < in.c; ++c) {
            const T* p = xv.plane_ptr(n, c);
            T* o = out.plane_ptr(n, c);
            for (std::int64_t i = 0; i < plane; ++i) o[i] = p[i] * mp[i];
        }
    }
    return tape.emit(std::move(out), {x},
                     [x, mask, in](Tape<T>& t, const TensorT<T>& g) {
                         TensorT<T> gx(in);
                         const std::int64_t plane = in.plane();
                         for (int n = 0; n < in.n; ++n) {
                             const T* mp = mask->data() + std::int64_t(n) * plane;
                             for (int c = 0; c < in.c; ++c) {
                                 const T* gp = g.plane_ptr(n, c);
                                 T* gxp = gx.plane_ptr(n, c);
                                 for (std::int64_t i = 0; i < plane; ++i)
                                     gxp[i] = gp[i] * mp[i];
                             }
                         }
                         t.accumulate_grad(x, gx);
                     },
                     "dropblock");
}

}  // namespace vesselnet
