#pragma once

#include <cstring>
#include <vector>

#include "vesselnet/common.hpp"
#include "vesselnet/tensor.hpp"

// Plain-loop im2col + register-blocked GEMM. The microkernel keeps a 4x32
// accumulator tile live across the K loop so the compiler can hold it in
// vector registers; per-element accumulation order is fixed, which keeps
// results bitwise identical for any thread count.

namespace vesselnet::conv_detail {

inline constexpr int kTileCols = 32;

// out[r][j] = sum_k A[r][k] * B[k][j] (+ bias[r]), r < rows, j < cols.
// A rows are contiguous length-K slices at a_stride; B rows at b_stride.
template <typename T>
void gemm_tiles(const T* A, std::int64_t a_stride, const T* B, std::int64_t b_stride,
                const T* bias, T* out, std::int64_t out_stride, int rows, int K,
                int cols) {
    int r = 0;
    for (; r + 4 <= rows; r += 4) {
        const T* a0 = A + std::int64_t(r) * a_stride;
        const T* a1 = a0 + a_stride;
        const T* a2 = a1 + a_stride;
        const T* a3 = a2 + a_stride;
        T* o0 = out + std::int64_t(r) * out_stride;
        T* o1 = o0 + out_stride;
        T* o2 = o1 + out_stride;
        T* o3 = o2 + out_stride;
        const T b0 = bias ? bias[r] : T(0);
        const T b1 = bias ? bias[r + 1] : T(0);
        const T b2 = bias ? bias[r + 2] : T(0);
        const T b3 = bias ? bias[r + 3] : T(0);
        int j = 0;
        for (; j + kTileCols <= cols; j += kTileCols) {
            T acc0[kTileCols] = {};
            T acc1[kTileCols] = {};
            T acc2[kTileCols] = {};
            T acc3[kTileCols] = {};
            const T* bp = B + j;
            for (int k = 0; k < K; ++k, bp += b_stride) {
                const T w0 = a0[k], w1 = a1[k], w2 = a2[k], w3 = a3[k];
                for (int u = 0; u < kTileCols; ++u) {
                    const T c = bp[u];
                    acc0[u] += w0 * c;
                    acc1[u] += w1 * c;
                    acc2[u] += w2 * c;
                    acc3[u] += w3 * c;
                }
            }
            for (int u = 0; u < kTileCols; ++u) {
                o0[j + u] = acc0[u] + b0;
                o1[j + u] = acc1[u] + b1;
                o2[j + u] = acc2[u] + b2;
                o3[j + u] = acc3[u] + b3;
            }
        }
        for (; j < cols; ++j) {
            T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
            const T* bp = B + j;
            for (int k = 0; k < K; ++k, bp += b_stride) {
                s0 += a0[k] * *bp;
                s1 += a1[k] * *bp;
                s2 += a2[k] * *bp;
                s3 += a3[k] * *bp;
            }
            o0[j] = s0 + b0;
            o1[j] = s1 + b1;
            o2[j] = s2 + b2;
            o3[j] = s3 + b3;
        }
    }
    for (; r < rows; ++r) {
        const T* a0 = A + std::int64_t(r) * a_stride;
        T* o0 = out + std::int64_t(r) * out_stride;
        const T b0 = bias ? bias[r] : T(0);
        int j = 0;
        for (; j + kTileCols <= cols; j += kTileCols) {
            T acc0[kTileCols] = {};
            const T* bp = B + j;
            for (int k = 0; k < K; ++k, bp += b_stride) {
                const T w0 = a0[k];
                for (int u = 0; u < kTileCols; ++u) acc0[u] += w0 * bp[u];
            }
            for (int u = 0; u < kTileCols; ++u) o0[j + u] = acc0[u] + b0;
        }
        for (; j < cols; ++j) {
            T s0 = 0;
            const T* bp = B + j;
            for (int k = 0; k < K; ++k, bp += b_stride) s0 += a0[k] * *bp;
            o0[j] = s0 + b0;
        }
    }
}

struct ConvDims {
    int in_c, h, w;
    int out_c, k, stride, pad;
    int oh, ow;

    ConvDims(const Shape& x, const Shape& wshape, int stride_, int pad_)
        : in_c(x.c), h(x.h), w(x.w), out_c(wshape.n), k(wshape.h), stride(stride_),
          pad(pad_) {
        oh = (h + 2 * pad - k) / stride + 1;
        ow = (w + 2 * pad - k) / stride + 1;
        if (oh < 1 || ow < 1)
            throw ShapeError("conv2d: kernel larger than padded input");
    }
    int patch() const { return in_c * k * k; }
};

// Fill col[K][rows*ow] for output rows [r0, r1) of one sample.
template <typename T>
void im2col_strip(const T* x, const ConvDims& d, int r0, int r1, T* col) {
    const int cols = (r1 - r0) * d.ow;
    for (int ic = 0; ic < d.in_c; ++ic) {
        const T* xp = x + std::int64_t(ic) * d.h * d.w;
        for (int kh = 0; kh < d.k; ++kh) {
            for (int kw = 0; kw < d.k; ++kw) {
                T* row = col + (std::int64_t(ic) * d.k * d.k + kh * d.k + kw) * cols;
                for (int orow = r0; orow < r1; ++orow, row += d.ow) {
                    const int ir = orow * d.stride + kh - d.pad;
                    if (ir < 0 || ir >= d.h) {
                        std::memset(row, 0, sizeof(T) * d.ow);
                        continue;
                    }
                    const T* src = xp + std::int64_t(ir) * d.w;
                    if (d.stride == 1) {
                        const int dcol = kw - d.pad;
                        int lo = std::max(0, -dcol);
                        int hi = std::min(d.ow, d.w - dcol);
                        if (lo > 0) std::memset(row, 0, sizeof(T) * lo);
                        if (hi > lo) std::memcpy(row + lo, src + lo + dcol, sizeof(T) * (hi - lo));
                        if (hi < d.ow) std::memset(row + hi, 0, sizeof(T) * (d.ow - hi));
                    } else {
                        for (int oc_ = 0; oc_ < d.ow; ++oc_) {
                            int icol = oc_ * d.stride + kw - d.pad;
                            row[oc_] = (icol >= 0 && icol < d.w) ? src[icol] : T(0);
                        }
                    }
                }
            }
        }
    }
}

// Scatter-add: exact adjoint of im2col_strip.
template <typename T>
void col2im_strip(const T* col, const ConvDims& d, int r0, int r1, T* gx) {
    const int cols = (r1 - r0) * d.ow;
    for (int ic = 0; ic < d.in_c; ++ic) {
        T* xp = gx + std::int64_t(ic) * d.h * d.w;
        for (int kh = 0; kh < d.k; ++kh) {
            for (int kw = 0; kw < d.k; ++kw) {
                const T* row = col + (std::int64_t(ic) * d.k * d.k + kh * d.k + kw) * cols;
                for (int orow = r0; orow < r1; ++orow, row += d.ow) {
                    const int ir = orow * d.stride + kh - d.pad;
                    if (ir < 0 || ir >= d.h) continue;
                    T* dst = xp + std::int64_t(ir) * d.w;
                    if (d.stride == 1) {
                        const int dcol = kw - d.pad;
                        int lo = std::max(0, -dcol);
                        int hi = std::min(d.ow, d.w - dcol);
                        for (int j = lo; j < hi; ++j) dst[j + dcol] += row[j];
                    } else {
                        for (int oc_ = 0; oc_ < d.ow; ++oc_) {
                            int icol = oc_ * d.stride + kw - d.pad;
                            if (icol >= 0 && icol < d.w) dst[icol] += row[oc_];
                        }
                    }
                }
            }
        }
    }
}

inline int strip_rows_for(int patch, int ow, std::size_t elem_size) {
    // keep the packed strip near 256 KiB so it stays cache-resident
    std::int64_t budget = 256 * 1024;
    std::int64_t per_row = std::int64_t(patch) * ow * elem_size;
    int rows = per_row > 0 ? static_cast<int>(budget / per_row) : 1;
    return std::max(1, rows);
}

template <typename T>
void conv2d_forward(const TensorT<T>& x, const TensorT<T>& weight, const T* bias,
                    int stride, int pad, TensorT<T>& out) {
    ConvDims d(x.shape, weight.shape, stride, pad);
    const int K = d.patch();
    const std::int64_t out_plane = std::int64_t(d.oh) * d.ow;

    if (d.k == 1 && stride == 1 && pad == 0) {
        // 1x1 conv is a plain GEMM over the input planes
        parallel_for(x.shape.n, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t n = lo; n < hi; ++n)
                gemm_tiles(weight.data.data(), std::int64_t(K), x.plane_ptr(int(n), 0),
                           std::int64_t(d.h) * d.w, bias, out.plane_ptr(int(n), 0),
                           out_plane, d.out_c, K, static_cast<int>(out_plane));
        });
        return;
    }

    const int strip = std::min(d.oh, strip_rows_for(K, d.ow, sizeof(T)));
    const int nstrips = (d.oh + strip - 1) / strip;
    parallel_for(std::int64_t(x.shape.n) * nstrips, [&](std::int64_t lo, std::int64_t hi) {
        std::vector<T> col(std::size_t(K) * strip * d.ow);
        for (std::int64_t task = lo; task < hi; ++task) {
            const int n = static_cast<int>(task / nstrips);
            const int r0 = static_cast<int>(task % nstrips) * strip;
            const int r1 = std::min(d.oh, r0 + strip);
            const int cols = (r1 - r0) * d.ow;
            im2col_strip(x.plane_ptr(n, 0), d, r0, r1, col.data());
            gemm_tiles(weight.data.data(), std::int64_t(K), col.data(), std::int64_t(cols),
                       bias, out.plane_ptr(n, 0) + std::int64_t(r0) * d.ow, out_plane,
                       d.out_c, K, cols);
        }
    });
}

// C[r][k] += sum_j A[r][j] * B[k][j] with a 4x4 register tile and fixed lane
// association, so results are reproducible regardless of build flags.
template <typename T>
void gemm_abt_accumulate(const T* A, std::int64_t a_stride, const T* B,
                         std::int64_t b_stride, T* C, std::int64_t c_stride, int rows,
                         int K, int cols) {
    constexpr int kLanes = 16;
    for (int r0 = 0; r0 < rows; r0 += 4) {
        const int rn = std::min(4, rows - r0);
        for (int k0 = 0; k0 < K; k0 += 4) {
            const int kn = std::min(4, K - k0);
            T lanes[4][4][kLanes] = {};
            int j = 0;
            for (; j + kLanes <= cols; j += kLanes)
                for (int r = 0; r < rn; ++r) {
                    const T* a = A + std::int64_t(r0 + r) * a_stride + j;
                    for (int k = 0; k < kn; ++k) {
                        const T* b = B + std::int64_t(k0 + k) * b_stride + j;
                        for (int u = 0; u < kLanes; ++u) lanes[r][k][u] += a[u] * b[u];
                    }
                }
            for (int r = 0; r < rn; ++r)
                for (int k = 0; k < kn; ++k) {
                    T acc = 0;
                    for (int u = 0; u < kLanes; ++u) acc += lanes[r][k][u];
                    for (int jj = j; jj < cols; ++jj)
                        acc += A[std::int64_t(r0 + r) * a_stride + jj] *
                               B[std::int64_t(k0 + k) * b_stride + jj];
                    C[std::int64_t(r0 + r) * c_stride + (k0 + k)] += acc;
                }
        }
    }
}

// Backward runs sample-parallel: grad_x planes are disjoint per sample, and
// the grad_w / grad_bias partials are reduced in sample order afterwards, so
// the result is bitwise identical for any thread count.
template <typename T>
void conv2d_backward(const TensorT<T>& x, const TensorT<T>& weight, int stride, int pad,
                     const TensorT<T>& gout, TensorT<T>* gx, TensorT<T>* gw,
                     TensorT<T>* gbias) {
    ConvDims d(x.shape, weight.shape, stride, pad);
    const int K = d.patch();
    const std::int64_t out_plane = std::int64_t(d.oh) * d.ow;
    const int batch = x.shape.n;

    // weight transposed to [K][out_c] for the grad_x GEMM
    std::vector<T> wt;
    if (gx) {
        wt.resize(std::size_t(K) * d.out_c);
        for (int oc = 0; oc < d.out_c; ++oc)
            for (int k = 0; k < K; ++k)
                wt[std::size_t(k) * d.out_c + oc] = weight.data[std::size_t(oc) * K + k];
    }

    std::vector<std::vector<T>> gw_part(gw ? batch : 0);
    std::vector<std::vector<T>> gb_part(gbias ? batch : 0);
    const int strip = std::min(d.oh, strip_rows_for(K, d.ow, sizeof(T)));

    parallel_for(batch, [&](std::int64_t lo, std::int64_t hi) {
        std::vector<T> col(std::size_t(K) * strip * d.ow);
        std::vector<T> gcol(gx ? std::size_t(K) * strip * d.ow : 0);
        for (std::int64_t n = lo; n < hi; ++n) {
            if (gw) gw_part[n].assign(std::size_t(d.out_c) * K, T(0));
            if (gbias) {
                gb_part[n].assign(std::size_t(d.out_c), T(0));
                for (int oc = 0; oc < d.out_c; ++oc) {
                    const T* g = gout.plane_ptr(int(n), oc);
                    T s = 0;
                    for (std::int64_t i = 0; i < out_plane; ++i) s += g[i];
                    gb_part[n][oc] = s;
                }
            }
            for (int r0 = 0; r0 < d.oh; r0 += strip) {
                const int r1 = std::min(d.oh, r0 + strip);
                const int cols = (r1 - r0) * d.ow;
                const T* gstrip = gout.plane_ptr(int(n), 0) + std::int64_t(r0) * d.ow;
                if (gw) {
                    im2col_strip(x.plane_ptr(int(n), 0), d, r0, r1, col.data());
                    gemm_abt_accumulate(gstrip, out_plane, col.data(), std::int64_t(cols),
                                        gw_part[n].data(), std::int64_t(K), d.out_c, K,
                                        cols);
                }
                if (gx) {
                    gemm_tiles(wt.data(), std::int64_t(d.out_c), gstrip, out_plane,
                               static_cast<const T*>(nullptr), gcol.data(),
                               std::int64_t(cols), K, d.out_c, cols);
                    col2im_strip(gcol.data(), d, r0, r1, gx->plane_ptr(int(n), 0));
                }
            }
        }
    });

    if (gw)
        for (int n = 0; n < batch; ++n)
            for (std::size_t i = 0; i < gw->data.size(); ++i) gw->data[i] += gw_part[n][i];
    if (gbias)
        for (int n = 0; n < batch; ++n)
            for (int oc = 0; oc < d.out_c; ++oc) gbias->data[oc] += gb_part[n][oc];
}

}  // namespace vesselnet::conv_detail
