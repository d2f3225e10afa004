#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "vesselnet/attention.hpp"
#include "testutil.hpp"

using namespace vesselnet;

namespace {

// Raw-loop oracle for both gates: channel pooling, direct 7x7 correlation
// with zero padding, sigmoid, broadcast multiply. No tape code involved.
Tensor oracle_gate_output(const Tensor& gated, const Tensor& plane_a, const Tensor& plane_b,
                          const Tensor& w7) {
    const int h = gated.shape.h, w = gated.shape.w;
    Tensor gate(Shape{gated.shape.n, 1, h, w});
    for (int n = 0; n < gated.shape.n; ++n)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                double acc = 0;
                for (int ki = 0; ki < 7; ++ki)
                    for (int kj = 0; kj < 7; ++kj) {
                        int si = i + ki - 3, sj = j + kj - 3;
                        if (si < 0 || si >= h || sj < 0 || sj >= w) continue;
                        acc += double(plane_a.at(n, 0, si, sj)) * double(w7.at(0, 0, ki, kj));
                        acc += double(plane_b.at(n, 0, si, sj)) * double(w7.at(0, 1, ki, kj));
                    }
                gate.at(n, 0, i, j) = float(1.0 / (1.0 + std::exp(-acc)));
            }
    Tensor out(gated.shape);
    for (int n = 0; n < gated.shape.n; ++n)
        for (int c = 0; c < gated.shape.c; ++c)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j)
                    out.at(n, c, i, j) = gated.at(n, c, i, j) * gate.at(n, 0, i, j);
    return out;
}

}  // namespace

TEST_CASE("attention weight budget is exactly 98 parameters") {
    Tensor w(attention_weight_shape());
    CHECK(w.numel() == kAttentionParams);
    CHECK(kAttentionParams == 98);
}

TEST_CASE("zero conv7 weights gate everything at 0.5") {
    Rng rng(71);
    Tensor f = random_uniform<float>(Shape{1, 6, 10, 10}, rng, -2.f, 2.f);
    {
        Tape<float> t;
        Var out = sa_bottleneck(t, t.leaf(f), t.leaf(Tensor(attention_weight_shape())));
        for (std::size_t i = 0; i < f.data.size(); ++i)
            CHECK(t.value(out).data[i] == doctest::Approx(0.5f * f.data[i]));
    }
    {
        Tensor fd = random_uniform<float>(Shape{1, 4, 10, 10}, rng, -2.f, 2.f);
        Tape<float> t;
        Var out = csa(t, t.leaf(f), t.leaf(fd), t.leaf(Tensor(attention_weight_shape())));
        for (std::size_t i = 0; i < f.data.size(); ++i)
            CHECK(t.value(out).data[i] == f.data[i] * 0.5f);
    }
}

TEST_CASE("single-channel feature degenerates mean and max to the same plane") {
    Rng rng(73);
    Tensor f = random_uniform<float>(Shape{1, 1, 8, 8}, rng, -1.f, 1.f);
    Tensor w7 = random_uniform<float>(attention_weight_shape(), rng, -0.3f, 0.3f);
    // SA on a single-channel tensor stacks two identical planes, so CSA with
    // F_d = F_e must produce the identical output.
    Tape<float> t1;
    Var sa_out = sa_bottleneck(t1, t1.leaf(f), t1.leaf(w7));
    Tape<float> t2;
    Var csa_out = csa(t2, t2.leaf(f), t2.leaf(f), t2.leaf(w7));
    for (std::size_t i = 0; i < f.data.size(); ++i)
        CHECK(t1.value(sa_out).data[i] == doctest::Approx(t2.value(csa_out).data[i]));
}

TEST_CASE("sa_bottleneck matches the raw-loop composition oracle") {
    Rng rng(79);
    Tensor f = random_uniform<float>(Shape{2, 5, 9, 9}, rng, -2.f, 2.f);
    Tensor w7 = random_uniform<float>(attention_weight_shape(), rng, -0.5f, 0.5f);
    Tape<float> t;
    Var out = sa_bottleneck(t, t.leaf(f), t.leaf(w7));
    Tensor ref =
        oracle_gate_output(f, testutil::naive_channel_mean(f), testutil::naive_channel_max(f), w7);
    for (std::size_t i = 0; i < ref.data.size(); ++i)
        CHECK(t.value(out).data[i] == doctest::Approx(ref.data[i]).epsilon(1e-6));
}

TEST_CASE("csa matches the raw-loop composition oracle") {
    Rng rng(83);
    Tensor fe = random_uniform<float>(Shape{1, 48, 8, 8}, rng, -2.f, 2.f);
    Tensor fd = random_uniform<float>(Shape{1, 48, 8, 8}, rng, -2.f, 2.f);
    Tensor w7 = random_uniform<float>(attention_weight_shape(), rng, -0.5f, 0.5f);
    Tape<float> t;
    Var out = csa(t, t.leaf(fe), t.leaf(fd), t.leaf(w7));
    Tensor ref = oracle_gate_output(fe, testutil::naive_channel_mean(fe),
                                    testutil::naive_channel_mean(fd), w7);
    for (std::size_t i = 0; i < ref.data.size(); ++i)
        CHECK(t.value(out).data[i] == doctest::Approx(ref.data[i]).epsilon(1e-6));
}

TEST_CASE("csa output keeps the encoder shape and bounds") {
    Rng rng(89);
    Tensor fe = random_uniform<float>(Shape{2, 7, 12, 12}, rng, -3.f, 3.f);
    Tensor fd = random_uniform<float>(Shape{2, 13, 12, 12}, rng, -3.f, 3.f);
    Tensor w7 = random_uniform<float>(attention_weight_shape(), rng, -0.5f, 0.5f);
    Tape<float> t;
    Var out = csa(t, t.leaf(fe), t.leaf(fd), t.leaf(w7));
    CHECK(t.value(out).shape == fe.shape);
    // gate in (0,1) means |out| <= |F_e| elementwise
    for (std::size_t i = 0; i < fe.data.size(); ++i) {
        CHECK(std::abs(t.value(out).data[i]) <= std::abs(fe.data[i]));
        if (fe.data[i] != 0.0f)
            CHECK(std::abs(t.value(out).data[i]) > 0.0f);  // gate strictly > 0
    }
}

TEST_CASE("csa rejects spatially mismatched features") {
    Tape<float> t;
    Var fe = t.leaf(Tensor(Shape{1, 4, 8, 8}));
    Var fd = t.leaf(Tensor(Shape{1, 4, 4, 4}));
    CHECK_THROWS_AS(csa(t, fe, fd, t.leaf(Tensor(attention_weight_shape()))), ShapeError);
}

TEST_CASE("decoder context genuinely participates: grad wrt F_d is nonzero") {
    Rng rng(97);
    Tape<double> t;
    auto fe = random_uniform<double>(Shape{1, 6, 8, 8}, rng, -1.0, 1.0);
    auto fd = random_uniform<double>(Shape{1, 4, 8, 8}, rng, -1.0, 1.0);
    auto w7 = random_uniform<double>(attention_weight_shape(), rng, -0.5, 0.5);
    Var fe_v = t.leaf(fe), fd_v = t.leaf(fd), w_v = t.leaf(w7);
    Var out = csa(t, fe_v, fd_v, w_v);
    t.backward(sum_all(t, out));
    double fd_norm = 0, fe_norm = 0, w_norm = 0;
    for (double g : t.grad(fd_v).data) fd_norm += g * g;
    for (double g : t.grad(fe_v).data) fe_norm += g * g;
    for (double g : t.grad(w_v).data) w_norm += g * g;
    CHECK(fd_norm > 1e-8);
    CHECK(fe_norm > 1e-8);
    CHECK(w_norm > 1e-8);
}
