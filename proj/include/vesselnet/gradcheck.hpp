#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vesselnet/loss.hpp"
#include "vesselnet/model.hpp"

// Central finite-difference verification of every operator and of the whole
// model, run in a 64-bit shadow of the 32-bit engine. This is the library
// behind the `gradcheck` CLI command and the gradient acceptance tests.

namespace vesselnet {

struct GradCheckReport {
    std::string name;
    double max_rel_err = 0;
    bool pass = false;
};

namespace gradcheck_detail {

struct Input {
    TensorT<double> value;
    bool differentiable = true;
};

// build(tape, leaf vars) must return a scalar var and be a pure function of
// the leaf values.
using BuildFn = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

inline double rel_err(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

inline double run_check(std::vector<Input> inputs, const BuildFn& build, int coords_per_input,
                        double step, Rng rng) {
    auto evaluate = [&](const std::vector<Input>& ins) {
        Tape<double> tape;
        std::vector<Var> vars;
        vars.reserve(ins.size());
        for (const auto& in : ins) vars.push_back(tape.leaf(in.value));
        Var out = build(tape, vars);
        return tape.value(out).data[0];
    };

    Tape<double> tape;
    std::vector<Var> vars;
    for (const auto& in : inputs) vars.push_back(tape.leaf(in.value));
    Var out = build(tape, vars);
    tape.backward(out);
    std::vector<TensorT<double>> analytic;
    for (Var v : vars) analytic.push_back(tape.grad(v));

    double worst = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!inputs[i].differentiable) continue;
        const std::int64_t n = inputs[i].value.numel();
        for (int k = 0; k < coords_per_input; ++k) {
            const std::int64_t idx = std::int64_t(rng.next_below(std::uint64_t(n)));
            std::vector<Input> probe = inputs;
            probe[i].value.data[idx] += step;
            const double up = evaluate(probe);
            probe[i].value.data[idx] -= 2 * step;
            const double down = evaluate(probe);
            const double numeric = (up - down) / (2 * step);
            worst = std::max(worst, rel_err(analytic[i].data[idx], numeric));
        }
    }
    return worst;
}

// Weighted scalar readout: sum(out * R) with a fixed random cotangent R, so
// every output coordinate contributes with a distinct weight.
inline Var weighted_sum(Tape<double>& tape, Var out, std::uint64_t seed) {
    Rng r(seed);
    auto w = random_uniform<double>(tape.value(out).shape, r, -1.0, 1.0);
    return sum_all(tape, mul(tape, out, tape.leaf(std::move(w))));
}

}  // namespace gradcheck_detail

inline std::vector<GradCheckReport> run_gradient_checks(std::uint64_t seed,
                                                        double tolerance = 1e-3,
                                                        bool include_model = true) {
    using gradcheck_detail::Input;
    using gradcheck_detail::run_check;
    using gradcheck_detail::weighted_sum;

    std::vector<GradCheckReport> reports;
    Rng master(seed);
    int salt = 0;
    auto rnd = [&](Shape s, double lo = -2.0, double hi = 2.0) {
        Rng r = master.split(std::uint64_t(1000 + salt++));
        return random_uniform<double>(s, r, lo, hi);
    };
    auto record = [&](const std::string& name, double err) {
        reports.push_back({name, err, err < tolerance});
    };
    auto coord_rng = [&] { return master.split(std::uint64_t(5000 + salt++)); };
    const double h = 1e-3;

    const Shape s1{2, 3, 6, 6};

    record("add", run_check({Input{rnd(s1)}, Input{rnd(s1)}},
                            [](Tape<double>& t, const std::vector<Var>& v) {
                                return weighted_sum(t, add(t, v[0], v[1]), 11);
                            },
                            20, h, coord_rng()));
    record("sub", run_check({Input{rnd(s1)}, Input{rnd(s1)}},
                            [](Tape<double>& t, const std::vector<Var>& v) {
                                return weighted_sum(t, sub(t, v[0], v[1]), 12);
                            },
                            20, h, coord_rng()));
    record("mul", run_check({Input{rnd(s1)}, Input{rnd(s1)}},
                            [](Tape<double>& t, const std::vector<Var>& v) {
                                return weighted_sum(t, mul(t, v[0], v[1]), 13);
                            },
                            20, h, coord_rng()));
    record("scalar_mul", run_check({Input{rnd(s1)}},
                                   [](Tape<double>& t, const std::vector<Var>& v) {
                                       return weighted_sum(t, scalar_mul(t, v[0], 1.7), 14);
                                   },
                                   20, h, coord_rng()));
    {
        // keep samples at least 10*h away from the clamp kinks
        auto x = rnd(s1);
        for (auto& v : x.data)
            if (std::abs(v - 1.0) < 0.05 || std::abs(v + 1.0) < 0.05) v += 0.2;
        record("clamp", run_check({Input{std::move(x)}},
                                  [](Tape<double>& t, const std::vector<Var>& v) {
                                      return weighted_sum(t, clamp(t, v[0], -1.0, 1.0), 15);
                                  },
                                  20, h, coord_rng()));
    }
    record("reduce_sum", run_check({Input{rnd(s1)}},
                                   [](Tape<double>& t, const std::vector<Var>& v) {
                                       return weighted_sum(t, reduce_sum(t, v[0], {1, 3}), 16);
                                   },
                                   20, h, coord_rng()));
    record("reduce_mean", run_check({Input{rnd(s1)}},
                                    [](Tape<double>& t, const std::vector<Var>& v) {
                                        return weighted_sum(t, reduce_mean(t, v[0], {0, 2}), 17);
                                    },
                                    20, h, coord_rng()));
    record("conv2d_3x3",
           run_check({Input{rnd(Shape{2, 2, 6, 6})}, Input{rnd(Shape{3, 2, 3, 3})},
                      Input{rnd(Shape{1, 3, 1, 1})}},
                     [](Tape<double>& t, const std::vector<Var>& v) {
                         return weighted_sum(t, conv2d(t, v[0], v[1], v[2], 1, 1), 18);
                     },
                     20, h, coord_rng()));
    record("conv2d_7x7_nobias",
           run_check({Input{rnd(Shape{1, 2, 8, 8})}, Input{rnd(Shape{1, 2, 7, 7})}},
                     [](Tape<double>& t, const std::vector<Var>& v) {
                         return weighted_sum(t, conv2d(t, v[0], v[1], std::nullopt, 1, 3), 19);
                     },
                     20, h, coord_rng()));
    record("conv2d_transpose2x",
           run_check({Input{rnd(Shape{1, 3, 5, 5})}, Input{rnd(Shape{2, 3, 3, 3})},
                      Input{rnd(Shape{1, 2, 1, 1})}},
                     [](Tape<double>& t, const std::vector<Var>& v) {
                         return weighted_sum(t, conv2d_transpose2x(t, v[0], v[1], v[2]), 20);
                     },
                     20, h, coord_rng()));
    record("maxpool2", run_check({Input{rnd(Shape{2, 2, 8, 8})}},
                                 [](Tape<double>& t, const std::vector<Var>& v) {
                                     return weighted_sum(t, maxpool2(t, v[0]), 21);
                                 },
                                 20, h, coord_rng()));
    record("group_norm",
           run_check({Input{rnd(Shape{2, 8, 5, 5})}, Input{rnd(Shape{1, 8, 1, 1}, 0.5, 1.5)},
                      Input{rnd(Shape{1, 8, 1, 1})}},
                     [](Tape<double>& t, const std::vector<Var>& v) {
                         return weighted_sum(t, group_norm(t, v[0], v[1], v[2], 4, 1e-5), 22);
                     },
                     20, h, coord_rng()));
    record("silu", run_check({Input{rnd(s1)}},
                             [](Tape<double>& t, const std::vector<Var>& v) {
                                 return weighted_sum(t, silu(t, v[0]), 23);
                             },
                             20, h, coord_rng()));
    record("sigmoid", run_check({Input{rnd(s1)}},
                                [](Tape<double>& t, const std::vector<Var>& v) {
                                    return weighted_sum(t, sigmoid(t, v[0]), 24);
                                },
                                20, h, coord_rng()));
    {
        // keep samples away from the kink at zero
        auto x = rnd(s1);
        for (auto& v : x.data)
            if (std::abs(v) < 0.05) v += 0.2;
        record("relu", run_check({Input{std::move(x)}},
                                 [](Tape<double>& t, const std::vector<Var>& v) {
                                     return weighted_sum(t, relu(t, v[0]), 25);
                                 },
                                 20, h, coord_rng()));
    }
    record("concat_channels",
           run_check({Input{rnd(Shape{1, 2, 5, 5})}, Input{rnd(Shape{1, 3, 5, 5})}},
                     [](Tape<double>& t, const std::vector<Var>& v) {
                         return weighted_sum(t, concat_channels(t, v[0], v[1]), 26);
                     },
                     20, h, coord_rng()));
    record("channel_mean", run_check({Input{rnd(Shape{2, 5, 4, 4})}},
                                     [](Tape<double>& t, const std::vector<Var>& v) {
                                         return weighted_sum(t, channel_mean(t, v[0]), 27);
                                     },
                                     20, h, coord_rng()));
    record("channel_max", run_check({Input{rnd(Shape{2, 5, 4, 4})}},
                                    [](Tape<double>& t, const std::vector<Var>& v) {
                                        return weighted_sum(t, channel_max(t, v[0]), 28);
                                    },
                                    20, h, coord_rng()));
    record("mul_gate",
           run_check({Input{rnd(Shape{2, 4, 5, 5})}, Input{rnd(Shape{2, 1, 5, 5})}},
                     [](Tape<double>& t, const std::vector<Var>& v) {
                         return weighted_sum(t, mul_gate(t, v[0], v[1]), 29);
                     },
                     20, h, coord_rng()));
    record("dropblock",
           run_check({Input{rnd(Shape{2, 3, 12, 12})}},
                     [](Tape<double>& t, const std::vector<Var>& v) {
                         DropBlockConfig cfg{0.2f, 3};
                         Rng r(99);  // same mask on every evaluation
                         return weighted_sum(t, dropblock(t, v[0], cfg, Mode::kTrain, r), 30);
                     },
                     20, h, coord_rng()));
    record("sa_bottleneck",
           run_check({Input{rnd(Shape{1, 6, 8, 8})}, Input{rnd(attention_weight_shape())}},
                     [](Tape<double>& t, const std::vector<Var>& v) {
                         return weighted_sum(t, sa_bottleneck(t, v[0], v[1]), 31);
                     },
                     20, h, coord_rng()));
    record("csa",
           run_check({Input{rnd(Shape{1, 6, 8, 8})}, Input{rnd(Shape{1, 4, 8, 8})},
                      Input{rnd(attention_weight_shape())}},
                     [](Tape<double>& t, const std::vector<Var>& v) {
                         return weighted_sum(t, csa(t, v[0], v[1], v[2]), 32);
                     },
                     20, h, coord_rng()));

    // losses: probabilities strictly inside the clamp interval, binary targets
    auto binary = [&](Shape s, double pos_fraction) {
        Rng r = master.split(std::uint64_t(3000 + salt++));
        TensorT<double> y(s);
        for (auto& v : y.data) v = r.uniform_double() < pos_fraction ? 1.0 : 0.0;
        return y;
    };
    const Shape sl{2, 1, 8, 8};
    record("bce", run_check({Input{rnd(sl, 0.05, 0.95)}, Input{binary(sl, 0.3), false}},
                            [](Tape<double>& t, const std::vector<Var>& v) {
                                return bce(t, v[0], v[1]);
                            },
                            20, h, coord_rng()));
    record("mcc_loss", run_check({Input{rnd(sl, 0.05, 0.95)}, Input{binary(sl, 0.3), false}},
                                 [](Tape<double>& t, const std::vector<Var>& v) {
                                     return mcc_loss(t, v[0], v[1]);
                                 },
                                 20, h, coord_rng()));
    record("mcc_loss_near_degenerate",
           run_check({Input{rnd(sl, 0.002, 0.02)}, Input{binary(sl, 0.05), false}},
                     [](Tape<double>& t, const std::vector<Var>& v) {
                         return mcc_loss(t, v[0], v[1]);
                     },
                     20, h, coord_rng()));
    record("total_loss", run_check({Input{rnd(sl, 0.05, 0.95)}, Input{binary(sl, 0.3), false}},
                                   [](Tape<double>& t, const std::vector<Var>& v) {
                                       return total_loss(t, v[0], v[1], LossWeights{0.6f, 0.4f});
                                   },
                                   20, h, coord_rng()));

    if (!include_model) return reports;

    // full model, all three skip-attention modes, 1x3x16x16 input
    for (SkipAttention mode :
         {SkipAttention::kCsa, SkipAttention::kSa, SkipAttention::kNone}) {
        ModelConfig cfg;
        cfg.skip_attention = mode;
        // block 7 cannot fit the 2x2 bottleneck of a 16x16 input; block 1
        // keeps the mask-and-rescale path active at every level
        cfg.dropblock = DropBlockConfig{0.1f, 1};
        ParamStore params32 = build(cfg, master.split(std::uint64_t(7000 + salt++)));
        auto params = cast_store<double>(params32);

        std::vector<Input> inputs;
        std::vector<std::string> names;
        for (const auto& [name, tensor] : params) {
            inputs.push_back(Input{tensor});
            names.push_back(name);
        }
        Rng xr = master.split(std::uint64_t(8000 + salt++));
        inputs.push_back(Input{random_uniform<double>(Shape{1, 3, 16, 16}, xr, 0.0, 1.0)});
        inputs.push_back(Input{binary(Shape{1, 1, 16, 16}, 0.25), false});
        const std::size_t n_params = names.size();

        auto build_loss = [cfg, names, n_params](Tape<double>& t, const std::vector<Var>& v) {
            std::map<std::string, Var> vars;
            // leaves were created in ParamStore (lexicographic) order
            for (std::size_t i = 0; i < n_params; ++i) vars.emplace(names[i], v[i]);
            Var x = v[n_params];
            Var y = v[n_params + 1];
            Var out = forward_graph(t, vars, cfg, x, Mode::kTrain, Rng(55));
            return total_loss(t, out, y, LossWeights{0.5f, 0.5f});
        };
        record("model_" + to_string(mode),
               run_check(std::move(inputs), build_loss, 2, h, coord_rng()));
    }
    return reports;
}

}  // namespace vesselnet
