#pragma once

#include <array>
#include <map>
#include <string>

#include "vesselnet/attention.hpp"
#include "vesselnet/nn_ops.hpp"

namespace vesselnet {

enum class SkipAttention { kNone, kSa, kCsa };
enum class Activation { kSilu, kRelu };

inline constexpr float kGroupNormEps = 1e-5f;

struct ModelConfig {
    std::array<int, 4> channels{16, 32, 48, 64};
    SkipAttention skip_attention = SkipAttention::kCsa;
    bool bottleneck_attention = true;
    Activation activation = Activation::kSilu;
    int norm_groups = 8;
    DropBlockConfig dropblock{0.15f, 7};
    int in_channels = 3;
    int out_channels = 1;

    void validate() const;

    // Fixed key order, shortest-round-trip floats; bit-exact round trip
    // through from_text().
    std::string canonical_text() const;
    static ModelConfig from_text(const std::string& text);

    bool operator==(const ModelConfig&) const = default;
};

std::string to_string(SkipAttention m);
std::string to_string(Activation a);
SkipAttention skip_attention_from(const std::string& s);
Activation activation_from(const std::string& s);

// Ordered (lexicographic) name -> tensor map; iteration order is the
// serialization order.
template <typename T>
using ParamStoreT = std::map<std::string, TensorT<T>>;
using ParamStore = ParamStoreT<float>;

// He/fan-in normal conv weights (std = sqrt(2 / (in_c * k^2))), zero biases,
// unit gamma / zero beta. Initialization order is fixed by layer ordinal, not
// map order.
ParamStore build(const ModelConfig& config, Rng rng);

std::int64_t count_params(const ParamStore& params);

// Analytic FLOPs at the given input size. Convention (per README):
//   conv                 2*k^2*in_c*out_c*out_h*out_w (+ out_c*out_h*out_w bias)
//   transposed conv      2*k^2*in_c*out_c*in_h*in_w   (+ bias at output size)
//   group norm 8/elt, silu 5/elt, relu 1/elt, sigmoid 4/elt,
//   maxpool 3 per input elt, channel mean/max 1 per input elt,
//   attention gate multiply 1/elt; dropblock and concat are free.
double count_flops(const ModelConfig& config, int h, int w,
                   std::vector<std::pair<std::string, double>>* breakdown = nullptr);

std::int64_t checkpoint_size_bytes(const ModelConfig& config);

template <typename T>
ParamStoreT<T> cast_store(const ParamStore& params) {
    ParamStoreT<T> out;
    for (const auto& [name, tensor] : params) out.emplace(name, tensor.template cast<T>());
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint file, little-endian throughout:
//   "SAU2" | u32 version=1 | u32 config-len | config text | u8 has-optimizer
//   | u32 tensor count | per tensor: u16 name len, name, u8 rank,
//   rank x u32 dims, f32 payload.
// With optimizer state: u64 step count, u32 tensor count, then the same
// per-tensor records named <param>.m / <param>.v.
// ---------------------------------------------------------------------------

struct Checkpoint {
    ModelConfig config;
    ParamStore params;
    bool has_optimizer = false;
    std::uint64_t adam_step = 0;
    ParamStore adam_m;
    ParamStore adam_v;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Forward graph (define-by-run). Parameters are bound as named tape leaves so
// gradients can be read back per name after backward().
// ---------------------------------------------------------------------------

template <typename T>
std::map<std::string, Var> bind_params(Tape<T>& tape, const ParamStoreT<T>& store) {
    std::map<std::string, Var> vars;
    for (const auto& [name, tensor] : store) vars.emplace(name, tape.leaf(tensor, name));
    return vars;
}

namespace detail {
inline Var lookup(const std::map<std::string, Var>& vars, const std::string& name) {
    auto it = vars.find(name);
    if (it == vars.end()) throw ContractError("missing parameter: " + name);
    return it->second;
}
}  // namespace detail

template <typename T>
Var forward_graph(Tape<T>& tape, const std::map<std::string, Var>& params,
                  const ModelConfig& cfg, Var x, Mode mode, Rng rng) {
    cfg.validate();
    const Shape in = tape.value(x).shape;
    if (in.c != cfg.in_channels)
        throw ShapeError("forward: expected " + std::to_string(cfg.in_channels) +
                         " input channels, got " + std::to_string(in.c));
    if (in.h % 8 != 0 || in.w % 8 != 0)
        throw ShapeError("forward: spatial dims must be divisible by 8, got " + in.str());

    int layer_ordinal = 0;
    auto act = [&](Var v) {
        return cfg.activation == Activation::kSilu ? silu(tape, v) : relu(tape, v);
    };
    // conv 3x3 -> dropblock -> group norm -> activation
    auto conv_unit = [&](Var h, const std::string& prefix, int idx) {
        const std::string base = prefix + ".conv" + std::to_string(idx);
        const std::string gn = prefix + ".gn" + std::to_string(idx);
        Var w = detail::lookup(params, base + ".weight");
        Var b = detail::lookup(params, base + ".bias");
        h = conv2d_same(tape, h, w, b);
        Rng layer_rng = rng.split(std::uint64_t(layer_ordinal++));
        h = dropblock(tape, h, cfg.dropblock, mode, layer_rng);
        h = group_norm(tape, h, detail::lookup(params, gn + ".gamma"),
                       detail::lookup(params, gn + ".beta"), cfg.norm_groups,
                       static_cast<T>(kGroupNormEps));
        return act(h);
    };
    auto conv_block = [&](Var h, const std::string& prefix) {
        return conv_unit(conv_unit(h, prefix, 1), prefix, 2);
    };

    Var e1 = conv_block(x, "enc1");
    Var e2 = conv_block(maxpool2(tape, e1), "enc2");
    Var e3 = conv_block(maxpool2(tape, e2), "enc3");

    Var bottom = conv_unit(maxpool2(tape, e3), "bottleneck", 1);
    if (cfg.bottleneck_attention)
        bottom = sa_bottleneck(tape, bottom,
                               detail::lookup(params, "bottleneck.sa.conv7.weight"));
    bottom = conv_unit(bottom, "bottleneck", 2);

    Var d = bottom;
    const std::array<Var, 3> skips{e1, e2, e3};
    for (int level = 3; level >= 1; --level) {
        const std::string lvl = std::to_string(level);
        Var up = conv2d_transpose2x(tape, d, detail::lookup(params, "up" + lvl + ".weight"),
                                    detail::lookup(params, "up" + lvl + ".bias"));
        Var enc = skips[level - 1];
        Var skip = enc;
        if (cfg.skip_attention == SkipAttention::kCsa)
            skip = csa(tape, enc, up,
                       detail::lookup(params, "skip" + lvl + ".csa.conv7.weight"));
        else if (cfg.skip_attention == SkipAttention::kSa)
            skip = sa_bottleneck(tape, enc,
                                 detail::lookup(params, "skip" + lvl + ".sa.conv7.weight"));
        d = conv_block(concat_channels(tape, skip, up), "dec" + lvl);
    }

    Var logits = conv2d(tape, d, detail::lookup(params, "head.conv.weight"),
                        detail::lookup(params, "head.conv.bias"), 1, 0);
    return sigmoid(tape, logits);
}

// Eval-mode forward without gradient bookkeeping kept around afterwards.
inline Tensor forward_eval(const ParamStore& params, const ModelConfig& cfg,
                           const Tensor& x) {
    Tape<float> tape;
    auto vars = bind_params(tape, params);
    Var out = forward_graph(tape, vars, cfg, tape.leaf(x, "input"), Mode::kEval, Rng(0));
    return tape.value(out);
}

}  // namespace vesselnet
