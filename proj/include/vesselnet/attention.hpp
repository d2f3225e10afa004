#pragma once

#include "vesselnet/nn_ops.hpp"

namespace vesselnet {

// Both attention blocks share one parameter: a bias-free 7x7 conv over a
// 2-plane stack, 7*7*2*1 = 98 weights.

inline constexpr int kAttentionKernel = 7;
inline constexpr int kAttentionParams = 98;

inline Shape attention_weight_shape() {
    return Shape{1, 2, kAttentionKernel, kAttentionKernel};
}

// Bottleneck spatial attention: gate from the feature's own channel-mean and
// channel-max planes, multiplied back onto the feature.
template <typename T>
Var sa_bottleneck(Tape<T>& tape, Var feature, Var conv7_weight) {
    Var mean_plane = channel_mean(tape, feature);
    Var max_plane = channel_max(tape, feature);
    Var stack = concat_channels(tape, mean_plane, max_plane);
    Var gate = sigmoid(tape, conv2d_same(tape, stack, conv7_weight, std::nullopt));
    return mul_gate(tape, feature, gate);
}

// Cross-scale spatial attention: the gate sees the channel-averaged encoder
// and decoder features; the output keeps the encoder feature's shape, and
// gradients reach the decoder feature through the gate path.
template <typename T>
Var csa(Tape<T>& tape, Var encoder_feature, Var decoder_feature, Var conv7_weight) {
    const Shape se = tape.value(encoder_feature).shape;
    const Shape sd = tape.value(decoder_feature).shape;
    if (se.n != sd.n || se.h != sd.h || se.w != sd.w)
        throw ShapeError("csa: encoder " + se.str() + " and decoder " + sd.str() +
                         " must match spatially (upsample the decoder feature first)");
    Var enc_plane = channel_mean(tape, encoder_feature);
    Var dec_plane = channel_mean(tape, decoder_feature);
    Var stack = concat_channels(tape, enc_plane, dec_plane);
    Var gate = sigmoid(tape, conv2d_same(tape, stack, conv7_weight, std::nullopt));
    return mul_gate(tape, encoder_feature, gate);
}

}  // namespace vesselnet
