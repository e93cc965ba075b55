#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "apam/tape.hpp"

/// Differentiable primitives over Tape variables. Every function records its
/// result on the tape of its first argument.
namespace apam::ops {

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t dilation = 1;
    std::size_t padding = 0;
};

// Elementwise, shapes must match.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);

/// scale * a + shift
Var affine(const Var& a, double scale, double shift = 0.0);

/// Multiplies a (C,H,W) tensor by a (1,H,W) tensor broadcast over channels.
Var mul_channels(const Var& a, const Var& plane);

Var relu(const Var& a);
Var sigmoid(const Var& a);
/// Clamp into [lo, hi]; the gradient is zero where the input lies outside.
Var clamp(const Var& a, double lo, double hi);

Var sum(const Var& a);
Var mean(const Var& a);
/// Mean of squared differences against a constant target of the same shape.
Var mse(const Var& a, const Tensor& target);

/// Cross-correlation of a (C,H,W) input with (O,C,KH,KW) weights.
Var conv2d(const Var& input, const Var& kernel, const Conv2dOptions& opts = {});
/// Adds a per-channel bias of shape (C) to a (C,H,W) tensor.
Var add_bias(const Var& input, const Var& bias);

/// Non-overlapping k x k average pooling; H and W must be divisible by k.
Var avg_pool(const Var& input, std::size_t k);

/// Bilinear interpolation with corner-aligned sampling: output corner pixels
/// sample input corner pixels exactly.
Var bilinear_resize(const Var& input, std::size_t out_h, std::size_t out_w);

/// Rotates each channel about the tensor centre by `angle_deg` degrees
/// (counter-clockwise in row/col display orientation). Source positions
/// falling outside the input read as zero.
Var rotate(const Var& input, double angle_deg);

Var crop(const Var& input, std::size_t top, std::size_t left, std::size_t h, std::size_t w);
/// Places `input` on a zero canvas of size (C, canvas_h, canvas_w).
Var paste(const Var& input, std::size_t canvas_h, std::size_t canvas_w, std::size_t top,
          std::size_t left);

Var concat_channels(std::span<const Var> parts);

/// Sum of squared differences between horizontal and vertical neighbours,
/// accumulated over all channels.
Var smoothness_loss(const Var& beta);

// Non-recording counterparts used by inference paths and tests.
Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Conv2dOptions& opts = {});
Tensor bilinear_resize_forward(const Tensor& input, std::size_t out_h, std::size_t out_w);
Tensor rotate_forward(const Tensor& input, double angle_deg);

}  // namespace apam::ops
