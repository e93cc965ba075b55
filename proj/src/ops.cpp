#include "apam/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>

namespace apam::ops {
namespace {

using Index = std::ptrdiff_t;

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
    }
}

// Four bilinear taps per output pixel; invalid taps carry weight 0.
struct Taps {
    std::size_t out_h = 0;
    std::size_t out_w = 0;
    std::vector<std::array<std::size_t, 4>> index;
    std::vector<std::array<double, 4>> weight;
};

void set_taps(Taps& taps, std::size_t p, double sy, double sx, std::size_t h, std::size_t w) {
    const double fy0 = std::floor(sy);
    const double fx0 = std::floor(sx);
    const double fy = sy - fy0;
    const double fx = sx - fx0;
    const Index y0 = static_cast<Index>(fy0);
    const Index x0 = static_cast<Index>(fx0);
    const std::array<Index, 4> ys{y0, y0, y0 + 1, y0 + 1};
    const std::array<Index, 4> xs{x0, x0 + 1, x0, x0 + 1};
    const std::array<double, 4> ws{(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
    for (std::size_t t = 0; t < 4; ++t) {
        const bool inside = ys[t] >= 0 && xs[t] >= 0 && ys[t] < static_cast<Index>(h) &&
                            xs[t] < static_cast<Index>(w);
        if (inside && ws[t] != 0.0) {
            taps.index[p][t] = static_cast<std::size_t>(ys[t]) * w + static_cast<std::size_t>(xs[t]);
            taps.weight[p][t] = ws[t];
        } else {
            taps.index[p][t] = 0;
            taps.weight[p][t] = 0.0;
        }
    }
}

Taps resize_taps(std::size_t h, std::size_t w, std::size_t out_h, std::size_t out_w) {
    Taps taps{out_h, out_w, std::vector<std::array<std::size_t, 4>>(out_h * out_w),
              std::vector<std::array<double, 4>>(out_h * out_w)};
    for (std::size_t y = 0; y < out_h; ++y) {
        const double sy =
            out_h > 1 ? static_cast<double>(y * (h - 1)) / static_cast<double>(out_h - 1) : 0.0;
        for (std::size_t x = 0; x < out_w; ++x) {
            const double sx =
                out_w > 1 ? static_cast<double>(x * (w - 1)) / static_cast<double>(out_w - 1) : 0.0;
            set_taps(taps, y * out_w + x, sy, sx, h, w);
        }
    }
    return taps;
}

// Exact cosine/sine at multiples of 90 degrees so quarter turns are exact.
std::pair<double, double> cos_sin_deg(double deg) {
    if (deg == 0.0) return {1.0, 0.0};
    if (deg == 90.0) return {0.0, 1.0};
    if (deg == -90.0) return {0.0, -1.0};
    if (deg == 180.0 || deg == -180.0) return {-1.0, 0.0};
    const double rad = deg * std::numbers::pi / 180.0;
    return {std::cos(rad), std::sin(rad)};
}

Taps rotate_taps(std::size_t h, std::size_t w, double angle_deg) {
    Taps taps{h, w, std::vector<std::array<std::size_t, 4>>(h * w),
              std::vector<std::array<double, 4>>(h * w)};
    const auto [c, s] = cos_sin_deg(angle_deg);
    const double cy = (static_cast<double>(h) - 1.0) / 2.0;
    const double cx = (static_cast<double>(w) - 1.0) / 2.0;
    for (std::size_t y = 0; y < h; ++y) {
        const double dy = static_cast<double>(y) - cy;
        for (std::size_t x = 0; x < w; ++x) {
            const double dx = static_cast<double>(x) - cx;
            // Inverse map: output position rotated back by -angle.
            const double sy = c * dy + s * dx + cy;
            const double sx = -s * dy + c * dx + cx;
            set_taps(taps, y * w + x, sy, sx, h, w);
        }
    }
    return taps;
}

Tensor resample(const Tensor& in, const Taps& taps) {
    const std::size_t channels = in.dim(0);
    const std::size_t plane_in = in.dim(1) * in.dim(2);
    const std::size_t plane_out = taps.out_h * taps.out_w;
    Tensor out(Shape{channels, taps.out_h, taps.out_w});
    for (std::size_t ch = 0; ch < channels; ++ch) {
        const double* src = in.data().data() + ch * plane_in;
        double* dst = out.data().data() + ch * plane_out;
        for (std::size_t p = 0; p < plane_out; ++p) {
            const auto& idx = taps.index[p];
            const auto& wt = taps.weight[p];
            dst[p] = wt[0] * src[idx[0]] + wt[1] * src[idx[1]] + wt[2] * src[idx[2]] +
                     wt[3] * src[idx[3]];
        }
    }
    return out;
}

void resample_backward(const Tensor& grad_out, const Taps& taps, Tensor& grad_in) {
    const std::size_t channels = grad_in.dim(0);
    const std::size_t plane_in = grad_in.dim(1) * grad_in.dim(2);
    const std::size_t plane_out = taps.out_h * taps.out_w;
    for (std::size_t ch = 0; ch < channels; ++ch) {
        double* dst = grad_in.data().data() + ch * plane_in;
        const double* g = grad_out.data().data() + ch * plane_out;
        for (std::size_t p = 0; p < plane_out; ++p) {
            const auto& idx = taps.index[p];
            const auto& wt = taps.weight[p];
            for (std::size_t t = 0; t < 4; ++t) dst[idx[t]] += wt[t] * g[p];
        }
    }
}

Var record_resample(const Var& input, Taps taps) {
    Tensor out = resample(input.value(), taps);
    return input.tape().record(
        std::move(out), {input.id()},
        [taps = std::move(taps)](const Tensor& g, std::span<Tensor* const> gin) {
            if (gin[0]) resample_backward(g, taps, *gin[0]);
        });
}

struct ConvGeometry {
    Index in_c, in_h, in_w, out_c, k_h, k_w, out_h, out_w, stride, dilation, padding;

    // Output column range [lo, hi) whose input column for tap kx is in bounds.
    std::pair<Index, Index> col_range(Index kx) const {
        const Index offset = kx * dilation - padding;
        Index lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
        Index hi = in_w - 1 - offset < 0 ? 0 : (in_w - 1 - offset) / stride + 1;
        return {std::min(lo, out_w), std::min(hi, out_w)};
    }
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, const Conv2dOptions& o) {
    if (o.stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    if (o.dilation < 1) throw ShapeError("conv2d: dilation must be >= 1");
    require_rank(input, 3, "conv2d input");
    require_rank(kernel, 4, "conv2d kernel");
    if (kernel.dim(1) != input.dim(0)) {
        throw ShapeError("conv2d: kernel input-channel dimension " + std::to_string(kernel.dim(1)) +
                         " does not match input channel dimension " + std::to_string(input.dim(0)));
    }
    ConvGeometry g{};
    g.in_c = static_cast<Index>(input.dim(0));
    g.in_h = static_cast<Index>(input.dim(1));
    g.in_w = static_cast<Index>(input.dim(2));
    g.out_c = static_cast<Index>(kernel.dim(0));
    g.k_h = static_cast<Index>(kernel.dim(2));
    g.k_w = static_cast<Index>(kernel.dim(3));
    g.stride = static_cast<Index>(o.stride);
    g.dilation = static_cast<Index>(o.dilation);
    g.padding = static_cast<Index>(o.padding);
    const Index span_h = g.dilation * (g.k_h - 1) + 1;
    const Index span_w = g.dilation * (g.k_w - 1) + 1;
    if (g.in_h + 2 * g.padding < span_h) {
        throw ShapeError("conv2d: height " + std::to_string(g.in_h) +
                         " too small for dilated kernel height " + std::to_string(span_h));
    }
    if (g.in_w + 2 * g.padding < span_w) {
        throw ShapeError("conv2d: width " + std::to_string(g.in_w) +
                         " too small for dilated kernel width " + std::to_string(span_w));
    }
    g.out_h = (g.in_h + 2 * g.padding - span_h) / g.stride + 1;
    g.out_w = (g.in_w + 2 * g.padding - span_w) / g.stride + 1;
    return g;
}

// Visits every (output row, input row, column range) triple of a kernel tap.
template <typename Fn>
void for_each_tap_row(const ConvGeometry& g, Index ky, Index kx, Fn&& fn) {
    const auto [lo, hi] = g.col_range(kx);
    if (lo >= hi) return;
    const Index col_offset = kx * g.dilation - g.padding;
    for (Index oy = 0; oy < g.out_h; ++oy) {
        const Index iy = oy * g.stride - g.padding + ky * g.dilation;
        if (iy < 0 || iy >= g.in_h) continue;
        fn(oy, iy, lo, hi, col_offset);
    }
}

Tensor conv_forward(const Tensor& input, const Tensor& kernel, const ConvGeometry& g) {
    Tensor out(Shape{static_cast<std::size_t>(g.out_c), static_cast<std::size_t>(g.out_h),
                     static_cast<std::size_t>(g.out_w)});
    const double* in = input.data().data();
    const double* k = kernel.data().data();
    double* o = out.data().data();
    for (Index oc = 0; oc < g.out_c; ++oc) {
        double* oplane = o + oc * g.out_h * g.out_w;
        for (Index ic = 0; ic < g.in_c; ++ic) {
            const double* iplane = in + ic * g.in_h * g.in_w;
            for (Index ky = 0; ky < g.k_h; ++ky) {
                for (Index kx = 0; kx < g.k_w; ++kx) {
                    const double wv = k[((oc * g.in_c + ic) * g.k_h + ky) * g.k_w + kx];
                    for_each_tap_row(g, ky, kx, [&](Index oy, Index iy, Index lo, Index hi, Index off) {
                        double* orow = oplane + oy * g.out_w;
                        const double* irow = iplane + iy * g.in_w + off;
                        if (g.stride == 1) {
                            for (Index ox = lo; ox < hi; ++ox) orow[ox] += wv * irow[ox];
                        } else {
                            for (Index ox = lo; ox < hi; ++ox) orow[ox] += wv * irow[ox * g.stride];
                        }
                    });
                }
            }
        }
    }
    return out;
}

}  // namespace

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tensor out = a.value();
    out += b.value();
    return a.tape().record(std::move(out), {a.id(), b.id()},
                           [](const Tensor& g, std::span<Tensor* const> gin) {
                               if (gin[0]) *gin[0] += g;
                               if (gin[1]) *gin[1] += g;
                           });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a.value();
    const auto bv = b.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return a.tape().record(std::move(out), {a.id(), b.id()},
                           [](const Tensor& g, std::span<Tensor* const> gin) {
                               if (gin[0]) *gin[0] += g;
                               if (gin[1]) {
                                   for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
                               }
                           });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return a.tape().record(std::move(out), {a.id(), b.id()},
                           [av, bv](const Tensor& g, std::span<Tensor* const> gin) {
                               if (gin[0]) {
                                   for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * bv[i];
                               }
                               if (gin[1]) {
                                   for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * av[i];
                               }
                           });
}

Var affine(const Var& a, double scale, double shift) {
    Tensor out = a.value();
    for (double& v : out.data()) v = scale * v + shift;
    return a.tape().record(std::move(out), {a.id()},
                           [scale](const Tensor& g, std::span<Tensor* const> gin) {
                               if (!gin[0]) return;
                               for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += scale * g[i];
                           });
}

Var mul_channels(const Var& a, const Var& plane) {
    require_rank(a.value(), 3, "mul_channels input");
    const Shape expected{1, a.shape()[1], a.shape()[2]};
    require_shape(plane.value(), expected, "mul_channels plane");
    const Tensor& av = a.value();
    const Tensor& pv = plane.value();
    const std::size_t n = expected[1] * expected[2];
    const std::size_t channels = a.shape()[0];
    Tensor out(av.shape());
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t i = 0; i < n; ++i) out[c * n + i] = av[c * n + i] * pv[i];
    }
    return a.tape().record(
        std::move(out), {a.id(), plane.id()},
        [av, pv, n, channels](const Tensor& g, std::span<Tensor* const> gin) {
            for (std::size_t c = 0; c < channels; ++c) {
                for (std::size_t i = 0; i < n; ++i) {
                    if (gin[0]) (*gin[0])[c * n + i] += g[c * n + i] * pv[i];
                    if (gin[1]) (*gin[1])[i] += g[c * n + i] * av[c * n + i];
                }
            }
        });
}

Var relu(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    Tensor saved = out;
    return a.tape().record(std::move(out), {a.id()},
                           [saved = std::move(saved)](const Tensor& g, std::span<Tensor* const> gin) {
                               if (!gin[0]) return;
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   if (saved[i] > 0.0) (*gin[0])[i] += g[i];
                               }
                           });
}

Var sigmoid(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.data()) v = 1.0 / (1.0 + std::exp(-v));
    Tensor saved = out;
    return a.tape().record(std::move(out), {a.id()},
                           [saved = std::move(saved)](const Tensor& g, std::span<Tensor* const> gin) {
                               if (!gin[0]) return;
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   (*gin[0])[i] += g[i] * saved[i] * (1.0 - saved[i]);
                               }
                           });
}

Var clamp(const Var& a, double lo, double hi) {
    const Tensor& av = a.value();
    Tensor out = av;
    std::vector<bool> pass(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        pass[i] = av[i] >= lo && av[i] <= hi;
        out[i] = std::clamp(av[i], lo, hi);
    }
    return a.tape().record(std::move(out), {a.id()},
                           [pass = std::move(pass)](const Tensor& g, std::span<Tensor* const> gin) {
                               if (!gin[0]) return;
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   if (pass[i]) (*gin[0])[i] += g[i];
                               }
                           });
}

Var sum(const Var& a) {
    return a.tape().record(Tensor::scalar(a.value().sum()), {a.id()},
                           [](const Tensor& g, std::span<Tensor* const> gin) {
                               if (!gin[0]) return;
                               for (double& v : gin[0]->data()) v += g[0];
                           });
}

Var mean(const Var& a) {
    const double n = static_cast<double>(a.value().size());
    return a.tape().record(Tensor::scalar(a.value().sum() / n), {a.id()},
                           [n](const Tensor& g, std::span<Tensor* const> gin) {
                               if (!gin[0]) return;
                               for (double& v : gin[0]->data()) v += g[0] / n;
                           });
}

Var mse(const Var& a, const Tensor& target) {
    require_shape(target, a.shape(), "mse target");
    const Tensor& av = a.value();
    Tensor diff(av.shape());
    double acc = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        diff[i] = av[i] - target[i];
        acc += diff[i] * diff[i];
    }
    const double n = static_cast<double>(av.size());
    return a.tape().record(Tensor::scalar(acc / n), {a.id()},
                           [diff = std::move(diff), n](const Tensor& g, std::span<Tensor* const> gin) {
                               if (!gin[0]) return;
                               const double s = 2.0 * g[0] / n;
                               for (std::size_t i = 0; i < diff.size(); ++i) (*gin[0])[i] += s * diff[i];
                           });
}

Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Conv2dOptions& opts) {
    return conv_forward(input, kernel, conv_geometry(input, kernel, opts));
}

Var conv2d(const Var& input, const Var& kernel, const Conv2dOptions& opts) {
    const ConvGeometry g = conv_geometry(input.value(), kernel.value(), opts);
    Tensor out = conv_forward(input.value(), kernel.value(), g);
    // Saved inputs are read back from the tape; node storage may move as
    // the tape grows, so ids are captured rather than pointers.
    Tape* tape = &input.tape();
    const NodeId in_id = input.id();
    const NodeId k_id = kernel.id();
    return input.tape().record(
        std::move(out), {input.id(), kernel.id()},
        [g, tape, in_id, k_id](const Tensor& grad, std::span<Tensor* const> gin) {
            const double* in = tape->value(in_id).data().data();
            const double* k = tape->value(k_id).data().data();
            const double* go = grad.data().data();
            double* gi = gin[0] ? gin[0]->data().data() : nullptr;
            double* gk = gin[1] ? gin[1]->data().data() : nullptr;
            for (Index oc = 0; oc < g.out_c; ++oc) {
                const double* gplane = go + oc * g.out_h * g.out_w;
                for (Index ic = 0; ic < g.in_c; ++ic) {
                    const Index ioff = ic * g.in_h * g.in_w;
                    for (Index ky = 0; ky < g.k_h; ++ky) {
                        for (Index kx = 0; kx < g.k_w; ++kx) {
                            const Index kidx = ((oc * g.in_c + ic) * g.k_h + ky) * g.k_w + kx;
                            const double wv = k[kidx];
                            double acc = 0.0;
                            for_each_tap_row(g, ky, kx, [&](Index oy, Index iy, Index lo, Index hi, Index off) {
                                const double* grow = gplane + oy * g.out_w;
                                const Index rowbase = ioff + iy * g.in_w + off;
                                if (gi) {
                                    double* girow = gi + rowbase;
                                    for (Index ox = lo; ox < hi; ++ox) girow[ox * g.stride] += wv * grow[ox];
                                }
                                if (gk) {
                                    const double* irow = in + rowbase;
                                    for (Index ox = lo; ox < hi; ++ox) acc += grow[ox] * irow[ox * g.stride];
                                }
                            });
                            if (gk) gk[kidx] += acc;
                        }
                    }
                }
            }
        });
}

Var add_bias(const Var& input, const Var& bias) {
    require_rank(input.value(), 3, "add_bias input");
    require_shape(bias.value(), Shape{input.shape()[0]}, "add_bias bias");
    const std::size_t channels = input.shape()[0];
    const std::size_t n = input.shape()[1] * input.shape()[2];
    Tensor out = input.value();
    for (std::size_t c = 0; c < channels; ++c) {
        const double b = bias.value()[c];
        for (std::size_t i = 0; i < n; ++i) out[c * n + i] += b;
    }
    return input.tape().record(std::move(out), {input.id(), bias.id()},
                               [channels, n](const Tensor& g, std::span<Tensor* const> gin) {
                                   if (gin[0]) *gin[0] += g;
                                   if (gin[1]) {
                                       for (std::size_t c = 0; c < channels; ++c) {
                                           double acc = 0.0;
                                           for (std::size_t i = 0; i < n; ++i) acc += g[c * n + i];
                                           (*gin[1])[c] += acc;
                                       }
                                   }
                               });
}

Var avg_pool(const Var& input, std::size_t k) {
    require_rank(input.value(), 3, "avg_pool input");
    const std::size_t channels = input.shape()[0];
    const std::size_t h = input.shape()[1];
    const std::size_t w = input.shape()[2];
    if (k == 0 || h % k != 0 || w % k != 0) {
        throw ShapeError("avg_pool: spatial shape " + to_string(input.shape()) +
                         " not divisible by window " + std::to_string(k));
    }
    const std::size_t oh = h / k;
    const std::size_t ow = w / k;
    const double inv = 1.0 / static_cast<double>(k * k);
    const Tensor& in = input.value();
    Tensor out(Shape{channels, oh, ow});
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) out.at(c, y / k, x / k) += in.at(c, y, x);
        }
    }
    out *= inv;
    return input.tape().record(std::move(out), {input.id()},
                               [channels, h, w, k, inv](const Tensor& g, std::span<Tensor* const> gin) {
                                   if (!gin[0]) return;
                                   for (std::size_t c = 0; c < channels; ++c) {
                                       for (std::size_t y = 0; y < h; ++y) {
                                           for (std::size_t x = 0; x < w; ++x) {
                                               gin[0]->at(c, y, x) += inv * g.at(c, y / k, x / k);
                                           }
                                       }
                                   }
                               });
}

Tensor bilinear_resize_forward(const Tensor& input, std::size_t out_h, std::size_t out_w) {
    require_rank(input, 3, "bilinear_resize input");
    if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: output size must be >= 1");
    return resample(input, resize_taps(input.dim(1), input.dim(2), out_h, out_w));
}

Var bilinear_resize(const Var& input, std::size_t out_h, std::size_t out_w) {
    require_rank(input.value(), 3, "bilinear_resize input");
    if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: output size must be >= 1");
    return record_resample(input, resize_taps(input.shape()[1], input.shape()[2], out_h, out_w));
}

Tensor rotate_forward(const Tensor& input, double angle_deg) {
    require_rank(input, 3, "rotate input");
    if (!(angle_deg >= -180.0 && angle_deg <= 180.0)) {
        throw Error("rotate: angle " + std::to_string(angle_deg) + " outside [-180, 180]");
    }
    return resample(input, rotate_taps(input.dim(1), input.dim(2), angle_deg));
}

Var rotate(const Var& input, double angle_deg) {
    require_rank(input.value(), 3, "rotate input");
    if (!(angle_deg >= -180.0 && angle_deg <= 180.0)) {
        throw Error("rotate: angle " + std::to_string(angle_deg) + " outside [-180, 180]");
    }
    return record_resample(input, rotate_taps(input.shape()[1], input.shape()[2], angle_deg));
}

Var crop(const Var& input, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
    require_rank(input.value(), 3, "crop input");
    const std::size_t channels = input.shape()[0];
    const std::size_t ih = input.shape()[1];
    const std::size_t iw = input.shape()[2];
    if (top + h > ih || left + w > iw) {
        throw ShapeError("crop: window " + std::to_string(h) + "x" + std::to_string(w) + " at (" +
                         std::to_string(top) + "," + std::to_string(left) + ") exceeds input " +
                         to_string(input.shape()));
    }
    const Tensor& in = input.value();
    Tensor out(Shape{channels, h, w});
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) out.at(c, y, x) = in.at(c, top + y, left + x);
        }
    }
    return input.tape().record(std::move(out), {input.id()},
                               [=](const Tensor& g, std::span<Tensor* const> gin) {
                                   if (!gin[0]) return;
                                   for (std::size_t c = 0; c < channels; ++c) {
                                       for (std::size_t y = 0; y < h; ++y) {
                                           for (std::size_t x = 0; x < w; ++x) {
                                               gin[0]->at(c, top + y, left + x) += g.at(c, y, x);
                                           }
                                       }
                                   }
                               });
}

Var paste(const Var& input, std::size_t canvas_h, std::size_t canvas_w, std::size_t top,
          std::size_t left) {
    require_rank(input.value(), 3, "paste input");
    const std::size_t channels = input.shape()[0];
    const std::size_t h = input.shape()[1];
    const std::size_t w = input.shape()[2];
    if (top + h > canvas_h || left + w > canvas_w) {
        throw ShapeError("paste: " + to_string(input.shape()) + " at (" + std::to_string(top) + "," +
                         std::to_string(left) + ") exits canvas " + std::to_string(canvas_h) + "x" +
                         std::to_string(canvas_w));
    }
    const Tensor& in = input.value();
    Tensor out(Shape{channels, canvas_h, canvas_w});
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) out.at(c, top + y, left + x) = in.at(c, y, x);
        }
    }
    return input.tape().record(std::move(out), {input.id()},
                               [=](const Tensor& g, std::span<Tensor* const> gin) {
                                   if (!gin[0]) return;
                                   for (std::size_t c = 0; c < channels; ++c) {
                                       for (std::size_t y = 0; y < h; ++y) {
                                           for (std::size_t x = 0; x < w; ++x) {
                                               gin[0]->at(c, y, x) += g.at(c, top + y, left + x);
                                           }
                                       }
                                   }
                               });
}

Var concat_channels(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_channels: no inputs");
    const std::size_t h = parts[0].shape().at(1);
    const std::size_t w = parts[0].shape().at(2);
    std::size_t channels = 0;
    std::vector<NodeId> ids;
    std::vector<std::size_t> sizes;
    for (const Var& p : parts) {
        require_rank(p.value(), 3, "concat_channels part");
        if (p.shape()[1] != h || p.shape()[2] != w) {
            throw ShapeError("concat_channels: spatial shape " + to_string(p.shape()) +
                             " differs from " + to_string(parts[0].shape()));
        }
        channels += p.shape()[0];
        ids.push_back(p.id());
        sizes.push_back(p.value().size());
    }
    Tensor out(Shape{channels, h, w});
    std::size_t offset = 0;
    for (const Var& p : parts) {
        std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + offset);
        offset += p.value().size();
    }
    return parts[0].tape().record(std::move(out), std::move(ids),
                                  [sizes](const Tensor& g, std::span<Tensor* const> gin) {
                                      std::size_t off = 0;
                                      for (std::size_t j = 0; j < sizes.size(); ++j) {
                                          if (gin[j]) {
                                              for (std::size_t i = 0; i < sizes[j]; ++i) (*gin[j])[i] += g[off + i];
                                          }
                                          off += sizes[j];
                                      }
                                  });
}

Var smoothness_loss(const Var& beta) {
    require_rank(beta.value(), 3, "smoothness_loss beta");
    const Tensor& b = beta.value();
    const std::size_t channels = b.dim(0);
    const std::size_t h = b.dim(1);
    const std::size_t w = b.dim(2);
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                if (x + 1 < w) {
                    const double d = b.at(c, y, x + 1) - b.at(c, y, x);
                    acc += d * d;
                }
                if (y + 1 < h) {
                    const double d = b.at(c, y + 1, x) - b.at(c, y, x);
                    acc += d * d;
                }
            }
        }
    }
    return beta.tape().record(
        Tensor::scalar(acc), {beta.id()},
        [b, channels, h, w](const Tensor& g, std::span<Tensor* const> gin) {
            if (!gin[0]) return;
            Tensor& gb = *gin[0];
            const double s = 2.0 * g[0];
            for (std::size_t c = 0; c < channels; ++c) {
                for (std::size_t y = 0; y < h; ++y) {
                    for (std::size_t x = 0; x < w; ++x) {
                        if (x + 1 < w) {
                            const double d = s * (b.at(c, y, x + 1) - b.at(c, y, x));
                            gb.at(c, y, x + 1) += d;
                            gb.at(c, y, x) -= d;
                        }
                        if (y + 1 < h) {
                            const double d = s * (b.at(c, y + 1, x) - b.at(c, y, x));
                            gb.at(c, y + 1, x) += d;
                            gb.at(c, y, x) -= d;
                        }
                    }
                }
            }
        });
}

}  // namespace apam::ops
