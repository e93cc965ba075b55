#include "apam/attack.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <ostream>

#include "apam/ops.hpp"
#include "apam/rng.hpp"
#include "apam/scene.hpp"
#include "apam/tensor_io.hpp"

namespace apam {
namespace {

constexpr std::string_view kPatchMagic = "PCP1";
// Pre-activation giving blend weights within 1e-13 of 1.
constexpr double kHardBlend = 30.0;

// Seed streams derived from AttackConfig::seed.
constexpr std::uint64_t kNoiseStream = 0;
constexpr std::uint64_t kLocStream = 1 << 20;
constexpr std::uint64_t kTransformStream = 2 << 20;
constexpr std::uint64_t kBatchStream = 3 << 20;

std::size_t scaled_side(std::size_t s, double scale) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(s) * scale)));
}

std::string fmt(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

double parse_double(const std::string& s, const std::string& key, const std::string& source) {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        throw FormatError(source + ": bad number '" + s + "' for " + key);
    }
    return v;
}

std::uint64_t parse_uint(const std::string& s, const std::string& key, const std::string& source) {
    std::uint64_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        throw FormatError(source + ": bad integer '" + s + "' for " + key);
    }
    return v;
}

// Mask carried through the same rotate / scale / paste as the patch.
Tensor placed_mask(const PatchSpec& patch, const Footprint& fp, std::size_t h, std::size_t w) {
    const std::size_t s = patch.side();
    Tensor m(Shape{1, s, s}, std::vector<double>(patch.mask.data().begin(), patch.mask.data().end()));
    if (patch.angle_deg != 0.0) m = ops::rotate_forward(m, patch.angle_deg);
    if (fp.side != s) m = ops::bilinear_resize_forward(m, fp.side, fp.side);
    Tensor out(Shape{1, h, w}, 0.0);
    for (std::size_t r = 0; r < fp.side; ++r) {
        for (std::size_t c = 0; c < fp.side; ++c) out.at(0, fp.top + r, fp.left + c) = m.at(0, r, c);
    }
    return out;
}

// Mean over models of mse(f_i(adv), target); `count` receives the mean predicted count.
Var data_term(std::span<const Model> models, const Var& adv, const Tensor& target, double* count) {
    if (models.empty()) throw Error("apam objective: no models given");
    Var total;
    double counts = 0.0;
    for (std::size_t i = 0; i < models.size(); ++i) {
        const Var out = models[i].forward(adv, models[i].bind(adv.tape(), false));
        counts += out.value().sum();
        const Var j = ops::mse(out, target);
        total = i == 0 ? j : ops::add(total, j);
    }
    if (count) *count = counts / static_cast<double>(models.size());
    return models.size() == 1 ? total : ops::affine(total, 1.0 / static_cast<double>(models.size()));
}

struct Best {
    double objective = std::numeric_limits<double>::infinity();
    PatchSpec patch;
};

// Shared optimiser behind the white-box and universal attacks.
AttackResult optimise(std::span<const Model> models, std::span<const Tensor> images,
                      std::span<const Tensor> targets, const AttackConfig& cfg,
                      const InputTransform& transform) {
    cfg.validate();
    if (models.empty()) throw Error("attack: at least one model required");
    if (images.empty()) throw Error("attack: at least one image required");
    const std::size_t h = images[0].dim(1);
    const std::size_t w = images[0].dim(2);
    for (const Tensor& img : images) {
        require_image(img, "attack image");
        if (img.dim(1) != h || img.dim(2) != w) throw ShapeError("attack: images differ in size");
    }
    const std::size_t n = images.size();
    const std::size_t batch = std::min(cfg.batch, n);

    Best best;
    AttackTrace trace;
    for (std::size_t restart = 0; restart < cfg.restarts; ++restart) {
        PatchSpec patch = init_patch(cfg, h, w, restart);
        Tensor q_pixels(patch.pixels.shape(), 0.0);
        Tensor q_beta(patch.beta_pre.shape(), 0.0);
        Rng transforms(derive_seed(cfg.seed, kTransformStream + restart));
        Rng picker(derive_seed(cfg.seed, kBatchStream + restart));
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        std::size_t cursor = n;  // forces a shuffle before the first partial batch

        for (std::size_t t = 0; t < cfg.iterations; ++t) {
            PatchSpec view = patch;
            if (cfg.random_transforms) {
                view.angle_deg = transforms.uniform(-cfg.max_angle_deg, cfg.max_angle_deg);
                view.scale = transforms.uniform(cfg.min_scale, cfg.max_scale);
            }
            std::vector<std::size_t> chosen;
            if (batch == n) {
                chosen = order;
            } else {
                for (std::size_t b = 0; b < batch; ++b) {
                    if (cursor == n) {
                        for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[picker.below(i + 1)]);
                        cursor = 0;
                    }
                    chosen.push_back(order[cursor++]);
                }
            }

            Tape tape;
            const Var pixels = tape.leaf(patch.pixels, true);
            const Var beta_pre = tape.leaf(patch.beta_pre, true);
            Var data;
            double counts = 0.0;
            for (std::size_t b = 0; b < chosen.size(); ++b) {
                const std::size_t idx = chosen[b];
                Var adv = apply_patch(tape.leaf(images[idx]), pixels, beta_pre, view);
                if (transform) adv = transform(adv, trace.objective.size());
                double c = 0.0;
                const Var j = data_term(models, adv, targets[idx], &c);
                counts += c;
                data = b == 0 ? j : ops::add(data, j);
            }
            if (chosen.size() > 1) data = ops::affine(data, 1.0 / static_cast<double>(chosen.size()));
            const Var objective =
                ops::add(data, ops::affine(ops::smoothness_loss(ops::sigmoid(beta_pre)), cfg.gamma));

            const double value = objective.value().item();
            if (!std::isfinite(value)) {
                throw Error("attack: non-finite objective at restart " + std::to_string(restart) +
                            ", iteration " + std::to_string(t));
            }
            trace.objective.push_back(value);
            trace.predicted_count.push_back(counts / static_cast<double>(chosen.size()));
            if (value < best.objective) best = {value, patch};

            const GradientMap g = tape.backward(objective);
            const bool moved_p = momentum_step(q_pixels, g[pixels], cfg.momentum, cfg.step, patch.pixels);
            const bool moved_b = momentum_step(q_beta, g[beta_pre], cfg.momentum, cfg.step, patch.beta_pre);
            if (!moved_p && !moved_b) trace.zero_gradient_steps.push_back(trace.objective.size() - 1);
            for (double& v : patch.pixels.data()) v = std::clamp(v, 0.0, 1.0);
        }
    }

    AttackResult result;
    result.patch = std::move(best.patch);
    result.adversarial = apply_patch(images[0], result.patch);
    trace.final_image = result.adversarial;
    result.trace = std::move(trace);
    return result;
}

}  // namespace

Placement parse_placement(const std::string& s) {
    if (s == "fixed") return Placement::fixed;
    if (s == "random" || s == "random_per_restart") return Placement::random_per_restart;
    throw Error("unknown placement '" + s + "' (expected fixed or random)");
}

std::string to_string(Placement p) { return p == Placement::fixed ? "fixed" : "random"; }

Tensor PatchSpec::beta() const {
    Tensor b = beta_pre;
    for (double& v : b.data()) v = 1.0 / (1.0 + std::exp(-v));
    return b;
}

void PatchSpec::validate() const {
    require_rank(mask, 2, "patch mask");
    const std::size_t s = mask.dim(0);
    if (s < 2 || mask.dim(1) != s) throw ShapeError("patch mask must be square with side >= 2, got " + to_string(mask.shape()));
    require_rank(pixels, 3, "patch pixels");
    if (pixels.dim(1) != s || pixels.dim(2) != s) {
        throw ShapeError("patch pixels " + to_string(pixels.shape()) + " do not match mask side " + std::to_string(s));
    }
    require_shape(beta_pre, pixels.shape(), "patch beta pre-activations");
    for (double v : mask.data()) {
        if (v != 0.0 && v != 1.0) throw Error("patch mask entries must be 0 or 1");
    }
    if (!pixels.all_finite() || !beta_pre.all_finite()) throw Error("patch holds non-finite values");
    if (!(scale > 0.0) || !std::isfinite(scale)) throw Error("patch scale must be positive");
    if (!(angle_deg >= -180.0 && angle_deg <= 180.0)) throw Error("patch angle must lie in [-180, 180]");
}

Footprint placed_footprint(const PatchSpec& patch, std::size_t canvas_h, std::size_t canvas_w) {
    const std::size_t s = patch.side();
    const std::size_t big = scaled_side(s, patch.scale);
    const auto offset = static_cast<std::ptrdiff_t>(std::floor((static_cast<double>(s) - static_cast<double>(big)) / 2.0));
    const auto top = static_cast<std::ptrdiff_t>(patch.loc.row) + offset;
    const auto left = static_cast<std::ptrdiff_t>(patch.loc.col) + offset;
    const auto fits = [&](std::ptrdiff_t start, std::size_t len, std::size_t limit) {
        return start >= 0 && static_cast<std::size_t>(start) + len <= limit;
    };
    if (!fits(static_cast<std::ptrdiff_t>(patch.loc.row), s, canvas_h) ||
        !fits(static_cast<std::ptrdiff_t>(patch.loc.col), s, canvas_w) || !fits(top, big, canvas_h) ||
        !fits(left, big, canvas_w)) {
        throw Error("patch footprint of side " + std::to_string(big) + " at (" + std::to_string(patch.loc.row) +
                    "," + std::to_string(patch.loc.col) + ") exits the " + std::to_string(canvas_h) + "x" +
                    std::to_string(canvas_w) + " canvas");
    }
    return {static_cast<std::size_t>(top), static_cast<std::size_t>(left), big};
}

void AttackConfig::validate() const {
    if (!(gamma >= 0.0)) throw Error("attack config: gamma must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw Error("attack config: momentum must lie in [0, 1)");
    // A zero step is allowed so a run can reproduce its initial patch.
    if (!(step >= 0.0) || !std::isfinite(step)) throw Error("attack config: step must be finite and >= 0");
    if (iterations < 1) throw Error("attack config: iterations must be >= 1");
    if (side < 2) throw Error("attack config: patch side must be >= 2");
    if (restarts < 1) throw Error("attack config: restarts must be >= 1");
    if (batch < 1) throw Error("attack config: batch must be >= 1");
    if (!std::isfinite(target_factor)) throw Error("attack config: target factor must be finite");
    if (random_transforms) {
        if (!(max_angle_deg >= 0.0 && max_angle_deg <= 180.0)) {
            throw Error("attack config: max angle must lie in [0, 180]");
        }
        if (!(min_scale > 0.0 && min_scale <= max_scale)) throw Error("attack config: need 0 < min_scale <= max_scale");
    }
}

PatchSpec init_patch(const AttackConfig& cfg, std::size_t canvas_h, std::size_t canvas_w, std::size_t restart) {
    cfg.validate();
    const std::size_t s = cfg.side;
    if (s > canvas_h || s > canvas_w) {
        throw Error("patch side " + std::to_string(s) + " larger than the " + std::to_string(canvas_h) + "x" +
                    std::to_string(canvas_w) + " canvas");
    }
    PatchSpec p;
    p.seed = cfg.seed;
    p.mask = Tensor(Shape{s, s}, 1.0);
    p.beta_pre = Tensor(Shape{kImageChannels, s, s}, 0.0);
    p.pixels = Tensor(Shape{kImageChannels, s, s});
    Rng noise(derive_seed(cfg.seed, kNoiseStream + restart));
    for (double& v : p.pixels.data()) v = noise.uniform();

    // Room needed on each side for the largest transformed footprint.
    const std::size_t big = cfg.random_transforms ? std::max(s, scaled_side(s, cfg.max_scale)) : s;
    const std::size_t before = (big - s + 1) / 2;
    const std::size_t after = (big - s) / 2;
    if (cfg.placement == Placement::random_per_restart) {
        if (before + s + after > canvas_h || before + s + after > canvas_w) {
            throw Error("patch side " + std::to_string(s) + " leaves no room for random placement");
        }
        Rng loc(derive_seed(cfg.seed, kLocStream + restart));
        p.loc.row = before + loc.below(canvas_h - s - before - after + 1);
        p.loc.col = before + loc.below(canvas_w - s - before - after + 1);
    } else if (cfg.loc) {
        p.loc = *cfg.loc;
    } else {
        p.loc = {(canvas_h - s) / 2, (canvas_w - s) / 2};
    }
    PatchSpec widest = p;
    widest.scale = static_cast<double>(big) / static_cast<double>(s);
    placed_footprint(p, canvas_h, canvas_w);
    placed_footprint(widest, canvas_h, canvas_w);
    return p;
}

Var apply_patch(const Var& image, const Var& pixels, const Var& beta_pre, const PatchSpec& patch) {
    patch.validate();
    require_image(image.value(), "apply_patch image");
    const std::size_t h = image.shape()[1];
    const std::size_t w = image.shape()[2];
    const std::size_t s = patch.side();
    if (image.shape()[0] != pixels.shape()[0]) {
        throw ShapeError("apply_patch: image has " + std::to_string(image.shape()[0]) + " channels, patch " +
                         std::to_string(pixels.shape()[0]));
    }
    const Footprint fp = placed_footprint(patch, h, w);
    Tape& tape = image.tape();

    const Var beta = ops::sigmoid(beta_pre);
    const Var region = ops::crop(image, patch.loc.row, patch.loc.col, s, s);
    const Var blended = ops::add(ops::mul(beta, pixels), ops::mul(ops::affine(beta, -1.0, 1.0), region));
    const Tensor mask_plane(Shape{1, s, s}, std::vector<double>(patch.mask.data().begin(), patch.mask.data().end()));
    Var shaped = ops::mul_channels(blended, tape.leaf(mask_plane));
    if (patch.angle_deg != 0.0) shaped = ops::rotate(shaped, patch.angle_deg);
    if (fp.side != s) shaped = ops::bilinear_resize(shaped, fp.side, fp.side);
    const Var placed = ops::paste(shaped, h, w, fp.top, fp.left);

    Tensor keep = placed_mask(patch, fp, h, w);
    for (double& v : keep.data()) v = 1.0 - v;
    return ops::clamp(ops::add(placed, ops::mul_channels(image, tape.leaf(std::move(keep)))), 0.0, 1.0);
}

Tensor apply_patch(const Tensor& image, const PatchSpec& patch) {
    Tape tape;
    return apply_patch(tape.leaf(image), tape.leaf(patch.pixels), tape.leaf(patch.beta_pre), patch).value();
}

Var apam_objective(std::span<const Model> models, const Var& adv, const Tensor& target, double gamma,
                   const Var& beta) {
    if (!(gamma >= 0.0)) throw Error("apam objective: gamma must be >= 0");
    const Var data = data_term(models, adv, target, nullptr);
    if (gamma == 0.0) return data;
    return ops::add(data, ops::affine(ops::smoothness_loss(beta), gamma));
}

double apam_objective(std::span<const Model> models, const Tensor& adv, const Tensor& target, double gamma,
                      const Tensor& beta) {
    Tape tape;
    return apam_objective(models, tape.leaf(adv), target, gamma, tape.leaf(beta)).value().item();
}

bool momentum_step(Tensor& q, const Tensor& grad, double mu, double eps, Tensor& params) {
    require_shape(grad, q.shape(), "momentum_step gradient");
    require_shape(params, q.shape(), "momentum_step parameters");
    double l1 = 0.0;
    for (double g : grad.data()) l1 += std::abs(g);
    if (!std::isfinite(l1)) throw Error("momentum_step: non-finite gradient");
    if (l1 == 0.0) {
        q *= mu;
        return false;
    }
    for (std::size_t i = 0; i < q.size(); ++i) {
        q[i] = mu * q[i] + grad[i] / l1;
        if (q[i] > 0.0) {
            params[i] -= eps;
        } else if (q[i] < 0.0) {
            params[i] += eps;
        }
    }
    return true;
}

Tensor target_at(const Tensor& gt, const Shape& output_shape) {
    require_rank(gt, 2, "ground-truth map");
    if (gt.shape() == output_shape) return gt;
    const std::size_t factor = gt.dim(0) / output_shape[0];
    if (factor == 0 || gt.dim(0) != factor * output_shape[0] || gt.dim(1) != factor * output_shape[1]) {
        throw ShapeError("ground-truth map " + to_string(gt.shape()) + " cannot be reduced to " +
                         to_string(output_shape));
    }
    return downsample_sum(gt, factor);
}

AttackResult run_whitebox_attack(const Model& model, const Tensor& image, const Tensor& gt,
                                 const AttackConfig& cfg, const InputTransform& transform) {
    return run_blackbox_attack(std::span<const Model>(&model, 1), std::span<const Tensor>(&image, 1),
                               std::span<const Tensor>(&gt, 1), cfg, transform);
}

AttackResult run_blackbox_attack(std::span<const Model> substitutes, std::span<const Tensor> images,
                                 std::span<const Tensor> gts, const AttackConfig& cfg,
                                 const InputTransform& transform) {
    if (substitutes.empty()) throw Error("attack: at least one model required");
    if (images.size() != gts.size()) throw Error("attack: image and ground-truth counts differ");
    std::vector<Tensor> targets;
    for (std::size_t i = 0; i < images.size(); ++i) {
        Tensor t = target_at(gts[i], substitutes[0].output_shape(images[i].shape()));
        t *= cfg.target_factor;
        targets.push_back(std::move(t));
    }
    return optimise(substitutes, images, targets, cfg, transform);
}

PatchSpec random_patch(const AttackConfig& cfg, std::size_t canvas_h, std::size_t canvas_w) {
    PatchSpec p = init_patch(cfg, canvas_h, canvas_w);
    p.beta_pre = Tensor(p.beta_pre.shape(), kHardBlend);
    return p;
}

void write_patch(std::ostream& os, const PatchSpec& patch) {
    patch.validate();
    os.write(kPatchMagic.data(), 4);
    write_text_header(os, {{"side", std::to_string(patch.side())},
                           {"loc_row", std::to_string(patch.loc.row)},
                           {"loc_col", std::to_string(patch.loc.col)},
                           {"scale", fmt(patch.scale)},
                           {"angle_deg", fmt(patch.angle_deg)},
                           {"seed", std::to_string(patch.seed)}});
    write_tensor(os, patch.pixels);
    write_tensor(os, patch.mask);
    write_tensor(os, patch.beta_pre);
}

PatchSpec read_patch(std::istream& is, const std::string& source) {
    expect_magic(is, kPatchMagic, source);
    const auto kv = read_text_header(is, source);
    const std::map<std::string, std::string> m(kv.begin(), kv.end());
    const auto get = [&](const std::string& key) -> const std::string& {
        const auto it = m.find(key);
        if (it == m.end()) throw FormatError(source + ": missing header key '" + key + "'");
        return it->second;
    };
    PatchSpec p;
    p.loc.row = parse_uint(get("loc_row"), "loc_row", source);
    p.loc.col = parse_uint(get("loc_col"), "loc_col", source);
    p.scale = parse_double(get("scale"), "scale", source);
    p.angle_deg = parse_double(get("angle_deg"), "angle_deg", source);
    p.seed = parse_uint(get("seed"), "seed", source);
    p.pixels = read_tensor(is, source);
    p.mask = read_tensor(is, source);
    p.beta_pre = read_tensor(is, source);
    try {
        p.validate();
    } catch (const Error& e) {
        throw FormatError(source + ": " + e.what());
    }
    if (p.side() != parse_uint(get("side"), "side", source)) throw FormatError(source + ": side does not match mask");
    return p;
}

void save_patch(const std::filesystem::path& path, const PatchSpec& patch) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path.string() + " for writing");
    write_patch(os, patch);
    if (!os) throw Error("write failed for " + path.string());
}

PatchSpec load_patch(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path.string());
    return read_patch(is, path.string());
}

void write_trace_csv(std::ostream& os, const AttackTrace& trace) {
    os << "iter,objective,predicted_count\n";
    for (std::size_t i = 0; i < trace.size(); ++i) {
        os << i << ',' << fmt(trace.objective[i]) << ',' << fmt(trace.predicted_count[i]) << '\n';
    }
}

}  // namespace apam
