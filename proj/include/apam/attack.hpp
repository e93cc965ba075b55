#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "apam/model.hpp"

namespace apam {

enum class Placement { fixed, random_per_restart };

Placement parse_placement(const std::string& s);
std::string to_string(Placement p);

struct PatchLoc {
    std::size_t row = 0;
    std::size_t col = 0;

    friend bool operator==(const PatchLoc&, const PatchLoc&) = default;
};

/// An s x s adversarial patch. `loc` is the top-left corner of the untransformed
/// patch; scaling keeps the patch centre fixed. The blend weights are
/// sigmoid(beta_pre), so they stay inside (0, 1).
struct PatchSpec {
    Tensor pixels;    // (C, s, s), values in [0, 1]
    Tensor mask;      // (s, s), entries 0 or 1
    Tensor beta_pre;  // (C, s, s)
    PatchLoc loc;
    double scale = 1.0;
    double angle_deg = 0.0;
    std::uint64_t seed = 0;

    std::size_t side() const { return mask.empty() ? 0 : mask.dim(0); }
    Tensor beta() const;
    void validate() const;

    friend bool operator==(const PatchSpec&, const PatchSpec&) = default;
};

/// Canvas rectangle covered by the transformed patch.
struct Footprint {
    std::size_t top = 0;
    std::size_t left = 0;
    std::size_t side = 0;

    bool contains(std::size_t r, std::size_t c) const {
        return r >= top && r < top + side && c >= left && c < left + side;
    }
};

/// Throws Error if the scaled patch leaves the canvas.
Footprint placed_footprint(const PatchSpec& patch, std::size_t canvas_h, std::size_t canvas_w);

struct AttackConfig {
    double target_factor = 10.0;  // l* = target_factor * GT
    double gamma = 0.01;
    double step = 0.01;
    double momentum = 0.9;
    std::size_t iterations = 300;
    std::size_t side = 28;
    Placement placement = Placement::fixed;
    std::optional<PatchLoc> loc;  // fixed placement; centred when absent
    std::size_t restarts = 1;
    std::uint64_t seed = 0;
    /// Per-iteration random rotation and scale (expectation over transforms).
    bool random_transforms = true;
    double max_angle_deg = 20.0;
    double min_scale = 0.8;
    double max_scale = 1.25;
    /// Images per step in the universal (black-box) attack.
    std::size_t batch = 8;

    void validate() const;
};

struct AttackTrace {
    std::vector<double> objective;
    std::vector<double> predicted_count;
    std::vector<std::size_t> zero_gradient_steps;
    Tensor final_image;

    std::size_t size() const noexcept { return objective.size(); }
};

/// Uniform-noise patch with blend weights 0.5 and a full square mask.
/// `restart` selects an independent noise stream and, for random placement,
/// a fresh location.
PatchSpec init_patch(const AttackConfig& cfg, std::size_t canvas_h, std::size_t canvas_w,
                     std::size_t restart = 0);

/// x~ = placed(mask * (beta * p + (1 - beta) * x_region)) + (1 - placed(mask)) * x, clamped to [0, 1].
Tensor apply_patch(const Tensor& image, const PatchSpec& patch);

/// Recorded form; differentiable in `pixels` and `beta_pre`. Geometry and
/// mask are read from `patch`.
Var apply_patch(const Var& image, const Var& pixels, const Var& beta_pre, const PatchSpec& patch);

/// (1/n) sum_i mse(f_i(adv), target) + gamma * smoothness(beta).
double apam_objective(std::span<const Model> models, const Tensor& adv, const Tensor& target,
                      double gamma, const Tensor& beta);
Var apam_objective(std::span<const Model> models, const Var& adv, const Tensor& target, double gamma,
                   const Var& beta);

/// q <- mu q + grad / ||grad||_1, then params <- params - eps * sign(q).
/// Returns false (q <- mu q, params untouched) when the gradient is zero.
bool momentum_step(Tensor& q, const Tensor& grad, double mu, double eps, Tensor& params);

/// Resolves a ground-truth map to model output resolution, block-summing a
/// full-resolution map when needed.
Tensor target_at(const Tensor& gt, const Shape& output_shape);

/// Optional map applied to every patched image before the models see it, for
/// attacking randomised preprocessing in expectation. `iteration` counts
/// optimisation steps across restarts.
using InputTransform = std::function<Var(const Var& adv, std::size_t iteration)>;

struct AttackResult {
    PatchSpec patch;
    Tensor adversarial;
    AttackTrace trace;
};

AttackResult run_whitebox_attack(const Model& model, const Tensor& image, const Tensor& gt,
                                 const AttackConfig& cfg, const InputTransform& transform = {});

/// One universal patch over all images; each step averages the objective over
/// the substitutes and a batch of images.
AttackResult run_blackbox_attack(std::span<const Model> substitutes, std::span<const Tensor> images,
                                 std::span<const Tensor> gts, const AttackConfig& cfg,
                                 const InputTransform& transform = {});

/// Unoptimised baseline: a uniform-noise patch pasted with blend weights near 1.
PatchSpec random_patch(const AttackConfig& cfg, std::size_t canvas_h, std::size_t canvas_w);

// "PCP1", key=value header, blank line, then PCT1 records for pixels, mask
// and beta pre-activations.
void write_patch(std::ostream& os, const PatchSpec& patch);
PatchSpec read_patch(std::istream& is, const std::string& source);
void save_patch(const std::filesystem::path& path, const PatchSpec& patch);
PatchSpec load_patch(const std::filesystem::path& path);

/// CSV with header iter,objective,predicted_count.
void write_trace_csv(std::ostream& os, const AttackTrace& trace);

}  // namespace apam
