#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "apam/attack.hpp"
#include "apam/model.hpp"
#include "apam/rng.hpp"

namespace apam {

/// k distinct spatial pixel indices out of d, sorted ascending. A retained
/// pixel keeps all of its channels.
struct RetentionSet {
    std::size_t d = 0;
    std::size_t k = 0;
    std::vector<std::size_t> indices;

    void validate() const;
};

/// Uniform over all k-subsets of [0, d) (partial Fisher-Yates).
RetentionSet sample_retention(std::size_t d, std::size_t k, Rng& rng);
RetentionSet sample_retention(std::size_t d, std::size_t k, std::uint64_t seed);

/// Per-channel mean pixel of a set of images, written into ablated positions.
struct NullEncoding {
    std::vector<double> mean;

    friend bool operator==(const NullEncoding&, const NullEncoding&) = default;
};

NullEncoding null_encoding(std::span<const Tensor> images);

/// out[c, p] = image[c, p] for p in keep, null[c] elsewhere.
Tensor ablate(const Tensor& image, const RetentionSet& keep, const NullEncoding& null);

/// Recorded form: differentiable in the retained pixels only.
Var ablate(const Var& image, const RetentionSet& keep, const NullEncoding& null);

inline constexpr std::size_t kDefaultRounds = 10;

/// A model together with the ablation it was trained under.
struct DefendedModel {
    Model model;
    std::size_t k = 0;
    std::size_t d = 0;
    std::size_t rounds = kDefaultRounds;
    NullEncoding null;
    std::string method = "ablation";
};

struct DefenseResult {
    DefendedModel defended;
    std::vector<double> loss_trace;
    std::vector<double> lambda_trace;  // adversarial training only
};

/// Plain training where every example is re-ablated with a fresh retention
/// set each epoch. The NULL encoding is the mean of the raw training images.
DefenseResult certificate_retrain(Model model, std::span<const Example> data, std::size_t k,
                                  const TrainConfig& cfg);

/// Mean of the model's maps over `rounds` independent ablations; round r
/// draws its retention set from derive_seed(seed, r).
Tensor defended_predict(const Model& model, const Tensor& image, std::size_t k, std::size_t rounds,
                        std::uint64_t seed, const NullEncoding& null);
Tensor defended_predict(const DefendedModel& defended, const Tensor& image, std::uint64_t seed);

/// White-box attack on a defended model: each step sees the patched image
/// through one fresh ablation (expectation over retention sets).
AttackResult attack_defended(const DefendedModel& defended, const Tensor& image, const Tensor& gt,
                             const AttackConfig& cfg);

/// Clean-loss weight of epoch `epoch`: 1 during the first `warmup` epochs,
/// then linear down to 0.5 over `ramp` epochs, then 0.5.
double adversarial_lambda(std::size_t epoch, std::size_t warmup, std::size_t ramp);

/// Minimises lambda * clean_loss + (1 - lambda) * adv_loss, regenerating a
/// white-box patch against the current model for every example each epoch
/// once lambda < 1. Targets of adversarial terms are the clean ground truth.
DefenseResult adversarial_train(Model model, std::span<const Example> data, const TrainConfig& cfg,
                                const AttackConfig& attack, std::size_t warmup, std::size_t ramp);

/// Histogram of top-K overlaps between defended outputs of a clean and an
/// attacked image, plus the rate of retention sets missing every changed pixel.
struct OverlapStats {
    std::vector<std::size_t> histogram;  // index i counts trials with R = i, i in [0, K]
    std::size_t trials = 0;
    std::size_t misses = 0;
    /// Trials that missed the changed pixels but produced different ablations
    /// or R != K. Zero whenever the certification premise holds.
    std::size_t premise_violations = 0;
    std::size_t changed_pixels = 0;

    double miss_rate() const { return trials ? static_cast<double>(misses) / static_cast<double>(trials) : 0.0; }
};

/// Spatial pixels where any channel of `a` and `b` differs.
std::vector<std::size_t> changed_pixels(const Tensor& a, const Tensor& b);

OverlapStats empirical_overlap_bounds(const Model& model, const Tensor& clean, const Tensor& adversarial,
                                      std::size_t k, std::size_t trials, std::size_t top_k,
                                      std::uint64_t seed, const NullEncoding& null);

// Defended checkpoints: the PCM1 model file plus a text sidecar
// "<model>.defense" of key=value lines (method, k, d, rounds, null).
void save_defended(const std::filesystem::path& model_path, const DefendedModel& defended);
DefendedModel load_defended(const std::filesystem::path& model_path);
std::filesystem::path sidecar_path(const std::filesystem::path& model_path);

}  // namespace apam
