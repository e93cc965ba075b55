#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "apam/tape.hpp"

namespace apam {

enum class Arch { multi_column, dilated, context };

Arch parse_arch(const std::string& s);
std::string to_string(Arch arch);

/// Layer description of a toy density regressor. Every architecture maps a
/// (C, H, W) image to an (H/4, W/4) density map; H and W must be multiples
/// of 4 (context models additionally need H/4 and W/4 divisible by every
/// pooling scale).
///
///   multi_column: one column per (width, kernel) pair, two convolutions each,
///                 fused by a 1x1 convolution.
///   dilated:      widths[0] front-end convolution, then one dilated 3x3
///                 convolution per remaining width.
///   context:      two-layer front end of width widths[0], plus one pooled
///                 context branch per scale, fused by a 1x1 convolution.
struct ModelSpec {
    Arch arch = Arch::dilated;
    std::size_t in_channels = 3;
    std::vector<std::size_t> widths;
    std::vector<std::size_t> kernels;
    std::size_t dilation = 2;
    std::vector<std::size_t> pool_scales;
    std::uint64_t seed = 0;

    void validate() const;

    /// The default toy configuration of each architecture.
    static ModelSpec defaults(Arch arch, std::uint64_t seed);

    std::vector<std::pair<std::string, std::string>> to_header() const;
    static ModelSpec from_header(const std::vector<std::pair<std::string, std::string>>& kv);

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct ParamInfo {
    std::string name;
    Shape shape;

    friend bool operator==(const ParamInfo&, const ParamInfo&) = default;
};

class Model {
public:
    Model() = default;
    /// Builds the layer plan and initialises parameters uniformly in
    /// +-1/sqrt(fan_in) from spec.seed.
    explicit Model(ModelSpec spec);

    const ModelSpec& spec() const noexcept { return spec_; }
    const std::vector<ParamInfo>& param_info() const noexcept { return info_; }
    std::vector<Tensor>& params() noexcept { return params_; }
    const std::vector<Tensor>& params() const noexcept { return params_; }
    std::size_t parameter_count() const;

    Shape output_shape(const Shape& input) const;

    /// Records the parameters on `tape` in declaration order.
    std::vector<Var> bind(Tape& tape, bool requires_grad) const;

    /// Records the forward pass. `params` must come from bind() on the same tape.
    Var forward(const Var& image, std::span<const Var> params) const;

    friend bool operator==(const Model&, const Model&) = default;

private:
    void check_input(const Shape& input) const;

    ModelSpec spec_;
    std::vector<ParamInfo> info_;
    std::vector<Tensor> params_;
};

Model build_model(const ModelSpec& spec);

/// Density map of `image`; every entry is >= 0.
Tensor predict_density(const Model& model, const Tensor& image);

/// Crowd count of a density map: the sum of its entries.
double count(const Tensor& map);

// ---------------------------------------------------------------------------
// Training

enum class OptimizerKind { sgd_momentum, adam };

OptimizerKind parse_optimizer(const std::string& s);
std::string to_string(OptimizerKind kind);

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t epochs = 200;
    std::uint64_t seed = 0;
    OptimizerKind optimizer = OptimizerKind::adam;
    /// SGD momentum coefficient, or Adam's first-moment decay.
    double momentum = 0.9;

    void validate() const;
};

/// An image paired with its target map at model output resolution.
struct Example {
    Tensor image;
    Tensor target;
};

/// A weighted term of the per-batch objective.
struct WeightedExample {
    Tensor image;
    const Tensor* target = nullptr;
    double weight = 1.0;
};

/// Supplies the terms contributed by example `index` in `epoch`, given the
/// model as it stands at the start of that batch.
using SampleFn = std::function<std::vector<WeightedExample>(
    const Model& current, std::size_t epoch, std::size_t index, const Example& example)>;

struct TrainResult {
    Model model;
    std::vector<double> loss_trace;  // per-epoch mean loss
};

/// Downsamples full-resolution ground-truth maps with mass-preserving block sums.
std::vector<Example> make_examples(const Model& model, std::span<const Tensor> images,
                                   std::span<const Tensor> density_maps);

/// Minimises (1/2N) sum_i ||f(x_i) - l_i||^2. Full batch when N <= 256,
/// otherwise shuffled mini-batches of 8. Throws Error naming the epoch and
/// batch if the loss becomes non-finite.
TrainResult train(Model model, std::span<const Example> data, const TrainConfig& cfg);

/// Training loop with caller-defined per-example terms.
TrainResult train_with(Model model, std::span<const Example> data, const TrainConfig& cfg,
                       const SampleFn& sample);

/// Objective (1/2N) sum_i ||f(x_i) - l_i||^2 at the current parameters.
double dataset_loss(const Model& model, std::span<const Example> data);

// ---------------------------------------------------------------------------
// Checkpoints: "PCM1", key=value header, blank line, then one PCT1 record per
// parameter in declaration order.

void write_model(std::ostream& os, const Model& model);
Model read_model(std::istream& is, const std::string& source);
void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

}  // namespace apam
