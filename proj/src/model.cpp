#include "apam/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "apam/ops.hpp"
#include "apam/rng.hpp"
#include "apam/scene.hpp"
#include "apam/tensor_io.hpp"

namespace apam {
namespace {

constexpr std::string_view kModelMagic = "PCM1";
constexpr double kHeadWeightScale = 0.1;
constexpr double kHeadBias = 0.02;

std::string join(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(v[i]);
    }
    return s;
}

std::vector<std::size_t> split_sizes(const std::string& s, const std::string& key) {
    std::vector<std::size_t> out;
    if (s.empty()) return out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t pos = 0;
            const unsigned long v = std::stoul(item, &pos);
            if (pos != item.size()) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw Error("model spec: bad integer '" + item + "' in " + key);
        }
    }
    return out;
}

// Parameter layout, shared by construction and forward so the two cannot drift.
class Plan {
public:
    void conv(const std::string& name, std::size_t out, std::size_t in, std::size_t k) {
        info.push_back({name + ".weight", Shape{out, in, k, k}});
        info.push_back({name + ".bias", Shape{out}});
    }
    std::vector<ParamInfo> info;
};

std::vector<ParamInfo> plan_for(const ModelSpec& s) {
    Plan p;
    const std::size_t c = s.in_channels;
    switch (s.arch) {
        case Arch::multi_column: {
            std::size_t total = 0;
            for (std::size_t i = 0; i < s.widths.size(); ++i) {
                const std::string col = "column" + std::to_string(i);
                p.conv(col + ".conv1", s.widths[i], c, s.kernels[i]);
                p.conv(col + ".conv2", s.widths[i], s.widths[i], s.kernels[i]);
                total += s.widths[i];
            }
            p.conv("fuse", 1, total, 1);
            break;
        }
        case Arch::dilated: {
            p.conv("front", s.widths[0], c, 3);
            for (std::size_t i = 1; i < s.widths.size(); ++i) {
                p.conv("dilated" + std::to_string(i), s.widths[i], s.widths[i - 1], 3);
            }
            p.conv("head", 1, s.widths.back(), 1);
            break;
        }
        case Arch::context: {
            const std::size_t w = s.widths[0];
            p.conv("front1", w, c, 3);
            p.conv("front2", w, w, 3);
            for (std::size_t scale : s.pool_scales) p.conv("context" + std::to_string(scale), w, w, 1);
            p.conv("fuse", 1, w * (1 + s.pool_scales.size()), 1);
            break;
        }
    }
    return p.info;
}

// Sequential reader over bound parameters.
class ParamCursor {
public:
    explicit ParamCursor(std::span<const Var> params) : params_(params) {}
    const Var& next() { return params_[pos_++]; }

private:
    std::span<const Var> params_;
    std::size_t pos_ = 0;
};

Var conv_layer(const Var& x, ParamCursor& pc, std::size_t k, std::size_t dilation = 1) {
    const Var& weight = pc.next();
    const Var& bias = pc.next();
    const std::size_t pad = dilation * (k / 2);
    return ops::add_bias(ops::conv2d(x, weight, {1, dilation, pad}), bias);
}

}  // namespace

Arch parse_arch(const std::string& s) {
    if (s == "multi_column") return Arch::multi_column;
    if (s == "dilated") return Arch::dilated;
    if (s == "context") return Arch::context;
    throw Error("unknown architecture '" + s + "' (expected multi_column, dilated or context)");
}

std::string to_string(Arch arch) {
    switch (arch) {
        case Arch::multi_column: return "multi_column";
        case Arch::dilated: return "dilated";
        case Arch::context: return "context";
    }
    return "?";
}

void ModelSpec::validate() const {
    const std::string what = "model spec (" + to_string(arch) + "): ";
    if (in_channels == 0) throw Error(what + "in_channels must be >= 1");
    if (widths.empty()) throw Error(what + "widths must not be empty");
    for (std::size_t w : widths) {
        if (w == 0) throw Error(what + "widths must be >= 1");
    }
    switch (arch) {
        case Arch::multi_column: {
            if (widths.size() < 2) throw Error(what + "needs at least 2 columns");
            if (kernels.size() != widths.size()) throw Error(what + "one kernel size per column required");
            std::set<std::size_t> distinct(kernels.begin(), kernels.end());
            if (distinct.size() != kernels.size()) throw Error(what + "column kernel sizes must be distinct");
            for (std::size_t k : kernels) {
                if (k % 2 == 0) throw Error(what + "kernel sizes must be odd");
            }
            break;
        }
        case Arch::dilated:
            if (widths.size() < 2) throw Error(what + "needs a front layer and at least one dilated layer");
            if (dilation < 2) throw Error(what + "dilation must be >= 2");
            break;
        case Arch::context: {
            if (pool_scales.size() < 2) throw Error(what + "needs at least 2 pooling scales");
            std::set<std::size_t> distinct(pool_scales.begin(), pool_scales.end());
            if (distinct.size() != pool_scales.size()) throw Error(what + "pooling scales must be distinct");
            for (std::size_t s : pool_scales) {
                if (s < 2) throw Error(what + "pooling scales must be >= 2");
            }
            break;
        }
    }
}

ModelSpec ModelSpec::defaults(Arch arch, std::uint64_t seed) {
    ModelSpec s;
    s.arch = arch;
    s.seed = seed;
    switch (arch) {
        case Arch::multi_column:
            s.widths = {4, 3, 2};
            s.kernels = {3, 5, 7};
            break;
        case Arch::dilated:
            s.widths = {8, 8, 8};
            s.dilation = 2;
            break;
        case Arch::context:
            s.widths = {8};
            s.pool_scales = {2, 4};
            break;
    }
    return s;
}

std::vector<std::pair<std::string, std::string>> ModelSpec::to_header() const {
    return {{"arch", to_string(arch)},
            {"in_channels", std::to_string(in_channels)},
            {"widths", join(widths)},
            {"kernels", join(kernels)},
            {"dilation", std::to_string(dilation)},
            {"pool_scales", join(pool_scales)},
            {"seed", std::to_string(seed)}};
}

ModelSpec ModelSpec::from_header(const std::vector<std::pair<std::string, std::string>>& kv) {
    std::map<std::string, std::string> m(kv.begin(), kv.end());
    const auto get = [&](const std::string& key) -> const std::string& {
        const auto it = m.find(key);
        if (it == m.end()) throw Error("model spec: missing key '" + key + "'");
        return it->second;
    };
    ModelSpec s;
    s.arch = parse_arch(get("arch"));
    try {
        s.in_channels = std::stoul(get("in_channels"));
        s.dilation = std::stoul(get("dilation"));
        s.seed = std::stoull(get("seed"));
    } catch (const std::logic_error&) {
        throw Error("model spec: malformed integer field");
    }
    s.widths = split_sizes(get("widths"), "widths");
    s.kernels = split_sizes(get("kernels"), "kernels");
    s.pool_scales = split_sizes(get("pool_scales"), "pool_scales");
    s.validate();
    return s;
}

Model::Model(ModelSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    info_ = plan_for(spec_);
    Rng rng(spec_.seed);
    for (const ParamInfo& p : info_) {
        // Weights and their bias share the fan-in of the weight tensor.
        const bool is_bias = p.shape.size() == 1;
        const ParamInfo& w = is_bias ? info_[params_.size() - 1] : p;
        const double fan_in = static_cast<double>(w.shape[1] * w.shape[2] * w.shape[3]);
        const double bound = 1.0 / std::sqrt(fan_in);
        Tensor t(p.shape);
        for (double& v : t.data()) v = rng.uniform(-bound, bound);
        params_.push_back(std::move(t));
    }
    // Output layer starts near a small positive density so the final clamp
    // does not begin (and stay) closed on every pixel.
    const std::size_t head = params_.size() - 2;
    params_[head] *= kHeadWeightScale;
    params_[head + 1] = Tensor(params_[head + 1].shape(), kHeadBias);
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (const Tensor& t : params_) n += t.size();
    return n;
}

void Model::check_input(const Shape& input) const {
    if (input.size() != 3 || input[0] != spec_.in_channels) {
        throw ShapeError("model input: expected (" + std::to_string(spec_.in_channels) +
                         ",H,W), got " + to_string(input));
    }
    if (input[1] % 4 != 0 || input[2] % 4 != 0) {
        throw ShapeError("model input: height and width must be multiples of 4, got " + to_string(input));
    }
    if (spec_.arch == Arch::context) {
        for (std::size_t s : spec_.pool_scales) {
            if ((input[1] / 4) % s != 0 || (input[2] / 4) % s != 0) {
                throw ShapeError("model input: quarter-resolution size of " + to_string(input) +
                                 " not divisible by pooling scale " + std::to_string(s));
            }
        }
    }
}

Shape Model::output_shape(const Shape& input) const {
    check_input(input);
    return Shape{input[1] / 4, input[2] / 4};
}

std::vector<Var> Model::bind(Tape& tape, bool requires_grad) const {
    std::vector<Var> vars;
    vars.reserve(params_.size());
    for (const Tensor& t : params_) vars.push_back(tape.leaf(t, requires_grad));
    return vars;
}

Var Model::forward(const Var& image, std::span<const Var> params) const {
    check_input(image.shape());
    if (params.size() != params_.size()) {
        throw Error("model forward: expected " + std::to_string(params_.size()) + " parameters, got " +
                    std::to_string(params.size()));
    }
    ParamCursor pc(params);
    const Var x = ops::affine(ops::avg_pool(image, 2), 1.0, -0.5);
    Var y;
    switch (spec_.arch) {
        case Arch::multi_column: {
            std::vector<Var> columns;
            for (std::size_t i = 0; i < spec_.widths.size(); ++i) {
                const std::size_t k = spec_.kernels[i];
                Var h = ops::relu(conv_layer(x, pc, k));
                h = ops::avg_pool(h, 2);
                columns.push_back(ops::relu(conv_layer(h, pc, k)));
            }
            y = conv_layer(ops::concat_channels(columns), pc, 1);
            break;
        }
        case Arch::dilated: {
            Var h = ops::avg_pool(ops::relu(conv_layer(x, pc, 3)), 2);
            for (std::size_t i = 1; i < spec_.widths.size(); ++i) {
                h = ops::relu(conv_layer(h, pc, 3, spec_.dilation));
            }
            y = conv_layer(h, pc, 1);
            break;
        }
        case Arch::context: {
            Var h = ops::avg_pool(ops::relu(conv_layer(x, pc, 3)), 2);
            h = ops::relu(conv_layer(h, pc, 3));
            const std::size_t fh = h.shape()[1];
            const std::size_t fw = h.shape()[2];
            std::vector<Var> parts{h};
            for (std::size_t scale : spec_.pool_scales) {
                const Var pooled = ops::relu(conv_layer(ops::avg_pool(h, scale), pc, 1));
                parts.push_back(ops::bilinear_resize(pooled, fh, fw));
            }
            y = conv_layer(ops::concat_channels(parts), pc, 1);
            break;
        }
    }
    // (1, H/4, W/4) -> (H/4, W/4), clamped at zero.
    const Var density = ops::relu(y);
    const Tensor& v = density.value();
    return image.tape().record(Tensor(Shape{v.dim(1), v.dim(2)}, std::vector<double>(v.data().begin(), v.data().end())),
                               {density.id()},
                               [](const Tensor& g, std::span<Tensor* const> gin) {
                                   if (!gin[0]) return;
                                   for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                               });
}

Model build_model(const ModelSpec& spec) { return Model(spec); }

Tensor predict_density(const Model& model, const Tensor& image) {
    Tape tape;
    const auto params = model.bind(tape, false);
    return model.forward(tape.leaf(image), params).value();
}

double count(const Tensor& map) { return map.sum(); }

// ---------------------------------------------------------------------------

OptimizerKind parse_optimizer(const std::string& s) {
    if (s == "adam") return OptimizerKind::adam;
    if (s == "sgd_momentum") return OptimizerKind::sgd_momentum;
    throw Error("unknown optimizer '" + s + "' (expected adam or sgd_momentum)");
}

std::string to_string(OptimizerKind kind) {
    return kind == OptimizerKind::adam ? "adam" : "sgd_momentum";
}

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw Error("train config: learning rate must be finite and non-negative");
    }
    if (epochs < 1) throw Error("train config: epochs must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw Error("train config: momentum must lie in [0, 1)");
}

std::vector<Example> make_examples(const Model& model, std::span<const Tensor> images,
                                   std::span<const Tensor> density_maps) {
    if (images.size() != density_maps.size()) throw Error("make_examples: image/map count mismatch");
    std::vector<Example> out;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const Shape out_shape = model.output_shape(images[i].shape());
        const std::size_t factor = images[i].dim(1) / out_shape[0];
        Tensor target = downsample_sum(density_maps[i], factor);
        require_shape(target, out_shape, "make_examples target");
        out.push_back({images[i], std::move(target)});
    }
    return out;
}

namespace {

class Optimizer {
public:
    Optimizer(const TrainConfig& cfg, const std::vector<Tensor>& params) : cfg_(cfg) {
        for (const Tensor& p : params) {
            first_.emplace_back(p.shape(), 0.0);
            second_.emplace_back(p.shape(), 0.0);
        }
    }

    void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
        ++t_;
        const double lr = cfg_.learning_rate;
        const double b1 = cfg_.momentum;
        constexpr double b2 = 0.999;
        constexpr double eps = 1e-8;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (std::size_t j = 0; j < params.size(); ++j) {
            Tensor& p = params[j];
            const Tensor& g = grads[j];
            Tensor& m = first_[j];
            Tensor& v = second_[j];
            for (std::size_t i = 0; i < p.size(); ++i) {
                if (cfg_.optimizer == OptimizerKind::adam) {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
                } else {
                    m[i] = b1 * m[i] + g[i];
                    p[i] -= lr * m[i];
                }
            }
        }
    }

private:
    TrainConfig cfg_;
    std::vector<Tensor> first_, second_;
    std::size_t t_ = 0;
};

// Loss 0.5 * ||f(x) - target||^2 and its gradient, accumulated into `grads`
// scaled by `weight`.
double accumulate(const Model& model, const WeightedExample& ex, double weight,
                  std::vector<Tensor>& grads) {
    Tape tape;
    const auto params = model.bind(tape, true);
    const Var out = model.forward(tape.leaf(ex.image), params);
    const Var loss = ops::affine(ops::mse(out, *ex.target), 0.5 * static_cast<double>(ex.target->size()));
    const GradientMap g = tape.backward(loss);
    for (std::size_t j = 0; j < params.size(); ++j) {
        if (!g.contains(params[j])) continue;
        const Tensor gj = g[params[j]];
        for (std::size_t i = 0; i < gj.size(); ++i) grads[j][i] += weight * gj[i];
    }
    return loss.value().item();
}

constexpr std::size_t kFullBatchLimit = 256;
constexpr std::size_t kMiniBatch = 8;

}  // namespace

TrainResult train_with(Model model, std::span<const Example> data, const TrainConfig& cfg,
                       const SampleFn& sample) {
    cfg.validate();
    if (data.empty()) throw Error("train: dataset is empty");
    const std::size_t n = data.size();
    const std::size_t batch = n <= kFullBatchLimit ? n : kMiniBatch;
    Optimizer opt(cfg, model.params());
    Rng shuffle_rng(derive_seed(cfg.seed, 0x5eed));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    TrainResult result;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (batch < n) {
            for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[shuffle_rng.below(i + 1)]);
        }
        double epoch_loss = 0.0;
        for (std::size_t start = 0, b = 0; start < n; start += batch, ++b) {
            const std::size_t end = std::min(n, start + batch);
            std::vector<Tensor> grads;
            for (const Tensor& p : model.params()) grads.emplace_back(p.shape(), 0.0);
            double batch_loss = 0.0;
            const double inv = 1.0 / static_cast<double>(end - start);
            for (std::size_t pos = start; pos < end; ++pos) {
                const std::size_t idx = order[pos];
                for (const WeightedExample& term : sample(model, epoch, idx, data[idx])) {
                    batch_loss += term.weight * accumulate(model, term, term.weight * inv, grads);
                }
            }
            if (!std::isfinite(batch_loss)) {
                throw Error("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(b));
            }
            epoch_loss += batch_loss;
            opt.step(model.params(), grads);
        }
        result.loss_trace.push_back(epoch_loss / static_cast<double>(n));
    }
    result.model = std::move(model);
    return result;
}

TrainResult train(Model model, std::span<const Example> data, const TrainConfig& cfg) {
    return train_with(std::move(model), data, cfg,
                      [](const Model&, std::size_t, std::size_t, const Example& ex) {
                          return std::vector<WeightedExample>{{ex.image, &ex.target, 1.0}};
                      });
}

double dataset_loss(const Model& model, std::span<const Example> data) {
    if (data.empty()) throw Error("dataset_loss: dataset is empty");
    double acc = 0.0;
    for (const Example& ex : data) {
        const Tensor pred = predict_density(model, ex.image);
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const double d = pred[i] - ex.target[i];
            acc += 0.5 * d * d;
        }
    }
    return acc / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------

void write_model(std::ostream& os, const Model& model) {
    os.write(kModelMagic.data(), 4);
    write_text_header(os, model.spec().to_header());
    for (const Tensor& p : model.params()) write_tensor(os, p);
}

Model read_model(std::istream& is, const std::string& source) {
    expect_magic(is, kModelMagic, source);
    Model model(ModelSpec::from_header(read_text_header(is, source)));
    for (std::size_t j = 0; j < model.params().size(); ++j) {
        Tensor t = read_tensor(is, source);
        require_shape(t, model.param_info()[j].shape, source + " parameter " + model.param_info()[j].name);
        model.params()[j] = std::move(t);
    }
    return model;
}

void save_model(const std::filesystem::path& path, const Model& model) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path.string() + " for writing");
    write_model(os, model);
    if (!os) throw Error("write failed for " + path.string());
}

Model load_model(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path.string());
    return read_model(is, path.string());
}

}  // namespace apam
