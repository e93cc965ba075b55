#include "apam/ablation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "apam/cert.hpp"
#include "apam/ops.hpp"
#include "apam/tensor_io.hpp"

namespace apam {
namespace {

constexpr std::uint64_t kTrainAblationStream = 0xab1a7e;
constexpr std::uint64_t kAttackAblationStream = 0xa77ac4;
constexpr std::uint64_t kAdvTrainStream = 0xadd7;

std::size_t spatial_size(const Tensor& image) {
    require_image(image, "ablation input");
    return image.dim(1) * image.dim(2);
}

void check_geometry(const Tensor& image, const RetentionSet& keep, const NullEncoding& null) {
    if (spatial_size(image) != keep.d) {
        throw ShapeError("ablate: retention set over d=" + std::to_string(keep.d) + " pixels but image " +
                         to_string(image.shape()) + " has " + std::to_string(spatial_size(image)));
    }
    if (null.mean.size() != image.dim(0)) {
        throw ShapeError("ablate: NULL encoding has " + std::to_string(null.mean.size()) + " channels, image " +
                         std::to_string(image.dim(0)));
    }
}

std::string fmt(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

}  // namespace

void RetentionSet::validate() const {
    if (k > d) throw Error("retention set: k=" + std::to_string(k) + " exceeds d=" + std::to_string(d));
    if (indices.size() != k) throw Error("retention set: holds " + std::to_string(indices.size()) + " indices, k=" + std::to_string(k));
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= d) throw Error("retention set: index " + std::to_string(indices[i]) + " out of range");
        if (i > 0 && indices[i] <= indices[i - 1]) throw Error("retention set: indices must be sorted and distinct");
    }
}

RetentionSet sample_retention(std::size_t d, std::size_t k, Rng& rng) {
    if (k > d) throw Error("sample_retention: k=" + std::to_string(k) + " exceeds d=" + std::to_string(d));
    std::vector<std::size_t> pool(d);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(d - i)]);
    pool.resize(k);
    std::sort(pool.begin(), pool.end());
    return {d, k, std::move(pool)};
}

RetentionSet sample_retention(std::size_t d, std::size_t k, std::uint64_t seed) {
    Rng rng(seed);
    return sample_retention(d, k, rng);
}

NullEncoding null_encoding(std::span<const Tensor> images) {
    if (images.empty()) throw Error("null_encoding: no images");
    const std::size_t channels = images[0].dim(0);
    NullEncoding null{std::vector<double>(channels, 0.0)};
    std::vector<double> counts(channels, 0.0);
    for (const Tensor& img : images) {
        require_image(img, "null_encoding image");
        if (img.dim(0) != channels) throw ShapeError("null_encoding: images differ in channel count");
        const std::size_t plane = img.dim(1) * img.dim(2);
        for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t p = 0; p < plane; ++p) null.mean[c] += img[c * plane + p];
            counts[c] += static_cast<double>(plane);
        }
    }
    for (std::size_t c = 0; c < channels; ++c) null.mean[c] /= counts[c];
    return null;
}

Tensor ablate(const Tensor& image, const RetentionSet& keep, const NullEncoding& null) {
    check_geometry(image, keep, null);
    const std::size_t plane = keep.d;
    Tensor out(image.shape());
    for (std::size_t c = 0; c < image.dim(0); ++c) {
        std::fill_n(out.data().begin() + static_cast<std::ptrdiff_t>(c * plane), plane, null.mean[c]);
        for (std::size_t p : keep.indices) out[c * plane + p] = image[c * plane + p];
    }
    return out;
}

Var ablate(const Var& image, const RetentionSet& keep, const NullEncoding& null) {
    check_geometry(image.value(), keep, null);
    const std::size_t channels = image.shape()[0];
    const std::size_t h = image.shape()[1];
    const std::size_t w = image.shape()[2];
    Tensor plane(Shape{1, h, w}, 0.0);
    for (std::size_t p : keep.indices) plane[p] = 1.0;
    Tensor fill(Shape{channels, h, w});
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t p = 0; p < keep.d; ++p) fill[c * keep.d + p] = plane[p] == 1.0 ? 0.0 : null.mean[c];
    }
    Tape& tape = image.tape();
    return ops::add(ops::mul_channels(image, tape.leaf(std::move(plane))), tape.leaf(std::move(fill)));
}

DefenseResult certificate_retrain(Model model, std::span<const Example> data, std::size_t k,
                                  const TrainConfig& cfg) {
    if (data.empty()) throw Error("certificate_retrain: dataset is empty");
    std::vector<Tensor> images;
    for (const Example& ex : data) images.push_back(ex.image);
    const std::size_t d = spatial_size(images[0]);
    if (k > d) throw Error("certificate_retrain: k=" + std::to_string(k) + " exceeds d=" + std::to_string(d));

    DefenseResult out;
    out.defended.k = k;
    out.defended.d = d;
    out.defended.null = null_encoding(images);
    const NullEncoding null = out.defended.null;
    TrainResult r = train_with(
        std::move(model), data, cfg,
        [&](const Model&, std::size_t epoch, std::size_t index, const Example& ex) {
            const std::uint64_t seed = derive_seed(derive_seed(cfg.seed, kTrainAblationStream + epoch), index);
            return std::vector<WeightedExample>{
                {ablate(ex.image, sample_retention(d, k, seed), null), &ex.target, 1.0}};
        });
    out.defended.model = std::move(r.model);
    out.loss_trace = std::move(r.loss_trace);
    return out;
}

Tensor defended_predict(const Model& model, const Tensor& image, std::size_t k, std::size_t rounds,
                        std::uint64_t seed, const NullEncoding& null) {
    if (rounds < 1) throw Error("defended_predict: rounds must be >= 1");
    const std::size_t d = spatial_size(image);
    Tensor acc;
    for (std::size_t r = 0; r < rounds; ++r) {
        const Tensor map = predict_density(model, ablate(image, sample_retention(d, k, derive_seed(seed, r)), null));
        if (r == 0) {
            acc = map;
        } else {
            acc += map;
        }
    }
    acc *= 1.0 / static_cast<double>(rounds);
    return acc;
}

Tensor defended_predict(const DefendedModel& defended, const Tensor& image, std::uint64_t seed) {
    return defended_predict(defended.model, image, defended.k, defended.rounds, seed, defended.null);
}

AttackResult attack_defended(const DefendedModel& defended, const Tensor& image, const Tensor& gt,
                             const AttackConfig& cfg) {
    const std::size_t d = spatial_size(image);
    const std::size_t k = defended.k;
    const NullEncoding& null = defended.null;
    const std::uint64_t base = derive_seed(cfg.seed, kAttackAblationStream);
    return run_whitebox_attack(defended.model, image, gt, cfg, [&](const Var& adv, std::size_t it) {
        return ablate(adv, sample_retention(d, k, derive_seed(base, it)), null);
    });
}

double adversarial_lambda(std::size_t epoch, std::size_t warmup, std::size_t ramp) {
    if (epoch < warmup) return 1.0;
    if (epoch - warmup < ramp) {
        return 1.0 - 0.5 * static_cast<double>(epoch - warmup + 1) / static_cast<double>(ramp);
    }
    return 0.5;
}

DefenseResult adversarial_train(Model model, std::span<const Example> data, const TrainConfig& cfg,
                                const AttackConfig& attack, std::size_t warmup, std::size_t ramp) {
    attack.validate();
    DefenseResult out;
    for (std::size_t e = 0; e < cfg.epochs; ++e) out.lambda_trace.push_back(adversarial_lambda(e, warmup, ramp));
    TrainResult r = train_with(
        std::move(model), data, cfg,
        [&](const Model& current, std::size_t epoch, std::size_t index, const Example& ex) {
            const double lambda = out.lambda_trace[epoch];
            std::vector<WeightedExample> terms{{ex.image, &ex.target, lambda}};
            if (lambda < 1.0) {
                AttackConfig acfg = attack;
                acfg.seed = derive_seed(derive_seed(attack.seed, kAdvTrainStream + epoch), index);
                Tensor adv = run_whitebox_attack(current, ex.image, ex.target, acfg).adversarial;
                terms.push_back({std::move(adv), &ex.target, 1.0 - lambda});
            }
            return terms;
        });
    out.defended.model = std::move(r.model);
    out.defended.method = "advtrain";
    // Deployed without ablation: keeping every pixel makes defended_predict plain prediction.
    out.defended.d = spatial_size(data.front().image);
    out.defended.k = out.defended.d;
    out.defended.rounds = 1;
    out.defended.null.mean.assign(data.front().image.dim(0), 0.0);
    out.loss_trace = std::move(r.loss_trace);
    return out;
}

std::vector<std::size_t> changed_pixels(const Tensor& a, const Tensor& b) {
    require_image(a, "changed_pixels");
    require_shape(b, a.shape(), "changed_pixels");
    const std::size_t plane = a.dim(1) * a.dim(2);
    std::vector<std::size_t> out;
    for (std::size_t p = 0; p < plane; ++p) {
        for (std::size_t c = 0; c < a.dim(0); ++c) {
            if (a[c * plane + p] != b[c * plane + p]) {
                out.push_back(p);
                break;
            }
        }
    }
    return out;
}

OverlapStats empirical_overlap_bounds(const Model& model, const Tensor& clean, const Tensor& adversarial,
                                      std::size_t k, std::size_t trials, std::size_t top_k,
                                      std::uint64_t seed, const NullEncoding& null) {
    if (trials < 1) throw Error("empirical_overlap_bounds: trials must be >= 1");
    const std::size_t d = spatial_size(clean);
    const std::vector<std::size_t> changed = changed_pixels(clean, adversarial);
    std::vector<bool> in_patch(d, false);
    for (std::size_t p : changed) in_patch[p] = true;

    OverlapStats stats;
    stats.histogram.assign(top_k + 1, 0);
    stats.trials = trials;
    stats.changed_pixels = changed.size();
    for (std::size_t t = 0; t < trials; ++t) {
        const RetentionSet keep = sample_retention(d, k, derive_seed(seed, t));
        const bool miss = std::none_of(keep.indices.begin(), keep.indices.end(),
                                       [&](std::size_t p) { return in_patch[p]; });
        const Tensor a = ablate(clean, keep, null);
        const Tensor b = ablate(adversarial, keep, null);
        const std::size_t r =
            cert::topk_overlap(predict_density(model, a), predict_density(model, b), top_k);
        ++stats.histogram[r];
        if (miss) {
            ++stats.misses;
            if (!(a == b) || r != top_k) ++stats.premise_violations;
        }
    }
    return stats;
}

std::filesystem::path sidecar_path(const std::filesystem::path& model_path) {
    return std::filesystem::path(model_path.string() + ".defense");
}

void save_defended(const std::filesystem::path& model_path, const DefendedModel& defended) {
    save_model(model_path, defended.model);
    std::string null;
    for (std::size_t c = 0; c < defended.null.mean.size(); ++c) {
        if (c) null += ',';
        null += fmt(defended.null.mean[c]);
    }
    const auto path = sidecar_path(model_path);
    std::ofstream os(path);
    if (!os) throw Error("cannot open " + path.string() + " for writing");
    write_text_header(os, {{"method", defended.method},
                           {"k", std::to_string(defended.k)},
                           {"d", std::to_string(defended.d)},
                           {"rounds", std::to_string(defended.rounds)},
                           {"null", null}});
    if (!os) throw Error("write failed for " + path.string());
}

DefendedModel load_defended(const std::filesystem::path& model_path) {
    DefendedModel out;
    out.model = load_model(model_path);
    const auto path = sidecar_path(model_path);
    std::ifstream is(path);
    if (!is) throw Error("cannot open " + path.string());
    const auto kv = read_text_header(is, path.string());
    const std::map<std::string, std::string> m(kv.begin(), kv.end());
    const auto get = [&](const std::string& key) -> const std::string& {
        const auto it = m.find(key);
        if (it == m.end()) throw FormatError(path.string() + ": missing key '" + key + "'");
        return it->second;
    };
    const auto to_size = [&](const std::string& key) {
        std::size_t v = 0;
        const std::string& s = get(key);
        const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
        if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
            throw FormatError(path.string() + ": bad integer for " + key);
        }
        return v;
    };
    out.method = get("method");
    out.k = to_size("k");
    out.d = to_size("d");
    out.rounds = to_size("rounds");
    std::stringstream ss(get("null"));
    std::string item;
    while (std::getline(ss, item, ',')) {
        double v = 0.0;
        const auto r = std::from_chars(item.data(), item.data() + item.size(), v);
        if (r.ec != std::errc() || r.ptr != item.data() + item.size()) {
            throw FormatError(path.string() + ": bad NULL value '" + item + "'");
        }
        out.null.mean.push_back(v);
    }
    return out;
}

}  // namespace apam
