#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>

#include "apam/ablation.hpp"
#include "apam/cert.hpp"
#include "apam/ops.hpp"
#include "apam/scene.hpp"
#include "gradcheck.hpp"

using namespace apam;
using apam::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

std::vector<Example> tiny_examples(const Model& m, std::size_t n, std::uint64_t seed) {
    const Dataset ds = generate_dataset(
        {.size = n, .height = 32, .width = 32, .min_count = 2, .max_count = 8, .sigma = 4.0, .seed = seed});
    std::vector<Tensor> images, maps;
    for (const DatasetItem& it : ds.items) {
        images.push_back(it.image);
        maps.push_back(it.density);
    }
    return make_examples(m, images, maps);
}

const NullEncoding kGrey{{0.25, 0.5, 0.75}};

}  // namespace

TEST_CASE("sample_retention edge cases") {
    Rng rng(1);
    const RetentionSet all = sample_retention(10, 10, rng);
    for (std::size_t i = 0; i < 10; ++i) CHECK(all.indices[i] == i);
    CHECK(sample_retention(10, 0, rng).indices.empty());
    CHECK_THROWS_AS(sample_retention(5, 6, rng), Error);
    for (int trial = 0; trial < 200; ++trial) {
        const RetentionSet s = sample_retention(50, rng.below(51), rng);
        CHECK_NOTHROW(s.validate());
    }
    CHECK(sample_retention(100, 7, 42).indices == sample_retention(100, 7, 42).indices);
}

TEST_CASE("retention subsets are equiprobable") {
    // All 15 two-element subsets of six pixels.
    Rng rng(2);
    const int draws = 150000;
    std::map<std::pair<std::size_t, std::size_t>, int> freq;
    for (int i = 0; i < draws; ++i) {
        const RetentionSet s = sample_retention(6, 2, rng);
        ++freq[{s.indices[0], s.indices[1]}];
    }
    REQUIRE(freq.size() == 15);
    const double p = 1.0 / 15.0;
    const double sigma = std::sqrt(draws * p * (1 - p));
    for (const auto& [subset, n] : freq) CHECK(std::abs(n - draws * p) <= 3.0 * sigma);
}

TEST_CASE("null encoding is the per-channel mean") {
    Rng rng(3);
    std::vector<Tensor> images{random_tensor(Shape{3, 4, 4}, rng, 0, 1), random_tensor(Shape{3, 4, 4}, rng, 0, 1)};
    const NullEncoding null = null_encoding(images);
    REQUIRE(null.mean.size() == 3);
    for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (const Tensor& img : images) {
            for (std::size_t r = 0; r < 4; ++r) {
                for (std::size_t q = 0; q < 4; ++q) acc += img.at(c, r, q);
            }
        }
        CHECK(null.mean[c] == doctest::Approx(acc / 32.0).epsilon(1e-14));
    }
    CHECK_THROWS_AS(null_encoding({}), Error);
}

TEST_CASE("ablate keeps retained pixels across all channels") {
    Rng rng(4);
    const Tensor img = random_tensor(Shape{3, 6, 5}, rng, 0, 1);
    CHECK(ablate(img, sample_retention(30, 30, rng), kGrey) == img);
    const Tensor blank = ablate(img, sample_retention(30, 0, rng), kGrey);
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t p = 0; p < 30; ++p) CHECK(blank[c * 30 + p] == kGrey.mean[c]);
    }
    const RetentionSet s = sample_retention(30, 9, rng);
    const Tensor a = ablate(img, s, kGrey);
    for (std::size_t p = 0; p < 30; ++p) {
        const bool kept = std::binary_search(s.indices.begin(), s.indices.end(), p);
        for (std::size_t c = 0; c < 3; ++c) CHECK(a[c * 30 + p] == (kept ? img[c * 30 + p] : kGrey.mean[c]));
    }
    CHECK(ablate(a, s, kGrey) == a);
    CHECK_THROWS_AS(ablate(img, sample_retention(31, 3, rng), kGrey), ShapeError);
    CHECK_THROWS_AS(ablate(img, s, NullEncoding{{0.5}}), ShapeError);
}

TEST_CASE("ablation hides every change outside the retention set") {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const Tensor x = random_tensor(Shape{3, 8, 8}, rng, 0, 1);
        const RetentionSet s = sample_retention(64, rng.below(65), rng);
        Tensor y = x;
        for (std::size_t p = 0; p < 64; ++p) {
            if (!std::binary_search(s.indices.begin(), s.indices.end(), p) && rng.uniform() < 0.5) {
                for (std::size_t c = 0; c < 3; ++c) y[c * 64 + p] = rng.uniform();
            }
        }
        CHECK(ablate(x, s, kGrey) == ablate(y, s, kGrey));
    }
}

TEST_CASE("recorded ablation matches and routes gradients to retained pixels") {
    Rng rng(6);
    const Tensor img = random_tensor(Shape{3, 8, 8}, rng, 0, 1);
    const RetentionSet s = sample_retention(64, 20, rng);
    Tape tape;
    const Var x = tape.leaf(img, true);
    const Var a = ablate(x, s, kGrey);
    CHECK(a.value() == ablate(img, s, kGrey));
    const Tensor g = tape.backward(ops::sum(a))[x];
    for (std::size_t p = 0; p < 64; ++p) {
        const bool kept = std::binary_search(s.indices.begin(), s.indices.end(), p);
        for (std::size_t c = 0; c < 3; ++c) CHECK(g[c * 64 + p] == (kept ? 1.0 : 0.0));
    }
}

TEST_CASE("certificate retraining with every pixel kept is plain training") {
    const Model m = build_model(ModelSpec::defaults(Arch::dilated, 5));
    const auto ex = tiny_examples(m, 3, 8);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.seed = 4;
    const DefenseResult full = certificate_retrain(m, ex, 32 * 32, cfg);
    const TrainResult plain = train(m, ex, cfg);
    CHECK(full.defended.model == plain.model);
    CHECK(full.loss_trace == plain.loss_trace);

    const DefenseResult a = certificate_retrain(m, ex, 40, cfg);
    const DefenseResult b = certificate_retrain(m, ex, 40, cfg);
    CHECK(a.defended.model == b.defended.model);
    CHECK_FALSE(a.defended.model == plain.model);
    CHECK(a.defended.k == 40);
    CHECK(a.defended.d == 1024);
    CHECK_THROWS_AS(certificate_retrain(m, ex, 1025, cfg), Error);
}

TEST_CASE("defended_predict averages ablated predictions") {
    const Model m = build_model(ModelSpec::defaults(Arch::context, 2));
    Rng rng(7);
    const Tensor img = random_tensor(Shape{3, 32, 32}, rng, 0, 1);
    CHECK(defended_predict(m, img, 1024, 1, 3, kGrey) == predict_density(m, img));

    // Mean accumulated in reverse round order.
    const std::size_t rounds = 6;
    Tensor reversed(Shape{8, 8}, 0.0);
    for (std::size_t r = rounds; r-- > 0;) {
        reversed += predict_density(m, ablate(img, sample_retention(1024, 50, derive_seed(9, r)), kGrey));
    }
    reversed *= 1.0 / static_cast<double>(rounds);
    const Tensor forward = defended_predict(m, img, 50, rounds, 9, kGrey);
    for (std::size_t i = 0; i < forward.size(); ++i) CHECK(forward[i] == doctest::Approx(reversed[i]).epsilon(1e-12));
    CHECK_THROWS_AS(defended_predict(m, img, 50, 0, 9, kGrey), Error);
}

TEST_CASE("defended count variance shrinks with the number of rounds") {
    const Model m = build_model(ModelSpec::defaults(Arch::dilated, 3));
    Rng rng(8);
    const Tensor img = random_tensor(Shape{3, 32, 32}, rng, 0, 1);
    const auto variance = [&](std::size_t rounds, std::uint64_t base) {
        std::vector<double> counts;
        for (std::uint64_t b = 0; b < 50; ++b) {
            counts.push_back(count(defended_predict(m, img, 30, rounds, derive_seed(base, b), kGrey)));
        }
        double mean = 0.0;
        for (double c : counts) mean += c;
        mean /= 50.0;
        double v = 0.0;
        for (double c : counts) v += (c - mean) * (c - mean);
        return v / 49.0;
    };
    const double ratio = variance(1, 100) / variance(4, 200);
    CHECK(ratio >= 2.0);
    CHECK(ratio <= 8.0);
}

TEST_CASE("adversarial training schedule") {
    for (std::size_t e = 0; e < 4; ++e) CHECK(adversarial_lambda(e, 4, 5) == 1.0);
    CHECK(adversarial_lambda(4, 4, 5) == doctest::Approx(0.9));
    CHECK(adversarial_lambda(6, 4, 5) == doctest::Approx(0.7));
    CHECK(adversarial_lambda(8, 4, 5) == 0.5);
    CHECK(adversarial_lambda(100, 4, 5) == 0.5);
    CHECK(adversarial_lambda(2, 3, 0) == 1.0);
    CHECK(adversarial_lambda(3, 3, 0) == 0.5);
    for (std::size_t m = 0; m < 6; ++m) {
        for (std::size_t n = 0; n < 6; ++n) {
            double prev = 1.0;
            for (std::size_t e = 0; e < 15; ++e) {
                const double l = adversarial_lambda(e, m, n);
                CHECK((l >= 0.5 && l <= 1.0));
                CHECK(l <= prev);
                prev = l;
            }
        }
    }
}

TEST_CASE("adversarial training runs attacks only past warmup") {
    const Model m = build_model(ModelSpec::defaults(Arch::dilated, 6));
    const auto ex = tiny_examples(m, 2, 9);
    TrainConfig cfg;
    cfg.epochs = 3;
    AttackConfig attack;
    attack.side = 6;
    attack.iterations = 3;

    const DefenseResult warm = adversarial_train(m, ex, cfg, attack, 3, 2);
    CHECK(warm.defended.model == train(m, ex, cfg).model);
    CHECK(warm.lambda_trace == std::vector<double>{1.0, 1.0, 1.0});

    const DefenseResult adv = adversarial_train(m, ex, cfg, attack, 1, 0);
    CHECK(adv.lambda_trace == std::vector<double>{1.0, 0.5, 0.5});
    CHECK_FALSE(adv.defended.model == warm.defended.model);
    CHECK(adv.defended.method == "advtrain");
    const Tensor& img = ex[0].image;
    CHECK(defended_predict(adv.defended, img, 0) == predict_density(adv.defended.model, img));
}

TEST_CASE("overlap statistics on clean, fully ablated and patched inputs") {
    const Model m = build_model(ModelSpec::defaults(Arch::dilated, 7));
    Rng rng(9);
    const Tensor x = random_tensor(Shape{3, 16, 16}, rng, 0, 1);

    const OverlapStats same = empirical_overlap_bounds(m, x, x, 20, 50, 5, 1, kGrey);
    CHECK(same.histogram[5] == 50);
    CHECK(same.misses == 50);

    Tensor y = x;
    for (std::size_t c = 0; c < 3; ++c) y.at(c, 3, 4) = 1.0 - y.at(c, 3, 4);
    const OverlapStats blank = empirical_overlap_bounds(m, x, y, 0, 30, 5, 1, kGrey);
    CHECK(blank.histogram[5] == 30);
    CHECK(blank.changed_pixels == 1);
}

TEST_CASE("miss events never change the defended output") {
    const Model m = build_model(ModelSpec::defaults(Arch::dilated, 8));
    Rng rng(10);
    const Tensor x = random_tensor(Shape{3, 8, 8}, rng, 0, 1);
    Tensor y = x;
    for (std::size_t p = 0; p < 64; p += 9) {
        for (std::size_t c = 0; c < 3; ++c) y[c * 64 + p] = 1.0 - y[c * 64 + p];
    }
    const std::size_t n = changed_pixels(x, y).size();
    REQUIRE(n == 8);
    const std::size_t trials = 20000;
    const OverlapStats s = empirical_overlap_bounds(m, x, y, 4, trials, 3, 11, kGrey);
    CHECK(s.premise_violations == 0);
    const double p = cert::upper_bound({64, static_cast<std::int64_t>(n), 4, 1}).probability();
    const double sigma = std::sqrt(trials * p * (1 - p));
    CHECK(std::abs(static_cast<double>(s.misses) - trials * p) <= 3.0 * sigma);
    std::size_t total = 0;
    for (std::size_t h : s.histogram) total += h;
    CHECK(total == trials);
    CHECK(s.histogram[3] >= s.misses);
}

TEST_CASE("defended checkpoint and sidecar round trip") {
    const Model m = build_model(ModelSpec::defaults(Arch::multi_column, 3));
    DefendedModel d{m, 197, 16384, 10, NullEncoding{{0.1, 0.2000000000000001, 0.3}}, "ablation"};
    const fs::path dir = fs::temp_directory_path() / "apam_test_defended";
    fs::remove_all(dir);
    fs::create_directories(dir);
    save_defended(dir / "m.pcm", d);
    CHECK(fs::exists(dir / "m.pcm.defense"));
    const DefendedModel back = load_defended(dir / "m.pcm");
    CHECK(back.model == m);
    CHECK(back.k == 197);
    CHECK(back.d == 16384);
    CHECK(back.rounds == 10);
    CHECK(back.null == d.null);
    CHECK(back.method == "ablation");
    fs::remove_all(dir);
}
