#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "apam/rng.hpp"
#include "apam/scene.hpp"
#include "apam/tensor_io.hpp"

using namespace apam;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("apam_test_" + name);
    fs::remove_all(p);
    return p;
}

double median_nearest_neighbour(const std::vector<Point>& pts) {
    std::vector<double> nn;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        double best = INFINITY;
        for (std::size_t j = 0; j < pts.size(); ++j) {
            if (i == j) continue;
            best = std::min(best, std::hypot(pts[i].row - pts[j].row, pts[i].col - pts[j].col));
        }
        nn.push_back(best);
    }
    std::sort(nn.begin(), nn.end());
    return nn[nn.size() / 2];
}

// Mass of a continuous 2-D Gaussian over the canvas cells [-0.5, n - 0.5].
double gaussian_canvas_mass(double r, double c, double sigma, double h, double w) {
    const auto axis = [sigma](double mu, double n) {
        const double s = sigma * std::sqrt(2.0);
        return 0.5 * (std::erf((n - 0.5 - mu) / s) - std::erf((-0.5 - mu) / s));
    };
    return axis(r, h) * axis(c, w);
}

}  // namespace

TEST_CASE("synth_scene with zero figures") {
    const Scene s = synth_scene(1, 0, 64, 64, SceneStyle::uniform);
    CHECK(s.annotations.count() == 0);
    CHECK(s.image.shape() == Shape{3, 64, 64});
    for (double v : s.image.data()) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("synth_scene is deterministic and points lie inside the canvas") {
    const Scene a = synth_scene(42, 30, 96, 80, SceneStyle::clustered);
    const Scene b = synth_scene(42, 30, 96, 80, SceneStyle::clustered);
    CHECK(a.image == b.image);
    CHECK(a.annotations == b.annotations);
    CHECK(a.annotations.count() == 30);
    for (const Point& p : a.annotations.points) {
        CHECK((p.row >= 0 && p.row <= 95 && p.col >= 0 && p.col <= 79));
    }
    const Scene c = synth_scene(43, 30, 96, 80, SceneStyle::clustered);
    CHECK_FALSE(a.image == c.image);
}

TEST_CASE("synth_scene rejects undersized canvases and impossible counts") {
    CHECK_THROWS_AS(synth_scene(1, 1, 16, 64, SceneStyle::uniform), Error);
    CHECK_THROWS_AS(synth_scene(1, 5000, 32, 32, SceneStyle::uniform), Error);
}

TEST_CASE("clustered scenes have tighter nearest-neighbour spacing") {
    const Scene clustered = synth_scene(7, 50, 128, 128, SceneStyle::clustered);
    const Scene uniform = synth_scene(7, 50, 128, 128, SceneStyle::uniform);
    CHECK(median_nearest_neighbour(clustered.annotations.points) <
          median_nearest_neighbour(uniform.annotations.points));
}

TEST_CASE("density_from_points mass") {
    CHECK(density_from_points({}, 4.0, 32, 32).sum() == 0.0);

    const PointAnnotations centre{{{32.0, 32.0}}};
    const Tensor m = density_from_points(centre, 4.0, 64, 64);
    CHECK(std::abs(m.sum() - gaussian_canvas_mass(32, 32, 4, 64, 64)) <= 1e-6);
    CHECK(std::abs(m.sum() - 1.0) <= 1e-6);
    CHECK(density_from_points(centre, 4.0, 64, 64) == m);
    CHECK_THROWS_AS(density_from_points(centre, 0.0, 8, 8), Error);
}

TEST_CASE("density mass invariant for interior annotations") {
    Rng rng(5);
    const double sigma = 4.0;
    for (int trial = 0; trial < 50; ++trial) {
        PointAnnotations pts;
        const std::size_t n = 1 + rng.below(40);
        for (std::size_t i = 0; i < n; ++i) {
            pts.points.push_back({rng.uniform(3 * sigma, 127 - 3 * sigma), rng.uniform(3 * sigma, 95 - 3 * sigma)});
        }
        const Tensor m = density_from_points(pts, sigma, 128, 96);
        CHECK(std::abs(m.sum() - static_cast<double>(n)) <= 0.01 * static_cast<double>(n));
        for (double v : m.data()) CHECK(v >= 0.0);
    }
}

TEST_CASE("downsample_sum preserves mass") {
    const Scene s = synth_scene(9, 40, 128, 128, SceneStyle::uniform);
    const Tensor m = density_from_points(s.annotations, 4.0, 128, 128);
    const Tensor d = downsample_sum(m, 4);
    CHECK(d.shape() == Shape{32, 32});
    CHECK(d.sum() == doctest::Approx(m.sum()).epsilon(1e-12));
    CHECK_THROWS_AS(downsample_sum(Tensor(Shape{6, 8}), 4), ShapeError);
}

TEST_CASE("tensor file round trip and format errors") {
    Rng rng(1);
    Tensor t(Shape{2, 3, 4});
    for (double& v : t.data()) v = rng.normal();
    std::stringstream ss;
    write_tensor(ss, t);
    const std::string bytes = ss.str();
    CHECK(bytes.substr(0, 4) == "PCT1");
    CHECK(bytes.size() == 4 + 4 + 3 * 4 + 24 * 8);
    CHECK(static_cast<unsigned char>(bytes[4]) == 3);  // rank, little endian
    std::stringstream in(bytes);
    CHECK(read_tensor(in, "mem") == t);

    std::stringstream bad("PCX1" + bytes.substr(4));
    CHECK_THROWS_AS(read_tensor(bad, "mem"), FormatError);

    std::stringstream cut(bytes.substr(0, bytes.size() - 5));
    try {
        read_tensor(cut, "cut.pct");
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("cut.pct") != std::string::npos);
        CHECK(msg.find("byte") != std::string::npos);
    }
}

TEST_CASE("dataset round trip is bit exact") {
    const Dataset ds = generate_dataset({.size = 10, .height = 64, .width = 64, .min_count = 3,
                                         .max_count = 12, .sigma = 4.0, .seed = 11});
    REQUIRE(ds.items.size() == 10);
    CHECK(ds.split_indices(Split::train).size() == 8);
    CHECK(ds.split_indices(Split::val) == std::vector<std::size_t>{8});
    CHECK(ds.split_indices(Split::test) == std::vector<std::size_t>{9});

    const fs::path dir = scratch_dir("dataset_rt");
    write_dataset(dir, ds);
    const Dataset back = read_dataset(dir);
    CHECK(back == ds);

    std::ifstream index(dir / "index.txt");
    std::string first;
    std::getline(index, first);
    CHECK(first[0] == '#');
    fs::remove_all(dir);
}

TEST_CASE("empty dataset and corrupted files") {
    const fs::path dir = scratch_dir("dataset_empty");
    write_dataset(dir, Dataset{});
    CHECK(fs::exists(dir / "index.txt"));
    CHECK(read_dataset(dir).items.empty());
    fs::remove_all(dir);

    const fs::path dir2 = scratch_dir("dataset_corrupt");
    write_dataset(dir2, generate_dataset({.size = 2, .height = 32, .width = 32, .min_count = 1,
                                          .max_count = 3, .sigma = 4.0, .seed = 1}));
    {
        std::fstream f(dir2 / "scene_00001.image.pct", std::ios::in | std::ios::out | std::ios::binary);
        f.write("XXXX", 4);
    }
    try {
        read_dataset(dir2);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("scene_00001.image.pct") != std::string::npos);
    }
    fs::remove_all(dir2);
}

TEST_CASE("annotation text format") {
    const PointAnnotations pts{{{1.25, 2.5}, {0.1, 3.0000000000000004}}};
    std::stringstream ss;
    write_annotations(ss, pts);
    CHECK(ss.str() == "1.25\t2.5\n0.1\t3.0000000000000004\ncount\t2\n");
    CHECK(read_annotations(ss, "mem") == pts);

    std::stringstream wrong("1\t2\ncount\t3\n");
    CHECK_THROWS_AS(read_annotations(wrong, "mem"), FormatError);
}
