#include "apam/scene.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "apam/rng.hpp"
#include "apam/tensor_io.hpp"

namespace apam {
namespace {

constexpr double kMinHeadSpacing = 3.0;
constexpr int kPlacementRetries = 2000;
constexpr double kBorder = 2.0;

bool too_close(const std::vector<Point>& pts, const Point& p) {
    const double min2 = kMinHeadSpacing * kMinHeadSpacing;
    for (const Point& q : pts) {
        const double dr = q.row - p.row;
        const double dc = q.col - p.col;
        if (dr * dr + dc * dc < min2) return true;
    }
    return false;
}

std::vector<Point> place_points(Rng& rng, std::size_t count, std::size_t h, std::size_t w,
                                SceneStyle style) {
    const double max_r = static_cast<double>(h) - 1.0 - kBorder;
    const double max_c = static_cast<double>(w) - 1.0 - kBorder;
    std::vector<Point> centres;
    double spread = 0.0;
    if (style == SceneStyle::clustered) {
        const std::size_t clusters = std::max<std::size_t>(1, count / 12);
        spread = static_cast<double>(std::min(h, w)) / 14.0;
        for (std::size_t i = 0; i < clusters; ++i) {
            centres.push_back({rng.uniform(h / 8.0, 7.0 * h / 8.0), rng.uniform(w / 8.0, 7.0 * w / 8.0)});
        }
    }
    std::vector<Point> pts;
    pts.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        int tries = 0;
        while (true) {
            Point p;
            if (style == SceneStyle::uniform) {
                p = {rng.uniform(kBorder, max_r), rng.uniform(kBorder, max_c)};
            } else {
                const Point& c = centres[rng.below(centres.size())];
                p = {c.row + spread * rng.normal(), c.col + spread * rng.normal()};
            }
            const bool inside = p.row >= kBorder && p.row <= max_r && p.col >= kBorder && p.col <= max_c;
            if (inside && !too_close(pts, p)) {
                pts.push_back(p);
                break;
            }
            if (++tries >= kPlacementRetries) {
                throw Error("synth_scene: could not place figure " + std::to_string(i + 1) + " of " +
                            std::to_string(count) + " after " + std::to_string(kPlacementRetries) +
                            " retries (canvas " + std::to_string(h) + "x" + std::to_string(w) + ")");
            }
        }
    }
    return pts;
}

// Alpha-composites an axis-aligned Gaussian-shaded ellipse.
void shade_ellipse(Tensor& img, double cr, double cc, double sr, double sc, const double* colour) {
    const std::size_t h = img.dim(1);
    const std::size_t w = img.dim(2);
    const int r0 = std::max(0, static_cast<int>(std::floor(cr - 3 * sr)));
    const int r1 = std::min(static_cast<int>(h) - 1, static_cast<int>(std::ceil(cr + 3 * sr)));
    const int c0 = std::max(0, static_cast<int>(std::floor(cc - 3 * sc)));
    const int c1 = std::min(static_cast<int>(w) - 1, static_cast<int>(std::ceil(cc + 3 * sc)));
    for (int r = r0; r <= r1; ++r) {
        for (int c = c0; c <= c1; ++c) {
            const double dr = (r - cr) / sr;
            const double dc = (c - cc) / sc;
            const double alpha = 0.95 * std::exp(-0.5 * (dr * dr + dc * dc));
            for (std::size_t ch = 0; ch < img.dim(0); ++ch) {
                double& v = img.at(ch, static_cast<std::size_t>(r), static_cast<std::size_t>(c));
                v = v * (1.0 - alpha) + colour[ch] * alpha;
            }
        }
    }
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

}  // namespace

SceneStyle parse_scene_style(const std::string& s) {
    if (s == "uniform") return SceneStyle::uniform;
    if (s == "clustered") return SceneStyle::clustered;
    throw Error("unknown scene style '" + s + "' (expected uniform or clustered)");
}

std::string to_string(SceneStyle style) {
    return style == SceneStyle::uniform ? "uniform" : "clustered";
}

Scene synth_scene(std::uint64_t seed, std::size_t count, std::size_t h, std::size_t w,
                  SceneStyle style) {
    if (h < 32 || w < 32) throw Error("synth_scene: canvas must be at least 32x32");
    Rng rng(seed);
    Scene scene;
    scene.image = Tensor(Shape{kImageChannels, h, w});
    Tensor& img = scene.image;

    double base[kImageChannels];
    for (double& b : base) b = rng.uniform(0.35, 0.6);
    struct Wave {
        double amp, fy, fx, phase;
    };
    Wave waves[3];
    for (Wave& wv : waves) {
        wv = {rng.uniform(0.02, 0.06), rng.uniform(0.02, 0.12), rng.uniform(0.02, 0.12),
              rng.uniform(0.0, 6.283185307179586)};
    }
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double texture = 0.0;
            for (const Wave& wv : waves) texture += wv.amp * std::sin(wv.fy * y + wv.fx * x + wv.phase);
            for (std::size_t c = 0; c < kImageChannels; ++c) {
                img.at(c, y, x) = base[c] + texture + rng.uniform(-0.03, 0.03);
            }
        }
    }

    scene.annotations.points = place_points(rng, count, h, w, style);
    for (const Point& p : scene.annotations.points) {
        double body[kImageChannels];
        const bool dark = rng.uniform() < 0.7;
        for (double& b : body) b = dark ? rng.uniform(0.03, 0.22) : rng.uniform(0.75, 0.95);
        double skin[kImageChannels] = {0.82, 0.62, 0.5};
        for (double& s : skin) s += rng.uniform(-0.08, 0.08);
        shade_ellipse(img, p.row + 4.5, p.col, 3.0, 2.0, body);
        shade_ellipse(img, p.row, p.col, 1.4, 1.4, skin);
    }
    for (double& v : img.data()) v = std::clamp(v, 0.0, 1.0);
    return scene;
}

Tensor density_from_points(const PointAnnotations& points, double sigma, std::size_t h,
                           std::size_t w) {
    if (!(sigma > 0.0)) throw Error("density_from_points: sigma must be positive");
    Tensor map(Shape{h, w});
    const int radius = static_cast<int>(std::ceil(4.0 * sigma));
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    std::vector<double> kernel;
    for (const Point& p : points.points) {
        const int pr = static_cast<int>(std::lround(p.row));
        const int pc = static_cast<int>(std::lround(p.col));
        const int side = 2 * radius + 1;
        kernel.assign(static_cast<std::size_t>(side * side), 0.0);
        double mass = 0.0;
        for (int dr = -radius; dr <= radius; ++dr) {
            for (int dc = -radius; dc <= radius; ++dc) {
                const double yr = pr + dr - p.row;
                const double xc = pc + dc - p.col;
                const double v = std::exp(-(yr * yr + xc * xc) * inv2s2);
                kernel[static_cast<std::size_t>((dr + radius) * side + dc + radius)] = v;
                mass += v;
            }
        }
        for (int dr = -radius; dr <= radius; ++dr) {
            const int r = pr + dr;
            if (r < 0 || r >= static_cast<int>(h)) continue;
            for (int dc = -radius; dc <= radius; ++dc) {
                const int c = pc + dc;
                if (c < 0 || c >= static_cast<int>(w)) continue;
                map.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) +=
                    kernel[static_cast<std::size_t>((dr + radius) * side + dc + radius)] / mass;
            }
        }
    }
    return map;
}

Tensor downsample_sum(const Tensor& map, std::size_t factor) {
    require_rank(map, 2, "downsample_sum");
    const std::size_t h = map.dim(0);
    const std::size_t w = map.dim(1);
    if (factor == 0 || h % factor != 0 || w % factor != 0) {
        throw ShapeError("downsample_sum: " + to_string(map.shape()) + " not divisible by " +
                         std::to_string(factor));
    }
    Tensor out(Shape{h / factor, w / factor});
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) out.at(y / factor, x / factor) += map.at(y, x);
    }
    return out;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> Dataset::split_indices(Split split) const {
    const std::size_t n = items.size();
    const std::size_t train_end = n * 8 / 10;
    const std::size_t val_end = n * 9 / 10;
    std::size_t lo = 0, hi = train_end;
    if (split == Split::val) lo = train_end, hi = val_end;
    if (split == Split::test) lo = val_end, hi = n;
    std::vector<std::size_t> out;
    for (std::size_t i = lo; i < hi; ++i) out.push_back(i);
    return out;
}

std::vector<DatasetItem> Dataset::subset(Split split) const {
    std::vector<DatasetItem> out;
    for (std::size_t i : split_indices(split)) out.push_back(items[i]);
    return out;
}

Dataset generate_dataset(const DatasetParams& params) {
    if (params.min_count > params.max_count) throw Error("generate_dataset: min_count > max_count");
    Dataset ds;
    ds.sigma = params.sigma;
    for (std::size_t i = 0; i < params.size; ++i) {
        Rng meta(derive_seed(params.seed, 1'000'000 + i));
        const std::size_t count =
            params.min_count + meta.below(params.max_count - params.min_count + 1);
        const SceneStyle style = i % 2 == 0 ? SceneStyle::uniform : SceneStyle::clustered;
        Scene scene = synth_scene(derive_seed(params.seed, i), count, params.height, params.width, style);
        char name[32];
        std::snprintf(name, sizeof name, "scene_%05zu", i);
        Tensor density =
            density_from_points(scene.annotations, params.sigma, params.height, params.width);
        ds.items.push_back({name, std::move(scene.image), std::move(scene.annotations), std::move(density)});
    }
    return ds;
}

void write_annotations(std::ostream& os, const PointAnnotations& points) {
    for (const Point& p : points.points) os << format_double(p.row) << '\t' << format_double(p.col) << '\n';
    os << "count\t" << points.count() << '\n';
}

PointAnnotations read_annotations(std::istream& is, const std::string& source) {
    PointAnnotations out;
    std::string line;
    std::streamoff offset = 0;
    const auto fail = [&](const std::string& why) {
        return FormatError(why + " in " + source + " at byte " + std::to_string(offset));
    };
    while (std::getline(is, line)) {
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw fail("annotation line without tab");
        const std::string a = line.substr(0, tab);
        const std::string b = line.substr(tab + 1);
        if (a == "count") {
            std::size_t n = 0;
            const auto res = std::from_chars(b.data(), b.data() + b.size(), n);
            if (res.ec != std::errc{} || res.ptr != b.data() + b.size()) throw fail("bad count");
            if (n != out.count()) {
                throw fail("count line says " + std::to_string(n) + " but file lists " +
                           std::to_string(out.count()) + " points");
            }
            return out;
        }
        Point p;
        const auto r1 = std::from_chars(a.data(), a.data() + a.size(), p.row);
        const auto r2 = std::from_chars(b.data(), b.data() + b.size(), p.col);
        if (r1.ec != std::errc{} || r1.ptr != a.data() + a.size() || r2.ec != std::errc{} ||
            r2.ptr != b.data() + b.size()) {
            throw fail("malformed point '" + line + "'");
        }
        out.points.push_back(p);
        offset += static_cast<std::streamoff>(line.size() + 1);
    }
    throw fail("missing count line");
}

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
    std::filesystem::create_directories(dir);
    std::ofstream index(dir / "index.txt");
    if (!index) throw Error("cannot create " + (dir / "index.txt").string());
    const std::size_t n = dataset.items.size();
    const auto range = [&](Split s) {
        const auto idx = dataset.split_indices(s);
        return idx.empty() ? std::string("none")
                           : std::to_string(idx.front()) + "-" + std::to_string(idx.back());
    };
    index << "# pct-dataset v1\n";
    index << "# records=" << n << "\n";
    index << "# sigma=" << format_double(dataset.sigma) << "\n";
    index << "# split train=" << range(Split::train) << " val=" << range(Split::val)
          << " test=" << range(Split::test) << "\n";
    for (const DatasetItem& item : dataset.items) {
        index << item.name << '\n';
        save_tensor(dir / (item.name + ".image.pct"), item.image);
        save_tensor(dir / (item.name + ".density.pct"), item.density);
        std::ofstream pts(dir / (item.name + ".points.txt"));
        write_annotations(pts, item.annotations);
    }
    if (!index) throw Error("write failed for " + (dir / "index.txt").string());
}

Dataset read_dataset(const std::filesystem::path& dir) {
    const auto index_path = dir / "index.txt";
    std::ifstream index(index_path);
    if (!index) throw Error("cannot open " + index_path.string());
    Dataset ds;
    std::string line;
    std::streamoff offset = 0;
    while (std::getline(index, line)) {
        const std::streamoff line_start = offset;
        offset += static_cast<std::streamoff>(line.size() + 1);
        if (line.empty()) continue;
        if (line[0] == '#') {
            if (line.rfind("# sigma=", 0) == 0) {
                const std::string v = line.substr(8);
                const auto res = std::from_chars(v.data(), v.data() + v.size(), ds.sigma);
                if (res.ec != std::errc{}) {
                    throw FormatError("bad sigma in " + index_path.string() + " at byte " +
                                      std::to_string(line_start));
                }
            }
            continue;
        }
        DatasetItem item;
        item.name = line;
        item.image = load_tensor(dir / (line + ".image.pct"));
        item.density = load_tensor(dir / (line + ".density.pct"));
        const auto pts_path = dir / (line + ".points.txt");
        std::ifstream pts(pts_path);
        if (!pts) throw Error("cannot open " + pts_path.string());
        item.annotations = read_annotations(pts, pts_path.string());
        ds.items.push_back(std::move(item));
    }
    return ds;
}

}  // namespace apam
