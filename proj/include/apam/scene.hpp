#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "apam/tensor.hpp"

namespace apam {

enum class SceneStyle { uniform, clustered };

SceneStyle parse_scene_style(const std::string& s);
std::string to_string(SceneStyle style);

struct Point {
    double row = 0.0;
    double col = 0.0;

    friend bool operator==(const Point&, const Point&) = default;
};

/// Head positions in pixel coordinates; pixel (i, j) has its centre at (i, j).
struct PointAnnotations {
    std::vector<Point> points;

    std::size_t count() const noexcept { return points.size(); }
    friend bool operator==(const PointAnnotations&, const PointAnnotations&) = default;
};

struct Scene {
    Tensor image;  // (channels, h, w), values in [0, 1]
    PointAnnotations annotations;
};

inline constexpr double kDefaultSigma = 4.0;
inline constexpr std::size_t kDefaultCanvas = 128;
inline constexpr std::size_t kImageChannels = 3;

/// Renders `count` figures on a textured background. Identical arguments
/// give bit-identical output. Throws Error if the figures cannot be placed
/// with the minimum head spacing.
Scene synth_scene(std::uint64_t seed, std::size_t count, std::size_t h, std::size_t w,
                  SceneStyle style);

/// Sum of per-point Gaussians, each normalised to unit mass over its kernel
/// window before being cut to the canvas.
Tensor density_from_points(const PointAnnotations& points, double sigma, std::size_t h,
                           std::size_t w);

/// Mass-preserving block sum: (h, w) -> (h / factor, w / factor).
Tensor downsample_sum(const Tensor& map, std::size_t factor);

// ---------------------------------------------------------------------------
// Datasets

struct DatasetParams {
    std::size_t size = 100;
    std::size_t height = kDefaultCanvas;
    std::size_t width = kDefaultCanvas;
    std::size_t min_count = 10;
    std::size_t max_count = 60;
    double sigma = kDefaultSigma;
    std::uint64_t seed = 0;
};

struct DatasetItem {
    std::string name;
    Tensor image;
    PointAnnotations annotations;
    Tensor density;

    friend bool operator==(const DatasetItem&, const DatasetItem&) = default;
};

enum class Split { train, val, test };

struct Dataset {
    std::vector<DatasetItem> items;
    double sigma = kDefaultSigma;

    /// 80/10/10 by position: the first 80% train, the next 10% val, the rest test.
    std::vector<std::size_t> split_indices(Split split) const;
    std::vector<DatasetItem> subset(Split split) const;

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Scene i uses seed derive_seed(params.seed, i); styles alternate
/// uniform/clustered and counts are drawn from [min_count, max_count].
Dataset generate_dataset(const DatasetParams& params);

/// Directory layout: `index.txt` (one record basename per line; lines
/// starting with '#' are metadata) and per record `<name>.image.pct`,
/// `<name>.density.pct`, `<name>.points.txt`.
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& dir);

void write_annotations(std::ostream& os, const PointAnnotations& points);
PointAnnotations read_annotations(std::istream& is, const std::string& source);

}  // namespace apam
