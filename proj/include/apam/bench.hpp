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

#include "apam/ablation.hpp"
#include "apam/attack.hpp"
#include "apam/model.hpp"
#include "apam/scene.hpp"

namespace apam {

// ---------------------------------------------------------------------------
// Metrics

struct CountErrors {
    double mae = 0.0;
    double rmse = 0.0;
};

CountErrors mae_rmse(std::span<const double> gt_counts, std::span<const double> pred_counts);

/// |(y - y_adv) / y| * 100, or nullopt when y = 0 (undefined).
std::optional<double> error_rate(double y, double y_adv);

// ---------------------------------------------------------------------------
// Experiment configuration
//
// Flat text, one `key = value` per line, '#' comments. Keys before the first
// section header are global; `[victim]`, `[substitute]` and `[defense]`
// open a new block of the given kind and may repeat.

struct ModelEntry {
    std::string name;
    ModelSpec spec;  // spec.seed initialises the weights
};

struct DefenseEntry {
    std::string name;
    std::string method = "ablation";  // none | ablation | advtrain
    std::size_t k = 0;
    std::size_t rounds = kDefaultRounds;
    // adversarial training
    std::size_t warmup = 0;
    std::size_t ramp = 0;
    std::size_t side = 0;  // 0: largest attacked patch side
    std::size_t attack_iterations = 10;
    double attack_step = 0.03;
};

struct ExperimentConfig {
    std::filesystem::path output;
    DatasetParams data;
    TrainConfig train;
    std::vector<ModelEntry> victims;
    std::vector<ModelEntry> substitutes;
    std::string mode = "white";  // white | black | random
    AttackConfig attack;
    std::vector<std::size_t> patch_sides{0};  // strictly increasing; starts at 0 (clean)
    std::vector<DefenseEntry> defenses;       // grid order; "none" is always first
    std::uint64_t defense_seed = 0;
    std::size_t eval_images = 0;  // 0: the whole test split
    std::size_t threads = 0;      // 0: hardware concurrency

    void validate() const;
};

ExperimentConfig parse_config(std::istream& is, const std::string& source);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical text form; parse_config(to_text(c)) reproduces c except for
/// `threads`, which does not affect results.
std::string to_text(const ExperimentConfig& cfg);

/// FNV-1a over the canonical text, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Reports

struct ImageRecord {
    std::string image;
    double gt = 0.0;     // annotated head count
    double y = 0.0;      // prediction on the clean image
    double y_adv = 0.0;  // prediction on the attacked image
    std::optional<double> pi;
};

struct ReportRow {
    std::string model;
    std::string defense;
    std::size_t patch_side = 0;
    double mae = 0.0;
    double rmse = 0.0;
    double mean_pi = 0.0;  // over images with a defined error rate
    std::size_t undefined_pi = 0;
    std::vector<ImageRecord> images;
};

struct MetricsReport {
    std::vector<ReportRow> rows;
    std::vector<std::pair<std::string, std::string>> provenance;
};

/// Aggregates per-image records into a row (MAE/RMSE of gt against y_adv).
ReportRow summarise(std::string model, std::string defense, std::size_t patch_side,
                    std::vector<ImageRecord> images);

/// Header model,defense,patch_side,mae,rmse,mean_pi.
void write_report_csv(std::ostream& os, const MetricsReport& report);
/// One line per (row, image): model,defense,patch_side,image,gt,y,y_adv,pi.
/// Undefined error rates are written as "undefined".
void write_long_csv(std::ostream& os, const MetricsReport& report);
std::vector<ImageRecord> read_records_csv(std::istream& is, const std::string& source);
void write_records_csv(std::ostream& os, std::span<const ImageRecord> records);

// ---------------------------------------------------------------------------
// Pipeline

/// A stage failed; the message names the stage. Artifacts written by earlier
/// stages stay on disk.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what);
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

/// Runs fn(i) for i in [0, n) on up to `threads` workers; results land by
/// index. The first failure (lowest index) is rethrown after all workers stop.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

/// generate -> train -> defend -> attack -> evaluate -> report. Each stage
/// skips artifacts already present under cfg.output, so a rerun resumes.
/// Writes report.csv, report_long.csv and provenance.txt.
MetricsReport run_experiment(const ExperimentConfig& cfg);

/// Writes `path` through a temporary sibling and a rename.
void write_file_atomic(const std::filesystem::path& path, const std::function<void(std::ostream&)>& fn);

}  // namespace apam
