#include "apam/bench.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "apam/tensor_io.hpp"

namespace apam {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

double to_double(const std::string& s, const std::string& where) {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw Error(where + ": bad number '" + s + "'");
    return v;
}

std::uint64_t to_uint(const std::string& s, const std::string& where) {
    std::uint64_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw Error(where + ": bad integer '" + s + "'");
    return v;
}

bool to_bool(const std::string& s, const std::string& where) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw Error(where + ": bad boolean '" + s + "'");
}

std::vector<std::size_t> to_list(const std::string& s, const std::string& where) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(to_uint(trim(item), where));
    return out;
}

std::string default_model_name(const ModelSpec& spec) {
    return to_string(spec.arch) + "-" + std::to_string(spec.seed);
}

std::string default_defense_name(const DefenseEntry& d) {
    return d.method == "ablation" ? "ablation-k" + std::to_string(d.k) : d.method;
}

}  // namespace

// ---------------------------------------------------------------------------
// Metrics

CountErrors mae_rmse(std::span<const double> gt_counts, std::span<const double> pred_counts) {
    if (gt_counts.size() != pred_counts.size()) {
        throw Error("mae_rmse: " + std::to_string(gt_counts.size()) + " ground-truth counts but " +
                    std::to_string(pred_counts.size()) + " predictions");
    }
    if (gt_counts.empty()) throw Error("mae_rmse: no counts");
    double abs_sum = 0.0, sq_sum = 0.0;
    for (std::size_t i = 0; i < gt_counts.size(); ++i) {
        const double e = gt_counts[i] - pred_counts[i];
        abs_sum += std::abs(e);
        sq_sum += e * e;
    }
    const double n = static_cast<double>(gt_counts.size());
    return {abs_sum / n, std::sqrt(sq_sum / n)};
}

std::optional<double> error_rate(double y, double y_adv) {
    if (y == 0.0) return std::nullopt;
    return std::abs((y - y_adv) / y) * 100.0;
}

// ---------------------------------------------------------------------------
// Configuration

void ExperimentConfig::validate() const {
    if (output.empty()) throw Error("config: output directory not set");
    if (victims.empty()) throw Error("config: no [victim] models");
    if (mode != "white" && mode != "black" && mode != "random") {
        throw Error("config: mode must be white, black or random, got '" + mode + "'");
    }
    if (mode == "black" && substitutes.empty()) throw Error("config: black-box mode needs [substitute] models");
    if (data.height % 4 != 0 || data.width % 4 != 0) throw Error("config: canvas sides must be multiples of 4");
    train.validate();
    attack.validate();

    std::set<std::string> names;
    for (const auto* group : {&victims, &substitutes}) {
        for (const ModelEntry& m : *group) {
            m.spec.validate();
            if (!names.insert(m.name).second) throw Error("config: duplicate model name '" + m.name + "'");
            if (m.name.find_first_of("/,. ") != std::string::npos) {
                throw Error("config: model name '" + m.name + "' contains one of \"/,. \"");
            }
        }
    }

    if (patch_sides.empty() || patch_sides.front() != 0) throw Error("config: patch sides must start at 0 (clean)");
    for (std::size_t i = 1; i < patch_sides.size(); ++i) {
        if (patch_sides[i] <= patch_sides[i - 1]) throw Error("config: patch sides must be strictly increasing");
    }
    const double widest = static_cast<double>(patch_sides.back()) * (attack.random_transforms ? attack.max_scale : 1.0);
    if (std::ceil(widest) > static_cast<double>(std::min(data.height, data.width))) {
        throw Error("config: patch side " + std::to_string(patch_sides.back()) + " does not fit the canvas");
    }

    if (defenses.empty() || defenses.front().method != "none") throw Error("config: the first defense must be none");
    std::set<std::string> dnames;
    const std::size_t d = data.height * data.width;
    for (const DefenseEntry& e : defenses) {
        if (!dnames.insert(e.name).second) throw Error("config: duplicate defense name '" + e.name + "'");
        if (e.name.find_first_of("/,. ") != std::string::npos) {
            throw Error("config: defense name '" + e.name + "' contains one of \"/,. \"");
        }
        if (e.method == "ablation") {
            if (e.k == 0 || e.k > d) throw Error("config: defense '" + e.name + "' needs 1 <= k <= " + std::to_string(d));
            if (e.rounds == 0) throw Error("config: defense '" + e.name + "' needs rounds >= 1");
        } else if (e.method == "advtrain") {
            if (e.attack_iterations == 0) throw Error("config: defense '" + e.name + "' needs attack_iterations >= 1");
        } else if (e.method != "none") {
            throw Error("config: unknown defense method '" + e.method + "'");
        }
    }
}

ExperimentConfig parse_config(std::istream& is, const std::string& source) {
    ExperimentConfig cfg;
    cfg.defenses.clear();
    std::set<std::string> seeds_seen;
    enum class Block { global, victim, substitute, defense } block = Block::global;
    std::set<std::string> model_seeds;  // per block: whether seed was given

    const auto check_model_seed = [&](std::size_t line_no) {
        if ((block == Block::victim || block == Block::substitute) && model_seeds.empty()) {
            throw Error(source + ":" + std::to_string(line_no) + ": model block without an explicit seed");
        }
    };

    std::string raw;
    std::size_t line_no = 0;
    std::size_t last_block_line = 0;
    while (std::getline(is, raw)) {
        ++line_no;
        const std::string line = trim(raw.substr(0, raw.find('#')));
        if (line.empty()) continue;
        const std::string where = source + ":" + std::to_string(line_no);
        if (line.front() == '[') {
            check_model_seed(last_block_line);
            const std::string kind = line;
            model_seeds.clear();
            last_block_line = line_no;
            if (kind == "[victim]") {
                block = Block::victim;
                cfg.victims.push_back({"", ModelSpec::defaults(Arch::dilated, 0)});
            } else if (kind == "[substitute]") {
                block = Block::substitute;
                cfg.substitutes.push_back({"", ModelSpec::defaults(Arch::dilated, 0)});
            } else if (kind == "[defense]") {
                block = Block::defense;
                cfg.defenses.push_back({});
                cfg.defenses.back().name.clear();
            } else {
                throw Error(where + ": unknown section " + kind);
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw Error(where + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const std::string at = where + " (" + key + ")";

        if (block == Block::victim || block == Block::substitute) {
            ModelEntry& m = block == Block::victim ? cfg.victims.back() : cfg.substitutes.back();
            if (key == "name") {
                m.name = value;
            } else if (key == "arch") {
                const std::uint64_t seed = m.spec.seed;
                m.spec = ModelSpec::defaults(parse_arch(value), seed);
            } else if (key == "seed") {
                m.spec.seed = to_uint(value, at);
                model_seeds.insert(key);
            } else {
                throw Error(where + ": unknown model key '" + key + "'");
            }
            continue;
        }
        if (block == Block::defense) {
            DefenseEntry& d = cfg.defenses.back();
            if (key == "name") d.name = value;
            else if (key == "method") d.method = value;
            else if (key == "k") d.k = to_uint(value, at);
            else if (key == "rounds") d.rounds = to_uint(value, at);
            else if (key == "warmup") d.warmup = to_uint(value, at);
            else if (key == "ramp") d.ramp = to_uint(value, at);
            else if (key == "side") d.side = to_uint(value, at);
            else if (key == "attack_iterations") d.attack_iterations = to_uint(value, at);
            else if (key == "attack_step") d.attack_step = to_double(value, at);
            else throw Error(where + ": unknown defense key '" + key + "'");
            continue;
        }

        if (key.ends_with("seed")) seeds_seen.insert(key);
        if (key == "output") cfg.output = value;
        else if (key == "data.size") cfg.data.size = to_uint(value, at);
        else if (key == "data.height") cfg.data.height = to_uint(value, at);
        else if (key == "data.width") cfg.data.width = to_uint(value, at);
        else if (key == "data.min_count") cfg.data.min_count = to_uint(value, at);
        else if (key == "data.max_count") cfg.data.max_count = to_uint(value, at);
        else if (key == "data.sigma") cfg.data.sigma = to_double(value, at);
        else if (key == "data.seed") cfg.data.seed = to_uint(value, at);
        else if (key == "train.lr") cfg.train.learning_rate = to_double(value, at);
        else if (key == "train.epochs") cfg.train.epochs = to_uint(value, at);
        else if (key == "train.optimizer") cfg.train.optimizer = parse_optimizer(value);
        else if (key == "train.momentum") cfg.train.momentum = to_double(value, at);
        else if (key == "train.seed") cfg.train.seed = to_uint(value, at);
        else if (key == "mode") cfg.mode = value;
        else if (key == "patch_sides") cfg.patch_sides = to_list(value, at);
        else if (key == "attack.target_factor") cfg.attack.target_factor = to_double(value, at);
        else if (key == "attack.gamma") cfg.attack.gamma = to_double(value, at);
        else if (key == "attack.step") cfg.attack.step = to_double(value, at);
        else if (key == "attack.momentum") cfg.attack.momentum = to_double(value, at);
        else if (key == "attack.iterations") cfg.attack.iterations = to_uint(value, at);
        else if (key == "attack.restarts") cfg.attack.restarts = to_uint(value, at);
        else if (key == "attack.placement") cfg.attack.placement = parse_placement(value);
        else if (key == "attack.random_transforms") cfg.attack.random_transforms = to_bool(value, at);
        else if (key == "attack.max_angle_deg") cfg.attack.max_angle_deg = to_double(value, at);
        else if (key == "attack.min_scale") cfg.attack.min_scale = to_double(value, at);
        else if (key == "attack.max_scale") cfg.attack.max_scale = to_double(value, at);
        else if (key == "attack.batch") cfg.attack.batch = to_uint(value, at);
        else if (key == "attack.seed") cfg.attack.seed = to_uint(value, at);
        else if (key == "defense.seed") cfg.defense_seed = to_uint(value, at);
        else if (key == "eval.images") cfg.eval_images = to_uint(value, at);
        else if (key == "threads") cfg.threads = to_uint(value, at);
        else throw Error(where + ": unknown key '" + key + "'");
    }
    check_model_seed(last_block_line);

    for (const char* required : {"data.seed", "train.seed", "attack.seed", "defense.seed"}) {
        if (!seeds_seen.contains(required)) throw Error(source + ": missing explicit " + required);
    }
    for (auto* group : {&cfg.victims, &cfg.substitutes}) {
        for (ModelEntry& m : *group) {
            if (m.name.empty()) m.name = default_model_name(m.spec);
        }
    }
    for (DefenseEntry& d : cfg.defenses) {
        if (d.name.empty()) d.name = default_defense_name(d);
    }
    if (cfg.defenses.empty() || cfg.defenses.front().method != "none") {
        DefenseEntry none;
        none.method = "none";
        none.name = "none";
        cfg.defenses.insert(cfg.defenses.begin(), none);
    }
    if (cfg.patch_sides.empty() || cfg.patch_sides.front() != 0) cfg.patch_sides.insert(cfg.patch_sides.begin(), 0);
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open config " + path.string());
    return parse_config(is, path.string());
}

std::string to_text(const ExperimentConfig& c) {
    std::ostringstream os;
    const auto kv = [&](const std::string& k, const std::string& v) { os << k << " = " << v << '\n'; };
    kv("output", c.output.string());
    kv("data.size", std::to_string(c.data.size));
    kv("data.height", std::to_string(c.data.height));
    kv("data.width", std::to_string(c.data.width));
    kv("data.min_count", std::to_string(c.data.min_count));
    kv("data.max_count", std::to_string(c.data.max_count));
    kv("data.sigma", fmt(c.data.sigma));
    kv("data.seed", std::to_string(c.data.seed));
    kv("train.lr", fmt(c.train.learning_rate));
    kv("train.epochs", std::to_string(c.train.epochs));
    kv("train.optimizer", to_string(c.train.optimizer));
    kv("train.momentum", fmt(c.train.momentum));
    kv("train.seed", std::to_string(c.train.seed));
    kv("mode", c.mode);
    std::string sides;
    for (std::size_t s : c.patch_sides) sides += (sides.empty() ? "" : ",") + std::to_string(s);
    kv("patch_sides", sides);
    kv("attack.target_factor", fmt(c.attack.target_factor));
    kv("attack.gamma", fmt(c.attack.gamma));
    kv("attack.step", fmt(c.attack.step));
    kv("attack.momentum", fmt(c.attack.momentum));
    kv("attack.iterations", std::to_string(c.attack.iterations));
    kv("attack.restarts", std::to_string(c.attack.restarts));
    kv("attack.placement", to_string(c.attack.placement));
    kv("attack.random_transforms", c.attack.random_transforms ? "true" : "false");
    kv("attack.max_angle_deg", fmt(c.attack.max_angle_deg));
    kv("attack.min_scale", fmt(c.attack.min_scale));
    kv("attack.max_scale", fmt(c.attack.max_scale));
    kv("attack.batch", std::to_string(c.attack.batch));
    kv("attack.seed", std::to_string(c.attack.seed));
    kv("defense.seed", std::to_string(c.defense_seed));
    kv("eval.images", std::to_string(c.eval_images));
    for (const auto& [header, group] : {std::pair{"[victim]", &c.victims}, std::pair{"[substitute]", &c.substitutes}}) {
        for (const ModelEntry& m : *group) {
            os << '\n' << header << '\n';
            kv("name", m.name);
            kv("arch", to_string(m.spec.arch));
            kv("seed", std::to_string(m.spec.seed));
        }
    }
    for (const DefenseEntry& d : c.defenses) {
        os << "\n[defense]\n";
        kv("name", d.name);
        kv("method", d.method);
        if (d.method == "ablation") {
            kv("k", std::to_string(d.k));
            kv("rounds", std::to_string(d.rounds));
        } else if (d.method == "advtrain") {
            kv("warmup", std::to_string(d.warmup));
            kv("ramp", std::to_string(d.ramp));
            kv("side", std::to_string(d.side));
            kv("attack_iterations", std::to_string(d.attack_iterations));
            kv("attack_step", fmt(d.attack_step));
        }
    }
    return os.str();
}

std::string config_hash(const ExperimentConfig& cfg) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : to_text(cfg)) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------
// Reports

ReportRow summarise(std::string model, std::string defense, std::size_t patch_side,
                    std::vector<ImageRecord> images) {
    ReportRow row{std::move(model), std::move(defense), patch_side, 0, 0, 0, 0, std::move(images)};
    std::vector<double> gt, pred;
    double pi_sum = 0.0;
    std::size_t defined = 0;
    for (const ImageRecord& r : row.images) {
        gt.push_back(r.gt);
        pred.push_back(r.y_adv);
        if (r.pi) {
            pi_sum += *r.pi;
            ++defined;
        } else {
            ++row.undefined_pi;
        }
    }
    const CountErrors e = mae_rmse(gt, pred);
    row.mae = e.mae;
    row.rmse = e.rmse;
    row.mean_pi = defined ? pi_sum / static_cast<double>(defined) : std::nan("");
    return row;
}

void write_report_csv(std::ostream& os, const MetricsReport& report) {
    os << "model,defense,patch_side,mae,rmse,mean_pi\n";
    for (const ReportRow& r : report.rows) {
        os << r.model << ',' << r.defense << ',' << r.patch_side << ',' << fmt(r.mae) << ',' << fmt(r.rmse) << ','
           << (std::isnan(r.mean_pi) ? std::string("undefined") : fmt(r.mean_pi)) << '\n';
    }
}

void write_long_csv(std::ostream& os, const MetricsReport& report) {
    os << "model,defense,patch_side,image,gt,y,y_adv,pi\n";
    for (const ReportRow& r : report.rows) {
        for (const ImageRecord& im : r.images) {
            os << r.model << ',' << r.defense << ',' << r.patch_side << ',' << im.image << ',' << fmt(im.gt) << ','
               << fmt(im.y) << ',' << fmt(im.y_adv) << ',' << (im.pi ? fmt(*im.pi) : std::string("undefined"))
               << '\n';
        }
    }
}

void write_records_csv(std::ostream& os, std::span<const ImageRecord> records) {
    os << "image,gt,y,y_adv,pi\n";
    for (const ImageRecord& im : records) {
        os << im.image << ',' << fmt(im.gt) << ',' << fmt(im.y) << ',' << fmt(im.y_adv) << ','
           << (im.pi ? fmt(*im.pi) : std::string("undefined")) << '\n';
    }
}

std::vector<ImageRecord> read_records_csv(std::istream& is, const std::string& source) {
    std::string line;
    if (!std::getline(is, line) || line != "image,gt,y,y_adv,pi") throw FormatError(source + ": bad records header");
    std::vector<ImageRecord> out;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string item;
        while (std::getline(ss, item, ',')) f.push_back(item);
        const std::string where = source + ":" + std::to_string(line_no);
        if (f.size() != 5) throw FormatError(where + ": expected 5 fields");
        ImageRecord r{f[0], to_double(f[1], where), to_double(f[2], where), to_double(f[3], where), std::nullopt};
        if (f[4] != "undefined") r.pi = to_double(f[4], where);
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pipeline

StageError::StageError(std::string stage, const std::string& what)
    : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = std::min(threads, n);
    std::vector<std::exception_ptr> errors(n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
                break;
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::atomic<bool> failed{false};
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&] {
                for (std::size_t i; !failed && (i = next++) < n;) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                        failed = true;
                    }
                }
            });
        }
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

void write_file_atomic(const fs::path& path, const std::function<void(std::ostream&)>& fn) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".partial";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw Error("cannot write " + tmp.string());
        fn(os);
        os.flush();
        if (!os) throw Error("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

namespace {

template <class F>
auto stage(const std::string& name, F&& f) {
    try {
        return f();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

std::vector<Example> examples_for(const Model& m, std::span<const DatasetItem> items) {
    std::vector<Tensor> images, maps;
    for (const DatasetItem& it : items) {
        images.push_back(it.image);
        maps.push_back(it.density);
    }
    return make_examples(m, images, maps);
}

DefendedModel undefended(const Model& m, std::size_t d, std::size_t channels) {
    return DefendedModel{m, d, d, 1, NullEncoding{std::vector<double>(channels, 0.0)}, "none"};
}

void save_defended_atomic(const fs::path& path, const DefendedModel& dm) {
    fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".partial";
    save_defended(tmp, dm);
    fs::rename(sidecar_path(tmp), sidecar_path(path));
    fs::rename(tmp, path);
}

}  // namespace

MetricsReport run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const fs::path out = cfg.output;
    fs::create_directories(out);
    const std::string text = to_text(cfg);
    const fs::path cfg_path = out / "config.txt";
    if (fs::exists(cfg_path)) {
        std::ifstream is(cfg_path);
        const std::string previous((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        if (previous != text) throw Error(out.string() + " holds artifacts of a different configuration");
    } else {
        write_file_atomic(cfg_path, [&](std::ostream& os) { os << text; });
    }

    const Dataset ds = stage("generate", [&] {
        const fs::path dir = out / "data";
        if (!fs::exists(dir / "index.txt")) {
            const fs::path tmp = out / "data.partial";
            fs::remove_all(tmp);
            write_dataset(tmp, generate_dataset(cfg.data));
            fs::remove_all(dir);
            fs::rename(tmp, dir);
        }
        return read_dataset(dir);
    });
    const std::vector<DatasetItem> train_items = ds.subset(Split::train);
    std::vector<DatasetItem> test_items = ds.subset(Split::test);
    if (cfg.eval_images && test_items.size() > cfg.eval_images) test_items.resize(cfg.eval_images);
    if (train_items.empty() || test_items.empty()) throw StageError("generate", "empty train or test split");
    const std::size_t channels = test_items.front().image.dim(0);
    const std::size_t d = cfg.data.height * cfg.data.width;

    std::map<std::string, Model> models = stage("train", [&] {
        std::map<std::string, Model> trained;
        std::vector<const ModelEntry*> todo;
        for (const ModelEntry& m : cfg.victims) todo.push_back(&m);
        if (cfg.mode == "black") {
            for (const ModelEntry& m : cfg.substitutes) todo.push_back(&m);
        }
        for (const ModelEntry* m : todo) {
            const fs::path path = out / "models" / (m->name + ".pcm");
            if (!fs::exists(path)) {
                const Model init = build_model(m->spec);
                const TrainResult r = train(init, examples_for(init, train_items), cfg.train);
                write_file_atomic(path, [&](std::ostream& os) { write_model(os, r.model); });
            }
            trained.emplace(m->name, load_model(path));
        }
        return trained;
    });

    std::map<std::string, DefendedModel> defended = stage("defend", [&] {
        std::map<std::string, DefendedModel> result;
        for (const ModelEntry& v : cfg.victims) {
            for (const DefenseEntry& e : cfg.defenses) {
                const std::string key = v.name + "." + e.name;
                if (e.method == "none") {
                    result.emplace(key, undefended(models.at(v.name), d, channels));
                    continue;
                }
                const fs::path path = out / "models" / (key + ".pcm");
                if (!fs::exists(path)) {
                    const Model init = build_model(v.spec);
                    const auto ex = examples_for(init, train_items);
                    DefendedModel dm;
                    if (e.method == "ablation") {
                        dm = certificate_retrain(init, ex, e.k, cfg.train).defended;
                        dm.rounds = e.rounds;
                    } else {
                        AttackConfig a = cfg.attack;
                        a.side = e.side ? e.side : std::max<std::size_t>(cfg.patch_sides.back(), 1);
                        a.iterations = e.attack_iterations;
                        a.step = e.attack_step;
                        a.restarts = 1;
                        a.seed = derive_seed(cfg.defense_seed, 0xadd);
                        dm = adversarial_train(init, ex, cfg.train, a, e.warmup, e.ramp).defended;
                    }
                    save_defended_atomic(path, dm);
                }
                result.emplace(key, load_defended(path));
            }
        }
        return result;
    });

    // Patches per cell and image; universal modes share one patch per side.
    const auto patch_path = [&](const std::string& cell, std::size_t side, std::size_t image) {
        if (cfg.mode == "white") {
            return out / "attacks" / cell / ("s" + std::to_string(side)) / (test_items[image].name + ".pcp");
        }
        return out / "attacks" / cfg.mode / ("s" + std::to_string(side) + ".pcp");
    };
    const std::size_t threads = cfg.threads;

    stage("attack", [&] {
        for (std::size_t side : cfg.patch_sides) {
            if (side == 0) continue;
            AttackConfig a = cfg.attack;
            a.side = side;
            if (cfg.mode == "random") {
                const fs::path path = patch_path("", side, 0);
                a.seed = derive_seed(cfg.attack.seed, side);
                if (!fs::exists(path)) {
                    const PatchSpec p = random_patch(a, cfg.data.height, cfg.data.width);
                    write_file_atomic(path, [&](std::ostream& os) { write_patch(os, p); });
                }
                continue;
            }
            if (cfg.mode == "black") {
                const fs::path path = patch_path("", side, 0);
                a.seed = derive_seed(cfg.attack.seed, side);
                if (!fs::exists(path)) {
                    std::vector<Model> subs;
                    for (const ModelEntry& m : cfg.substitutes) subs.push_back(models.at(m.name));
                    std::vector<Tensor> images, gts;
                    for (const DatasetItem& it : train_items) {
                        images.push_back(it.image);
                        gts.push_back(it.density);
                    }
                    const AttackResult r = run_blackbox_attack(subs, images, gts, a);
                    write_file_atomic(path, [&](std::ostream& os) { write_patch(os, r.patch); });
                }
                continue;
            }
            for (const ModelEntry& v : cfg.victims) {
                for (const DefenseEntry& e : cfg.defenses) {
                    const std::string cell = v.name + "." + e.name;
                    const DefendedModel& dm = defended.at(cell);
                    parallel_for(test_items.size(), threads, [&](std::size_t i) {
                        const fs::path path = patch_path(cell, side, i);
                        if (fs::exists(path)) return;
                        AttackConfig ai = a;
                        ai.seed = derive_seed(cfg.attack.seed, i);
                        const DatasetItem& it = test_items[i];
                        const AttackResult r = dm.method == "ablation"
                                                   ? attack_defended(dm, it.image, it.density, ai)
                                                   : run_whitebox_attack(dm.model, it.image, it.density, ai);
                        write_file_atomic(path, [&](std::ostream& os) { write_patch(os, r.patch); });
                    });
                }
            }
        }
        return 0;
    });

    MetricsReport report = stage("evaluate", [&] {
        MetricsReport rep;
        for (const ModelEntry& v : cfg.victims) {
            for (const DefenseEntry& e : cfg.defenses) {
                const std::string cell = v.name + "." + e.name;
                const DefendedModel& dm = defended.at(cell);
                for (std::size_t side : cfg.patch_sides) {
                    const fs::path path = out / "eval" / (cell + ".s" + std::to_string(side) + ".csv");
                    if (!fs::exists(path)) {
                        std::vector<ImageRecord> records(test_items.size());
                        parallel_for(test_items.size(), threads, [&](std::size_t i) {
                            const DatasetItem& it = test_items[i];
                            const std::uint64_t seed = derive_seed(cfg.defense_seed, i);
                            ImageRecord& r = records[i];
                            r.image = it.name;
                            r.gt = static_cast<double>(it.annotations.count());
                            r.y = count(defended_predict(dm, it.image, seed));
                            r.y_adv = side == 0 ? r.y
                                                : count(defended_predict(
                                                      dm, apply_patch(it.image, load_patch(patch_path(cell, side, i))),
                                                      seed));
                            r.pi = error_rate(r.y, r.y_adv);
                        });
                        write_file_atomic(path, [&](std::ostream& os) { write_records_csv(os, records); });
                    }
                    std::ifstream is(path);
                    rep.rows.push_back(summarise(v.name, e.name, side, read_records_csv(is, path.string())));
                }
            }
        }
        return rep;
    });

    return stage("report", [&] {
        report.provenance = {{"config_hash", config_hash(cfg)},
                             {"data.seed", std::to_string(cfg.data.seed)},
                             {"train.seed", std::to_string(cfg.train.seed)},
                             {"attack.seed", std::to_string(cfg.attack.seed)},
                             {"defense.seed", std::to_string(cfg.defense_seed)}};
        for (const auto* group : {&cfg.victims, &cfg.substitutes}) {
            for (const ModelEntry& m : *group) report.provenance.emplace_back("model." + m.name + ".seed", std::to_string(m.spec.seed));
        }
        write_file_atomic(out / "report.csv", [&](std::ostream& os) { write_report_csv(os, report); });
        write_file_atomic(out / "report_long.csv", [&](std::ostream& os) { write_long_csv(os, report); });
        write_file_atomic(out / "provenance.txt", [&](std::ostream& os) { write_text_header(os, report.provenance); });
        return report;
    });
}

}  // namespace apam
