#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <sys/wait.h>

#include "apam/bench.hpp"
#include "apam/rng.hpp"

using namespace apam;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

const char* kTinyConfig = R"(
data.size = 20
data.height = 32
data.width = 32
data.min_count = 2
data.max_count = 6
data.seed = 1
train.lr = 0.003
train.epochs = 3
train.seed = 2
patch_sides = 0, 4
attack.iterations = 3
attack.seed = 3
defense.seed = 4
)";

const char* kTinySections = R"(
[victim]
arch = dilated
seed = 5
[defense]
method = ablation
k = 40
rounds = 2
)";

ExperimentConfig tiny(const fs::path& out, const std::string& globals = "", const std::string& sections = "") {
    std::istringstream is("output = " + out.string() + "\n" + kTinyConfig + globals + kTinySections + sections);
    return parse_config(is, "tiny");
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) { fs::remove_all(path); }
    ~TempDir() { fs::remove_all(path); }
};

int run_cli(const std::string& args) {
    const std::string cmd = std::string(APAM_BENCH_EXE) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("mae_rmse hand cases") {
    const std::vector<double> a{1.5, 2.0, 7.25};
    const CountErrors same = mae_rmse(a, a);
    CHECK(same.mae == 0.0);
    CHECK(same.rmse == 0.0);
    const CountErrors one = mae_rmse(std::vector<double>{10}, std::vector<double>{13});
    CHECK(one.mae == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(one.rmse == doctest::Approx(3.0).epsilon(1e-12));
    const CountErrors two = mae_rmse(std::vector<double>{0, 0}, std::vector<double>{3, 4});
    CHECK(std::abs(two.mae - 3.5) <= 1e-9);
    CHECK(std::abs(two.rmse - std::sqrt(12.5)) <= 1e-9);
    CHECK_THROWS_AS(mae_rmse(std::vector<double>{1}, std::vector<double>{1, 2}), Error);
    CHECK_THROWS_AS(mae_rmse(std::vector<double>{}, std::vector<double>{}), Error);
}

TEST_CASE("mae_rmse properties") {
    Rng rng(1);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.below(20);
        std::vector<double> gt(n), pred(n), flat(n);
        const double e = rng.uniform(0, 5);
        for (std::size_t i = 0; i < n; ++i) {
            gt[i] = rng.uniform(0, 100);
            pred[i] = gt[i] + rng.uniform(-10, 10);
            flat[i] = gt[i] + (rng.uniform() < 0.5 ? e : -e);
        }
        const CountErrors c = mae_rmse(gt, flat);
        CHECK(c.rmse == doctest::Approx(c.mae).epsilon(1e-12));

        const CountErrors base = mae_rmse(gt, pred);
        CHECK(base.rmse >= 0.0);
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
        std::vector<double> gp(n), pp(n), scaled(n);
        const double s = rng.uniform(0.1, 4);
        for (std::size_t i = 0; i < n; ++i) {
            gp[i] = gt[perm[i]];
            pp[i] = pred[perm[i]];
            scaled[i] = gt[i] + s * (pred[i] - gt[i]);
        }
        const CountErrors permuted = mae_rmse(gp, pp);
        CHECK(permuted.mae == doctest::Approx(base.mae).epsilon(1e-12));
        CHECK(permuted.rmse == doctest::Approx(base.rmse).epsilon(1e-12));
        const CountErrors sc = mae_rmse(gt, scaled);
        CHECK(sc.mae == doctest::Approx(s * base.mae).epsilon(1e-9));
        CHECK(sc.rmse == doctest::Approx(s * base.rmse).epsilon(1e-9));
    }
}

TEST_CASE("error rate") {
    CHECK(*error_rate(17.5, 17.5) == 0.0);
    CHECK(std::abs(*error_rate(42, 0) - 100.0) <= 1e-9);
    CHECK(std::abs(*error_rate(100, 626.2) - 526.2) <= 1e-9);
    CHECK(std::abs(*error_rate(-4, -2) - 50.0) <= 1e-9);
    CHECK_FALSE(error_rate(0.0, 3.0).has_value());
}

TEST_CASE("summarise keeps undefined error rates visible") {
    std::vector<ImageRecord> recs{{"a", 10, 8, 16, error_rate(8, 16)},
                                  {"b", 4, 0, 2, error_rate(0, 2)},
                                  {"c", 6, 5, 5, error_rate(5, 5)}};
    const ReportRow row = summarise("m", "none", 4, recs);
    CHECK(row.undefined_pi == 1);
    CHECK(row.mean_pi == doctest::Approx(50.0));
    CHECK(row.mae == doctest::Approx((6.0 + 2.0 + 1.0) / 3.0));
    MetricsReport rep{{row}, {}};
    std::ostringstream os;
    write_long_csv(os, rep);
    CHECK(os.str().find("m,none,4,b,4,0,2,undefined\n") != std::string::npos);

    std::ostringstream rec;
    write_records_csv(rec, recs);
    std::istringstream back(rec.str());
    const auto parsed = read_records_csv(back, "recs");
    REQUIRE(parsed.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(parsed[i].image == recs[i].image);
        CHECK(parsed[i].y == recs[i].y);
        CHECK(parsed[i].y_adv == recs[i].y_adv);
        CHECK(parsed[i].pi == recs[i].pi);
    }
    const ReportRow none = summarise("m", "none", 4, {{"z", 1, 0, 0, std::nullopt}});
    std::ostringstream rs;
    write_report_csv(rs, {{none}, {}});
    CHECK(rs.str() == "model,defense,patch_side,mae,rmse,mean_pi\nm,none,4,1,1,undefined\n");
}

TEST_CASE("config parsing") {
    const ExperimentConfig c = tiny("out");
    CHECK(c.patch_sides == std::vector<std::size_t>{0, 4});
    REQUIRE(c.defenses.size() == 2);
    CHECK(c.defenses[0].name == "none");
    CHECK(c.defenses[1].name == "ablation-k40");
    CHECK(c.victims.at(0).name == "dilated-5");
    CHECK(c.victims.at(0).spec == ModelSpec::defaults(Arch::dilated, 5));

    std::istringstream again(to_text(c));
    const ExperimentConfig c2 = parse_config(again, "again");
    CHECK(to_text(c2) == to_text(c));
    CHECK(config_hash(c2) == config_hash(c));
    CHECK(config_hash(tiny("out", "", "[victim]\narch = context\nseed = 1\n")) != config_hash(c));

    std::istringstream no_zero("output = o\ndata.seed = 1\ntrain.seed = 1\nattack.seed = 1\ndefense.seed = 1\n"
                               "patch_sides = 4, 8\n[victim]\nseed = 1\n");
    CHECK(parse_config(no_zero, "z").patch_sides == std::vector<std::size_t>{0, 4, 8});

    const auto bad = [](const std::string& text) {
        std::istringstream is(text);
        return parse_config(is, "bad");
    };
    const std::string seeds = "output = o\ndata.seed = 1\ntrain.seed = 1\nattack.seed = 1\ndefense.seed = 1\n";
    CHECK_THROWS_AS(bad("output = o\ntrain.seed = 1\nattack.seed = 1\ndefense.seed = 1\n[victim]\nseed = 1\n"), Error);
    CHECK_THROWS_AS(bad(seeds + "[victim]\narch = dilated\n"), Error);
    CHECK_THROWS_AS(bad(seeds + "colour = red\n[victim]\nseed = 1\n"), Error);
    CHECK_THROWS_AS(bad(seeds + "patch_sides = 0, 8, 4\n[victim]\nseed = 1\n"), Error);
    CHECK_THROWS_AS(bad(seeds + "patch_sides = 0, 4, 4\n[victim]\nseed = 1\n"), Error);
    CHECK_THROWS_AS(bad(seeds + "[victim]\nseed = 1\n[victim]\nseed = 1\n"), Error);
    CHECK_THROWS_AS(bad(seeds + "[victim]\nseed = 1\n[defense]\nmethod = ablation\n"), Error);
    CHECK_THROWS_AS(bad(seeds + "[victim]\nseed = 1\n[defense]\nmethod = magic\n"), Error);
    CHECK_THROWS_AS(bad(seeds + "mode = black\n[victim]\nseed = 1\n"), Error);
    CHECK_THROWS_AS(bad(seeds + "[victim]\nseed = x\n"), Error);
    CHECK_THROWS_AS(bad(seeds + "[victim]\nseed = 1\n[colour]\n"), Error);
    CHECK_THROWS_AS(bad(seeds + "patch_sides = 0, 200\n[victim]\nseed = 1\n"), Error);
    CHECK_NOTHROW(bad(seeds + "[victim]\nseed = 1\n"));
}

TEST_CASE("parallel_for orders results and reports the first failure") {
    for (std::size_t threads : {1u, 3u, 8u}) {
        std::vector<std::size_t> out(50, 0);
        parallel_for(out.size(), threads, [&](std::size_t i) { out[i] = i * i; });
        for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == i * i);
        try {
            parallel_for(20, threads, [](std::size_t i) {
                if (i == 0) throw Error("first");
            });
            FAIL("no exception");
        } catch (const Error& e) {
            CHECK(std::string(e.what()) == "first");
        }
    }
    parallel_for(0, 4, [](std::size_t) { FAIL("called"); });
}

TEST_CASE("experiment grid, determinism and resumption") {
    TempDir dir("apam_test_experiment");
    const ExperimentConfig cfg = tiny(dir.path / "run");
    const MetricsReport rep = run_experiment(cfg);

    REQUIRE(rep.rows.size() == 4);
    const std::vector<std::pair<std::string, std::size_t>> order{
        {"none", 0}, {"none", 4}, {"ablation-k40", 0}, {"ablation-k40", 4}};
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(rep.rows[i].model == "dilated-5");
        CHECK(rep.rows[i].defense == order[i].first);
        CHECK(rep.rows[i].patch_side == order[i].second);
        CHECK(rep.rows[i].images.size() == 2);
        CHECK(rep.rows[i].mae >= 0.0);
        for (const ImageRecord& r : rep.rows[i].images) {
            REQUIRE(r.pi.has_value());
            CHECK(std::abs(*error_rate(r.y, r.y_adv) - *r.pi) <= 1e-9);
            if (order[i].second == 0) CHECK(r.y_adv == r.y);
        }
    }
    const std::string body = slurp(dir.path / "run" / "report.csv");
    CHECK(body.starts_with("model,defense,patch_side,mae,rmse,mean_pi\n"));

    // Rerun from complete artifacts.
    run_experiment(cfg);
    CHECK(slurp(dir.path / "run" / "report.csv") == body);

    // Resume after losing an attack and an evaluation.
    fs::remove_all(dir.path / "run" / "attacks" / "dilated-5.none");
    fs::remove(dir.path / "run" / "eval" / "dilated-5.none.s4.csv");
    run_experiment(cfg);
    CHECK(slurp(dir.path / "run" / "report.csv") == body);

    // From scratch in a fresh directory.
    const ExperimentConfig copy = tiny(dir.path / "fresh");
    run_experiment(copy);
    CHECK(slurp(dir.path / "fresh" / "report.csv") == body);
    CHECK(slurp(dir.path / "fresh" / "provenance.txt") != slurp(dir.path / "run" / "provenance.txt"));

    CHECK_THROWS_AS(run_experiment(tiny(dir.path / "run", "patch_sides = 0, 6\n")), Error);
}

TEST_CASE("clean-only grid equals plain clean evaluation") {
    TempDir dir("apam_test_clean_grid");
    const ExperimentConfig cfg = tiny(dir.path, "patch_sides = 0\n");
    const MetricsReport rep = run_experiment(cfg);
    REQUIRE(rep.rows.size() == 2);
    const Model m = load_model(dir.path / "models" / "dilated-5.pcm");
    const auto test = read_dataset(dir.path / "data").subset(Split::test);
    std::vector<double> gt, pred;
    for (const DatasetItem& it : test) {
        gt.push_back(static_cast<double>(it.annotations.count()));
        pred.push_back(count(predict_density(m, it.image)));
    }
    const CountErrors e = mae_rmse(gt, pred);
    CHECK(rep.rows[0].mae == e.mae);
    CHECK(rep.rows[0].rmse == e.rmse);
    CHECK(rep.rows[0].mean_pi == 0.0);
}

TEST_CASE("universal-patch modes") {
    TempDir dir("apam_test_universal");
    const MetricsReport black =
        run_experiment(tiny(dir.path / "black", "mode = black\n", "[substitute]\narch = context\nseed = 9\n"));
    CHECK(fs::exists(dir.path / "black" / "attacks" / "black" / "s4.pcp"));
    CHECK(fs::exists(dir.path / "black" / "models" / "context-9.pcm"));
    CHECK(black.rows.size() == 4);
    const MetricsReport random = run_experiment(tiny(dir.path / "random", "mode = random\n"));
    CHECK(fs::exists(dir.path / "random" / "attacks" / "random" / "s4.pcp"));
    CHECK(random.rows.size() == 4);
}

TEST_CASE("stage failures name the stage and keep earlier artifacts") {
    TempDir dir("apam_test_stage_failure");
    const ExperimentConfig cfg = tiny(dir.path);
    fs::create_directories(dir.path / "models");
    std::ofstream(dir.path / "models" / "dilated-5.pcm") << "not a checkpoint";
    try {
        run_experiment(cfg);
        FAIL("no exception");
    } catch (const StageError& e) {
        CHECK(e.stage() == "train");
        CHECK(std::string(e.what()).find("train") != std::string::npos);
    }
    CHECK(fs::exists(dir.path / "data" / "index.txt"));
}

TEST_CASE("command-line exit codes") {
    TempDir dir("apam_test_cli");
    const std::string d = (dir.path / "data").string();
    CHECK(run_cli("gen-data --out " + d + " --size 10 --height 32 --width 32") == 1);  // no --seed
    CHECK(run_cli("bogus") == 1);
    CHECK(run_cli("gen-data --out " + d + " --size 10 --height 32 --width 32 --min-count 1 --max-count 3 --seed 1") ==
          0);
    CHECK(run_cli("train --data " + d + " --out " + (dir.path / "m.pcm").string() + " --epochs 1 --seed 1") == 0);
    CHECK(run_cli("defend --data " + d + " --method ablation --k 0 --out " + (dir.path / "a.pcm").string() +
                  " --seed 1") == 1);
    CHECK(run_cli("eval --model " + (dir.path / "missing.pcm").string() + " --data " + d + " --seed 1") == 1);
    CHECK(run_cli("certify --out " + (dir.path / "bounds.csv").string()) == 0);
    CHECK(slurp(dir.path / "bounds.csv").starts_with("n,k,d,upper,log10_lower\n400,45,716800,"));
    // An unreadable patch file is only discovered while evaluating.
    std::ofstream(dir.path / "junk.pcp") << "junk";
    CHECK(run_cli("eval --model " + (dir.path / "m.pcm").string() + " --data " + d + " --patches " +
                  (dir.path / "junk.pcp").string() + " --seed 1") == 2);
}

TEST_CASE("shipped experiment configs validate") {
    for (const auto& entry : fs::directory_iterator(fs::path(APAM_SOURCE_DIR) / "configs")) {
        CAPTURE(entry.path().string());
        CHECK(run_cli("report --dry-run --config " + entry.path().string()) == 0);
    }
}
