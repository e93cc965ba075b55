#include <doctest.h>
#include <gmp.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "apam/cert.hpp"
#include "apam/rng.hpp"

using namespace apam;
using namespace apam::cert;

namespace {

// ln C(a, b) from an exact GMP integer.
double exact_log_choose(unsigned long a, unsigned long b) {
    mpz_t c;
    mpz_init(c);
    mpz_bin_uiui(c, a, b);
    long exp2 = 0;
    const double mant = mpz_get_d_2exp(&exp2, c);
    mpz_clear(c);
    return std::log(mant) + static_cast<double>(exp2) * std::log(2.0);
}

double exact_choose(unsigned long a, unsigned long b) {
    mpz_t c;
    mpz_init(c);
    mpz_bin_uiui(c, a, b);
    const double v = mpz_get_d(c);
    mpz_clear(c);
    return v;
}

// Full sort oracle for top-K overlap.
std::size_t brute_overlap(const Tensor& a, const Tensor& b, std::size_t k) {
    auto top = [k](const Tensor& m) {
        std::vector<std::pair<double, std::size_t>> v;
        for (std::size_t i = 0; i < m.size(); ++i) v.emplace_back(-m[i], i);
        std::sort(v.begin(), v.end());
        std::vector<bool> in(m.size(), false);
        for (std::size_t i = 0; i < k; ++i) in[v[i].second] = true;
        return in;
    };
    const auto ta = top(a);
    const auto tb = top(b);
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) n += (ta[i] && tb[i]) ? 1 : 0;
    return n;
}

}  // namespace

TEST_CASE("log_choose small values") {
    CHECK(log_choose(5, 0) == 0.0);
    CHECK(log_choose(5, 2) == doctest::Approx(std::log(10.0)).epsilon(1e-15));
    CHECK(std::isinf(log_choose(5, 6)));
    CHECK(log_choose(5, 6) < 0);
    CHECK(std::isinf(log_choose(5, -1)));
    CHECK(log_choose(0, 0) == 0.0);
    CHECK_THROWS_AS(log_choose(-1, 0), Error);
}

TEST_CASE("log_choose against exact big integers") {
    const double exact = exact_log_choose(716800, 45);
    CHECK(std::abs(log_choose(716800, 45) - exact) <= 1e-10 * std::abs(exact));
    for (unsigned long a : {100ul, 1000ul, 26569ul, 716800ul}) {
        for (unsigned long b : {1ul, 7ul, 45ul, 90ul}) {
            const double e = exact_log_choose(a, b);
            CHECK(std::abs(log_choose(static_cast<std::int64_t>(a), static_cast<std::int64_t>(b)) - e) <=
                  1e-10 * std::max(1.0, std::abs(e)));
        }
    }
}

TEST_CASE("log_choose satisfies Pascal's identity against exact integers") {
    for (std::int64_t a = 1; a <= 30; ++a) {
        for (std::int64_t b = 0; b <= a; ++b) {
            const double lhs = std::exp(log_choose(a, b));
            const double rhs = std::exp(log_choose(a - 1, b - 1)) + std::exp(log_choose(a - 1, b));
            const double exact = exact_choose(static_cast<unsigned long>(a), static_cast<unsigned long>(b));
            CHECK(lhs == doctest::Approx(exact).epsilon(1e-12));
            CHECK(rhs == doctest::Approx(exact).epsilon(1e-12));
        }
    }
}

TEST_CASE("upper and lower bound edge cases") {
    CHECK(upper_bound({100, 0, 10, 1}).probability() == 1.0);
    CHECK(lower_bound({100, 5, 10, 1}).probability() == 0.0);
    CHECK(upper_bound({100, 95, 10, 1}).probability() == 0.0);
    CHECK(lower_bound({100, 100, 10, 1}).probability() == doctest::Approx(1.0));
    CHECK_THROWS_AS(upper_bound({10, 11, 1, 1}), Error);
    CHECK_THROWS_AS(upper_bound({10, 1, 11, 1}), Error);
    CHECK_THROWS_AS(upper_bound({10, 1, 1, 0}), Error);
}

TEST_CASE("bounds at k = 45 on the fitted image size") {
    // Retained k = 45 on the fitted image size d = 716,800.
    const std::int64_t d = 716800, k = 45;
    const BoundQuery big{d, 163 * 163, k, 1};
    const BoundQuery small{d, 20 * 20, k, 1};
    CHECK(std::abs(upper_bound(big).probability() / 0.1827 - 1.0) <= 0.005);
    CHECK(std::abs(upper_bound(small).probability() / 0.9752 - 1.0) <= 0.002);
    CHECK(std::abs(lower_bound(big).log10() / std::log10(3.97e-65) - 1.0) <= 0.02);
    CHECK(std::abs(lower_bound(small).log10() / std::log10(1.7e-147) - 1.0) <= 0.02);
}

TEST_CASE("bound invariants: ordering and monotonicity") {
    Rng rng(17);
    for (int trial = 0; trial < 500; ++trial) {
        const std::int64_t d = 1 + static_cast<std::int64_t>(rng.below(400));
        const std::int64_t n = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(d)));
        const std::int64_t k = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(d)));
        const BoundQuery q{d, n, k, 1};
        // C(n,k) <= C(d-n,k) needs the patch to cover at most half the image.
        if (2 * n <= d) CHECK(lower_bound(q).log_value <= upper_bound(q).log_value + 1e-12);
        // Missing the patch and landing inside it are disjoint events.
        if (k >= 1) CHECK(lower_bound(q).probability() + upper_bound(q).probability() <= 1.0 + 1e-12);
        const BoundQuery more_n{d, n + 1, k, 1};
        const BoundQuery more_k{d, n, k + 1, 1};
        CHECK(upper_bound(more_n).log_value <= upper_bound(q).log_value + 1e-12);
        CHECK(upper_bound(more_k).log_value <= upper_bound(q).log_value + 1e-12);
        CHECK(lower_bound(more_n).log_value >= lower_bound(q).log_value - 1e-12);
    }
}

TEST_CASE("topk_overlap basics") {
    Rng rng(2);
    Tensor a(Shape{4, 4});
    for (double& v : a.data()) v = rng.uniform();
    for (std::size_t k = 1; k <= 16; ++k) CHECK(topk_overlap(a, a, k) == k);

    // Top-4 of `x` lives in the first row, top-4 of `y` in the last row.
    Tensor x(Shape{4, 4}, 0.0), y(Shape{4, 4}, 0.0);
    for (std::size_t i = 0; i < 4; ++i) {
        x[i] = 1.0;
        y[12 + i] = 1.0;
    }
    CHECK(topk_overlap(x, y, 4) == 0);
    CHECK_THROWS_AS(topk_overlap(x, Tensor(Shape{2, 8}), 1), ShapeError);
    CHECK_THROWS_AS(topk_overlap(x, y, 17), Error);
}

TEST_CASE("topk ties resolve by ascending index") {
    const Tensor flat(Shape{2, 3}, 0.5);
    CHECK(topk_indices(flat, 3) == std::vector<std::size_t>{0, 1, 2});
}

TEST_CASE("topk_overlap equals full-sort oracle on random 8x8 maps") {
    Rng rng(99);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor a(Shape{8, 8}), b(Shape{8, 8});
        for (double& v : a.data()) v = std::floor(rng.uniform() * 20.0);  // forces ties
        for (double& v : b.data()) v = rng.uniform();
        for (std::size_t k = 1; k <= 64; ++k) CHECK(topk_overlap(a, b, k) == brute_overlap(a, b, k));
    }
}

TEST_CASE("bound table CSV layout") {
    std::ostringstream os;
    write_bound_csv(os, bound_table(716800, 45, {20, 163}));
    const std::string s = os.str();
    CHECK(s.rfind("n,k,d,upper,log10_lower\n", 0) == 0);
    CHECK(s.find("\n400,45,716800,0.975") != std::string::npos);
    CHECK(s.find("\n26569,45,716800,0.182") != std::string::npos);
}
