#include "apam/cert.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <ostream>
#include <string>

namespace apam::cert {

void BoundQuery::validate() const {
    if (d < 0 || n < 0 || n > d) {
        throw Error("bound query: need 0 <= n <= d, got n=" + std::to_string(n) +
                    " d=" + std::to_string(d));
    }
    if (k < 0 || k > d) {
        throw Error("bound query: need 0 <= k <= d, got k=" + std::to_string(k) +
                    " d=" + std::to_string(d));
    }
    if (top_k < 1) throw Error("bound query: top_k must be >= 1");
}

double LogProb::probability() const { return std::exp(log_value); }

double LogProb::log10() const { return log_value / std::numbers::ln10; }

double log_choose(std::int64_t a, std::int64_t b) {
    if (a < 0) throw Error("log_choose: a must be >= 0, got " + std::to_string(a));
    if (b < 0 || b > a) return -std::numeric_limits<double>::infinity();
    b = std::min(b, a - b);
    // C(a, b) = prod_{i=1..b} (a - b + i) / i
    double acc = 0.0;
    for (std::int64_t i = 1; i <= b; ++i) {
        acc += std::log(static_cast<double>(a - b + i) / static_cast<double>(i));
    }
    return acc;
}

LogProb upper_bound(const BoundQuery& q) {
    q.validate();
    if (q.k > q.d - q.n) return {-std::numeric_limits<double>::infinity()};
    return {log_choose(q.d - q.n, q.k) - log_choose(q.d, q.k)};
}

LogProb lower_bound(const BoundQuery& q) {
    q.validate();
    if (q.k > q.n) return {-std::numeric_limits<double>::infinity()};
    return {log_choose(q.n, q.k) - log_choose(q.d, q.k)};
}

std::vector<std::size_t> topk_indices(const Tensor& map, std::size_t top_k) {
    if (top_k > map.size()) {
        throw Error("topk: K=" + std::to_string(top_k) + " exceeds map size " +
                    std::to_string(map.size()));
    }
    std::vector<std::size_t> idx(map.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const auto before = [&](std::size_t a, std::size_t b) {
        if (map[a] != map[b]) return map[a] > map[b];
        return a < b;
    };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(top_k), idx.end(),
                      before);
    idx.resize(top_k);
    return idx;
}

std::size_t topk_overlap(const Tensor& map_a, const Tensor& map_b, std::size_t top_k) {
    if (map_a.shape() != map_b.shape()) {
        throw ShapeError("topk_overlap: shape mismatch " + to_string(map_a.shape()) + " vs " +
                         to_string(map_b.shape()));
    }
    std::vector<std::size_t> a = topk_indices(map_a, top_k);
    std::vector<std::size_t> b = topk_indices(map_b, top_k);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::vector<std::size_t> common;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
    return common.size();
}

std::vector<BoundRow> bound_table(std::int64_t d, std::int64_t k,
                                  const std::vector<std::int64_t>& patch_sides) {
    std::vector<BoundRow> rows;
    for (std::int64_t side : patch_sides) {
        const BoundQuery q{d, side * side, k, 1};
        rows.push_back({q.n, k, d, upper_bound(q).probability(), lower_bound(q).log10()});
    }
    return rows;
}

void write_bound_csv(std::ostream& os, const std::vector<BoundRow>& rows) {
    os << "n,k,d,upper,log10_lower\n";
    const auto old_flags = os.flags();
    const auto old_precision = os.precision();
    os << std::setprecision(10);
    for (const BoundRow& r : rows) {
        os << r.n << ',' << r.k << ',' << r.d << ',' << r.upper << ',' << r.log10_lower << '\n';
    }
    os.flags(old_flags);
    os.precision(old_precision);
}

}  // namespace apam::cert
