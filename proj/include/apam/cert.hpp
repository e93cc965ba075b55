#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "apam/tensor.hpp"

namespace apam::cert {

/// Geometry of one certification question: an image of `d` pixels carrying
/// an `n`-pixel patch, ablated down to `k` retained pixels, compared on the
/// top `top_k` entries of the output maps.
struct BoundQuery {
    std::int64_t d = 0;
    std::int64_t n = 0;
    std::int64_t k = 0;
    std::int64_t top_k = 1;

    void validate() const;
};

/// A probability stored as its natural logarithm; -infinity encodes zero.
struct LogProb {
    double log_value = 0.0;

    double probability() const;
    double log10() const;
};

/// ln C(a, b) as a sum of logarithms of integer ratios. Returns -infinity
/// when b < 0 or b > a. Requires a >= 0.
double log_choose(std::int64_t a, std::int64_t b);

/// Probability that a uniformly drawn k-subset of d pixels misses all n
/// patch pixels: C(d-n, k) / C(d, k).
LogProb upper_bound(const BoundQuery& q);

/// Probability that every retained pixel falls inside the patch:
/// C(n, k) / C(d, k).
LogProb lower_bound(const BoundQuery& q);

/// Flat indices of the K largest entries, ordered by value descending and
/// ties by ascending index.
std::vector<std::size_t> topk_indices(const Tensor& map, std::size_t top_k);

/// Size of the intersection of the top-K index sets of two equally shaped maps.
std::size_t topk_overlap(const Tensor& map_a, const Tensor& map_b, std::size_t top_k);

struct BoundRow {
    std::int64_t n = 0;
    std::int64_t k = 0;
    std::int64_t d = 0;
    double upper = 0.0;
    double log10_lower = 0.0;
};

/// One row per square patch side: n = side * side.
std::vector<BoundRow> bound_table(std::int64_t d, std::int64_t k,
                                  const std::vector<std::int64_t>& patch_sides);

/// CSV with header `n,k,d,upper,log10_lower`.
void write_bound_csv(std::ostream& os, const std::vector<BoundRow>& rows);

}  // namespace apam::cert
