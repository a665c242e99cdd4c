#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mergeforge/checkpoint.hpp"

namespace mergeforge {

// Glob-style tensor-name filter: a tensor is selected iff it matches some
// include pattern and no exclude pattern. Patterns support '*' and '?'.
struct ParamFilter {
    std::vector<std::string> include_patterns{"*"};
    std::vector<std::string> exclude_patterns;

    bool selects(const std::string& name) const;

    static ParamFilter all() { return {}; }
    // Transformer-layer preset: drops the token embedding and output head,
    // whose scale differs from the layer stack.
    static ParamFilter no_embeddings() {
        return {{"*"}, {"*embed_tokens*", "lm_head*"}};
    }
};

bool glob_match(std::string_view pattern, std::string_view text);

struct DistanceReport {
    std::string model_a;
    std::string model_b;
    std::int64_t param_count = 0;
    double l2_normalized = 0.0;  // ||a-b||_2 / n
    double cosine = 0.0;         // <a,b> / (||a|| * ||b||)
};

// Both quantities over the conceptual concatenation of the selected tensors
// in canonical (lexicographic) order, accumulated in float64 with pairwise
// summation.
DistanceReport distance(const Checkpoint& a, const Checkpoint& b,
                        const ParamFilter& filter = ParamFilter::all());

// File-to-file variant that holds one tensor pair at a time.
DistanceReport distance_files(const std::filesystem::path& a, const std::filesystem::path& b,
                              const ParamFilter& filter = ParamFilter::all());

// Deterministic pairwise (tree) reduction; exposed for tests.
double pairwise_sum(std::span<const double> values);

struct SpearmanResult {
    double rho = 0.0;
    double p_two_sided = 1.0;
};

// Average-rank ties; exact two-sided permutation p for n <= 8, else the
// t-approximation with n-2 degrees of freedom.
SpearmanResult spearman(std::span<const double> xs, std::span<const double> ys);

}  // namespace mergeforge
