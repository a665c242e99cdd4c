#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mergeforge/checkpoint.hpp"

namespace mergeforge {

// Per-tensor deltas of a model against a declared base, widened to float32.
// All merge arithmetic runs in float32 regardless of storage dtype.
struct FloatTensor {
    std::vector<std::int64_t> shape;
    Eigen::ArrayXf values;
};

struct TaskVector {
    std::string base_id;
    std::string model_id;
    std::map<std::string, FloatTensor> deltas;
};

// Per-element majority signs, one array of {-1,0,+1} per tensor.
struct SignMap {
    std::map<std::string, std::vector<std::int8_t>> signs;
};

enum class MergeMethod { TaskArithmetic, Ties, DareTies };

std::string_view method_name(MergeMethod m);                      // "ta" | "ties" | "dare-ties"
std::optional<MergeMethod> method_from_name(std::string_view s);

// -----------------------------------------------------------------------------
// Tensor-level kernels. The streaming driver and the in-memory operations both
// go through these, so the two paths are bit-identical by construction.
// -----------------------------------------------------------------------------
namespace kernels {

// Throws if any value is NaN/Inf, naming the tensor and flat index.
void require_finite(const Eigen::ArrayXf& values, const std::string& tensor_name,
                    const std::string& context);

// k = round-half-up(d*numel) clamped to [0,numel]; keeps the k largest-|v|
// elements, ties at the cut broken toward the smaller flat index.
void prune_topd_inplace(Eigen::ArrayXf& values, double d);

// Bernoulli(d) keep-mask in row-major order from the given SplitMix64 stream
// seed; survivors divided by d.
void drop_and_rescale_inplace(Eigen::ArrayXf& values, double d, std::uint64_t stream_seed);

// sgn(sum of inputs) per element, with sgn(0) = 0.
Eigen::ArrayXf elect_signs(std::span<const Eigen::ArrayXf* const> pruned);

// Mean of the sign-aligned values per element (0 where the majority sign is 0
// or nothing aligns). Inputs are the already-pruned task vectors.
Eigen::ArrayXf ties_delta(std::span<const Eigen::ArrayXf* const> pruned);

}  // namespace kernels

// -----------------------------------------------------------------------------
// In-memory operations
// -----------------------------------------------------------------------------

// delta = f32(model) - f32(base) elementwise. Requires compatible checkpoints
// and finite values; errors name the offending tensor and flat index.
TaskVector compute_task_vector(const Checkpoint& base, const Checkpoint& model);

// theta = base + sum_t lambda_t * tv_t, accumulated left to right in input
// order. Output dtype follows the policy (default: base's per-tensor dtype).
Checkpoint merge_task_arithmetic(const Checkpoint& base, std::span<const TaskVector> tvs,
                                 std::span<const double> lambdas,
                                 const DtypePolicy& policy = DtypePolicy::preserve());

TaskVector prune_topd(const TaskVector& tv, double d);

SignMap elect_signs(std::span<const TaskVector> pruned);

// prune -> elect -> aligned mean -> base + lambda * delta.
Checkpoint merge_ties(const Checkpoint& base, std::span<const TaskVector> tvs, double d,
                      double lambda, const DtypePolicy& policy = DtypePolicy::preserve());

TaskVector drop_and_rescale(const TaskVector& tv, double d, std::uint64_t global_seed);

// drop_and_rescale each input, then TIES with density ties_inner_density.
Checkpoint merge_dare_ties(const Checkpoint& base, std::span<const TaskVector> tvs, double d,
                           double lambda, std::uint64_t global_seed,
                           double ties_inner_density = 1.0,
                           const DtypePolicy& policy = DtypePolicy::preserve());

// -----------------------------------------------------------------------------
// Streaming merge driver
// -----------------------------------------------------------------------------

struct CheckpointRef {
    std::filesystem::path path;
    std::string id;  // identity for task-vector bookkeeping and mask seeding
};

struct RecipeInput {
    CheckpointRef ref;
    double weight = 1.0;  // task-vector coefficient (task arithmetic only)
};

struct MergeRecipe {
    MergeMethod method = MergeMethod::TaskArithmetic;
    CheckpointRef base;
    std::vector<RecipeInput> inputs;
    double density = 1.0;  // retention rate d for ties / dare-ties
    double lambda = 1.0;   // ties scaling; global multiplier for ta weights
    std::uint64_t dare_seed = 0;
    double ties_inner_density = 1.0;
    DtypePolicy dtype_policy;

    void validate() const;  // throws Usage on out-of-range hyperparameters
};

struct MergeSummary {
    std::filesystem::path output;
    std::size_t tensor_count = 0;
    std::int64_t total_params = 0;
};

// Merges file-to-file, tensor window at a time, so checkpoints larger than
// memory are processable. Results are byte-identical for any thread count.
// output_id, when non-empty, is written as the output's __metadata__ model_id.
MergeSummary run_merge(const MergeRecipe& recipe, const std::filesystem::path& out,
                       int threads = 1, const std::string& output_id = "");

// Runs fn(i) for i in [0,count) across up to `threads` workers.
void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace mergeforge
