#include "mergeforge/merge.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <mutex>
#include <numeric>
#include <thread>

#include "mergeforge/checkpoint_io.hpp"
#include "mergeforge/errors.hpp"
#include "mergeforge/prng.hpp"

namespace mergeforge {

std::string_view method_name(MergeMethod m) {
    switch (m) {
        case MergeMethod::TaskArithmetic: return "ta";
        case MergeMethod::Ties: return "ties";
        case MergeMethod::DareTies: return "dare-ties";
    }
    return "";
}

std::optional<MergeMethod> method_from_name(std::string_view s) {
    if (s == "ta") return MergeMethod::TaskArithmetic;
    if (s == "ties") return MergeMethod::Ties;
    if (s == "dare-ties") return MergeMethod::DareTies;
    return std::nullopt;
}

namespace {

void require_density(double d, const char* what) {
    if (!(d > 0.0 && d <= 1.0))
        throw_usage(std::string(what) + " must be in (0,1], got " + std::to_string(d));
}

// Majority sign with sgn(0)=0, exact on the +/-1/0 float lattice.
Eigen::ArrayXf sign_of(const Eigen::ArrayXf& v) {
    return (v > 0.0f).cast<float>() - (v < 0.0f).cast<float>();
}

}  // namespace

namespace kernels {

void require_finite(const Eigen::ArrayXf& values, const std::string& tensor_name,
                    const std::string& context) {
    if (values.allFinite()) return;
    for (Eigen::Index i = 0; i < values.size(); ++i)
        if (!std::isfinite(values[i]))
            throw_usage(context + ": tensor '" + tensor_name + "' flat index " + std::to_string(i) +
                        ": non-finite value");
}

void prune_topd_inplace(Eigen::ArrayXf& values, double d) {
    require_density(d, "density");
    const auto n = static_cast<std::int64_t>(values.size());
    auto k = static_cast<std::int64_t>(std::floor(d * static_cast<double>(n) + 0.5));
    k = std::clamp<std::int64_t>(k, 0, n);
    if (k == n) return;

    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), std::int64_t{0});
    // total order: magnitude descending, flat index ascending on ties
    const auto before = [&](std::int64_t a, std::int64_t b) {
        const float ma = std::fabs(values[a]), mb = std::fabs(values[b]);
        if (ma != mb) return ma > mb;
        return a < b;
    };
    std::nth_element(idx.begin(), idx.begin() + k, idx.end(), before);

    Eigen::ArrayXf kept = Eigen::ArrayXf::Zero(n);
    for (std::int64_t i = 0; i < k; ++i) kept[idx[static_cast<std::size_t>(i)]] = values[idx[static_cast<std::size_t>(i)]];
    values.swap(kept);
}

void drop_and_rescale_inplace(Eigen::ArrayXf& values, double d, std::uint64_t stream_seed) {
    require_density(d, "density");
    SplitMix64 rng(stream_seed);
    const auto scale = static_cast<float>(d);
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        const bool keep = rng.next_unit() < d;
        values[i] = keep ? values[i] / scale : 0.0f;
    }
}

Eigen::ArrayXf elect_signs(std::span<const Eigen::ArrayXf* const> pruned) {
    Eigen::ArrayXf sum = Eigen::ArrayXf::Zero(pruned.front()->size());
    for (const auto* tv : pruned) sum += *tv;
    return sign_of(sum);
}

Eigen::ArrayXf ties_delta(std::span<const Eigen::ArrayXf* const> pruned) {
    const Eigen::ArrayXf majority = elect_signs(pruned);
    Eigen::ArrayXf acc = Eigen::ArrayXf::Zero(majority.size());
    Eigen::ArrayXf count = Eigen::ArrayXf::Zero(majority.size());
    for (const auto* tv : pruned) {
        const Eigen::ArrayXf aligned =
            ((sign_of(*tv) == majority) && (majority != 0.0f)).cast<float>();
        acc += aligned * *tv;
        count += aligned;
    }
    // count==0 implies acc==0, so the max(1) guard only avoids 0/0
    return acc / count.max(1.0f);
}

}  // namespace kernels

// -----------------------------------------------------------------------------
// In-memory operations
// -----------------------------------------------------------------------------

TaskVector compute_task_vector(const Checkpoint& base, const Checkpoint& model) {
    const CompatReport compat = validate_compat(base, model);
    if (!compat.compatible())
        throw_incompatible("checkpoints are not merge-compatible:" + compat.describe());

    TaskVector tv;
    tv.base_id = base.id;
    tv.model_id = model.id;
    for (const auto& [name, base_tensor] : base.tensors) {
        const Eigen::ArrayXf b = base_tensor.to_f32();
        const Eigen::ArrayXf m = model.tensors.at(name).to_f32();
        kernels::require_finite(b, name, "base '" + base.id + "'");
        kernels::require_finite(m, name, "model '" + model.id + "'");
        FloatTensor ft;
        ft.shape = base_tensor.shape;
        ft.values = m - b;
        kernels::require_finite(ft.values, name, "task vector '" + model.id + "'");
        tv.deltas.emplace(name, std::move(ft));
    }
    return tv;
}

namespace {

void require_same_base(const Checkpoint& base, std::span<const TaskVector> tvs) {
    for (const auto& tv : tvs)
        if (tv.base_id != base.id)
            throw_usage("task vector '" + tv.model_id + "' was built against base '" + tv.base_id +
                        "', not '" + base.id + "'");
}

void require_same_tensors(const Checkpoint& base, std::span<const TaskVector> tvs) {
    for (const auto& tv : tvs) {
        if (tv.deltas.size() != base.tensors.size())
            throw_usage("task vector '" + tv.model_id + "' does not cover the base tensor set");
        for (const auto& [name, t] : base.tensors) {
            auto it = tv.deltas.find(name);
            if (it == tv.deltas.end())
                throw_usage("task vector '" + tv.model_id + "' is missing tensor '" + name + "'");
            if (it->second.shape != t.shape)
                throw_usage("task vector '" + tv.model_id + "' shape mismatch on tensor '" + name +
                            "'");
        }
    }
}

Checkpoint assemble(const Checkpoint& base, const DtypePolicy& policy,
                    const std::function<Eigen::ArrayXf(const std::string&, const Tensor&)>& body) {
    Checkpoint out;
    for (const auto& [name, base_tensor] : base.tensors)
        out.tensors.emplace(
            name, Tensor::from_f32(body(name, base_tensor), base_tensor.shape,
                                   policy.resolve(base_tensor.dtype)));
    return out;
}

}  // namespace

Checkpoint merge_task_arithmetic(const Checkpoint& base, std::span<const TaskVector> tvs,
                                 std::span<const double> lambdas, const DtypePolicy& policy) {
    if (tvs.empty() || tvs.size() != lambdas.size())
        throw_usage("task arithmetic needs one coefficient per task vector (" +
                    std::to_string(tvs.size()) + " vectors, " + std::to_string(lambdas.size()) +
                    " coefficients)");
    for (double l : lambdas)
        if (!std::isfinite(l)) throw_usage("non-finite task-vector coefficient");
    require_same_base(base, tvs);
    require_same_tensors(base, tvs);

    return assemble(base, policy, [&](const std::string& name, const Tensor& base_tensor) {
        Eigen::ArrayXf acc = base_tensor.to_f32();
        for (std::size_t t = 0; t < tvs.size(); ++t)
            acc += static_cast<float>(lambdas[t]) * tvs[t].deltas.at(name).values;
        return acc;
    });
}

TaskVector prune_topd(const TaskVector& tv, double d) {
    require_density(d, "density");
    TaskVector out;
    out.base_id = tv.base_id;
    out.model_id = tv.model_id;
    for (const auto& [name, ft] : tv.deltas) {
        FloatTensor pruned = ft;
        kernels::prune_topd_inplace(pruned.values, d);
        out.deltas.emplace(name, std::move(pruned));
    }
    return out;
}

SignMap elect_signs(std::span<const TaskVector> pruned) {
    if (pruned.empty()) throw_usage("sign election needs at least one task vector");
    const TaskVector& first = pruned.front();
    for (const auto& tv : pruned) {
        if (tv.deltas.size() != first.deltas.size())
            throw_usage("sign election: task vectors cover different tensor sets");
        for (const auto& [name, ft] : first.deltas) {
            auto it = tv.deltas.find(name);
            if (it == tv.deltas.end())
                throw_usage("sign election: task vector '" + tv.model_id + "' is missing tensor '" +
                            name + "'");
            if (it->second.shape != ft.shape)
                throw_usage("sign election: shape mismatch on tensor '" + name + "'");
        }
    }

    SignMap map;
    for (const auto& [name, ft] : first.deltas) {
        std::vector<const Eigen::ArrayXf*> views;
        views.reserve(pruned.size());
        for (const auto& tv : pruned) views.push_back(&tv.deltas.at(name).values);
        const Eigen::ArrayXf signs = kernels::elect_signs(views);
        std::vector<std::int8_t> out(static_cast<std::size_t>(signs.size()));
        for (Eigen::Index i = 0; i < signs.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<std::int8_t>(signs[i]);
        map.signs.emplace(name, std::move(out));
    }
    return map;
}

Checkpoint merge_ties(const Checkpoint& base, std::span<const TaskVector> tvs, double d,
                      double lambda, const DtypePolicy& policy) {
    require_density(d, "density");
    if (tvs.empty()) throw_usage("ties merge needs at least one task vector");
    if (!std::isfinite(lambda)) throw_usage("non-finite lambda");
    require_same_base(base, tvs);
    require_same_tensors(base, tvs);

    std::vector<TaskVector> pruned;
    pruned.reserve(tvs.size());
    for (const auto& tv : tvs) pruned.push_back(prune_topd(tv, d));

    return assemble(base, policy, [&](const std::string& name, const Tensor& base_tensor) {
        std::vector<const Eigen::ArrayXf*> views;
        views.reserve(pruned.size());
        for (const auto& tv : pruned) views.push_back(&tv.deltas.at(name).values);
        Eigen::ArrayXf out = base_tensor.to_f32();
        out += static_cast<float>(lambda) * kernels::ties_delta(views);
        return out;
    });
}

TaskVector drop_and_rescale(const TaskVector& tv, double d, std::uint64_t global_seed) {
    require_density(d, "density");
    TaskVector out;
    out.base_id = tv.base_id;
    out.model_id = tv.model_id;
    for (const auto& [name, ft] : tv.deltas) {
        FloatTensor masked = ft;
        kernels::drop_and_rescale_inplace(masked.values, d,
                                          tensor_stream_seed(tv.model_id, name, global_seed));
        out.deltas.emplace(name, std::move(masked));
    }
    return out;
}

Checkpoint merge_dare_ties(const Checkpoint& base, std::span<const TaskVector> tvs, double d,
                           double lambda, std::uint64_t global_seed, double ties_inner_density,
                           const DtypePolicy& policy) {
    require_density(d, "density");
    require_density(ties_inner_density, "ties-inner-density");
    std::vector<TaskVector> masked;
    masked.reserve(tvs.size());
    for (const auto& tv : tvs) masked.push_back(drop_and_rescale(tv, d, global_seed));
    return merge_ties(base, masked, ties_inner_density, lambda, policy);
}

// -----------------------------------------------------------------------------
// Streaming merge driver
// -----------------------------------------------------------------------------

void MergeRecipe::validate() const {
    if (inputs.empty()) throw_usage("merge needs at least one input model");
    if (!std::isfinite(lambda)) throw_usage("non-finite lambda");
    for (const auto& in : inputs)
        if (!std::isfinite(in.weight)) throw_usage("non-finite weight for '" + in.ref.path.string() + "'");
    if (method == MergeMethod::Ties || method == MergeMethod::DareTies)
        require_density(density, "density");
    if (method == MergeMethod::DareTies) require_density(ties_inner_density, "ties-inner-density");
}

void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& fn) {
    const int workers = std::max(1, threads);
    if (workers == 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto body = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= count) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    const int spawn = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(workers), count));
    pool.reserve(static_cast<std::size_t>(spawn));
    for (int t = 0; t < spawn; ++t) pool.emplace_back(body);
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

namespace {

struct MetaIndex {
    std::map<std::string, const TensorMeta*> by_name;
    explicit MetaIndex(const std::vector<TensorMeta>& metas) {
        for (const auto& m : metas) by_name.emplace(m.name, &m);
    }
};

void require_meta_compat(const CheckpointReader& base, const CheckpointReader& model) {
    MetaIndex a(base.metas()), b(model.metas());
    for (const auto& [name, ma] : a.by_name) {
        auto it = b.by_name.find(name);
        if (it == b.by_name.end())
            throw_incompatible(model.path().string() + ": missing tensor '" + name + "'");
        if (it->second->shape != ma->shape)
            throw_incompatible(model.path().string() + ": tensor '" + name + "' shape " +
                               shape_to_string(it->second->shape) + " != base " +
                               shape_to_string(ma->shape));
        if (it->second->dtype != ma->dtype)
            throw_incompatible(model.path().string() + ": tensor '" + name + "' dtype " +
                               std::string(dtype_tag(it->second->dtype)) + " != base " +
                               std::string(dtype_tag(ma->dtype)));
    }
    for (const auto& [name, _] : b.by_name)
        if (!a.by_name.count(name))
            throw_incompatible(base.path().string() + ": missing tensor '" + name +
                               "' present in " + model.path().string());
}

}  // namespace

MergeSummary run_merge(const MergeRecipe& recipe, const std::filesystem::path& out, int threads,
                       const std::string& output_id) {
    recipe.validate();

    CheckpointReader base(recipe.base.path);
    std::vector<CheckpointReader> models;
    models.reserve(recipe.inputs.size());
    for (const auto& in : recipe.inputs) {
        models.emplace_back(in.ref.path);
        require_meta_compat(base, models.back());
    }

    std::map<std::string, std::string> metadata;
    if (!output_id.empty()) metadata["model_id"] = output_id;

    const auto out_metas = plan_metas(base.metas(), recipe.dtype_policy);
    CheckpointWriter writer(out, out_metas, metadata);

    // Effective task-arithmetic coefficients: per-input weight x global lambda.
    std::vector<float> ta_coeff;
    for (const auto& in : recipe.inputs)
        ta_coeff.push_back(static_cast<float>(in.weight * recipe.lambda));

    MergeSummary summary;
    summary.output = out;
    summary.tensor_count = base.metas().size();

    const auto& base_metas = base.metas();
    const std::size_t window = std::max<std::size_t>(1, static_cast<std::size_t>(std::max(1, threads)));

    std::vector<Tensor> results(window);
    for (std::size_t begin = 0; begin < base_metas.size(); begin += window) {
        const std::size_t end = std::min(begin + window, base_metas.size());
        const std::size_t count = end - begin;

        // sequential reads, parallel compute, sequential in-order writes
        std::vector<Eigen::ArrayXf> base_vals(count);
        std::vector<std::vector<Eigen::ArrayXf>> model_vals(count);
        for (std::size_t i = 0; i < count; ++i) {
            const auto& meta = base_metas[begin + i];
            base_vals[i] = base.read(meta).to_f32();
            model_vals[i].reserve(models.size());
            for (auto& m : models) model_vals[i].push_back(m.read(meta.name).to_f32());
        }

        parallel_for(count, threads, [&](std::size_t i) {
            const auto& meta = base_metas[begin + i];
            const auto& name = meta.name;
            kernels::require_finite(base_vals[i], name, recipe.base.path.string());
            for (std::size_t t = 0; t < models.size(); ++t)
                kernels::require_finite(model_vals[i][t], name,
                                        recipe.inputs[t].ref.path.string());

            Eigen::ArrayXf acc = base_vals[i];
            switch (recipe.method) {
                case MergeMethod::TaskArithmetic: {
                    for (std::size_t t = 0; t < models.size(); ++t)
                        acc += ta_coeff[t] * (model_vals[i][t] - base_vals[i]);
                    break;
                }
                case MergeMethod::Ties:
                case MergeMethod::DareTies: {
                    std::vector<Eigen::ArrayXf> tvs(models.size());
                    for (std::size_t t = 0; t < models.size(); ++t) {
                        tvs[t] = model_vals[i][t] - base_vals[i];
                        if (recipe.method == MergeMethod::DareTies)
                            kernels::drop_and_rescale_inplace(
                                tvs[t], recipe.density,
                                tensor_stream_seed(recipe.inputs[t].ref.id, name,
                                                   recipe.dare_seed));
                        const double prune_d = recipe.method == MergeMethod::DareTies
                                                   ? recipe.ties_inner_density
                                                   : recipe.density;
                        kernels::prune_topd_inplace(tvs[t], prune_d);
                    }
                    std::vector<const Eigen::ArrayXf*> views(tvs.size());
                    for (std::size_t t = 0; t < tvs.size(); ++t) views[t] = &tvs[t];
                    acc += static_cast<float>(recipe.lambda) * kernels::ties_delta(views);
                    break;
                }
            }
            results[i] = Tensor::from_f32(acc, meta.shape,
                                          recipe.dtype_policy.resolve(meta.dtype));
            model_vals[i].clear();
            base_vals[i].resize(0);
        });

        for (std::size_t i = 0; i < count; ++i) {
            writer.append(results[i]);
            summary.total_params += results[i].numel();
            results[i] = Tensor{};
        }
    }
    writer.finish();
    return summary;
}

}  // namespace mergeforge
