// mergeforge: checkpoint merging, sweep pipelines, merge-quality metrics, and
// parameter-space distance, as a scripting-first CLI. JSON summaries go to
// stdout; human-readable logs go to stderr. Exit codes: 0 ok, 2 usage,
// 3 incompatible checkpoints, 4 I/O, 5 evaluator failure.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mergeforge/checkpoint_io.hpp"
#include "mergeforge/errors.hpp"
#include "mergeforge/geometry.hpp"
#include "mergeforge/merge.hpp"
#include "mergeforge/metrics.hpp"
#include "mergeforge/pipeline.hpp"

namespace mf = mergeforge;
using ordered_json = nlohmann::ordered_json;

namespace {

int exit_code(mf::ErrorKind kind) {
    switch (kind) {
        case mf::ErrorKind::Usage: return 2;
        case mf::ErrorKind::Incompatible: return 3;
        case mf::ErrorKind::Io: return 4;
        case mf::ErrorKind::Evaluator: return 5;
        case mf::ErrorKind::Internal: return 1;
    }
    return 1;
}

int default_threads() {
    if (const char* env = std::getenv("MERGE_FORGE_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw ? static_cast<int>(hw) : 1;
}

// "path[:WEIGHT]" -> (path, weight). The suffix is a weight only when it
// parses fully as a number.
std::pair<std::string, std::optional<double>> split_weight(const std::string& arg) {
    const auto pos = arg.rfind(':');
    if (pos == std::string::npos || pos + 1 == arg.size()) return {arg, std::nullopt};
    const std::string suffix = arg.substr(pos + 1);
    try {
        std::size_t used = 0;
        const double w = std::stod(suffix, &used);
        if (used == suffix.size()) return {arg.substr(0, pos), w};
    } catch (const std::exception&) {
    }
    return {arg, std::nullopt};
}

std::string model_id_for(const std::filesystem::path& path) {
    mf::CheckpointReader reader(path);
    auto it = reader.file_metadata().find("model_id");
    return it != reader.file_metadata().end() ? it->second : path.stem().string();
}

struct MergeArgs {
    std::string method;
    std::string base;
    std::vector<std::string> models;
    double density = 0.0;
    bool density_set = false;
    double lambda = 1.0;
    std::uint64_t seed = 0;
    double ties_inner_density = 1.0;
    std::string out;
    std::string dtype = "preserve";
};

int cmd_merge(const MergeArgs& args, int threads) {
    auto method = mf::method_from_name(args.method);
    if (!method) mf::throw_usage("unknown merge method '" + args.method + "'");

    mf::MergeRecipe recipe;
    recipe.method = *method;
    recipe.base.path = args.base;
    recipe.base.id = model_id_for(args.base);
    recipe.lambda = args.lambda;
    recipe.dtype_policy = [&] {
        if (args.dtype == "preserve") return mf::DtypePolicy::preserve();
        auto d = mf::dtype_from_cli(args.dtype);
        if (!d) mf::throw_usage("unknown dtype '" + args.dtype + "'");
        return mf::DtypePolicy::cast(*d);
    }();

    for (const auto& spec : args.models) {
        auto [path, weight] = split_weight(spec);
        if (weight && *method != mf::MergeMethod::TaskArithmetic)
            mf::throw_usage("per-model weights only apply to the ta method");
        mf::RecipeInput input;
        input.ref.path = path;
        input.ref.id = model_id_for(path);
        input.weight = weight.value_or(1.0);
        recipe.inputs.push_back(std::move(input));
    }

    if (*method == mf::MergeMethod::Ties || *method == mf::MergeMethod::DareTies) {
        if (!args.density_set)
            mf::throw_usage("--density is required for ties and dare-ties merges");
        recipe.density = args.density;
        recipe.ties_inner_density = args.ties_inner_density;
        recipe.dare_seed = args.seed;
    } else if (args.density_set) {
        std::cerr << "note: --density is ignored by the ta method\n";
    }

    const std::filesystem::path out = args.out;
    if (!out.parent_path().empty()) std::filesystem::create_directories(out.parent_path());
    const mf::MergeSummary summary = mf::run_merge(recipe, out, threads, out.stem().string());

    ordered_json j;
    j["method"] = args.method;
    j["base"] = recipe.base.path.string();
    ordered_json inputs = ordered_json::array();
    for (const auto& in : recipe.inputs)
        inputs.push_back({{"path", in.ref.path.string()}, {"weight", in.weight}});
    j["inputs"] = std::move(inputs);
    ordered_json hp = ordered_json::object();
    if (*method == mf::MergeMethod::TaskArithmetic) {
        hp["lambda"] = recipe.lambda;
    } else {
        hp["density"] = recipe.density;
        hp["lambda"] = recipe.lambda;
        if (*method == mf::MergeMethod::DareTies) {
            hp["seed"] = recipe.dare_seed;
            hp["ties_inner_density"] = recipe.ties_inner_density;
        }
    }
    j["hyperparameters"] = std::move(hp);
    j["output"] = summary.output.string();
    j["parameter_count"] = summary.total_params;
    std::cout << j.dump() << '\n';
    return 0;
}

struct PipelineArgs {
    std::string mode;
    std::string config;
    std::string state;
    std::string scores;
};

int cmd_pipeline(const PipelineArgs& args, int threads) {
    const mf::StageConfig cfg = mf::StageConfig::from_json_file(args.config);
    mf::RunOptions opts;
    if (args.mode == "plan")
        opts.mode = mf::RunMode::Plan;
    else if (args.mode == "run")
        opts.mode = mf::RunMode::Execute;
    else
        opts.mode = mf::RunMode::Resume;
    opts.state_path = args.state.empty() ? cfg.workdir / "pipeline-state.json"
                                         : std::filesystem::path(args.state);
    if (!args.scores.empty()) opts.scores_path = args.scores;
    opts.threads = threads;

    const mf::PipelineState st = mf::run_pipeline(cfg, opts);

    ordered_json j;
    j["state"] = opts.state_path.string();
    j["stages_planned"] = st.stages.size();
    j["complete"] = st.complete();
    if (st.top2) j["selected_domains"] = {st.top2->first, st.top2->second};
    if (st.stage3)
        j["final_model"] = st.stage3->winner_id;
    else if (st.stage2 && st.top2 && st.top2->remaining.empty())
        j["final_model"] = st.stage2->winner_id;
    std::cout << j.dump() << '\n';
    return 0;
}

struct MetricsArgs {
    std::string scores;
    std::string merged;
    std::string constituents;
    std::string report;
    std::string matrix = "gain";
};

int cmd_metrics(const MetricsArgs& args) {
    const mf::ScoreTable table = mf::ScoreTable::load(args.scores);
    std::vector<std::string> constituent_ids;
    std::string current;
    for (char c : args.constituents) {
        if (c == ',') {
            if (!current.empty()) constituent_ids.push_back(current);
            current.clear();
        } else {
            current += c;
        }
    }
    if (!current.empty()) constituent_ids.push_back(current);
    if (constituent_ids.empty()) mf::throw_usage("--constituents needs at least one model id");

    const mf::MetricsReport report = mf::build_report(table, args.merged, constituent_ids);

    if (!args.report.empty()) {
        const std::filesystem::path path = args.report;
        const auto ext = path.extension().string();
        std::string body;
        if (ext == ".json") {
            body = report.to_json().dump(2);
            body += '\n';
        } else if (ext == ".csv" || ext == ".md") {
            const auto which = [&] {
                if (args.matrix == "gain") return mf::MatrixMetric::Gain;
                if (args.matrix == "og") return mf::MatrixMetric::Og;
                mf::throw_usage("--matrix must be 'gain' or 'og'");
            }();
            const auto fmt = ext == ".csv" ? mf::MatrixFormat::Csv : mf::MatrixFormat::Markdown;
            const mf::MetricsReport reports[] = {report};
            body = mf::emit_matrix(reports, which, fmt);
        } else {
            mf::throw_usage("--report must end in .json, .csv, or .md");
        }
        std::ofstream out(path, std::ios::trunc | std::ios::binary);
        if (!out) mf::throw_io("cannot write report: " + path.string());
        out << body;
        if (!out) mf::throw_io("write failure on " + path.string());
    }

    std::cout << report.to_json().dump() << '\n';
    return 0;
}

struct DistanceArgs {
    std::string a;
    std::string b;
    std::vector<std::string> includes;
    std::vector<std::string> excludes;
    std::string preset = "all";
};

int cmd_distance(const DistanceArgs& args) {
    mf::ParamFilter filter;
    if (args.preset == "no-embed")
        filter = mf::ParamFilter::no_embeddings();
    else if (args.preset != "all")
        mf::throw_usage("--preset must be 'all' or 'no-embed'");
    if (!args.includes.empty()) filter.include_patterns = args.includes;
    for (const auto& pat : args.excludes) filter.exclude_patterns.push_back(pat);

    const mf::DistanceReport report = mf::distance_files(args.a, args.b, filter);
    ordered_json j;
    j["model_a"] = report.model_a;
    j["model_b"] = report.model_b;
    j["param_count"] = report.param_count;
    j["l2_normalized"] = report.l2_normalized;
    j["cosine"] = report.cosine;
    std::cout << j.dump() << '\n';
    return 0;
}

int cmd_inspect(const std::string& path) {
    const mf::InspectSummary s = mf::inspect(path);
    ordered_json j;
    j["path"] = s.path.string();
    j["tensor_count"] = s.tensor_count;
    j["total_params"] = s.total_params;
    j["total_bytes"] = s.total_bytes;
    ordered_json tensors = ordered_json::array();
    for (const auto& m : s.tensors)
        tensors.push_back({{"name", m.name},
                           {"dtype", std::string(mf::dtype_tag(m.dtype))},
                           {"shape", m.shape},
                           {"bytes", m.byte_size()}});
    j["tensors"] = std::move(tensors);
    if (!s.metadata.empty()) {
        ordered_json md = ordered_json::object();
        for (const auto& [k, v] : s.metadata) md[k] = v;
        j["metadata"] = std::move(md);
    }
    std::cout << j.dump() << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mergeforge: weight-space model merging toolkit"};
    app.require_subcommand(1);
    int threads = default_threads();
    app.add_option("--threads", threads, "worker threads (default: all cores, or MERGE_FORGE_THREADS)")
        ->check(CLI::PositiveNumber);

    MergeArgs merge_args;
    auto* merge = app.add_subcommand("merge", "merge checkpoints in weight space");
    merge->add_option("--method", merge_args.method, "ta | ties | dare-ties")->required();
    merge->add_option("--base", merge_args.base, "base checkpoint path")->required();
    merge->add_option("--model", merge_args.models, "model checkpoint path[:WEIGHT] (repeatable)")
        ->required();
    merge->add_option("--density", merge_args.density, "retention rate d in (0,1] (ties, dare-ties)")
        ->each([&](const std::string&) { merge_args.density_set = true; });
    merge->add_option("--lambda", merge_args.lambda, "scaling coefficient (default 1.0)");
    merge->add_option("--seed", merge_args.seed, "dare-ties mask seed (default 0)");
    merge->add_option("--ties-inner-density", merge_args.ties_inner_density,
                      "second magnitude-pruning density inside dare-ties (default 1.0)");
    merge->add_option("--out", merge_args.out, "output checkpoint path")->required();
    merge->add_option("--dtype", merge_args.dtype, "preserve | f32 | f16 | bf16");

    PipelineArgs pipeline_args;
    auto* pipeline = app.add_subcommand("pipeline", "three-stage merge/select pipeline");
    pipeline->require_subcommand(1);
    auto add_pipeline_mode = [&](const std::string& name, const std::string& desc, bool scores) {
        auto* sub = pipeline->add_subcommand(name, desc);
        sub->add_option("--config", pipeline_args.config, "pipeline config JSON")->required();
        sub->add_option("--state", pipeline_args.state, "state file (default: <workdir>/pipeline-state.json)");
        if (scores) sub->add_option("--scores", pipeline_args.scores, "score-table JSON for planned entries");
        sub->callback([&, name] { pipeline_args.mode = name; });
        return sub;
    };
    add_pipeline_mode("plan", "emit the stage-1 manifest and stop", false);
    add_pipeline_mode("run", "merge, evaluate, and select through all stages", false);
    add_pipeline_mode("resume", "continue from a state file and a score table", true);

    MetricsArgs metrics_args;
    auto* metrics = app.add_subcommand("metrics", "merge-quality metrics from a score table");
    metrics->add_option("--scores", metrics_args.scores, "score-table JSON")->required();
    metrics->add_option("--merged", metrics_args.merged, "merged model id")->required();
    metrics->add_option("--constituents", metrics_args.constituents, "comma-separated constituent ids")
        ->required();
    metrics->add_option("--report", metrics_args.report, "write report to .json, .csv, or .md");
    metrics->add_option("--matrix", metrics_args.matrix, "matrix metric for .csv/.md: gain | og");

    DistanceArgs distance_args;
    auto* dist = app.add_subcommand("distance", "parameter-space distance between two checkpoints");
    dist->add_option("--a", distance_args.a, "first checkpoint")->required();
    dist->add_option("--b", distance_args.b, "second checkpoint")->required();
    dist->add_option("--include", distance_args.includes, "glob of tensor names to include (repeatable)");
    dist->add_option("--exclude", distance_args.excludes, "glob of tensor names to exclude (repeatable)");
    dist->add_option("--preset", distance_args.preset, "all | no-embed");

    std::string inspect_path;
    auto* insp = app.add_subcommand("inspect", "summarize a checkpoint file");
    insp->add_option("path", inspect_path, "checkpoint path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // prints help, exits 0
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*merge) return cmd_merge(merge_args, threads);
        if (*pipeline) return cmd_pipeline(pipeline_args, threads);
        if (*metrics) return cmd_metrics(metrics_args);
        if (*dist) return cmd_distance(distance_args);
        if (*insp) return cmd_inspect(inspect_path);
    } catch (const mf::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
