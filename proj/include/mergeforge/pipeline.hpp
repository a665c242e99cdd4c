#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mergeforge/merge.hpp"

namespace mergeforge {

// Three-stage merge/select pipeline: sweep base+single-domain merges, pick
// each domain's best and the top two domains, sweep their dual merge, then
// sweep the dual winner against the remaining domain's winner. All two-model
// merges build task vectors against the original base checkpoint.

struct EvaluatorSpec {
    // Command template; {checkpoint} and {out} are required placeholders,
    // {model_id} and {tasks} optional. The command must exit 0 and write
    // {"models": {"<model_id>": {task: score, ...}}} to {out}.
    std::string command;
};

struct StageConfig {
    MergeMethod method = MergeMethod::TaskArithmetic;
    CheckpointRef base;
    std::vector<std::pair<std::string, std::filesystem::path>> domains;  // declared order
    std::vector<double> grid;                 // default 0.1 .. 0.9 step 0.1
    std::vector<std::string> selection_tasks; // empty: all tasks in the score rows
    std::vector<std::uint64_t> seeds{0};      // dare-ties runs per entry
    double lambda = 1.0;
    double ties_inner_density = 1.0;
    DtypePolicy dtype_policy;
    std::vector<std::string> tie_break_order;  // default: declared domain order
    std::filesystem::path workdir;
    EvaluatorSpec evaluator;

    void validate() const;
    static StageConfig from_json(const nlohmann::ordered_json& j,
                                 const std::filesystem::path& config_dir);
    static StageConfig from_json_file(const std::filesystem::path& path);
    nlohmann::ordered_json to_json() const;
};

enum class EntryStatus { Planned, Merged, Scored };

struct SweepEntry {
    std::string model_id;
    int stage = 1;
    std::string domain_key;  // "f", "fm", "fmj"
    double gamma = 0.0;
    std::optional<std::uint64_t> seed;  // dare-ties only
    MergeRecipe recipe;
    std::filesystem::path output;
    EntryStatus status = EntryStatus::Planned;
    std::map<std::string, double> scores;  // per task, once scored
};

struct SweepManifest {
    int stage = 1;
    std::vector<std::string> parents;  // model ids the entries build on
    std::vector<SweepEntry> entries;
};

// One decision point: the swept (gamma, selection score) pairs in grid order,
// the winning gamma, and the winning artifact.
struct SelectionDecision {
    double gamma_hat = 0.0;
    std::string winner_id;
    std::filesystem::path winner_path;
    double winner_score = 0.0;
    std::vector<std::pair<double, double>> sweep;
};

struct Top2Decision {
    std::vector<std::pair<std::string, double>> scores;  // declared domain order
    std::string first;
    std::string second;
    std::string remaining;  // empty when only two domains
};

struct PipelineError {
    std::string model_id;
    std::string message;
};

struct PipelineState {
    StageConfig config;
    std::vector<SweepManifest> stages;
    std::map<std::string, SelectionDecision> stage1;  // by domain id
    std::optional<Top2Decision> top2;
    std::optional<SelectionDecision> stage2;
    std::optional<SelectionDecision> stage3;
    std::optional<PipelineError> last_error;

    bool complete() const;
    nlohmann::ordered_json to_json() const;
    static PipelineState from_json(const nlohmann::ordered_json& j);
    void save(const std::filesystem::path& path) const;
    static PipelineState load(const std::filesystem::path& path);
};

// ---------------------------------------------------------------------------
// Planning and selection
// ---------------------------------------------------------------------------

// One entry per domain x gamma (x seed for dare-ties), in declared/grid/seed
// order. TA uses gamma as the single task-vector coefficient; ties and
// dare-ties use density = gamma.
SweepManifest plan_stage1(const StageConfig& cfg);

// Argmax over gamma; ties broken by smallest gamma.
double select_best(const std::map<double, double>& sweep_scores);

// The two highest-scoring domains, ordered by score descending; ties broken
// by position in tie_break_order.
std::pair<std::string, std::string> select_top2(const std::map<std::string, double>& best_scores,
                                                const std::vector<std::string>& tie_break_order);

// Dual merge of the two stage-1 winners over the original base. TA pairs the
// task-vector weights as (gamma', 1-gamma').
SweepManifest plan_stage2(const PipelineState& state, const StageConfig& cfg);

// Merge of the stage-2 winner with the remaining domain's stage-1 winner.
// Empty manifest when no domain remains.
SweepManifest plan_stage3(const PipelineState& state, const StageConfig& cfg);

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

enum class RunMode { Plan, Execute, Resume };

struct RunOptions {
    RunMode mode = RunMode::Plan;
    std::filesystem::path state_path;
    std::optional<std::filesystem::path> scores_path;  // resume
    int threads = 1;
};

// Plan: emit the stage-1 manifest and stop. Execute: merge every planned
// entry, score it through the external evaluator, and advance through all
// stages. Resume: merge planned entries, ingest scores for the current stage
// from the score table, and advance for as long as the table has scores.
// State is persisted after every entry so an interrupted run loses nothing.
PipelineState run_pipeline(const StageConfig& cfg, const RunOptions& opts);

// Recipe (de)serialization, shared by manifests and the CLI summary line.
nlohmann::ordered_json recipe_to_json(const MergeRecipe& recipe);
MergeRecipe recipe_from_json(const nlohmann::ordered_json& j);

}  // namespace mergeforge
