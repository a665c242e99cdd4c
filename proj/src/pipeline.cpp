#include "mergeforge/pipeline.hpp"

#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>

#include "mergeforge/errors.hpp"
#include "mergeforge/metrics.hpp"

namespace mergeforge {

namespace {

using ordered_json = nlohmann::ordered_json;

std::string gamma_str(double g) { return nlohmann::json(g).dump(); }

std::string status_name(EntryStatus s) {
    switch (s) {
        case EntryStatus::Planned: return "planned";
        case EntryStatus::Merged: return "merged";
        case EntryStatus::Scored: return "scored";
    }
    return "";
}

EntryStatus status_from_name(const std::string& s) {
    if (s == "planned") return EntryStatus::Planned;
    if (s == "merged") return EntryStatus::Merged;
    if (s == "scored") return EntryStatus::Scored;
    throw_usage("unknown entry status '" + s + "'");
}

std::string dtype_policy_name(const DtypePolicy& p) {
    return p.cast_to ? std::string(dtype_tag(*p.cast_to)) : "preserve";
}

DtypePolicy dtype_policy_from_name(const std::string& s) {
    if (s == "preserve") return DtypePolicy::preserve();
    auto d = dtype_from_tag(s);
    if (!d) throw_usage("unknown dtype policy '" + s + "'");
    return DtypePolicy::cast(*d);
}

std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& dir) {
    if (p.is_absolute() || dir.empty()) return p.lexically_normal();
    return (dir / p).lexically_normal();
}

}  // namespace

// ---------------------------------------------------------------------------
// Recipe serialization
// ---------------------------------------------------------------------------

ordered_json recipe_to_json(const MergeRecipe& recipe) {
    ordered_json j;
    j["method"] = std::string(method_name(recipe.method));
    j["base"] = {{"path", recipe.base.path.string()}, {"id", recipe.base.id}};
    ordered_json inputs = ordered_json::array();
    for (const auto& in : recipe.inputs)
        inputs.push_back(
            {{"path", in.ref.path.string()}, {"id", in.ref.id}, {"weight", in.weight}});
    j["inputs"] = std::move(inputs);
    j["density"] = recipe.density;
    j["lambda"] = recipe.lambda;
    j["dare_seed"] = recipe.dare_seed;
    j["ties_inner_density"] = recipe.ties_inner_density;
    j["dtype"] = dtype_policy_name(recipe.dtype_policy);
    return j;
}

MergeRecipe recipe_from_json(const ordered_json& j) {
    MergeRecipe r;
    auto method = method_from_name(j.at("method").get<std::string>());
    if (!method) throw_usage("unknown merge method '" + j.at("method").get<std::string>() + "'");
    r.method = *method;
    r.base.path = j.at("base").at("path").get<std::string>();
    r.base.id = j.at("base").at("id").get<std::string>();
    for (const auto& in : j.at("inputs")) {
        RecipeInput input;
        input.ref.path = in.at("path").get<std::string>();
        input.ref.id = in.at("id").get<std::string>();
        input.weight = in.at("weight").get<double>();
        r.inputs.push_back(std::move(input));
    }
    r.density = j.at("density").get<double>();
    r.lambda = j.at("lambda").get<double>();
    r.dare_seed = j.at("dare_seed").get<std::uint64_t>();
    r.ties_inner_density = j.at("ties_inner_density").get<double>();
    r.dtype_policy = dtype_policy_from_name(j.at("dtype").get<std::string>());
    return r;
}

// ---------------------------------------------------------------------------
// StageConfig
// ---------------------------------------------------------------------------

void StageConfig::validate() const {
    if (domains.empty()) throw_usage("config needs at least one domain model");
    std::set<std::string> ids;
    for (const auto& [id, path] : domains) {
        if (id.empty()) throw_usage("empty domain id");
        if (!ids.insert(id).second) throw_usage("duplicate domain id '" + id + "'");
        if (path.empty()) throw_usage("domain '" + id + "' has an empty checkpoint path");
    }
    if (grid.empty()) throw_usage("hyperparameter grid is empty");
    std::set<double> seen;
    for (double g : grid) {
        if (!(g > 0.0 && g <= 1.0))
            throw_usage("grid value " + gamma_str(g) + " outside (0,1]");
        if (!seen.insert(g).second) throw_usage("duplicate grid value " + gamma_str(g));
    }
    if (seeds.empty()) throw_usage("seed list is empty");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
        throw_usage("duplicate seeds");
    if (!std::isfinite(lambda)) throw_usage("non-finite lambda");
    if (!(ties_inner_density > 0.0 && ties_inner_density <= 1.0))
        throw_usage("ties_inner_density outside (0,1]");
    if (base.path.empty()) throw_usage("config needs a base checkpoint path");
    if (workdir.empty()) throw_usage("config needs a workdir");
    if (tie_break_order.size() != domains.size())
        throw_usage("tie_break_order must list every domain exactly once");
    for (const auto& [id, _] : domains)
        if (std::find(tie_break_order.begin(), tie_break_order.end(), id) ==
            tie_break_order.end())
            throw_usage("tie_break_order is missing domain '" + id + "'");
}

StageConfig StageConfig::from_json(const ordered_json& j, const std::filesystem::path& dir) {
    static const std::set<std::string> known{
        "method",          "base",   "domains",          "grid",
        "selection_tasks", "seeds",  "lambda",           "ties_inner_density",
        "dtype",           "workdir", "evaluator",       "tie_break_order"};
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) throw_usage("unknown config field '" + key + "'");

    StageConfig cfg;
    auto method = method_from_name(j.at("method").get<std::string>());
    if (!method) throw_usage("unknown merge method '" + j.at("method").get<std::string>() + "'");
    cfg.method = *method;
    cfg.base.path = resolve(j.at("base").get<std::string>(), dir);
    cfg.base.id = "base";
    if (!j.contains("domains") || !j.at("domains").is_object())
        throw_usage("config needs a \"domains\" object");
    for (const auto& [id, path] : j.at("domains").items())
        cfg.domains.emplace_back(id, resolve(path.get<std::string>(), dir));

    if (j.contains("grid"))
        cfg.grid = j.at("grid").get<std::vector<double>>();
    else
        cfg.grid = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    if (j.contains("selection_tasks"))
        cfg.selection_tasks = j.at("selection_tasks").get<std::vector<std::string>>();
    if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("lambda")) cfg.lambda = j.at("lambda").get<double>();
    if (j.contains("ties_inner_density"))
        cfg.ties_inner_density = j.at("ties_inner_density").get<double>();
    if (j.contains("dtype")) cfg.dtype_policy = dtype_policy_from_name(j.at("dtype").get<std::string>());
    cfg.workdir = resolve(j.at("workdir").get<std::string>(), dir);
    if (j.contains("evaluator")) cfg.evaluator.command = j.at("evaluator").at("command").get<std::string>();
    if (j.contains("tie_break_order"))
        cfg.tie_break_order = j.at("tie_break_order").get<std::vector<std::string>>();
    else
        for (const auto& [id, _] : cfg.domains) cfg.tie_break_order.push_back(id);

    cfg.validate();
    return cfg;
}

StageConfig StageConfig::from_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw_io("cannot open config: " + path.string());
    ordered_json j = ordered_json::parse(in, nullptr, false);
    if (j.is_discarded()) throw_usage(path.string() + ": config is not valid JSON");
    return from_json(j, path.parent_path());
}

ordered_json StageConfig::to_json() const {
    ordered_json j;
    j["method"] = std::string(method_name(method));
    j["base"] = base.path.string();
    ordered_json domains_json = ordered_json::object();
    for (const auto& [id, path] : domains) domains_json[id] = path.string();
    j["domains"] = std::move(domains_json);
    j["grid"] = grid;
    j["selection_tasks"] = selection_tasks;
    j["seeds"] = seeds;
    j["lambda"] = lambda;
    j["ties_inner_density"] = ties_inner_density;
    j["dtype"] = dtype_policy_name(dtype_policy);
    j["workdir"] = workdir.string();
    j["evaluator"] = {{"command", evaluator.command}};
    j["tie_break_order"] = tie_break_order;
    return j;
}

// ---------------------------------------------------------------------------
// Planning
// ---------------------------------------------------------------------------

namespace {

bool uses_seeds(MergeMethod m) { return m == MergeMethod::DareTies; }

std::string entry_id(int stage, MergeMethod method, const std::string& domain_key, double gamma,
                     std::optional<std::uint64_t> seed) {
    std::string id = "s" + std::to_string(stage) + "-" + std::string(method_name(method)) + "-" +
                     domain_key + "-g" + gamma_str(gamma);
    if (seed) id += "-s" + std::to_string(*seed);
    return id;
}

MergeRecipe single_input_recipe(const StageConfig& cfg, const CheckpointRef& input, double gamma,
                                std::uint64_t seed) {
    MergeRecipe r;
    r.method = cfg.method;
    r.base = cfg.base;
    r.dtype_policy = cfg.dtype_policy;
    switch (cfg.method) {
        case MergeMethod::TaskArithmetic:
            r.inputs.push_back({input, gamma});
            r.lambda = 1.0;
            break;
        case MergeMethod::Ties:
            r.inputs.push_back({input, 1.0});
            r.density = gamma;
            r.lambda = cfg.lambda;
            break;
        case MergeMethod::DareTies:
            r.inputs.push_back({input, 1.0});
            r.density = gamma;
            r.lambda = cfg.lambda;
            r.dare_seed = seed;
            r.ties_inner_density = cfg.ties_inner_density;
            break;
    }
    return r;
}

MergeRecipe pair_recipe(const StageConfig& cfg, const CheckpointRef& first,
                        const CheckpointRef& second, double gamma, std::uint64_t seed) {
    MergeRecipe r;
    r.method = cfg.method;
    r.base = cfg.base;
    r.dtype_policy = cfg.dtype_policy;
    switch (cfg.method) {
        case MergeMethod::TaskArithmetic:
            r.inputs.push_back({first, gamma});
            r.inputs.push_back({second, 1.0 - gamma});
            r.lambda = 1.0;
            break;
        case MergeMethod::Ties:
        case MergeMethod::DareTies:
            r.inputs.push_back({first, 1.0});
            r.inputs.push_back({second, 1.0});
            r.density = gamma;
            r.lambda = cfg.lambda;
            if (cfg.method == MergeMethod::DareTies) {
                r.dare_seed = seed;
                r.ties_inner_density = cfg.ties_inner_density;
            }
            break;
    }
    return r;
}

std::vector<std::optional<std::uint64_t>> seed_slots(const StageConfig& cfg) {
    if (!uses_seeds(cfg.method)) return {std::nullopt};
    std::vector<std::optional<std::uint64_t>> slots;
    for (auto s : cfg.seeds) slots.emplace_back(s);
    return slots;
}

SweepEntry make_entry(const StageConfig& cfg, int stage, const std::string& domain_key,
                      double gamma, std::optional<std::uint64_t> seed, MergeRecipe recipe) {
    SweepEntry e;
    e.model_id = entry_id(stage, cfg.method, domain_key, gamma, seed);
    e.stage = stage;
    e.domain_key = domain_key;
    e.gamma = gamma;
    e.seed = seed;
    e.recipe = std::move(recipe);
    e.output = cfg.workdir / (e.model_id + ".safetensors");
    e.status = EntryStatus::Planned;
    return e;
}

}  // namespace

SweepManifest plan_stage1(const StageConfig& cfg) {
    cfg.validate();
    SweepManifest m;
    m.stage = 1;
    for (const auto& [domain, path] : cfg.domains) {
        const CheckpointRef input{path, domain};
        for (double gamma : cfg.grid)
            for (auto seed : seed_slots(cfg))
                m.entries.push_back(make_entry(
                    cfg, 1, domain, gamma, seed,
                    single_input_recipe(cfg, input, gamma, seed.value_or(0))));
    }
    return m;
}

double select_best(const std::map<double, double>& sweep_scores) {
    if (sweep_scores.empty()) throw_usage("selection over an empty sweep");
    bool first = true;
    double best_gamma = 0.0, best_score = 0.0;
    for (const auto& [gamma, score] : sweep_scores) {  // ascending gamma
        if (!std::isfinite(score))
            throw_usage("non-finite selection score at gamma " + gamma_str(gamma));
        if (first || score > best_score) {
            best_gamma = gamma;
            best_score = score;
            first = false;
        }
    }
    return best_gamma;
}

std::pair<std::string, std::string> select_top2(const std::map<std::string, double>& best_scores,
                                                const std::vector<std::string>& tie_break_order) {
    if (best_scores.size() < 2) throw_usage("top-2 selection needs at least two domains");
    auto position = [&](const std::string& id) {
        auto it = std::find(tie_break_order.begin(), tie_break_order.end(), id);
        if (it == tie_break_order.end())
            throw_usage("domain '" + id + "' is not in the tie-break order");
        return static_cast<std::size_t>(it - tie_break_order.begin());
    };
    std::vector<std::pair<std::string, double>> ranked(best_scores.begin(), best_scores.end());
    std::sort(ranked.begin(), ranked.end(), [&](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return position(a.first) < position(b.first);
    });
    return {ranked[0].first, ranked[1].first};
}

namespace {

const SelectionDecision& stage1_winner(const PipelineState& state, const std::string& domain) {
    auto it = state.stage1.find(domain);
    if (it == state.stage1.end())
        throw_usage("stage-1 decision for domain '" + domain + "' is not recorded yet");
    return it->second;
}

}  // namespace

SweepManifest plan_stage2(const PipelineState& state, const StageConfig& cfg) {
    if (!state.top2) throw_usage("stage-2 planning needs the recorded top-2 selection");
    const auto& first = stage1_winner(state, state.top2->first);
    const auto& second = stage1_winner(state, state.top2->second);

    SweepManifest m;
    m.stage = 2;
    m.parents = {first.winner_id, second.winner_id};
    const std::string key = state.top2->first + state.top2->second;
    const CheckpointRef ref1{first.winner_path, first.winner_id};
    const CheckpointRef ref2{second.winner_path, second.winner_id};
    for (double gamma : cfg.grid)
        for (auto seed : seed_slots(cfg))
            m.entries.push_back(make_entry(cfg, 2, key, gamma, seed,
                                           pair_recipe(cfg, ref1, ref2, gamma, seed.value_or(0))));
    return m;
}

SweepManifest plan_stage3(const PipelineState& state, const StageConfig& cfg) {
    if (!state.stage2) throw_usage("stage-3 planning needs the recorded stage-2 decision");
    if (!state.top2) throw_usage("stage-3 planning needs the recorded top-2 selection");

    SweepManifest m;
    m.stage = 3;
    if (state.top2->remaining.empty()) return m;  // two-domain pipeline: nothing left to add

    const auto& partner = stage1_winner(state, state.top2->remaining);
    m.parents = {state.stage2->winner_id, partner.winner_id};
    const std::string key = state.top2->first + state.top2->second + state.top2->remaining;
    const CheckpointRef ref1{state.stage2->winner_path, state.stage2->winner_id};
    const CheckpointRef ref2{partner.winner_path, partner.winner_id};
    for (double gamma : cfg.grid)
        for (auto seed : seed_slots(cfg))
            m.entries.push_back(make_entry(cfg, 3, key, gamma, seed,
                                           pair_recipe(cfg, ref1, ref2, gamma, seed.value_or(0))));
    return m;
}

// ---------------------------------------------------------------------------
// State serialization
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kSchema = "mergeforge/pipeline-state/v1";

ordered_json entry_to_json(const SweepEntry& e) {
    ordered_json j;
    j["model_id"] = e.model_id;
    j["stage"] = e.stage;
    j["domain"] = e.domain_key;
    j["gamma"] = e.gamma;
    if (e.seed)
        j["seed"] = *e.seed;
    else
        j["seed"] = nullptr;
    j["recipe"] = recipe_to_json(e.recipe);
    j["output"] = e.output.string();
    j["status"] = status_name(e.status);
    if (e.status == EntryStatus::Scored) {
        ordered_json scores = ordered_json::object();
        for (const auto& [task, v] : e.scores) scores[task] = v;
        j["scores"] = std::move(scores);
    }
    return j;
}

SweepEntry entry_from_json(const ordered_json& j) {
    SweepEntry e;
    e.model_id = j.at("model_id").get<std::string>();
    e.stage = j.at("stage").get<int>();
    e.domain_key = j.at("domain").get<std::string>();
    e.gamma = j.at("gamma").get<double>();
    if (!j.at("seed").is_null()) e.seed = j.at("seed").get<std::uint64_t>();
    e.recipe = recipe_from_json(j.at("recipe"));
    e.output = j.at("output").get<std::string>();
    e.status = status_from_name(j.at("status").get<std::string>());
    if (j.contains("scores"))
        for (const auto& [task, v] : j.at("scores").items()) e.scores[task] = v.get<double>();
    return e;
}

ordered_json decision_to_json(const SelectionDecision& d) {
    ordered_json j;
    j["gamma_hat"] = d.gamma_hat;
    j["winner_id"] = d.winner_id;
    j["winner_path"] = d.winner_path.string();
    j["winner_score"] = d.winner_score;
    ordered_json sweep = ordered_json::array();
    for (const auto& [g, s] : d.sweep) sweep.push_back({g, s});
    j["sweep"] = std::move(sweep);
    return j;
}

SelectionDecision decision_from_json(const ordered_json& j) {
    SelectionDecision d;
    d.gamma_hat = j.at("gamma_hat").get<double>();
    d.winner_id = j.at("winner_id").get<std::string>();
    d.winner_path = j.at("winner_path").get<std::string>();
    d.winner_score = j.at("winner_score").get<double>();
    for (const auto& pair : j.at("sweep"))
        d.sweep.emplace_back(pair.at(0).get<double>(), pair.at(1).get<double>());
    return d;
}

}  // namespace

bool PipelineState::complete() const {
    if (stage3) return true;
    if (stage2 && top2 && top2->remaining.empty()) return true;
    if (config.domains.size() < 2 && stage1.size() == config.domains.size() && !stage1.empty())
        return true;
    return false;
}

ordered_json PipelineState::to_json() const {
    ordered_json j;
    j["schema"] = kSchema;
    j["config"] = config.to_json();
    ordered_json stages_json = ordered_json::array();
    for (const auto& m : stages) {
        ordered_json mj;
        mj["stage"] = m.stage;
        mj["parents"] = m.parents;
        ordered_json entries = ordered_json::array();
        for (const auto& e : m.entries) entries.push_back(entry_to_json(e));
        mj["entries"] = std::move(entries);
        stages_json.push_back(std::move(mj));
    }
    j["stages"] = std::move(stages_json);

    ordered_json decisions;
    ordered_json stage1_json = ordered_json::object();
    for (const auto& [domain, d] : stage1) stage1_json[domain] = decision_to_json(d);
    decisions["stage1"] = std::move(stage1_json);
    if (top2) {
        ordered_json t;
        ordered_json scores = ordered_json::array();
        for (const auto& [id, s] : top2->scores) scores.push_back({id, s});
        t["scores"] = std::move(scores);
        t["first"] = top2->first;
        t["second"] = top2->second;
        t["remaining"] = top2->remaining;
        decisions["top2"] = std::move(t);
    } else {
        decisions["top2"] = nullptr;
    }
    decisions["stage2"] = stage2 ? decision_to_json(*stage2) : ordered_json(nullptr);
    decisions["stage3"] = stage3 ? decision_to_json(*stage3) : ordered_json(nullptr);
    j["decisions"] = std::move(decisions);

    if (last_error)
        j["last_error"] = {{"model_id", last_error->model_id}, {"message", last_error->message}};
    else
        j["last_error"] = nullptr;
    return j;
}

PipelineState PipelineState::from_json(const ordered_json& j) {
    if (!j.contains("schema") || j.at("schema").get<std::string>() != kSchema)
        throw_usage("state file has an unknown schema tag");
    PipelineState st;
    st.config = StageConfig::from_json(j.at("config"), {});
    for (const auto& mj : j.at("stages")) {
        SweepManifest m;
        m.stage = mj.at("stage").get<int>();
        m.parents = mj.at("parents").get<std::vector<std::string>>();
        for (const auto& ej : mj.at("entries")) m.entries.push_back(entry_from_json(ej));
        st.stages.push_back(std::move(m));
    }
    const auto& decisions = j.at("decisions");
    for (const auto& [domain, dj] : decisions.at("stage1").items())
        st.stage1.emplace(domain, decision_from_json(dj));
    if (!decisions.at("top2").is_null()) {
        Top2Decision t;
        for (const auto& pair : decisions.at("top2").at("scores"))
            t.scores.emplace_back(pair.at(0).get<std::string>(), pair.at(1).get<double>());
        t.first = decisions.at("top2").at("first").get<std::string>();
        t.second = decisions.at("top2").at("second").get<std::string>();
        t.remaining = decisions.at("top2").at("remaining").get<std::string>();
        st.top2 = std::move(t);
    }
    if (!decisions.at("stage2").is_null()) st.stage2 = decision_from_json(decisions.at("stage2"));
    if (!decisions.at("stage3").is_null()) st.stage3 = decision_from_json(decisions.at("stage3"));
    if (!j.at("last_error").is_null())
        st.last_error = PipelineError{j.at("last_error").at("model_id").get<std::string>(),
                                      j.at("last_error").at("message").get<std::string>()};
    return st;
}

void PipelineState::save(const std::filesystem::path& path) const {
    if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw_io("cannot write state file: " + tmp.string());
        out << to_json().dump(2) << '\n';
        if (!out) throw_io("write failure on " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

PipelineState PipelineState::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw_io("cannot open state file: " + path.string());
    ordered_json j = ordered_json::parse(in, nullptr, false);
    if (j.is_discarded()) throw_usage(path.string() + ": state file is not valid JSON");
    return from_json(j);
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

namespace {

std::string shell_quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) {
        if (c == '\'')
            out += "'\\''";
        else
            out += c;
    }
    out += "'";
    return out;
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

std::string substitute(const std::string& tmpl, const std::map<std::string, std::string>& vars) {
    std::string out;
    std::size_t pos = 0;
    while (pos < tmpl.size()) {
        const std::size_t open = tmpl.find('{', pos);
        if (open == std::string::npos) {
            out += tmpl.substr(pos);
            break;
        }
        const std::size_t close = tmpl.find('}', open);
        if (close == std::string::npos) {
            out += tmpl.substr(pos);
            break;
        }
        out += tmpl.substr(pos, open - pos);
        const std::string key = tmpl.substr(open + 1, close - open - 1);
        auto it = vars.find(key);
        if (it == vars.end())
            throw_usage("evaluator command has an unknown placeholder {" + key + "}");
        out += shell_quote(it->second);
        pos = close + 1;
    }
    return out;
}

// Validates one model's score row: selection tasks present, values finite.
std::map<std::string, double> validated_row(const std::map<std::string, double>& row,
                                            const StageConfig& cfg, const std::string& model_id,
                                            ErrorKind kind) {
    if (row.empty()) throw Error(kind, "no scores for model '" + model_id + "'");
    for (const auto& task : cfg.selection_tasks)
        if (!row.count(task))
            throw Error(kind,
                        "model '" + model_id + "' has no score for task '" + task + "'");
    for (const auto& [task, v] : row)
        if (!std::isfinite(v))
            throw Error(kind, "model '" + model_id + "' has a non-finite score for task '" +
                                  task + "'");
    return row;
}

double selection_score(const StageConfig& cfg, const std::map<std::string, double>& mean_row) {
    double sum = 0.0;
    std::size_t n = 0;
    if (cfg.selection_tasks.empty()) {
        for (const auto& [_, v] : mean_row) {
            sum += v;
            ++n;
        }
    } else {
        for (const auto& task : cfg.selection_tasks) {
            sum += mean_row.at(task);
            ++n;
        }
    }
    if (n == 0) throw_usage("selection score over an empty task set");
    return sum / static_cast<double>(n);
}

struct Evaluator {
    const StageConfig& cfg;
    PipelineState& state;
    const std::filesystem::path& state_path;

    std::map<std::string, double> score(const SweepEntry& entry) {
        const std::filesystem::path scores_dir = cfg.workdir / "scores";
        std::filesystem::create_directories(scores_dir);
        const std::filesystem::path out = scores_dir / (entry.model_id + ".json");
        std::error_code ec;
        std::filesystem::remove(out, ec);

        const std::string cmd = substitute(
            cfg.evaluator.command, {{"checkpoint", entry.output.string()},
                                    {"out", out.string()},
                                    {"model_id", entry.model_id},
                                    {"tasks", join(cfg.selection_tasks, ",")}});
        const int rc = std::system(cmd.c_str());
        const bool exited_ok = rc != -1 && WIFEXITED(rc) && WEXITSTATUS(rc) == 0;
        if (!exited_ok) {
            const std::string msg = "evaluator failed for model '" + entry.model_id +
                                    "' (command: " + cmd + ")";
            halt(entry.model_id, msg);
        }
        try {
            const ScoreTable table = ScoreTable::load(out);
            auto it = table.models.find(entry.model_id);
            if (it == table.models.end())
                throw Error(ErrorKind::Evaluator, "evaluator output " + out.string() +
                                                      " has no row for model '" + entry.model_id +
                                                      "'");
            return validated_row(it->second, cfg, entry.model_id, ErrorKind::Evaluator);
        } catch (const Error& e) {
            halt(entry.model_id, e.what());
        }
    }

    [[noreturn]] void halt(const std::string& model_id, const std::string& message) {
        state.last_error = PipelineError{model_id, message};
        state.save(state_path);
        throw Error(ErrorKind::Evaluator, message);
    }
};

// Groups a stage's entries by gamma (and domain for stage 1), averages the
// per-seed rows, and returns the (gamma, S) sweep in grid order.
std::map<double, double> sweep_scores(const StageConfig& cfg,
                                      const std::vector<const SweepEntry*>& entries) {
    std::map<double, double> result;
    for (double gamma : cfg.grid) {
        std::vector<std::map<std::string, double>> rows;
        for (const auto* e : entries)
            if (e->gamma == gamma) rows.push_back(e->scores);
        if (rows.empty()) throw_usage("sweep has no scored entry at gamma " + gamma_str(gamma));
        const RunAggregate agg = aggregate_runs(rows);
        result[gamma] = selection_score(cfg, agg.mean);
    }
    return result;
}

const SweepEntry& winner_entry(const SweepManifest& m, const std::string& domain_key,
                               double gamma_hat, const StageConfig& cfg) {
    const std::optional<std::uint64_t> want_seed =
        uses_seeds(cfg.method) ? std::optional<std::uint64_t>(cfg.seeds.front()) : std::nullopt;
    for (const auto& e : m.entries)
        if (e.domain_key == domain_key && e.gamma == gamma_hat && e.seed == want_seed) return e;
    throw_usage("no manifest entry for domain '" + domain_key + "' at gamma " +
                gamma_str(gamma_hat));
}

SelectionDecision decide(const StageConfig& cfg, const SweepManifest& m,
                         const std::string& domain_key) {
    std::vector<const SweepEntry*> entries;
    for (const auto& e : m.entries)
        if (e.domain_key == domain_key) entries.push_back(&e);
    const auto sweep = sweep_scores(cfg, entries);
    SelectionDecision d;
    d.gamma_hat = select_best(sweep);
    for (double gamma : cfg.grid) d.sweep.emplace_back(gamma, sweep.at(gamma));
    const SweepEntry& winner = winner_entry(m, domain_key, d.gamma_hat, cfg);
    d.winner_id = winner.model_id;
    d.winner_path = winner.output;
    d.winner_score = sweep.at(d.gamma_hat);
    return d;
}

}  // namespace

PipelineState run_pipeline(const StageConfig& cfg, const RunOptions& opts) {
    cfg.validate();
    if (opts.state_path.empty()) throw_usage("pipeline needs a state file path");

    if (opts.mode == RunMode::Plan) {
        PipelineState st;
        st.config = cfg;
        st.stages.push_back(plan_stage1(cfg));
        st.save(opts.state_path);
        return st;
    }

    if (opts.mode == RunMode::Execute && cfg.evaluator.command.empty())
        throw_usage("execute mode needs an evaluator command in the config");

    PipelineState st;
    if (std::filesystem::exists(opts.state_path)) {
        st = PipelineState::load(opts.state_path);
        if (st.config.to_json() != cfg.to_json())
            throw_usage("config does not match the one recorded in " + opts.state_path.string());
    } else {
        st.config = cfg;
        st.stages.push_back(plan_stage1(cfg));
        st.save(opts.state_path);
    }
    st.last_error.reset();

    std::optional<ScoreTable> table;
    if (opts.scores_path) table = ScoreTable::load(*opts.scores_path);

    for (;;) {
        SweepManifest& m = st.stages.back();

        // 1. run planned merges
        for (auto& e : m.entries) {
            if (e.status != EntryStatus::Planned) continue;
            std::filesystem::create_directories(e.output.parent_path());
            run_merge(e.recipe, e.output, opts.threads, e.model_id);
            e.status = EntryStatus::Merged;
            st.save(opts.state_path);
        }

        // 2. attach scores
        std::vector<SweepEntry*> pending;
        for (auto& e : m.entries)
            if (e.status == EntryStatus::Merged) pending.push_back(&e);
        if (!pending.empty()) {
            if (opts.mode == RunMode::Execute) {
                Evaluator evaluator{cfg, st, opts.state_path};
                for (auto* e : pending) {
                    e->scores = evaluator.score(*e);
                    e->status = EntryStatus::Scored;
                    st.save(opts.state_path);
                }
            } else {
                std::size_t have = 0;
                for (auto* e : pending)
                    if (table && table->models.count(e->model_id)) ++have;
                if (have == 0) {
                    st.save(opts.state_path);
                    return st;  // awaiting external scores for this stage
                }
                for (auto* e : pending)
                    if (!table->models.count(e->model_id))
                        throw_usage("score table is missing model '" + e->model_id + "'");
                for (auto* e : pending) {
                    e->scores = validated_row(table->models.at(e->model_id), cfg, e->model_id,
                                              ErrorKind::Usage);
                    e->status = EntryStatus::Scored;
                }
                st.save(opts.state_path);
            }
        }

        // 3. record decisions and plan the next stage
        if (m.stage == 1) {
            for (const auto& [domain, _] : cfg.domains)
                if (!st.stage1.count(domain)) st.stage1.emplace(domain, decide(cfg, m, domain));
            if (cfg.domains.size() < 2) {
                st.save(opts.state_path);
                return st;
            }
            if (!st.top2) {
                Top2Decision t;
                std::map<std::string, double> best_scores;
                for (const auto& [domain, _] : cfg.domains) {
                    const auto& d = st.stage1.at(domain);
                    best_scores[domain] = d.winner_score;
                    t.scores.emplace_back(domain, d.winner_score);
                }
                std::tie(t.first, t.second) = select_top2(best_scores, cfg.tie_break_order);
                // best remaining domain, by score then declared order
                std::vector<std::pair<std::string, double>> rest;
                for (const auto& [domain, score] : t.scores)
                    if (domain != t.first && domain != t.second) rest.emplace_back(domain, score);
                if (!rest.empty()) {
                    std::map<std::string, double> rest_map(rest.begin(), rest.end());
                    if (rest.size() == 1)
                        t.remaining = rest.front().first;
                    else
                        t.remaining = select_top2(rest_map, cfg.tie_break_order).first;
                }
                st.top2 = std::move(t);
            }
            st.stages.push_back(plan_stage2(st, cfg));
            st.save(opts.state_path);
            continue;
        }
        if (m.stage == 2) {
            if (!st.stage2) st.stage2 = decide(cfg, m, st.top2->first + st.top2->second);
            SweepManifest next = plan_stage3(st, cfg);
            if (next.entries.empty()) {
                st.save(opts.state_path);
                return st;
            }
            st.stages.push_back(std::move(next));
            st.save(opts.state_path);
            continue;
        }
        // stage 3
        if (!st.stage3)
            st.stage3 = decide(cfg, m, st.top2->first + st.top2->second + st.top2->remaining);
        st.save(opts.state_path);
        return st;
    }
}

}  // namespace mergeforge
