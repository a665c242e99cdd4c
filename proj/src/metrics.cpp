#include "mergeforge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "mergeforge/errors.hpp"

namespace mergeforge {

namespace {

[[noreturn]] void missing_cell(const std::string& model, const std::string& task) {
    throw_usage("score table has no cell for model '" + model + "', task '" + task + "'");
}

std::string two_decimals(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

// RFC 4180: quote fields containing comma, quote, or newline; double quotes.
std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

}  // namespace

double ScoreRow::at(const std::string& task) const {
    auto it = cells.find(task);
    if (it == cells.end()) missing_cell(model_id, task);
    return it->second;
}

ScoreRow ScoreTable::row(const std::string& model_id) const {
    auto it = models.find(model_id);
    if (it == models.end()) throw_usage("score table has no model '" + model_id + "'");
    return {model_id, it->second};
}

bool ScoreTable::has(const std::string& model_id, const std::string& task) const {
    auto it = models.find(model_id);
    return it != models.end() && it->second.count(task) > 0;
}

ScoreTable ScoreTable::from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("models"))
        throw_usage("score table JSON must be an object with a \"models\" field");
    ScoreTable t;
    if (j.contains("tasks"))
        for (const auto& task : j.at("tasks")) t.tasks.push_back(task.get<std::string>());
    for (const auto& [model, row] : j.at("models").items()) {
        if (!row.is_object())
            throw_usage("score table: row for model '" + model + "' is not an object");
        for (const auto& [task, score] : row.items()) {
            if (!score.is_number())
                throw_usage("score table: cell (" + model + ", " + task + ") is not a number");
            const double v = score.get<double>();
            if (!std::isfinite(v))
                throw_usage("score table: cell (" + model + ", " + task + ") is not finite");
            t.models[model][task] = v;
        }
    }
    return t;
}

ScoreTable ScoreTable::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw_io("cannot open score table: " + path.string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw_usage(path.string() + ": score table is not valid JSON");
    return from_json(j);
}

nlohmann::ordered_json ScoreTable::to_json() const {
    nlohmann::ordered_json j;
    j["tasks"] = tasks;
    nlohmann::ordered_json models_json = nlohmann::ordered_json::object();
    for (const auto& [model, row] : models) {
        nlohmann::ordered_json row_json = nlohmann::ordered_json::object();
        for (const auto& [task, score] : row) row_json[task] = score;
        models_json[model] = std::move(row_json);
    }
    j["models"] = std::move(models_json);
    return j;
}

double gain(const ScoreRow& merged, std::span<const ScoreRow> constituents,
            const std::string& task) {
    if (constituents.empty()) throw_usage("gain needs at least one constituent");
    const double merged_score = merged.at(task);
    double sum = 0.0;
    for (const auto& c : constituents) sum += c.at(task);
    return merged_score - sum / static_cast<double>(constituents.size());
}

double outperform_gap(const ScoreRow& merged, std::span<const ScoreRow> constituents,
                      const std::string& task) {
    if (constituents.empty()) throw_usage("outperform gap needs at least one constituent");
    const double merged_score = merged.at(task);
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& c : constituents) best = std::max(best, c.at(task));
    return merged_score - best;
}

MetricsReport build_report(const ScoreTable& table, const std::string& merged_id,
                           std::span<const std::string> constituent_ids) {
    if (table.tasks.empty()) throw_usage("score table has an empty task list");
    if (constituent_ids.empty()) throw_usage("report needs at least one constituent");

    const ScoreRow merged = table.row(merged_id);
    std::vector<ScoreRow> constituents;
    constituents.reserve(constituent_ids.size());
    for (const auto& id : constituent_ids) constituents.push_back(table.row(id));

    MetricsReport r;
    r.merged_id = merged_id;
    r.constituent_ids.assign(constituent_ids.begin(), constituent_ids.end());
    r.task_order = table.tasks;

    double merged_total = 0.0, oracle_total = 0.0;
    for (const auto& task : table.tasks) {
        r.gains.push_back(gain(merged, constituents, task));
        r.ogs.push_back(outperform_gap(merged, constituents, task));
        merged_total += merged.at(task);
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& c : constituents) best = std::max(best, c.at(task));
        oracle_total += best;
    }
    const auto n = static_cast<double>(table.tasks.size());
    for (double g : r.gains) r.macro_gain += g;
    for (double o : r.ogs) r.macro_og += o;
    r.macro_gain /= n;
    r.macro_og /= n;
    if (oracle_total == 0.0)
        throw_usage("oracle score is zero; oracle retention undefined for merged '" + merged_id +
                    "'");
    r.oracle_retention = merged_total / oracle_total;
    r.overall_merged = merged_total / n;
    for (const auto& c : constituents) {
        double total = 0.0;
        for (const auto& task : table.tasks) total += c.at(task);
        r.overall_constituents.push_back(total / n);
    }
    return r;
}

nlohmann::ordered_json MetricsReport::to_json() const {
    nlohmann::ordered_json j;
    j["merged_id"] = merged_id;
    j["constituent_ids"] = constituent_ids;
    nlohmann::ordered_json per_task = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < task_order.size(); ++i) {
        per_task[task_order[i]] = {{"gain", gains[i]}, {"og", ogs[i]}};
    }
    j["per_task"] = std::move(per_task);
    j["macro_gain"] = macro_gain;
    j["macro_og"] = macro_og;
    j["oracle_retention"] = oracle_retention;
    j["overall_merged"] = overall_merged;
    j["overall_constituents"] = overall_constituents;
    return j;
}

RunAggregate aggregate_runs(std::span<const std::map<std::string, double>> rows) {
    if (rows.empty()) throw_usage("aggregate needs at least one run");
    const auto& first = rows.front();
    for (const auto& row : rows) {
        if (row.size() != first.size())
            throw_usage("aggregate: runs cover different task sets");
        for (const auto& [task, _] : first)
            if (!row.count(task))
                throw_usage("aggregate: runs cover different task sets (missing '" + task + "')");
    }
    RunAggregate agg;
    const auto k = static_cast<double>(rows.size());
    for (const auto& [task, _] : first) {
        agg.tasks.push_back(task);
        double mean = 0.0;
        for (const auto& row : rows) mean += row.at(task);
        mean /= k;
        double var = 0.0;
        for (const auto& row : rows) var += (row.at(task) - mean) * (row.at(task) - mean);
        var /= k;  // population variance
        agg.mean[task] = mean;
        agg.variance[task] = var;
    }
    return agg;
}

std::string emit_matrix(std::span<const MetricsReport> reports, MatrixMetric which,
                        MatrixFormat format) {
    if (reports.empty()) throw_usage("matrix emission needs at least one report");
    const auto& task_order = reports.front().task_order;
    for (const auto& r : reports)
        if (r.task_order != task_order)
            throw_usage("matrix emission: reports have different task orders");

    auto cell = [&](const MetricsReport& r, std::size_t i) {
        return two_decimals(which == MatrixMetric::Gain ? r.gains[i] : r.ogs[i]);
    };

    std::string out;
    if (format == MatrixFormat::Csv) {
        out = "model";
        for (const auto& t : task_order) out += "," + csv_field(t);
        for (const auto& r : reports) {
            out += "\n" + csv_field(r.merged_id);
            for (std::size_t i = 0; i < task_order.size(); ++i) out += "," + cell(r, i);
        }
    } else {
        out = "| model |";
        for (const auto& t : task_order) out += " " + t + " |";
        out += "\n| --- |";
        for (std::size_t i = 0; i < task_order.size(); ++i) out += " ---: |";
        for (const auto& r : reports) {
            out += "\n| " + r.merged_id + " |";
            for (std::size_t i = 0; i < task_order.size(); ++i) out += " " + cell(r, i) + " |";
        }
    }
    return out;
}

}  // namespace mergeforge
