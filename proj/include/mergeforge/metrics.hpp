#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace mergeforge {

// One model's scores, in percentage points, keyed by task id.
struct ScoreRow {
    std::string model_id;
    std::map<std::string, double> cells;

    double at(const std::string& task) const;  // throws naming model and task
};

// model_id x task_id score matrix with an explicit task order. Partial tables
// are legal; the metric operations error on missing cells.
struct ScoreTable {
    std::vector<std::string> tasks;
    std::map<std::string, std::map<std::string, double>> models;

    ScoreRow row(const std::string& model_id) const;
    bool has(const std::string& model_id, const std::string& task) const;

    static ScoreTable from_json(const nlohmann::json& j);
    static ScoreTable load(const std::filesystem::path& path);
    nlohmann::ordered_json to_json() const;
};

// merged score minus the constituent mean on one task.
double gain(const ScoreRow& merged, std::span<const ScoreRow> constituents,
            const std::string& task);

// merged score minus the best constituent on one task.
double outperform_gap(const ScoreRow& merged, std::span<const ScoreRow> constituents,
                      const std::string& task);

struct MetricsReport {
    std::string merged_id;
    std::vector<std::string> constituent_ids;
    std::vector<std::string> task_order;
    std::vector<double> gains;  // aligned with task_order
    std::vector<double> ogs;
    double macro_gain = 0.0;
    double macro_og = 0.0;
    double oracle_retention = 0.0;
    double overall_merged = 0.0;
    std::vector<double> overall_constituents;

    nlohmann::ordered_json to_json() const;
};

MetricsReport build_report(const ScoreTable& table, const std::string& merged_id,
                           std::span<const std::string> constituent_ids);

// Per-task mean and population variance over seeded runs of one model.
struct RunAggregate {
    std::vector<std::string> tasks;
    std::map<std::string, double> mean;
    std::map<std::string, double> variance;
};

RunAggregate aggregate_runs(std::span<const std::map<std::string, double>> rows);

enum class MatrixMetric { Gain, Og };
enum class MatrixFormat { Csv, Markdown };

// Rows = models, columns = task_order, cells rendered with two decimals.
std::string emit_matrix(std::span<const MetricsReport> reports, MatrixMetric which,
                        MatrixFormat format);

}  // namespace mergeforge
