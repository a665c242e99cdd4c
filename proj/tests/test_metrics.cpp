#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <random>
#include <sstream>

#include "doctest.h"
#include "mergeforge/errors.hpp"
#include "mergeforge/metrics.hpp"
#include "oracles.hpp"

using namespace mergeforge;

namespace {

// merged [50,30], A [40,20], B [20,40] -- the worked example used throughout.
ScoreTable worked_example() {
    ScoreTable t;
    t.tasks = {"t1", "t2"};
    t.models["merged"] = {{"t1", 50.0}, {"t2", 30.0}};
    t.models["A"] = {{"t1", 40.0}, {"t2", 20.0}};
    t.models["B"] = {{"t1", 20.0}, {"t2", 40.0}};
    return t;
}

ScoreTable random_table(std::mt19937_64& rng, std::size_t n_tasks, std::size_t k) {
    std::uniform_real_distribution<double> score(0.0, 100.0);
    ScoreTable t;
    for (std::size_t i = 0; i < n_tasks; ++i) t.tasks.push_back("task" + std::to_string(i));
    for (std::size_t j = 0; j <= k; ++j) {
        const std::string id = j == 0 ? "merged" : "c" + std::to_string(j);
        for (const auto& task : t.tasks) t.models[id][task] = score(rng);
    }
    return t;
}

std::vector<std::string> constituent_ids(std::size_t k) {
    std::vector<std::string> ids;
    for (std::size_t j = 1; j <= k; ++j) ids.push_back("c" + std::to_string(j));
    return ids;
}

}  // namespace

TEST_CASE("gain and outperform gap on single tasks") {
    const ScoreTable t = worked_example();
    const ScoreRow merged = t.row("merged");
    const std::vector<ScoreRow> cs{t.row("A"), t.row("B")};

    CHECK(gain(merged, cs, "t1") == 20.0);          // 50 - (40+20)/2
    CHECK(outperform_gap(merged, cs, "t1") == 10.0);  // 50 - 40
    CHECK(outperform_gap(merged, cs, "t2") == -10.0); // 30 - 40

    SUBCASE("merged equal to a single constituent scores zero on both") {
        const std::vector<ScoreRow> solo{t.row("A")};
        CHECK(gain(t.row("A"), solo, "t1") == 0.0);
        CHECK(outperform_gap(t.row("A"), solo, "t1") == 0.0);
    }
    SUBCASE("with one constituent gain equals og on every task") {
        const std::vector<ScoreRow> solo{t.row("B")};
        for (const auto& task : t.tasks)
            CHECK(gain(merged, solo, task) == outperform_gap(merged, solo, task));
    }
    SUBCASE("merged equal to the best constituent gives zero og") {
        ScoreTable t2 = t;
        t2.models["merged"]["t1"] = 40.0;
        CHECK(outperform_gap(t2.row("merged"), cs, "t1") == 0.0);
    }
    SUBCASE("missing cell names the model and task") {
        try {
            gain(merged, cs, "nope");
            FAIL("expected missing-cell error");
        } catch (const Error& e) {
            const std::string msg = e.what();
            CHECK(msg.find("merged") != std::string::npos);
            CHECK(msg.find("nope") != std::string::npos);
        }
    }
}

TEST_CASE("build_report worked example") {
    const ScoreTable t = worked_example();
    const std::vector<std::string> ids{"A", "B"};
    const MetricsReport r = build_report(t, "merged", ids);
    CHECK(r.gains == std::vector<double>{20.0, 0.0});
    CHECK(r.macro_gain == 10.0);
    CHECK(r.ogs == std::vector<double>{10.0, -10.0});
    CHECK(r.macro_og == 0.0);
    CHECK(r.oracle_retention == 1.0);  // (50+30)/(40+40)
    CHECK(r.overall_merged == 40.0);
    REQUIRE(r.overall_constituents.size() == 2);
    CHECK(r.overall_constituents[0] == 30.0);
    CHECK(r.overall_constituents[1] == 30.0);
}

TEST_CASE("build_report degenerate cases") {
    SUBCASE("merged identical to its only constituent") {
        ScoreTable t;
        t.tasks = {"a", "b"};
        t.models["m"] = {{"a", 10.0}, {"b", 20.0}};
        t.models["c"] = {{"a", 10.0}, {"b", 20.0}};
        const std::vector<std::string> ids{"c"};
        const MetricsReport r = build_report(t, "m", ids);
        CHECK(r.macro_gain == 0.0);
        CHECK(r.macro_og == 0.0);
        CHECK(r.oracle_retention == 1.0);
    }
    SUBCASE("merged strictly above both constituents") {
        ScoreTable t = worked_example();
        t.models["merged"] = {{"t1", 60.0}, {"t2", 50.0}};
        const std::vector<std::string> ids{"A", "B"};
        const MetricsReport r = build_report(t, "merged", ids);
        for (double og : r.ogs) CHECK(og > 0.0);
        CHECK(r.oracle_retention > 1.0);
    }
    SUBCASE("empty task list is an error") {
        ScoreTable t = worked_example();
        t.tasks.clear();
        const std::vector<std::string> ids{"A"};
        CHECK_THROWS_AS(build_report(t, "merged", ids), Error);
    }
    SUBCASE("zero oracle denominator is a distinct error") {
        ScoreTable t;
        t.tasks = {"a"};
        t.models["m"] = {{"a", 5.0}};
        t.models["c"] = {{"a", 0.0}};
        const std::vector<std::string> ids{"c"};
        try {
            build_report(t, "m", ids);
            FAIL("expected zero-oracle error");
        } catch (const Error& e) {
            CHECK(std::string(e.what()).find("oracle") != std::string::npos);
        }
    }
    SUBCASE("missing cell is an error, not an imputed zero") {
        ScoreTable t = worked_example();
        t.models["A"].erase("t2");
        const std::vector<std::string> ids{"A", "B"};
        CHECK_THROWS_AS(build_report(t, "merged", ids), Error);
    }
}

TEST_CASE("report properties on random tables") {
    std::mt19937_64 rng(113);
    for (int iter = 0; iter < 300; ++iter) {
        const std::size_t n_tasks = 1 + rng() % 6;
        const std::size_t k = 1 + rng() % 4;
        const ScoreTable t = random_table(rng, n_tasks, k);
        const auto ids = constituent_ids(k);
        const MetricsReport r = build_report(t, "merged", ids);

        // og <= gain per task (max >= mean)
        for (std::size_t i = 0; i < n_tasks; ++i) CHECK(r.ogs[i] <= r.gains[i] + 1e-12);

        // brute-force recomputation agrees to 1e-12 relative
        std::vector<double> merged;
        std::vector<std::vector<double>> cs(k);
        for (const auto& task : t.tasks) {
            merged.push_back(t.models.at("merged").at(task));
            for (std::size_t j = 0; j < k; ++j) cs[j].push_back(t.models.at(ids[j]).at(task));
        }
        const oracle::ReportNumbers expected = oracle::recompute_report(merged, cs);
        CHECK(r.macro_gain == doctest::Approx(expected.macro_gain).epsilon(1e-12));
        CHECK(r.macro_og == doctest::Approx(expected.macro_og).epsilon(1e-12));
        CHECK(r.oracle_retention == doctest::Approx(expected.oracle_retention).epsilon(1e-12));
        CHECK(r.overall_merged == doctest::Approx(expected.overall_merged).epsilon(1e-12));

        // permuting task order leaves all macro metrics unchanged
        ScoreTable shuffled = t;
        std::shuffle(shuffled.tasks.begin(), shuffled.tasks.end(), rng);
        const MetricsReport r2 = build_report(shuffled, "merged", ids);
        CHECK(r2.macro_gain == doctest::Approx(r.macro_gain).epsilon(1e-12));
        CHECK(r2.macro_og == doctest::Approx(r.macro_og).epsilon(1e-12));
        CHECK(r2.oracle_retention == doctest::Approx(r.oracle_retention).epsilon(1e-12));
    }
}

TEST_CASE("adding a uniformly worse constituent never raises og") {
    std::mt19937_64 rng(127);
    for (int iter = 0; iter < 50; ++iter) {
        ScoreTable t = random_table(rng, 4, 2);
        // c3 strictly below the existing constituents everywhere
        for (const auto& task : t.tasks) {
            const double floor_score =
                std::min(t.models.at("c1").at(task), t.models.at("c2").at(task));
            t.models["c3"][task] = floor_score - 1.0;
        }
        const std::vector<std::string> two{"c1", "c2"};
        const std::vector<std::string> three{"c1", "c2", "c3"};
        const MetricsReport r2 = build_report(t, "merged", two);
        const MetricsReport r3 = build_report(t, "merged", three);
        for (std::size_t i = 0; i < t.tasks.size(); ++i) CHECK(r3.ogs[i] == r2.ogs[i]);
        CHECK(r3.oracle_retention == r2.oracle_retention);
    }
}

TEST_CASE("aggregate_runs") {
    SUBCASE("identical rows have zero variance") {
        const std::vector<std::map<std::string, double>> rows{{{"t", 10.0}}, {{"t", 10.0}}, {{"t", 10.0}}};
        const RunAggregate a = aggregate_runs(rows);
        CHECK(a.mean.at("t") == 10.0);
        CHECK(a.variance.at("t") == 0.0);
    }
    SUBCASE("two-run population variance") {
        const std::vector<std::map<std::string, double>> rows{{{"t", 10.0}}, {{"t", 20.0}}};
        const RunAggregate a = aggregate_runs(rows);
        CHECK(a.mean.at("t") == 15.0);
        CHECK(a.variance.at("t") == 25.0);
    }
    SUBCASE("single row has zero variance") {
        const std::vector<std::map<std::string, double>> rows{{{"t", 42.0}}};
        const RunAggregate a = aggregate_runs(rows);
        CHECK(a.mean.at("t") == 42.0);
        CHECK(a.variance.at("t") == 0.0);
    }
    SUBCASE("mismatched task sets are an error") {
        const std::vector<std::map<std::string, double>> rows{{{"t", 1.0}}, {{"u", 2.0}}};
        CHECK_THROWS_AS(aggregate_runs(rows), Error);
    }
}

TEST_CASE("matrix emission") {
    SUBCASE("single-cell csv matches the exact expected bytes") {
        ScoreTable t;
        t.tasks = {"task"};
        t.models["M1"] = {{"task", 50.0}};
        t.models["c"] = {{"task", 30.0}};
        const std::vector<std::string> ids{"c"};
        const MetricsReport r = build_report(t, "M1", ids);
        const MetricsReport reports[] = {r};
        CHECK(emit_matrix(reports, MatrixMetric::Gain, MatrixFormat::Csv) ==
              "model,task\nM1,20.00");
    }
    SUBCASE("empty report list is an error") {
        CHECK_THROWS_AS(emit_matrix({}, MatrixMetric::Gain, MatrixFormat::Csv), Error);
    }
    SUBCASE("markdown parses back to the same cells") {
        std::mt19937_64 rng(131);
        const ScoreTable t = random_table(rng, 3, 2);
        const auto ids = constituent_ids(2);
        const MetricsReport r = build_report(t, "merged", ids);
        const MetricsReport reports[] = {r};
        const std::string md = emit_matrix(reports, MatrixMetric::Og, MatrixFormat::Markdown);

        std::istringstream lines(md);
        std::string header, rule, row;
        std::getline(lines, header);
        std::getline(lines, rule);
        std::getline(lines, row);
        // split the data row on '|'
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream row_stream(row);
        while (std::getline(row_stream, cell, '|')) {
            // trim spaces
            const auto begin = cell.find_first_not_of(' ');
            if (begin == std::string::npos) continue;
            const auto end = cell.find_last_not_of(' ');
            cells.push_back(cell.substr(begin, end - begin + 1));
        }
        REQUIRE(cells.size() == 1 + t.tasks.size());
        CHECK(cells[0] == "merged");
        for (std::size_t i = 0; i < t.tasks.size(); ++i) {
            char expected[32];
            std::snprintf(expected, sizeof(expected), "%.2f", r.ogs[i]);
            CHECK(cells[i + 1] == expected);
        }
    }
    SUBCASE("csv quoting follows RFC 4180") {
        ScoreTable t;
        t.tasks = {R"(weird,task "x")"};
        t.models["m,1"] = {{R"(weird,task "x")", 4.0}};
        t.models["c"] = {{R"(weird,task "x")", 2.0}};
        const std::vector<std::string> ids{"c"};
        const MetricsReport r = build_report(t, "m,1", ids);
        const MetricsReport reports[] = {r};
        const std::string csv = emit_matrix(reports, MatrixMetric::Gain, MatrixFormat::Csv);
        CHECK(csv == "model,\"weird,task \"\"x\"\"\"\n\"m,1\",2.00");
    }
    SUBCASE("task-order mismatch across reports is an error") {
        std::mt19937_64 rng(137);
        const ScoreTable t = random_table(rng, 2, 1);
        ScoreTable t2 = t;
        std::swap(t2.tasks[0], t2.tasks[1]);
        const auto ids = constituent_ids(1);
        const MetricsReport reports[] = {build_report(t, "merged", ids),
                                         build_report(t2, "merged", ids)};
        CHECK_THROWS_AS(emit_matrix(reports, MatrixMetric::Gain, MatrixFormat::Csv), Error);
    }
}

TEST_CASE("score table json round trip and validation") {
    const ScoreTable t = worked_example();
    const nlohmann::ordered_json j = t.to_json();
    const ScoreTable back = ScoreTable::from_json(nlohmann::json::parse(j.dump()));
    CHECK(back.tasks == t.tasks);
    CHECK(back.models == t.models);

    SUBCASE("non-finite scores are rejected") {
        nlohmann::json bad = nlohmann::json::parse(R"({"models":{"m":{"t":1.0}}})");
        bad["models"]["m"]["t"] = std::numeric_limits<double>::infinity();
        // json serializes inf as null, so inject it structurally
        CHECK_THROWS_AS(ScoreTable::from_json(bad), Error);
    }
    SUBCASE("non-object rows are rejected") {
        const auto bad = nlohmann::json::parse(R"({"models":{"m":[1,2]}})");
        CHECK_THROWS_AS(ScoreTable::from_json(bad), Error);
    }
}
