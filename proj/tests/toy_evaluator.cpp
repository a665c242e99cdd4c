// Scripted evaluator for pipeline tests: scores are a deterministic function
// of the checkpoint contents, so plan+resume and run produce identical
// decisions. Usage: toy-evaluator <checkpoint> <out.json> <model_id> [tasks]
// Writes {"models": {"<model_id>": {task: score, ...}}} to <out.json>.

#include <cmath>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mergeforge/checkpoint_io.hpp"

int main(int argc, char** argv) {
    if (argc < 4) {
        std::cerr << "usage: toy-evaluator <checkpoint> <out.json> <model_id> [tasks-csv]\n";
        return 2;
    }
    const std::string checkpoint = argv[1];
    const std::string out_path = argv[2];
    const std::string model_id = argv[3];
    std::vector<std::string> tasks;
    if (argc > 4 && argv[4][0] != '\0') {
        std::string current;
        for (const char* c = argv[4]; *c; ++c) {
            if (*c == ',') {
                tasks.push_back(current);
                current.clear();
            } else {
                current += *c;
            }
        }
        tasks.push_back(current);
    } else {
        tasks = {"alpha", "beta", "delta"};
    }

    try {
        mergeforge::CheckpointReader reader(checkpoint);
        double sum = 0.0;
        std::int64_t count = 0;
        for (const auto& meta : reader.metas()) {
            const Eigen::ArrayXf values = reader.read(meta).to_f32();
            sum += values.cast<double>().sum();
            count += values.size();
        }
        const double mean = count ? sum / static_cast<double>(count) : 0.0;

        nlohmann::ordered_json row = nlohmann::ordered_json::object();
        for (std::size_t i = 0; i < tasks.size(); ++i)
            row[tasks[i]] = 50.0 + 45.0 * std::sin(mean * 17.0 + 1.7 * static_cast<double>(i));

        nlohmann::ordered_json j;
        j["models"] = {{model_id, row}};
        std::ofstream out(out_path, std::ios::trunc);
        out << j.dump(2) << '\n';
        return out ? 0 : 1;
    } catch (const std::exception& e) {
        std::cerr << "toy-evaluator: " << e.what() << '\n';
        return 1;
    }
}
