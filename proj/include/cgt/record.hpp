#pragma once

// Machine-readable run records: one JSON document per run plus a CSV fairness
// table with pinned formatting (UTF-8, LF, %.4f floats).

#include <cgt/metrics.hpp>

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

namespace cgt {

struct MetricsRecord {
    std::string run_id;
    std::string task;
    std::uint64_t seed = 0;
    nlohmann::json config;
    nlohmann::json metrics;
    nlohmann::json curves;
    double wall_seconds = 0.0;

    nlohmann::json to_json() const {
        return nlohmann::json{{"run_id", run_id},   {"task", task},     {"seed", seed},
                              {"config", config},   {"metrics", metrics}, {"curves", curves},
                              {"wall_seconds", wall_seconds}};
    }

    static MetricsRecord from_json(const nlohmann::json& j) {
        MetricsRecord r;
        r.run_id = j.at("run_id").get<std::string>();
        r.task = j.at("task").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.config = j.at("config");
        r.metrics = j.at("metrics");
        r.curves = j.at("curves");
        r.wall_seconds = j.at("wall_seconds").get<double>();
        return r;
    }
};

inline nlohmann::json fairness_to_json(const FairnessReport& rep) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : rep.rows)
        rows.push_back({{"threshold", r.threshold},
                        {"count", r.count},
                        {"error", r.error_pct},
                        {"bias", r.bias_pct}});
    return nlohmann::json{{"rows", rows},
                          {"overall_error", rep.overall_error_pct},
                          {"omitted_thresholds", rep.omitted_thresholds}};
}

inline std::string record_path(const std::string& out_dir, const std::string& run_id) {
    return out_dir + "/run_" + run_id + ".json";
}

inline std::string fairness_path(const std::string& out_dir, const std::string& run_id) {
    return out_dir + "/fairness_" + run_id + ".csv";
}

inline void write_record(const MetricsRecord& rec, const std::string& out_dir) {
    const std::string path = record_path(out_dir, rec.run_id);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write record " + path);
    f << rec.to_json().dump(2) << "\n";
}

inline MetricsRecord read_record(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read record " + path);
    nlohmann::json j;
    f >> j;
    return MetricsRecord::from_json(j);
}

inline void write_fairness_csv(const FairnessReport& rep, const std::string& out_dir,
                               const std::string& run_id) {
    const std::string path = fairness_path(out_dir, run_id);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write fairness table " + path);
    f << "threshold,error,bias\n";
    char buf[96];
    for (const auto& r : rep.rows) {
        std::snprintf(buf, sizeof(buf), "%d,%.4f,%.4f\n", r.threshold, r.error_pct, r.bias_pct);
        f << buf;
    }
}

}  // namespace cgt
