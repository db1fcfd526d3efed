#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace fedbench::analyzer {

struct SystemPerf {
    double total_training_time_s = 0.0;
    double client_computation_time_s = 0.0;
    double server_computation_time_s = 0.0;
    double other_cost_s = 0.0;  // total - client - server, by construction
    double communication_rounds = 0.0;
    double communication_bytes = 0.0;
    double peak_memory_bytes = 0.0;
    // Extra field: per-round max-client computation, summed over rounds.
    double client_critical_path_s = 0.0;
};

struct ModelPerf {
    std::string metric;
    double mean = 0.0;
    double stddev = 0.0;
    std::vector<double> per_repeat;
};

struct Report {
    std::string run_id;
    std::string scenario;
    std::string config_hash;
    ModelPerf model_perf;
    SystemPerf system;                      // mean over repeats
    std::vector<SystemPerf> per_repeat;
    std::map<std::string, double> per_process_peak_memory_bytes;
    std::vector<std::string> warnings;
    std::vector<std::string> notes;
};

// Pure function of the run directory: merges the distributed logs (one
// repeat per repeat_* subdirectory, or the directory itself) into the
// model/system performance report.
Report analyze(const std::filesystem::path& run_dir);

std::string report_to_json(const Report& report);
Report report_from_json(const std::string& text);
std::string render_report(const Report& report);

struct ComparisonRow {
    std::string label;  // run ids, joined
    ModelPerf model_perf;
    SystemPerf system;
    std::vector<bool> best;  // per column
};

struct ComparisonTable {
    std::string scenario;
    std::vector<std::string> columns;
    std::vector<ComparisonRow> rows;
    bool no_dominator = false;
    std::string note;
};

// Side-by-side comparison; reports sharing a config hash are pooled into
// one row with mean +- std model performance. All reports must describe
// the same scenario.
ComparisonTable compare(std::span<const Report> reports);

std::string comparison_to_json(const ComparisonTable& table);
std::string render_comparison(const ComparisonTable& table);

} // namespace fedbench::analyzer
