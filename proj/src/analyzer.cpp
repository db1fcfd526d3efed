#include "fedbench/analyzer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fedbench/errors.hpp"
#include "fedbench/eventlog.hpp"
#include "fedbench/util.hpp"

namespace fedbench::analyzer {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct ParsedLog {
    fs::path path;
    eventlog::AgentType agent = eventlog::AgentType::client;
    std::vector<eventlog::Record> records;
};

ParsedLog parse_log(const fs::path& path, std::vector<std::string>& warnings) {
    ParsedLog log;
    log.path = path;
    try {
        log.records = eventlog::parse_file(path);
    } catch (const MalformedLine& e) {
        throw CorruptLog(path.string() + ": " + e.what());
    }
    bool typed = false;
    for (const auto& rec : log.records) {
        if (const auto* s = std::get_if<eventlog::SentinelRecord>(&rec)) {
            if (s->agent_type) {
                log.agent = *s->agent_type;
                typed = true;
            }
            break;
        }
    }
    if (!typed)
        warnings.push_back(path.string() + ": missing agent_type sentinel");
    return log;
}

// Duration sum per event path, pairing starts with the next matching end.
struct Durations {
    std::map<std::string, double> total;           // per path
    std::map<std::string, double> single;          // first pair per path
    std::map<std::string, std::vector<double>> all;  // every pair
};

Durations pair_durations(const ParsedLog& log,
                         std::vector<std::string>& warnings) {
    Durations out;
    std::map<std::string, std::vector<double>> open;
    for (const auto& rec : log.records) {
        const auto* ev = std::get_if<eventlog::EventRecord>(&rec);
        if (!ev) continue;
        if (ev->action == eventlog::Action::start) {
            open[ev->event].push_back(ev->timestamp);
        } else {
            auto& stack = open[ev->event];
            if (stack.empty()) {
                warnings.push_back(log.path.string() + ": end without start for '" +
                                   ev->event + "'");
                continue;
            }
            double duration = ev->timestamp - stack.back();
            stack.pop_back();
            out.total[ev->event] += duration;
            out.all[ev->event].push_back(duration);
            if (!out.single.count(ev->event)) out.single[ev->event] = duration;
        }
    }
    for (const auto& [path, stack] : open) {
        if (!stack.empty())
            warnings.push_back(log.path.string() + ": unpaired start for '" +
                               path + "' contributes zero");
    }
    return out;
}

bool is_computation(const std::string& event) {
    return event.rfind("computation.", 0) == 0;
}
bool is_communication(const std::string& event) {
    return event.rfind("communication.", 0) == 0;
}

// round index = last dotted component
int round_of(const std::string& event) {
    auto dot = event.rfind('.');
    if (dot == std::string::npos) return -1;
    try {
        return std::stoi(event.substr(dot + 1));
    } catch (...) {
        return -1;
    }
}

struct RepeatAnalysis {
    SystemPerf system;
    std::vector<std::pair<std::string, double>> evaluations;  // metric, value
};

RepeatAnalysis analyze_repeat(const fs::path& dir,
                              std::vector<std::string>& warnings) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".log")
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw CorruptLog("no .log files in " + dir.string());

    std::vector<ParsedLog> logs;
    for (const auto& f : files) logs.push_back(parse_log(f, warnings));

    const ParsedLog* aggregator = nullptr;
    for (const auto& log : logs)
        if (log.agent == eventlog::AgentType::aggregator) {
            if (aggregator)
                warnings.push_back("multiple aggregator logs in " + dir.string());
            else
                aggregator = &log;
        }
    if (!aggregator)
        throw MissingAggregatorLog("no aggregator log in " + dir.string());

    RepeatAnalysis out;
    Durations agg = pair_durations(*aggregator, warnings);
    auto training = agg.single.find("training");
    if (training == agg.single.end()) {
        warnings.push_back(aggregator->path.string() +
                           ": no training start/end pair");
    } else {
        out.system.total_training_time_s = training->second;
    }

    for (const auto& [event, total] : agg.total)
        if (is_computation(event)) out.system.server_computation_time_s += total;

    std::map<int, double> round_max_client;
    for (const auto& log : logs) {
        Durations d =
            log.agent == eventlog::AgentType::aggregator ? agg
                                                         : pair_durations(
                                                               log, warnings);
        if (log.agent == eventlog::AgentType::client) {
            std::map<int, double> per_round;
            for (const auto& [event, total] : d.total) {
                if (!is_computation(event)) continue;
                out.system.client_computation_time_s += total;
                per_round[round_of(event)] += total;
            }
            for (const auto& [round, total] : per_round) {
                auto& slot = round_max_client[round];
                slot = std::max(slot, total);
            }
        }
        // communication counting covers every log, both directions
        for (const auto& rec : log.records) {
            const auto* ev = std::get_if<eventlog::EventRecord>(&rec);
            if (!ev || ev->action != eventlog::Action::end ||
                !is_communication(ev->event))
                continue;
            out.system.communication_rounds += 1.0;
            for (const auto& [key, value] : ev->metrics)
                if (key == "byte")
                    out.system.communication_bytes += value.as_double();
        }
    }
    for (const auto& [round, total] : round_max_client)
        out.system.client_critical_path_s += total;

    out.system.other_cost_s = out.system.total_training_time_s -
                              out.system.client_computation_time_s -
                              out.system.server_computation_time_s;
    if (out.system.other_cost_s < 0.0)
        warnings.push_back(dir.string() +
                           ": negative other cost (parallel computation "
                           "exceeds wall time)");

    for (const auto& rec : aggregator->records) {
        const auto* ev = std::get_if<eventlog::EventRecord>(&rec);
        if (!ev || ev->event != "model_evaluation" ||
            ev->action != eventlog::Action::end)
            continue;
        for (const auto& [key, value] : ev->metrics) {
            if (key == "flop" || key == "loss" || key == "byte") continue;
            out.evaluations.emplace_back(key, value.as_double());
            break;
        }
    }
    return out;
}

void analyze_memory(const fs::path& file, Report& report) {
    if (!fs::exists(file)) return;
    std::ifstream in(file);
    std::string line;
    double peak = 0.0;
    std::map<std::string, double> per_process;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception&) {
            report.warnings.push_back("memory.jsonl: malformed sample skipped");
            continue;
        }
        double total = 0.0;
        const json rss = j.value("rss", json::object());
        for (const auto& [pid, bytes] : rss.items()) {
            double b = bytes.get<double>();
            total += b;
            auto& slot = per_process[pid];
            slot = std::max(slot, b);
        }
        peak = std::max(peak, total);
    }
    report.system.peak_memory_bytes = peak;
    for (auto& r : report.per_repeat) r.peak_memory_bytes = peak;
    report.per_process_peak_memory_bytes = std::move(per_process);
}

double mean_of(std::span<const double> values) {
    if (values.empty()) return 0.0;
    return std::accumulate(values.begin(), values.end(), 0.0) /
           static_cast<double>(values.size());
}

double stddev_of(std::span<const double> values) {
    if (values.size() < 2) return 0.0;
    double m = mean_of(values);
    double acc = 0.0;
    for (double v : values) acc += (v - m) * (v - m);
    return std::sqrt(acc / static_cast<double>(values.size() - 1));
}

} // namespace

Report analyze(const fs::path& run_dir) {
    if (!fs::exists(run_dir))
        throw CorruptLog("no such run directory: " + run_dir.string());

    Report report;
    report.run_id = run_dir.filename().string();

    fs::path config_file = run_dir / "config.json";
    if (fs::exists(config_file)) {
        std::string text = read_text_file(config_file);
        report.config_hash = sha256_hex(text);
        try {
            report.scenario = json::parse(text).value("scenario", "");
        } catch (const json::exception&) {
        }
    }
    fs::path meta_file = run_dir / "collection_meta.json";
    if (fs::exists(meta_file)) {
        try {
            auto meta = json::parse(read_text_file(meta_file));
            report.run_id = meta.value("run_id", report.run_id);
            for (const auto& m :
                 meta.value("missing_logs", json::array()))
                report.warnings.push_back("missing log: " +
                                          m.get<std::string>());
        } catch (const json::exception&) {
        }
    }

    std::vector<fs::path> repeat_dirs;
    for (const auto& entry : fs::directory_iterator(run_dir)) {
        if (entry.is_directory() &&
            entry.path().filename().string().rfind("repeat_", 0) == 0)
            repeat_dirs.push_back(entry.path());
    }
    std::sort(repeat_dirs.begin(), repeat_dirs.end());
    if (repeat_dirs.empty()) repeat_dirs.push_back(run_dir);

    std::vector<std::pair<std::string, double>> evaluations;
    for (const auto& dir : repeat_dirs) {
        RepeatAnalysis repeat = analyze_repeat(dir, report.warnings);
        report.per_repeat.push_back(repeat.system);
        for (auto& e : repeat.evaluations) evaluations.push_back(std::move(e));
    }

    auto mean_field = [&](double SystemPerf::*field) {
        std::vector<double> values;
        for (const auto& r : report.per_repeat) values.push_back(r.*field);
        return mean_of(values);
    };
    report.system.total_training_time_s =
        mean_field(&SystemPerf::total_training_time_s);
    report.system.client_computation_time_s =
        mean_field(&SystemPerf::client_computation_time_s);
    report.system.server_computation_time_s =
        mean_field(&SystemPerf::server_computation_time_s);
    report.system.other_cost_s = report.system.total_training_time_s -
                                 report.system.client_computation_time_s -
                                 report.system.server_computation_time_s;
    report.system.communication_rounds =
        mean_field(&SystemPerf::communication_rounds);
    report.system.communication_bytes =
        mean_field(&SystemPerf::communication_bytes);
    report.system.client_critical_path_s =
        mean_field(&SystemPerf::client_critical_path_s);

    analyze_memory(run_dir / "memory.jsonl", report);

    if (!evaluations.empty()) {
        report.model_perf.metric = evaluations.front().first;
        for (const auto& [metric, value] : evaluations) {
            if (metric != report.model_perf.metric) {
                report.warnings.push_back("mixed evaluation metrics: " +
                                          report.model_perf.metric + " vs " +
                                          metric);
                continue;
            }
            report.model_perf.per_repeat.push_back(value);
        }
        report.model_perf.mean = mean_of(report.model_perf.per_repeat);
        report.model_perf.stddev = stddev_of(report.model_perf.per_repeat);
    } else {
        report.warnings.push_back("no model_evaluation records found");
    }

    report.notes.push_back(
        "communication counts include both the sender's and receiver's "
        "records for every message (one logged event per send/recv)");
    return report;
}

// --- serialization -------------------------------------------------------------

namespace {

ordered_json system_to_json(const SystemPerf& s) {
    return {{"total_training_time_s", s.total_training_time_s},
            {"client_computation_time_s", s.client_computation_time_s},
            {"server_computation_time_s", s.server_computation_time_s},
            {"other_cost_s", s.other_cost_s},
            {"communication_rounds", s.communication_rounds},
            {"communication_bytes", s.communication_bytes},
            {"peak_memory_bytes", s.peak_memory_bytes},
            {"client_critical_path_s", s.client_critical_path_s}};
}

SystemPerf system_from_json(const json& j) {
    SystemPerf s;
    s.total_training_time_s = j.value("total_training_time_s", 0.0);
    s.client_computation_time_s = j.value("client_computation_time_s", 0.0);
    s.server_computation_time_s = j.value("server_computation_time_s", 0.0);
    s.other_cost_s = j.value("other_cost_s", 0.0);
    s.communication_rounds = j.value("communication_rounds", 0.0);
    s.communication_bytes = j.value("communication_bytes", 0.0);
    s.peak_memory_bytes = j.value("peak_memory_bytes", 0.0);
    s.client_critical_path_s = j.value("client_critical_path_s", 0.0);
    return s;
}

} // namespace

std::string report_to_json(const Report& report) {
    ordered_json j;
    j["run_id"] = report.run_id;
    j["scenario"] = report.scenario;
    j["config_hash"] = report.config_hash;
    j["model_performance"] = {{"metric", report.model_perf.metric},
                              {"mean", report.model_perf.mean},
                              {"std", report.model_perf.stddev},
                              {"per_repeat", report.model_perf.per_repeat}};
    j["system_performance"] = system_to_json(report.system);
    ordered_json per_repeat = ordered_json::array();
    for (const auto& r : report.per_repeat) per_repeat.push_back(system_to_json(r));
    j["system_performance"]["per_repeat"] = per_repeat;
    j["per_process_peak_memory_bytes"] = report.per_process_peak_memory_bytes;
    j["warnings"] = report.warnings;
    j["notes"] = report.notes;
    return j.dump(2) + "\n";
}

Report report_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw CorruptLog(std::string("report: ") + e.what());
    }
    Report report;
    report.run_id = j.value("run_id", "");
    report.scenario = j.value("scenario", "");
    report.config_hash = j.value("config_hash", "");
    const auto& mp = j.at("model_performance");
    report.model_perf.metric = mp.value("metric", "");
    report.model_perf.mean = mp.value("mean", 0.0);
    report.model_perf.stddev = mp.value("std", 0.0);
    for (const auto& v : mp.value("per_repeat", json::array()))
        report.model_perf.per_repeat.push_back(v.get<double>());
    report.system = system_from_json(j.at("system_performance"));
    for (const auto& r :
         j.at("system_performance").value("per_repeat", json::array()))
        report.per_repeat.push_back(system_from_json(r));
    const json peaks = j.value("per_process_peak_memory_bytes", json::object());
    for (const auto& [pid, bytes] : peaks.items())
        report.per_process_peak_memory_bytes[pid] = bytes.get<double>();
    for (const auto& w : j.value("warnings", json::array()))
        report.warnings.push_back(w.get<std::string>());
    for (const auto& n : j.value("notes", json::array()))
        report.notes.push_back(n.get<std::string>());
    return report;
}

namespace {

std::string fixed(double v, int precision = 3) {
    std::ostringstream ss;
    ss.setf(std::ios::fixed);
    ss.precision(precision);
    ss << v;
    return ss.str();
}

std::string human_bytes(double bytes) {
    const char* units[] = {"B", "KiB", "MiB", "GiB"};
    int u = 0;
    while (bytes >= 1024.0 && u < 3) {
        bytes /= 1024.0;
        ++u;
    }
    return fixed(bytes, u == 0 ? 0 : 2) + " " + units[u];
}

} // namespace

std::string render_report(const Report& report) {
    std::ostringstream out;
    out << "run        : " << report.run_id << "\n";
    out << "scenario   : " << report.scenario << "\n";
    out << "model perf : " << report.model_perf.metric << " = "
        << fixed(report.model_perf.mean, 2) << " +- "
        << fixed(report.model_perf.stddev, 2) << " ("
        << report.model_perf.per_repeat.size() << " repeats)\n";
    const auto& s = report.system;
    out << "time       : total " << fixed(s.total_training_time_s) << " s"
        << " | client " << fixed(s.client_computation_time_s) << " s"
        << " | server " << fixed(s.server_computation_time_s) << " s"
        << " | other " << fixed(s.other_cost_s) << " s\n";
    out << "             client critical path "
        << fixed(s.client_critical_path_s) << " s\n";
    out << "comm       : " << fixed(s.communication_rounds, 0) << " rounds, "
        << human_bytes(s.communication_bytes) << "\n";
    out << "memory     : peak " << human_bytes(s.peak_memory_bytes) << "\n";
    for (const auto& w : report.warnings) out << "warning    : " << w << "\n";
    return out.str();
}

ComparisonTable compare(std::span<const Report> reports) {
    if (reports.size() < 2)
        throw IncomparableScenarios("need at least two reports to compare");
    for (const auto& r : reports)
        if (r.scenario != reports.front().scenario)
            throw IncomparableScenarios(reports.front().scenario + " vs " +
                                        r.scenario);

    ComparisonTable table;
    table.scenario = reports.front().scenario;
    table.columns = {"model", "total_time_s", "rounds", "bytes",
                     "peak_memory_bytes"};

    // Pool runs of the same configuration into one row.
    std::vector<std::string> order;
    std::map<std::string, std::vector<const Report*>> groups;
    for (const auto& r : reports) {
        std::string key = r.config_hash.empty() ? r.run_id : r.config_hash;
        if (!groups.count(key)) order.push_back(key);
        groups[key].push_back(&r);
    }

    bool lower_better_metric = reports.front().model_perf.metric == "mse";
    for (const auto& key : order) {
        ComparisonRow row;
        std::vector<double> metric_values;
        std::vector<double> totals, rounds, bytes, memory;
        std::string label;
        for (const Report* r : groups[key]) {
            if (!label.empty()) label += "+";
            label += r->run_id;
            row.model_perf.metric = r->model_perf.metric;
            for (double v : r->model_perf.per_repeat)
                metric_values.push_back(v);
            totals.push_back(r->system.total_training_time_s);
            rounds.push_back(r->system.communication_rounds);
            bytes.push_back(r->system.communication_bytes);
            memory.push_back(r->system.peak_memory_bytes);
        }
        row.label = label;
        row.model_perf.per_repeat = metric_values;
        row.model_perf.mean = mean_of(metric_values);
        row.model_perf.stddev = stddev_of(metric_values);
        row.system.total_training_time_s = mean_of(totals);
        row.system.communication_rounds = mean_of(rounds);
        row.system.communication_bytes = mean_of(bytes);
        row.system.peak_memory_bytes = mean_of(memory);
        table.rows.push_back(std::move(row));
    }

    auto column_values = [&](size_t col) {
        std::vector<double> values;
        for (const auto& row : table.rows) {
            switch (col) {
                case 0: values.push_back(row.model_perf.mean); break;
                case 1: values.push_back(row.system.total_training_time_s); break;
                case 2: values.push_back(row.system.communication_rounds); break;
                case 3: values.push_back(row.system.communication_bytes); break;
                default: values.push_back(row.system.peak_memory_bytes); break;
            }
        }
        return values;
    };
    for (auto& row : table.rows) row.best.assign(table.columns.size(), false);
    for (size_t col = 0; col < table.columns.size(); ++col) {
        auto values = column_values(col);
        bool lower_better = col == 0 ? lower_better_metric : true;
        double best = lower_better
                          ? *std::min_element(values.begin(), values.end())
                          : *std::max_element(values.begin(), values.end());
        for (size_t i = 0; i < table.rows.size(); ++i)
            table.rows[i].best[col] = values[i] == best;
    }
    table.no_dominator = true;
    for (const auto& row : table.rows) {
        if (std::all_of(row.best.begin(), row.best.end(),
                        [](bool b) { return b; })) {
            table.no_dominator = false;
            break;
        }
    }
    if (table.no_dominator)
        table.note = "no run dominates every column";
    return table;
}

std::string comparison_to_json(const ComparisonTable& table) {
    ordered_json j;
    j["scenario"] = table.scenario;
    j["columns"] = table.columns;
    ordered_json rows = ordered_json::array();
    for (const auto& row : table.rows) {
        rows.push_back(
            {{"label", row.label},
             {"metric", row.model_perf.metric},
             {"model_mean", row.model_perf.mean},
             {"model_std", row.model_perf.stddev},
             {"total_time_s", row.system.total_training_time_s},
             {"rounds", row.system.communication_rounds},
             {"bytes", row.system.communication_bytes},
             {"peak_memory_bytes", row.system.peak_memory_bytes},
             {"best", row.best}});
    }
    j["rows"] = rows;
    j["no_dominator"] = table.no_dominator;
    j["note"] = table.note;
    return j.dump(2) + "\n";
}

std::string render_comparison(const ComparisonTable& table) {
    std::ostringstream out;
    out << "scenario: " << table.scenario << "\n";
    out << "run                              model            total_s   rounds"
           "      bytes          peak_mem\n";
    for (const auto& row : table.rows) {
        std::string model = row.model_perf.metric + " " +
                            fixed(row.model_perf.mean, 2) + "+-" +
                            fixed(row.model_perf.stddev, 2);
        std::ostringstream line;
        line << row.label;
        std::string label = row.label.size() > 32 ? row.label.substr(0, 32)
                                                  : row.label;
        out << label << std::string(33 - label.size(), ' ');
        out << model << (row.best[0] ? "*" : " ") << "  ";
        out << fixed(row.system.total_training_time_s, 2)
            << (row.best[1] ? "*" : " ") << "  ";
        out << fixed(row.system.communication_rounds, 0)
            << (row.best[2] ? "*" : " ") << "  ";
        out << human_bytes(row.system.communication_bytes)
            << (row.best[3] ? "*" : " ") << "  ";
        out << human_bytes(row.system.peak_memory_bytes)
            << (row.best[4] ? "*" : " ") << "\n";
    }
    if (!table.note.empty()) out << "note: " << table.note << "\n";
    return out.str();
}

} // namespace fedbench::analyzer
