#include "fedbench/eventlog.hpp"

#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fedbench/errors.hpp"
#include "fedbench/util.hpp"

namespace fedbench::eventlog {

using ordered_json = nlohmann::ordered_json;

std::string action_name(Action a) {
    return a == Action::start ? "start" : "end";
}

std::string agent_type_name(AgentType t) {
    return t == AgentType::aggregator ? "aggregator" : "client";
}

AgentType agent_type_from_name(const std::string& name) {
    if (name == "aggregator") return AgentType::aggregator;
    if (name == "client") return AgentType::client;
    throw MalformedLine("unknown agent_type '" + name + "'");
}

static void append_metric_value(std::string& out, const MetricValue& v) {
    if (std::holds_alternative<int64_t>(v.value)) {
        out += std::to_string(std::get<int64_t>(v.value));
    } else {
        out += format_double(std::get<double>(v.value));
    }
}

// The reference format uses Python-style separators (": " and ", ") and
// shortest-round-trip floats, so serialization is done by hand rather
// than through a JSON library dump.
std::string serialize(const Record& record) {
    std::string out;
    if (const auto* ev = std::get_if<EventRecord>(&record)) {
        out += "{\"event\": \"" + ev->event + "\", \"action\": \"" +
               action_name(ev->action) + "\", \"timestamp\": " +
               format_double(ev->timestamp) + ", \"metrics\": {";
        bool first = true;
        for (const auto& [key, value] : ev->metrics) {
            if (!first) out += ", ";
            first = false;
            out += "\"" + key + "\": ";
            append_metric_value(out, value);
        }
        out += "}}";
    } else {
        const auto& s = std::get<SentinelRecord>(record);
        out += "{\"flbenchmark\": \"" + action_name(s.which) +
               "\", \"timestamp\": " + format_double(s.timestamp);
        if (s.agent_type) {
            out += ", \"agent_type\": \"" + agent_type_name(*s.agent_type) + "\"";
        }
        out += "}";
    }
    return out;
}

static double number_as_double(const ordered_json& j, size_t line_no,
                               const char* what) {
    if (!j.is_number())
        throw MalformedLine(std::string(what) + " is not a number at line " +
                            std::to_string(line_no));
    return j.get<double>();
}

Record parse(const std::string& line, size_t line_no) {
    ordered_json j;
    try {
        j = ordered_json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw MalformedLine("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.is_object())
        throw MalformedLine("line " + std::to_string(line_no) +
                            ": record is not an object");

    if (j.contains("flbenchmark")) {
        SentinelRecord s;
        const auto& which = j.at("flbenchmark");
        if (!which.is_string() ||
            (which != "start" && which != "end"))
            throw MalformedLine("line " + std::to_string(line_no) +
                                ": bad flbenchmark value");
        s.which = which == "start" ? Action::start : Action::end;
        if (!j.contains("timestamp"))
            throw MalformedLine("line " + std::to_string(line_no) +
                                ": sentinel missing timestamp");
        s.timestamp = number_as_double(j.at("timestamp"), line_no, "timestamp");
        if (j.contains("agent_type"))
            s.agent_type = agent_type_from_name(j.at("agent_type").get<std::string>());
        return s;
    }

    EventRecord ev;
    if (!j.contains("event") || !j.contains("action") || !j.contains("timestamp"))
        throw MalformedLine("line " + std::to_string(line_no) +
                            ": missing event/action/timestamp");
    ev.event = j.at("event").get<std::string>();
    if (ev.event.empty())
        throw MalformedLine("line " + std::to_string(line_no) + ": empty event path");
    const std::string action = j.at("action").get<std::string>();
    if (action == "start") {
        ev.action = Action::start;
    } else if (action == "end") {
        ev.action = Action::end;
    } else {
        throw MalformedLine("line " + std::to_string(line_no) +
                            ": unknown action '" + action + "'");
    }
    ev.timestamp = number_as_double(j.at("timestamp"), line_no, "timestamp");
    if (j.contains("metrics")) {
        const auto& m = j.at("metrics");
        if (!m.is_object())
            throw MalformedLine("line " + std::to_string(line_no) +
                                ": metrics is not an object");
        for (auto it = m.begin(); it != m.end(); ++it) {
            if (it.value().is_number_integer()) {
                ev.metrics.emplace_back(it.key(),
                                        MetricValue(it.value().get<int64_t>()));
            } else {
                ev.metrics.emplace_back(
                    it.key(),
                    MetricValue(number_as_double(it.value(), line_no, "metric")));
            }
        }
    }
    return ev;
}

std::vector<Record> parse_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoFailure("cannot open log " + path.string());
    std::vector<Record> records;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        records.push_back(parse(line, line_no));
    }
    return records;
}

ValidationReport validate(const std::vector<Record>& records) {
    ValidationReport report;
    auto flag = [&](size_t i, std::string msg) {
        report.violations.push_back({i, std::move(msg)});
    };

    double last_ts = -std::numeric_limits<double>::infinity();
    std::map<std::string, int> open_counts;
    bool saw_start_sentinel = false;
    bool saw_end_sentinel = false;

    for (size_t i = 0; i < records.size(); ++i) {
        const auto& rec = records[i];
        double ts = 0.0;
        if (const auto* s = std::get_if<SentinelRecord>(&rec)) {
            ts = s->timestamp;
            if (s->which == Action::start) {
                if (i != 0) flag(i, "start sentinel is not the first record");
                if (saw_start_sentinel) flag(i, "duplicate start sentinel");
                saw_start_sentinel = true;
            } else {
                if (saw_end_sentinel) flag(i, "duplicate end sentinel");
                if (i + 1 != records.size())
                    flag(i, "end sentinel is not the last record");
                saw_end_sentinel = true;
            }
        } else {
            const auto& ev = std::get<EventRecord>(rec);
            ts = ev.timestamp;
            if (ev.action == Action::start) {
                if (!ev.metrics.empty())
                    flag(i, "metrics on start record for '" + ev.event + "'");
                open_counts[ev.event]++;
            } else {
                auto it = open_counts.find(ev.event);
                if (it == open_counts.end() || it->second == 0) {
                    flag(i, "end without start for '" + ev.event + "'");
                } else {
                    it->second--;
                }
            }
        }
        if (ts < last_ts)
            flag(i, "timestamp decreases (" + format_double(ts) + " after " +
                        format_double(last_ts) + ")");
        last_ts = std::max(last_ts, ts);
    }

    if (!records.empty()) {
        if (!saw_start_sentinel) flag(0, "missing start sentinel");
        if (!saw_end_sentinel) flag(records.size() - 1, "missing end sentinel");
    }
    for (const auto& [event, count] : open_counts) {
        if (count > 0)
            flag(records.size(),
                 "start without end for '" + event + "' (" +
                     std::to_string(count) + " unclosed)");
    }
    return report;
}

Logger::Logger(const std::filesystem::path& path, AgentType agent_type)
    : path_(path) {
    std::filesystem::create_directories(path.parent_path().empty()
                                            ? "."
                                            : path.parent_path());
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoFailure("cannot open log " + path.string());
    closed_ = false;
    SentinelRecord s;
    s.which = Action::start;
    s.timestamp = next_timestamp();
    s.agent_type = agent_type;
    write_record(s);
}

Logger::~Logger() {
    if (!closed_) {
        try {
            close();
        } catch (...) {
        }
    }
}

double Logger::next_timestamp() {
    double ts = wall_clock_seconds();
    if (ts < last_ts_) ts = last_ts_;
    last_ts_ = ts;
    return ts;
}

std::string Logger::write_record(const Record& record) {
    std::string line = serialize(record);
    out_ << line << '\n';
    out_.flush();
    if (!out_) throw IoFailure("write failed on " + path_.string());
    return line;
}

std::string Logger::emit(const std::string& event, Action action,
                         const Metrics& metrics) {
    if (event.empty()) throw IoFailure("empty event path");
    std::lock_guard<std::mutex> lock(mu_);
    if (closed_) throw IoFailure("logger already closed: " + path_.string());
    EventRecord ev;
    ev.event = event;
    ev.action = action;
    ev.timestamp = next_timestamp();
    ev.metrics = metrics;
    return write_record(ev);
}

void Logger::close() {
    std::lock_guard<std::mutex> lock(mu_);
    if (closed_) return;
    SentinelRecord s;
    s.which = Action::end;
    s.timestamp = next_timestamp();
    write_record(s);
    out_.close();
    closed_ = true;
}

} // namespace fedbench::eventlog
