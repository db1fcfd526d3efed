#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace fedbench::eventlog {

enum class Action { start, end };

// Metric numbers keep their integer-ness so a parsed line re-emits
// byte-identically ("byte": 1234 must not become 1234.0).
struct MetricValue {
    std::variant<int64_t, double> value;

    MetricValue() : value(int64_t{0}) {}
    MetricValue(int64_t v) : value(v) {}
    MetricValue(int v) : value(int64_t{v}) {}
    MetricValue(double v) : value(v) {}

    double as_double() const {
        return std::holds_alternative<int64_t>(value)
                   ? static_cast<double>(std::get<int64_t>(value))
                   : std::get<double>(value);
    }
    bool operator==(const MetricValue&) const = default;
};

using Metrics = std::vector<std::pair<std::string, MetricValue>>;

struct EventRecord {
    std::string event;   // dotted path, e.g. "training.0", "communication.1.0"
    Action action = Action::start;
    double timestamp = 0.0;
    Metrics metrics;

    bool operator==(const EventRecord&) const = default;
};

enum class AgentType { aggregator, client };

struct SentinelRecord {
    Action which = Action::start;  // "flbenchmark": "start" / "end"
    double timestamp = 0.0;
    std::optional<AgentType> agent_type;  // present on start sentinels

    bool operator==(const SentinelRecord&) const = default;
};

using Record = std::variant<EventRecord, SentinelRecord>;

std::string action_name(Action a);
std::string agent_type_name(AgentType t);
AgentType agent_type_from_name(const std::string& name);

// One canonical JSON line, no trailing newline.
std::string serialize(const Record& record);

// Parses one log line. Unknown metric keys are kept as-is; malformed input
// raises MalformedLine, tagged with `line_no` when provided.
Record parse(const std::string& line, size_t line_no = 0);

std::vector<Record> parse_file(const std::filesystem::path& path);

struct Violation {
    size_t record_index = 0;
    std::string message;
};

struct ValidationReport {
    std::vector<Violation> violations;
    bool ok() const { return violations.empty(); }
};

// Checks sentinel framing, start/end pairing per event path, monotone
// timestamps, and empty metrics on start records. Violations are data,
// not errors.
ValidationReport validate(const std::vector<Record>& records);

// Append-only JSON-lines writer, one per agent. Lines are flushed as they
// are written; timestamps are wall-clock but clamped monotone.
class Logger {
public:
    Logger() = default;
    explicit Logger(const std::filesystem::path& path, AgentType agent_type);
    ~Logger();

    Logger(const Logger&) = delete;
    Logger& operator=(const Logger&) = delete;

    bool is_open() const { return out_.is_open(); }
    const std::filesystem::path& path() const { return path_; }

    // Emits one event record and returns the appended line.
    std::string emit(const std::string& event, Action action,
                     const Metrics& metrics = {});
    // Writes the end sentinel and closes the file.
    void close();

private:
    std::string write_record(const Record& record);
    double next_timestamp();

    std::filesystem::path path_;
    std::ofstream out_;
    std::mutex mu_;
    double last_ts_ = 0.0;
    bool closed_ = true;
};

} // namespace fedbench::eventlog
