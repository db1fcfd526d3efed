#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>
#include <vector>

#include "fedbench/errors.hpp"
#include "fedbench/eventlog.hpp"
#include "fedbench/util.hpp"
#include "testsupport.hpp"

using namespace fedbench;
using namespace fedbench::eventlog;

// Reference excerpt of the unified log format (aggregator side).
static const std::vector<std::string> kSampleLines = {
    R"({"flbenchmark": "start", "timestamp": 1653923858.0422723, "agent_type": "aggregator"})",
    R"({"event": "training", "action": "start", "timestamp": 1653923858.04346, "metrics": {}})",
    R"({"event": "training.0", "action": "start", "timestamp": 1653923858.0435393, "metrics": {}})",
    R"({"event": "computation.0", "action": "start", "timestamp": 1653923860.8540547, "metrics": {}})",
    R"({"event": "computation.0", "action": "end", "timestamp": 1653923861.450064, "metrics": {"flop": 123, "loss": 0.8}})",
    R"({"event": "communication.1.0", "action": "start", "timestamp": 1653923861.4501162, "metrics": {}})",
    R"({"event": "communication.1.0", "action": "end", "timestamp": 1653923861.450492, "metrics": {"byte": 1234}})",
    R"({"event": "communication.2.1", "action": "start", "timestamp": 1653923861.4505105, "metrics": {}})",
    R"({"event": "communication.2.1", "action": "end", "timestamp": 1653923861.450583, "metrics": {"byte": 1234}})",
    R"({"event": "training.0", "action": "end", "timestamp": 1653923861.4505887, "metrics": {}})",
    R"({"event": "training.1", "action": "start", "timestamp": 1653923861.4506032, "metrics": {}})",
    R"({"event": "training.3", "action": "end", "timestamp": 1653923867.9962113, "metrics": {}})",
    R"({"event": "training", "action": "end", "timestamp": 1653923867.996218, "metrics": {}})",
    R"({"event": "model_evaluation", "action": "start", "timestamp": 1653923867.9962301, "metrics": {}})",
    R"({"event": "model_evaluation", "action": "end", "timestamp": 1653923868.0964506, "metrics": {"accuracy": 99.9}})",
    R"({"flbenchmark": "end", "timestamp": 1653923868.0964868})",
};

// The excerpt elides training.1 end through training.3 start; the completed
// timeline is what a full run would contain.
static std::vector<std::string> completed_sample() {
    std::vector<std::string> lines(kSampleLines.begin(),
                                   kSampleLines.begin() + 11);
    lines.push_back(
        R"({"event": "training.1", "action": "end", "timestamp": 1653923863.5, "metrics": {}})");
    lines.push_back(
        R"({"event": "training.2", "action": "start", "timestamp": 1653923863.6, "metrics": {}})");
    lines.push_back(
        R"({"event": "training.2", "action": "end", "timestamp": 1653923865.5, "metrics": {}})");
    lines.push_back(
        R"({"event": "training.3", "action": "start", "timestamp": 1653923865.6, "metrics": {}})");
    lines.insert(lines.end(), kSampleLines.begin() + 11, kSampleLines.end());
    return lines;
}

TEST_CASE("reference sample: every line parses, 16 records") {
    std::vector<Record> records;
    for (size_t i = 0; i < kSampleLines.size(); ++i)
        records.push_back(parse(kSampleLines[i], i + 1));
    CHECK(records.size() == 16);
    CHECK(std::holds_alternative<SentinelRecord>(records.front()));
    CHECK(std::holds_alternative<SentinelRecord>(records.back()));
    const auto& start = std::get<SentinelRecord>(records.front());
    CHECK(start.agent_type == AgentType::aggregator);
    const auto& comp_end = std::get<EventRecord>(records[4]);
    REQUIRE(comp_end.metrics.size() == 2);
    CHECK(comp_end.metrics[0].first == "flop");
    CHECK(comp_end.metrics[0].second == MetricValue(int64_t{123}));
    CHECK(comp_end.metrics[1].second == MetricValue(0.8));
}

TEST_CASE("reference sample: serialize(parse(line)) is byte-identical") {
    for (const auto& line : kSampleLines)
        CHECK(serialize(parse(line)) == line);
}

TEST_CASE("completed sample validates with zero violations") {
    std::vector<Record> records;
    for (const auto& line : completed_sample()) records.push_back(parse(line));
    auto report = validate(records);
    for (const auto& v : report.violations)
        MESSAGE(v.record_index, ": ", v.message);
    CHECK(report.ok());
}

TEST_CASE("canonical emit format matches the documented examples") {
    EventRecord training{"training", Action::start, 1653923858.04346, {}};
    CHECK(serialize(training) ==
          R"({"event": "training", "action": "start", "timestamp": 1653923858.04346, "metrics": {}})");

    EventRecord comm{"communication.1.0",
                     Action::end,
                     1653923861.450492,
                     {{"byte", MetricValue(int64_t{1234})}}};
    CHECK(serialize(comm) ==
          R"({"event": "communication.1.0", "action": "end", "timestamp": 1653923861.450492, "metrics": {"byte": 1234}})");

    EventRecord eval{"model_evaluation",
                     Action::end,
                     1653923868.0964506,
                     {{"accuracy", MetricValue(99.9)}}};
    CHECK(serialize(eval) ==
          R"({"event": "model_evaluation", "action": "end", "timestamp": 1653923868.0964506, "metrics": {"accuracy": 99.9}})");
}

TEST_CASE("emit/parse round trip over random records") {
    std::mt19937_64 rng(20240601);
    const std::vector<std::string> paths = {"training", "training.3",
                                            "computation.12",
                                            "communication.1.0",
                                            "model_evaluation"};
    const std::vector<std::string> keys = {"flop", "loss", "byte", "accuracy",
                                           "custom_metric"};
    for (int i = 0; i < 1000; ++i) {
        EventRecord rec;
        rec.event = paths[rng() % paths.size()];
        rec.action = rng() % 2 ? Action::start : Action::end;
        rec.timestamp = 1.6e9 + uniform01(rng) * 1e7;
        size_t n_metrics = rng() % 4;
        for (size_t k = 0; k < n_metrics; ++k) {
            if (rng() % 2) {
                rec.metrics.emplace_back(keys[rng() % keys.size()],
                                         MetricValue(int64_t(rng() % 100000)));
            } else {
                rec.metrics.emplace_back(
                    keys[rng() % keys.size()],
                    MetricValue(normal01(rng) * 1000.0));
            }
        }
        Record parsed = parse(serialize(rec));
        REQUIRE(std::holds_alternative<EventRecord>(parsed));
        CHECK(std::get<EventRecord>(parsed) == rec);
    }
}

TEST_CASE("sentinel round trip") {
    SentinelRecord s;
    s.which = Action::start;
    s.timestamp = 1653923858.0422723;
    s.agent_type = AgentType::client;
    Record parsed = parse(serialize(s));
    REQUIRE(std::holds_alternative<SentinelRecord>(parsed));
    CHECK(std::get<SentinelRecord>(parsed) == s);
}

TEST_CASE("malformed input reports the line number") {
    CHECK_THROWS_AS(parse(R"({"event": "training", "action")", 17),
                    MalformedLine);
    try {
        parse(R"({"event": "x")", 17);
        FAIL("expected MalformedLine");
    } catch (const MalformedLine& e) {
        CHECK(std::string(e.what()).find("17") != std::string::npos);
    }
    CHECK_THROWS_AS(parse("[1,2,3]"), MalformedLine);
    CHECK_THROWS_AS(parse(R"({"event": "", "action": "start", "timestamp": 1})"),
                    MalformedLine);
    CHECK_THROWS_AS(
        parse(R"({"event": "x", "action": "middle", "timestamp": 1})"),
        MalformedLine);
    CHECK_THROWS_AS(
        parse(R"({"flbenchmark": "begin", "timestamp": 1.0})"),
        MalformedLine);
}

TEST_CASE("validate flags framing, pairing and order problems") {
    auto make = [](const std::string& line) { return parse(line); };

    SUBCASE("missing end sentinel") {
        std::vector<Record> records{
            make(R"({"flbenchmark": "start", "timestamp": 1.0, "agent_type": "client"})"),
            make(R"({"event": "training", "action": "start", "timestamp": 2.0, "metrics": {}})"),
            make(R"({"event": "training", "action": "end", "timestamp": 3.0, "metrics": {}})"),
        };
        auto report = validate(records);
        REQUIRE(report.violations.size() == 1);
        CHECK(report.violations[0].message.find("end sentinel") !=
              std::string::npos);
    }
    SUBCASE("end before start") {
        std::vector<Record> records{
            make(R"({"flbenchmark": "start", "timestamp": 1.0, "agent_type": "client"})"),
            make(R"({"event": "training", "action": "end", "timestamp": 2.0, "metrics": {}})"),
            make(R"({"flbenchmark": "end", "timestamp": 3.0})"),
        };
        auto report = validate(records);
        REQUIRE(report.violations.size() == 1);
        CHECK(report.violations[0].message.find("end without start") !=
              std::string::npos);
    }
    SUBCASE("decreasing timestamps") {
        std::vector<Record> records{
            make(R"({"flbenchmark": "start", "timestamp": 5.0, "agent_type": "client"})"),
            make(R"({"event": "training", "action": "start", "timestamp": 4.0, "metrics": {}})"),
            make(R"({"event": "training", "action": "end", "timestamp": 6.0, "metrics": {}})"),
            make(R"({"flbenchmark": "end", "timestamp": 7.0})"),
        };
        CHECK(validate(records).violations.size() == 1);
    }
    SUBCASE("metrics on a start record") {
        std::vector<Record> records{
            make(R"({"flbenchmark": "start", "timestamp": 1.0, "agent_type": "client"})"),
            make(R"({"event": "training", "action": "start", "timestamp": 2.0, "metrics": {"loss": 1.0}})"),
            make(R"({"event": "training", "action": "end", "timestamp": 3.0, "metrics": {}})"),
            make(R"({"flbenchmark": "end", "timestamp": 4.0})"),
        };
        CHECK(validate(records).violations.size() == 1);
    }
}

TEST_CASE("logger writes sentinel-framed monotone files") {
    test::TempDir tmp("eventlog");
    auto path = tmp.path() / "client_1.log";
    {
        Logger log(path, AgentType::client);
        log.emit("training", Action::start);
        log.emit("computation.0", Action::start);
        log.emit("computation.0", Action::end,
                 {{"loss", MetricValue(0.25)}, {"flop", MetricValue(int64_t{9})}});
        log.emit("training", Action::end);
        log.close();
    }
    auto records = parse_file(path);
    CHECK(records.size() == 6);
    auto report = validate(records);
    CHECK(report.ok());
    // unknown metric keys survive parsing
    auto line = serialize(records[3]);
    CHECK(line.find("\"loss\": 0.25") != std::string::npos);
}

TEST_CASE("parse_file reports the offending line") {
    test::TempDir tmp("eventlog_bad");
    auto path = tmp.path() / "broken.log";
    write_text_file(path,
                    R"({"flbenchmark": "start", "timestamp": 1.0, "agent_type": "client"})"
                    "\n{\"event\": \"tr\n");
    try {
        parse_file(path);
        FAIL("expected MalformedLine");
    } catch (const MalformedLine& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
}

TEST_CASE("shortest round-trip doubles match the reference format") {
    CHECK(format_double(1653923858.0422723) == "1653923858.0422723");
    CHECK(format_double(99.9) == "99.9");
    CHECK(format_double(1.0) == "1.0");
    CHECK(format_double(1e-05) == "1e-05");
    std::mt19937_64 rng(7);
    for (int i = 0; i < 2000; ++i) {
        double v = normal01(rng) * std::pow(10.0, int(rng() % 18) - 9);
        CHECK(std::stod(format_double(v)) == v);
    }
}
