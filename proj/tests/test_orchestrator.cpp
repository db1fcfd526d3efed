#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <fstream>
#include <thread>

#include "fedbench/analyzer.hpp"
#include "fedbench/errors.hpp"
#include "fedbench/eventlog.hpp"
#include "fedbench/orchestrator.hpp"
#include "fedbench/transport.hpp"
#include "fedbench/util.hpp"
#include "testsupport.hpp"

#ifndef FEDBENCH_BINARY
#error "FEDBENCH_BINARY must point at the fedbench executable"
#endif

using namespace fedbench;
using namespace fedbench::orchestrator;

namespace {

// Minimal experiment against the bundled synthetic scenario.
ExperimentConfig base_config(const std::filesystem::path& out_dir,
                             const std::filesystem::path& cache_dir,
                             DeployMode mode) {
    ExperimentConfig config = parse_config_text(R"({
        "scenario": "synthetic_2client",
        "algorithm": "fedavg",
        "model": "logistic_regression",
        "training": {"rounds": 3, "batch_size": 32, "learning_rate": 0.1, "seed": 11},
        "repeats": 1
    })");
    config.deployment.mode = mode;
    config.deployment.out_dir = out_dir;
    config.deployment.agent_binary = FEDBENCH_BINARY;
    config.cache_dir = cache_dir;
    return config;
}

bool any_agents_alive(const std::string& marker) {
    for (const auto& entry : std::filesystem::directory_iterator("/proc")) {
        if (!entry.is_directory()) continue;
        std::string name = entry.path().filename();
        if (name.find_first_not_of("0123456789") != std::string::npos) continue;
        std::ifstream cmdline(entry.path() / "cmdline");
        std::string all((std::istreambuf_iterator<char>(cmdline)),
                        std::istreambuf_iterator<char>());
        if (all.find("agent") != std::string::npos &&
            all.find(marker) != std::string::npos)
            return true;
    }
    return false;
}

} // namespace

TEST_CASE("parse_config fills the documented defaults") {
    auto config = parse_config_text(R"({
        "scenario": "synthetic_2client",
        "algorithm": "fedavg",
        "model": "mlp_128"
    })");
    CHECK(config.training.momentum == 0.9);
    CHECK(config.repeats == 5);
    CHECK(config.engine == "builtin");
    CHECK(config.model.kind == engine::ModelKind::mlp);
    CHECK(config.model.hidden_layers == std::vector<size_t>{128});
    CHECK(config.deployment.mode == DeployMode::local_processes);

    auto gbdt = parse_config_text(R"({
        "scenario": "synthetic_2client",
        "algorithm": "histsecagg_gbdt",
        "model": "gbdt_64_64_6"
    })");
    CHECK(gbdt.model.gbdt.num_trees == 64);
    CHECK(gbdt.model.gbdt.num_bins == 64);
    CHECK(gbdt.model.gbdt.max_depth == 6);
}

TEST_CASE("incompatible algorithm/setting/model combinations are rejected") {
    CHECK_THROWS_AS(parse_config_text(R"({
        "scenario": "default_credit_vertical",
        "algorithm": "fedavg",
        "model": "mlp_128"
    })"),
                    IncompatibleCombination);
    CHECK_THROWS_AS(parse_config_text(R"({
        "scenario": "synthetic_2client",
        "algorithm": "histsecagg_gbdt",
        "model": "mlp_128"
    })"),
                    IncompatibleCombination);
    CHECK_THROWS_AS(parse_config_text(R"({
        "scenario": "synthetic_2client",
        "algorithm": "vertical_regression",
        "model": "logistic_regression"
    })"),
                    IncompatibleCombination);
    CHECK_THROWS_AS(parse_config_text(R"({
        "scenario": "student_horizontal",
        "algorithm": "fedavg",
        "model": "logistic_regression"
    })"),
                    IncompatibleCombination);
    CHECK_THROWS_AS(parse_config_text(R"({
        "scenario": "no_such_scenario",
        "algorithm": "fedavg",
        "model": "mlp_128"
    })"),
                    UnknownScenario);
    CHECK_THROWS_AS(parse_config_text(R"({
        "scenario": "synthetic_2client",
        "algorithm": "fedavg",
        "model": "mlp_128",
        "engine": "framework_that_never_was"
    })"),
                    UnknownEngine);
}

TEST_CASE("effective config text parses back to the same experiment") {
    auto config = parse_config_text(R"({
        "scenario": "synthetic_2client",
        "algorithm": "fedavg",
        "model": "mlp_128_128_128",
        "training": {"rounds": 7, "batch_size": 16}
    })");
    auto round_trip = parse_config_text(effective_config_text(config));
    CHECK(round_trip.training.rounds == 7);
    CHECK(round_trip.training.batch_size == 16);
    CHECK(round_trip.training.momentum == 0.9);
    CHECK(round_trip.model.hidden_layers ==
          std::vector<size_t>{128, 128, 128});
}

TEST_CASE("in_process launch: three logs, valid files, deterministic metrics") {
    test::TempDir out("orc_inproc");
    test::TempDir cache("orc_inproc_cache");
    auto config = base_config(out.path(), cache.path(), DeployMode::in_process);

    auto handle = launch(config);
    CHECK(handle.status == RunStatus::finished);
    wait(handle);  // already finished: no-op
    auto run_dir = collect(handle);

    int log_count = 0;
    for (const auto& entry :
         std::filesystem::recursive_directory_iterator(run_dir))
        if (entry.path().extension() == ".log") {
            ++log_count;
            auto records = eventlog::parse_file(entry.path());
            CHECK(eventlog::validate(records).ok());
        }
    CHECK(log_count == 3);
    CHECK(std::filesystem::exists(run_dir / "memory.jsonl"));
    CHECK(std::filesystem::exists(run_dir / "config.json"));
    CHECK(std::filesystem::exists(run_dir / "repeat_0/model.json"));

    auto handle2 = launch(config);
    REQUIRE(handle.metric_values.size() == 1);
    REQUIRE(handle2.metric_values.size() == 1);
    CHECK(handle.metric_values[0] == handle2.metric_values[0]);
}

TEST_CASE("local_processes: end-to-end run, collection layout, no orphans") {
    test::TempDir out("orc_local");
    test::TempDir cache("orc_local_cache");
    // warm the cache once so the agents race only on reads
    scenario::load_scenario("synthetic_2client", cache.path());
    auto config =
        base_config(out.path(), cache.path(), DeployMode::local_processes);

    auto handle = launch(config);
    CHECK(handle.status == RunStatus::running);
    wait(handle);
    CHECK(handle.status == RunStatus::finished);
    auto run_dir = collect(handle);

    CHECK(std::filesystem::exists(run_dir / "repeat_0/aggregator_0.log"));
    CHECK(std::filesystem::exists(run_dir / "repeat_0/client_1.log"));
    CHECK(std::filesystem::exists(run_dir / "repeat_0/client_2.log"));
    CHECK(std::filesystem::exists(run_dir / "memory.jsonl"));
    CHECK(std::filesystem::exists(run_dir / "config.json"));
    CHECK(std::filesystem::exists(run_dir / "collection_meta.json"));
    CHECK_FALSE(any_agents_alive(run_dir.string()));

    auto report = analyzer::analyze(run_dir);
    CHECK(report.model_perf.metric == "auc");
    CHECK(report.system.total_training_time_s > 0.0);
    CHECK(report.system.communication_rounds > 0.0);
    CHECK(report.system.peak_memory_bytes > 0.0);
}

TEST_CASE("a pinned busy port fails with PortConflict before clients start") {
    transport::TcpListener squatter("127.0.0.1:0");
    test::TempDir out("orc_port");
    test::TempDir cache("orc_port_cache");
    scenario::load_scenario("synthetic_2client", cache.path());
    auto config =
        base_config(out.path(), cache.path(), DeployMode::local_processes);
    config.deployment.port = squatter.port();
    CHECK_THROWS_AS(launch(config), PortConflict);
}

TEST_CASE("a crashing client fails the run but leaves its partial log") {
    test::TempDir out("orc_crash");
    test::TempDir cache("orc_crash_cache");
    scenario::load_scenario("synthetic_2client", cache.path());
    auto config =
        base_config(out.path(), cache.path(), DeployMode::local_processes);
    config.deployment.timeout_s = 30;

    setenv("FEDBENCH_TEST_CLIENT_EXIT", "1", 1);
    auto handle = launch(config);
    wait(handle);
    unsetenv("FEDBENCH_TEST_CLIENT_EXIT");

    CHECK(handle.status == RunStatus::failed);
    CHECK(handle.failure.find("client") != std::string::npos);
    auto run_dir = collect(handle);
    CHECK(std::filesystem::exists(run_dir / "repeat_0/client_2.log"));
    CHECK_FALSE(any_agents_alive(run_dir.string()));
}

TEST_CASE("remote_shell through a local shell matches the local layout") {
    test::TempDir out("orc_remote");
    test::TempDir cache("orc_remote_cache");
    scenario::load_scenario("synthetic_2client", cache.path());
    auto config =
        base_config(out.path(), cache.path(), DeployMode::remote_shell);
    config.deployment.hosts = {"nodeA"};
    // stand-in remote shell: drop the host and run the command locally
    config.deployment.shell_template = "host={host}; sh -c {cmd}";
    config.deployment.copy_template = "true {host} {path} {local}";
    {
        transport::TcpListener probe("127.0.0.1:0");
        config.deployment.port = probe.port();
    }

    auto handle = launch(config);
    wait(handle);
    CHECK(handle.status == RunStatus::finished);
    auto run_dir = collect(handle);
    CHECK(std::filesystem::exists(run_dir / "repeat_0/aggregator_0.log"));
    CHECK(std::filesystem::exists(run_dir / "repeat_0/client_1.log"));
    CHECK(std::filesystem::exists(run_dir / "repeat_0/client_2.log"));
    auto report = analyzer::analyze(run_dir);
    CHECK(report.model_perf.per_repeat.size() == 1);
    CHECK_FALSE(any_agents_alive(run_dir.string()));
}

TEST_CASE("an unreachable remote host tears the run down") {
    test::TempDir out("orc_unreach");
    test::TempDir cache("orc_unreach_cache");
    scenario::load_scenario("synthetic_2client", cache.path());
    auto config =
        base_config(out.path(), cache.path(), DeployMode::remote_shell);
    config.deployment.hosts = {"no.such.host.invalid"};
    config.deployment.shell_template = "exit 12 # {host} {cmd}";
    config.deployment.copy_template = "true {host} {path} {local}";
    config.deployment.port = 19999;
    CHECK_THROWS_AS(launch(config), HostUnreachable);
    CHECK_FALSE(any_agents_alive(out.path().string()));
}

TEST_CASE("memory sampler: per-pid samples, peak definition, exits handled") {
    test::TempDir tmp("orc_mem");
    std::vector<pid_t> pids;
    for (int i = 0; i < 3; ++i) {
        pid_t pid = fork();
        REQUIRE(pid >= 0);
        if (pid == 0) {
            usleep(400 * 1000);
            _exit(0);
        }
        pids.push_back(pid);
    }
    {
        MemorySamplerHandle sampler(tmp.path() / "memory.jsonl", 50);
        for (pid_t pid : pids) sampler.add_pid(pid);
        std::this_thread::sleep_for(std::chrono::milliseconds(200));
        auto samples = sampler.samples_so_far();
        REQUIRE(!samples.empty());
        bool saw_all = false;
        for (const auto& s : samples) saw_all |= s.rss_bytes.size() == 3;
        CHECK(saw_all);

        // peak definition: max over ticks of the summed rss
        int64_t expected = 0;
        for (const auto& s : samples) {
            int64_t total = 0;
            for (const auto& [pid, b] : s.rss_bytes) total += b;
            expected = std::max(expected, total);
        }
        CHECK(peak_total_rss(samples) == expected);
        CHECK(expected > 0);

        // after the children exit their contribution disappears
        for (pid_t pid : pids) waitpid(pid, nullptr, 0);
        std::this_thread::sleep_for(std::chrono::milliseconds(150));
        auto later = sampler.samples_so_far();
        CHECK(later.back().rss_bytes.empty());
        sampler.stop();
    }
    CHECK_THROWS_AS(MemorySamplerHandle(tmp.path() / "too_fast.jsonl", 5),
                    InvalidSpec);
}

TEST_CASE("interrupt requests tear down a running experiment") {
    test::TempDir out("orc_intr");
    test::TempDir cache("orc_intr_cache");
    scenario::load_scenario("synthetic_2client", cache.path());
    auto config =
        base_config(out.path(), cache.path(), DeployMode::local_processes);
    config.training.rounds = 2000;  // long enough to interrupt
    config.training.local_epochs = 5;

    auto handle = launch(config);
    std::thread interrupter([] {
        std::this_thread::sleep_for(std::chrono::milliseconds(300));
        request_interrupt();
    });
    wait(handle);
    interrupter.join();
    CHECK(handle.status == RunStatus::failed);
    CHECK(handle.failure == "interrupted");
    CHECK_FALSE(any_agents_alive(handle.run_dir.string()));
}
