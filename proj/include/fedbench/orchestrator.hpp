#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <sys/types.h>

#include "fedbench/engine.hpp"
#include "fedbench/protocol.hpp"
#include "fedbench/scenario.hpp"

namespace fedbench::orchestrator {

enum class DeployMode { in_process, local_processes, remote_shell };

std::string deploy_mode_name(DeployMode m);
DeployMode deploy_mode_from_name(const std::string& name);

struct Deployment {
    DeployMode mode = DeployMode::local_processes;
    std::vector<std::string> hosts;  // remote_shell: one per process, round-robin
    std::filesystem::path out_dir = "runs";
    uint16_t port = 0;  // 0 picks a free port
    std::string shell_template = "ssh {host} {cmd}";
    std::string copy_template = "scp {host}:{path} {local}";
    std::string agent_binary;  // defaults to the running executable
    int timeout_s = 300;
    int memory_interval_ms = 100;
};

struct ExperimentConfig {
    std::string scenario;
    std::string engine = "builtin";
    std::string algorithm;
    engine::ModelSpec model;
    engine::TrainConfig training;
    Deployment deployment;
    int repeats = 5;
    std::filesystem::path cache_dir;  // empty: FEDBENCH_CACHE_DIR or ~/.cache
    bool mask_histograms = false;
};

// Reads and fully validates a config file, filling defaults and rejecting
// combinations outside the algorithm/setting/model support matrix.
ExperimentConfig parse_config(const std::filesystem::path& path);
ExperimentConfig parse_config_text(const std::string& text);
// The defaulted config, ready for --print-effective-config and snapshots.
std::string effective_config_text(const ExperimentConfig& config);

std::filesystem::path resolve_cache_dir(const ExperimentConfig& config);

struct ProcessRecord {
    pid_t pid = -1;
    std::string role;  // "aggregator" | "client"
    uint32_t index = 0;
    std::string host;  // empty = local
};

enum class RunStatus { running, finished, failed };

struct RunHandle {
    std::string run_id;
    std::filesystem::path run_dir;
    RunStatus status = RunStatus::running;
    std::vector<ProcessRecord> processes;  // live processes of current repeat
    std::vector<std::filesystem::path> log_paths;
    std::vector<double> metric_values;  // filled for in_process runs
    std::string failure;

    // internal supervision state
    ExperimentConfig config;
    int next_repeat = 0;
    uint16_t bound_port = 0;
    std::shared_ptr<class MemorySamplerHandle> sampler;
};

// Spawns the first repeat's aggregator and clients (or runs everything for
// in_process mode) and starts the memory sampler.
RunHandle launch(const ExperimentConfig& config);
// Drives every repeat to completion; tears down stragglers on failure.
void wait(RunHandle& handle);
// Kills any processes still running and marks the run failed.
void terminate(RunHandle& handle);
// Signal-safe: makes wait() tear the current run down at its next poll.
void request_interrupt();
// Verifies/fetches logs into the run directory, writes collection metadata,
// and returns the merged directory.
std::filesystem::path collect(RunHandle& handle);

// --- memory sampling ---------------------------------------------------------

struct MemorySample {
    double timestamp = 0.0;
    std::map<pid_t, int64_t> rss_bytes;
};

int64_t read_rss_bytes(pid_t pid);  // -1 when the process is gone

// Samples resident-set sizes of a process set on a fixed interval and
// appends JSON lines to a file. Pids may be added while running.
class MemorySamplerHandle {
public:
    MemorySamplerHandle(std::filesystem::path out_file, int interval_ms);
    ~MemorySamplerHandle();
    void add_pid(pid_t pid);
    void remove_pid(pid_t pid);
    void stop();
    std::vector<MemorySample> samples_so_far() const;

private:
    void loop();
    void take_sample_locked();
    std::filesystem::path out_file_;
    int interval_ms_;
    mutable std::mutex mu_;
    std::vector<pid_t> pids_;
    std::vector<MemorySample> samples_;
    std::ofstream out_;
    std::atomic<bool> stop_{false};
    std::thread thread_;
};

// Peak = max over ticks of the summed rss of all sampled processes.
int64_t peak_total_rss(std::span<const MemorySample> samples);

// --- engine registry ----------------------------------------------------------

// Instrumentation hook point: alternative engines register here and are
// selected by ExperimentConfig.engine.
struct Engine {
    virtual ~Engine() = default;
    virtual protocol::AggregatorResult run_aggregator(
        std::span<transport::Endpoint* const> clients,
        const scenario::Scenario& s, const protocol::Session& session,
        eventlog::Logger* log) = 0;
    virtual void run_client(transport::Endpoint& server,
                            const scenario::Scenario& s, uint32_t client_id,
                            const protocol::Session& session,
                            eventlog::Logger* log) = 0;
};

void register_engine(const std::string& name,
                     std::function<std::unique_ptr<Engine>()> factory);
std::unique_ptr<Engine> make_engine(const std::string& name);
std::vector<std::string> engine_names();

// --- agent entry (used by the CLI's internal `agent` subcommand) -------------

struct AgentArgs {
    std::string role;  // "aggregator" | "client"
    uint32_t index = 0;
    std::filesystem::path config_path;
    std::string listen_addr;   // aggregator
    std::string connect_addr;  // client
    std::filesystem::path port_file;  // aggregator reports its bound port here
    std::filesystem::path out_dir;
    int repeat = 0;
};

int run_agent(const AgentArgs& args);

} // namespace fedbench::orchestrator
