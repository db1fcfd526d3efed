#include "fedbench/orchestrator.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fedbench/errors.hpp"
#include "fedbench/util.hpp"

namespace fedbench::orchestrator {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::string deploy_mode_name(DeployMode m) {
    switch (m) {
        case DeployMode::in_process: return "in_process";
        case DeployMode::local_processes: return "local_processes";
        case DeployMode::remote_shell: return "remote_shell";
    }
    return "?";
}

DeployMode deploy_mode_from_name(const std::string& name) {
    if (name == "in_process") return DeployMode::in_process;
    if (name == "local_processes") return DeployMode::local_processes;
    if (name == "remote_shell") return DeployMode::remote_shell;
    throw ParseError("unknown deployment mode '" + name + "'");
}

// --- config -------------------------------------------------------------------

namespace {

engine::ModelSpec model_from_shorthand(const std::string& name) {
    engine::ModelSpec spec;
    if (name == "logistic_regression" || name == "linear_regression") {
        spec.kind = engine::model_kind_from_name(name);
        return spec;
    }
    if (name.rfind("mlp_", 0) == 0 || name == "mlp") {
        spec.kind = engine::ModelKind::mlp;
        std::stringstream ss(name.substr(4));
        std::string part;
        while (std::getline(ss, part, '_'))
            spec.hidden_layers.push_back(std::stoul(part));
        if (spec.hidden_layers.empty()) spec.hidden_layers = {128};
        return spec;
    }
    if (name.rfind("gbdt", 0) == 0) {
        spec.kind = engine::ModelKind::gbdt;
        std::vector<int> parts;
        std::stringstream ss(name.size() > 5 ? name.substr(5) : "");
        std::string part;
        while (std::getline(ss, part, '_')) parts.push_back(std::stoi(part));
        if (parts.size() >= 1) spec.gbdt.num_trees = parts[0];
        if (parts.size() >= 2) spec.gbdt.num_bins = parts[1];
        if (parts.size() >= 3) spec.gbdt.max_depth = parts[2];
        return spec;
    }
    throw ParseError("unknown model '" + name + "'");
}

engine::ModelSpec parse_model(const json& j) {
    if (j.is_string()) return model_from_shorthand(j.get<std::string>());
    engine::ModelSpec spec;
    spec.kind = engine::model_kind_from_name(j.at("kind").get<std::string>());
    if (j.contains("hidden_layers"))
        for (const auto& w : j.at("hidden_layers"))
            spec.hidden_layers.push_back(w.get<size_t>());
    if (spec.kind == engine::ModelKind::mlp && spec.hidden_layers.empty())
        spec.hidden_layers = {128};
    if (j.contains("gbdt")) {
        const auto& g = j.at("gbdt");
        spec.gbdt.num_trees = g.value("num_trees", spec.gbdt.num_trees);
        spec.gbdt.num_bins = g.value("num_bins", spec.gbdt.num_bins);
        spec.gbdt.max_depth = g.value("max_depth", spec.gbdt.max_depth);
        spec.gbdt.learning_rate = g.value("learning_rate", spec.gbdt.learning_rate);
        spec.gbdt.lambda = g.value("lambda", spec.gbdt.lambda);
        spec.gbdt.min_gain = g.value("min_gain", spec.gbdt.min_gain);
    }
    return spec;
}

void validate_combination(ExperimentConfig& config) {
    scenario::CatalogEntry entry = scenario::catalog_info(config.scenario);

    const std::string& alg = config.algorithm;
    bool horizontal = entry.setting != scenario::Setting::vertical;
    auto kind = config.model.kind;

    auto reject = [&](const std::string& why) {
        throw IncompatibleCombination(
            alg + " + " + scenario::setting_name(entry.setting) + " + " +
            engine::model_kind_name(kind) + ": " + why +
            " (see the model-support matrix)");
    };

    if (alg == "fedavg") {
        if (!horizontal) reject("fedavg runs on horizontal scenarios only");
        if (kind == engine::ModelKind::gbdt)
            reject("fedavg averages dense parameters, not trees");
    } else if (alg == "histsecagg_gbdt") {
        if (!horizontal)
            reject("histogram aggregation is the horizontal tree protocol");
        if (kind != engine::ModelKind::gbdt) reject("requires a gbdt model");
    } else if (alg == "vertical_regression") {
        if (horizontal) reject("vertical protocol on a horizontal scenario");
        if (kind != engine::ModelKind::logistic_regression &&
            kind != engine::ModelKind::linear_regression)
            reject("vertical regression supports the regression models");
    } else if (alg == "vertical_gbdt") {
        if (horizontal) reject("vertical protocol on a horizontal scenario");
        if (kind != engine::ModelKind::gbdt) reject("requires a gbdt model");
    } else {
        throw ParseError("unknown algorithm '" + alg + "'");
    }

    // model kind vs task
    if (kind == engine::ModelKind::logistic_regression &&
        entry.task == scenario::Task::regression)
        reject("logistic regression on a regression task");
    if (kind == engine::ModelKind::linear_regression &&
        entry.task != scenario::Task::regression)
        reject("linear regression on a classification task");

    config.model.objective = entry.task;
    config.model.validate();

    const auto& t = config.training;
    if (t.rounds < 1 || t.local_epochs < 1 || t.batch_size < 1 ||
        t.learning_rate <= 0.0 || t.momentum < 0.0)
        throw ParseError("training parameters must be positive");
    if (t.clients_per_round < 0 ||
        t.clients_per_round > static_cast<int>(entry.num_clients))
        throw ParseError("clients_per_round exceeds the scenario's clients");
    if (config.repeats < 1) throw ParseError("repeats must be >= 1");
    if (config.deployment.mode == DeployMode::remote_shell) {
        if (config.deployment.hosts.empty())
            throw ParseError("remote_shell needs at least one host");
        if (config.deployment.port == 0)
            throw ParseError("remote_shell needs a fixed port");
    }
    make_engine(config.engine);  // UnknownEngine when unregistered
}

} // namespace

ExperimentConfig parse_config_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("config: ") + e.what());
    }
    ExperimentConfig config;
    try {
        config.scenario = j.at("scenario").get<std::string>();
        config.engine = j.value("engine", std::string("builtin"));
        config.algorithm = j.at("algorithm").get<std::string>();
        config.model = parse_model(j.at("model"));
        if (j.contains("training")) {
            const auto& t = j.at("training");
            config.training.rounds = t.value("rounds", config.training.rounds);
            config.training.clients_per_round =
                t.value("clients_per_round", config.training.clients_per_round);
            config.training.local_epochs =
                t.value("local_epochs", config.training.local_epochs);
            config.training.batch_size =
                t.value("batch_size", config.training.batch_size);
            config.training.learning_rate =
                t.value("learning_rate", config.training.learning_rate);
            config.training.momentum =
                t.value("momentum", config.training.momentum);
            config.training.seed = t.value("seed", config.training.seed);
        }
        if (j.contains("deployment")) {
            const auto& d = j.at("deployment");
            if (d.contains("mode"))
                config.deployment.mode =
                    deploy_mode_from_name(d.at("mode").get<std::string>());
            if (d.contains("hosts"))
                for (const auto& h : d.at("hosts"))
                    config.deployment.hosts.push_back(h.get<std::string>());
            if (d.contains("out_dir"))
                config.deployment.out_dir = d.at("out_dir").get<std::string>();
            config.deployment.port = d.value("port", config.deployment.port);
            config.deployment.shell_template =
                d.value("shell_template", config.deployment.shell_template);
            config.deployment.copy_template =
                d.value("copy_template", config.deployment.copy_template);
            config.deployment.agent_binary =
                d.value("agent_binary", config.deployment.agent_binary);
            config.deployment.timeout_s =
                d.value("timeout_s", config.deployment.timeout_s);
            config.deployment.memory_interval_ms = d.value(
                "memory_interval_ms", config.deployment.memory_interval_ms);
        }
        config.repeats = j.value("repeats", config.repeats);
        if (j.contains("cache_dir"))
            config.cache_dir = j.at("cache_dir").get<std::string>();
        config.mask_histograms = j.value("mask_histograms", false);
    } catch (const json::exception& e) {
        throw ParseError(std::string("config: ") + e.what());
    }
    validate_combination(config);
    return config;
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
    if (!fs::exists(path)) throw ParseError("no such config: " + path.string());
    return parse_config_text(read_text_file(path));
}

std::string effective_config_text(const ExperimentConfig& config) {
    ordered_json j;
    j["scenario"] = config.scenario;
    j["engine"] = config.engine;
    j["algorithm"] = config.algorithm;
    ordered_json model;
    model["kind"] = engine::model_kind_name(config.model.kind);
    if (config.model.kind == engine::ModelKind::mlp)
        model["hidden_layers"] = config.model.hidden_layers;
    if (config.model.kind == engine::ModelKind::gbdt) {
        model["gbdt"] = {{"num_trees", config.model.gbdt.num_trees},
                         {"num_bins", config.model.gbdt.num_bins},
                         {"max_depth", config.model.gbdt.max_depth},
                         {"learning_rate", config.model.gbdt.learning_rate},
                         {"lambda", config.model.gbdt.lambda},
                         {"min_gain", config.model.gbdt.min_gain}};
    }
    j["model"] = model;
    j["training"] = {{"rounds", config.training.rounds},
                     {"clients_per_round", config.training.clients_per_round},
                     {"local_epochs", config.training.local_epochs},
                     {"batch_size", config.training.batch_size},
                     {"learning_rate", config.training.learning_rate},
                     {"momentum", config.training.momentum},
                     {"seed", config.training.seed}};
    j["deployment"] = {
        {"mode", deploy_mode_name(config.deployment.mode)},
        {"hosts", config.deployment.hosts},
        {"out_dir", config.deployment.out_dir.string()},
        {"port", config.deployment.port},
        {"shell_template", config.deployment.shell_template},
        {"copy_template", config.deployment.copy_template},
        {"agent_binary", config.deployment.agent_binary},
        {"timeout_s", config.deployment.timeout_s},
        {"memory_interval_ms", config.deployment.memory_interval_ms}};
    j["repeats"] = config.repeats;
    j["cache_dir"] = config.cache_dir.string();
    j["mask_histograms"] = config.mask_histograms;
    return j.dump(2) + "\n";
}

std::filesystem::path resolve_cache_dir(const ExperimentConfig& config) {
    if (!config.cache_dir.empty()) return config.cache_dir;
    if (const char* env = std::getenv("FEDBENCH_CACHE_DIR")) return env;
    if (const char* home = std::getenv("HOME"))
        return fs::path(home) / ".cache" / "fedbench";
    return fs::temp_directory_path() / "fedbench-cache";
}

// --- memory sampling ------------------------------------------------------------

int64_t read_rss_bytes(pid_t pid) {
    std::ifstream in("/proc/" + std::to_string(pid) + "/statm");
    if (!in) return -1;
    long size = 0, resident = 0;
    in >> size >> resident;
    if (!in) return -1;
    return static_cast<int64_t>(resident) * sysconf(_SC_PAGESIZE);
}

MemorySamplerHandle::MemorySamplerHandle(std::filesystem::path out_file,
                                         int interval_ms)
    : out_file_(std::move(out_file)), interval_ms_(interval_ms) {
    if (interval_ms_ < 10) throw InvalidSpec("sampling interval must be >= 10 ms");
    out_.open(out_file_, std::ios::app);
    if (!out_) throw IoFailure("cannot open " + out_file_.string());
    thread_ = std::thread([this] { loop(); });
}

MemorySamplerHandle::~MemorySamplerHandle() { stop(); }

void MemorySamplerHandle::add_pid(pid_t pid) {
    std::lock_guard<std::mutex> lock(mu_);
    if (std::find(pids_.begin(), pids_.end(), pid) == pids_.end())
        pids_.push_back(pid);
    take_sample_locked();  // short-lived processes get at least one sample
}

void MemorySamplerHandle::remove_pid(pid_t pid) {
    std::lock_guard<std::mutex> lock(mu_);
    std::erase(pids_, pid);
}

void MemorySamplerHandle::stop() {
    bool expected = false;
    if (!stop_.compare_exchange_strong(expected, true)) {
        if (thread_.joinable()) thread_.join();
        return;
    }
    if (thread_.joinable()) thread_.join();
    std::lock_guard<std::mutex> lock(mu_);
    out_.close();
}

void MemorySamplerHandle::take_sample_locked() {
    MemorySample sample;
    sample.timestamp = wall_clock_seconds();
    for (pid_t pid : pids_) {
        int64_t rss = read_rss_bytes(pid);
        if (rss >= 0) sample.rss_bytes[pid] = rss;
        // gone processes simply stop contributing
    }
    ordered_json j;
    j["timestamp"] = sample.timestamp;
    ordered_json rss = ordered_json::object();
    for (const auto& [pid, bytes] : sample.rss_bytes)
        rss[std::to_string(pid)] = bytes;
    j["rss"] = rss;
    out_ << j.dump() << '\n';
    out_.flush();
    samples_.push_back(std::move(sample));
}

void MemorySamplerHandle::loop() {
    while (!stop_.load()) {
        {
            std::lock_guard<std::mutex> lock(mu_);
            take_sample_locked();
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(interval_ms_));
    }
}

std::vector<MemorySample> MemorySamplerHandle::samples_so_far() const {
    std::lock_guard<std::mutex> lock(mu_);
    return samples_;
}

int64_t peak_total_rss(std::span<const MemorySample> samples) {
    int64_t peak = 0;
    for (const auto& s : samples) {
        int64_t total = 0;
        for (const auto& [pid, bytes] : s.rss_bytes) total += bytes;
        peak = std::max(peak, total);
    }
    return peak;
}

// --- engine registry --------------------------------------------------------------

namespace {

struct BuiltinEngine final : Engine {
    protocol::AggregatorResult run_aggregator(
        std::span<transport::Endpoint* const> clients,
        const scenario::Scenario& s, const protocol::Session& session,
        eventlog::Logger* log) override {
        return protocol::run_aggregator(clients, s, session, log);
    }
    void run_client(transport::Endpoint& server, const scenario::Scenario& s,
                    uint32_t client_id, const protocol::Session& session,
                    eventlog::Logger* log) override {
        protocol::run_client(server, s, client_id, session, log);
    }
};

std::map<std::string, std::function<std::unique_ptr<Engine>()>>& registry() {
    static std::map<std::string, std::function<std::unique_ptr<Engine>()>> reg{
        {"builtin", [] { return std::make_unique<BuiltinEngine>(); }}};
    return reg;
}

} // namespace

void register_engine(const std::string& name,
                     std::function<std::unique_ptr<Engine>()> factory) {
    registry()[name] = std::move(factory);
}

std::unique_ptr<Engine> make_engine(const std::string& name) {
    auto it = registry().find(name);
    if (it == registry().end())
        throw UnknownEngine("'" + name + "' is not a registered engine");
    return it->second();
}

std::vector<std::string> engine_names() {
    std::vector<std::string> names;
    for (const auto& [name, _] : registry()) names.push_back(name);
    return names;
}

// --- process management -----------------------------------------------------------

static std::atomic<bool> g_interrupted{false};

void request_interrupt() { g_interrupted.store(true); }

namespace {

std::string make_run_id() {
    auto now = static_cast<uint64_t>(wall_clock_seconds() * 1000.0);
    std::random_device rd;
    char buf[64];
    std::snprintf(buf, sizeof buf, "run_%llu_%04x",
                  static_cast<unsigned long long>(now), rd() & 0xffff);
    return buf;
}

std::string self_executable() {
    char buf[4096];
    ssize_t n = ::readlink("/proc/self/exe", buf, sizeof buf - 1);
    if (n <= 0) throw SpawnFailure("cannot resolve /proc/self/exe");
    buf[n] = '\0';
    return buf;
}

std::string replace_all(std::string text, const std::string& from,
                        const std::string& to) {
    size_t pos = 0;
    while ((pos = text.find(from, pos)) != std::string::npos) {
        text.replace(pos, from.size(), to);
        pos += to.size();
    }
    return text;
}

std::string shell_quote(const std::string& s) {
    return "'" + replace_all(s, "'", "'\\''") + "'";
}

pid_t spawn_argv(const std::vector<std::string>& argv) {
    std::vector<char*> raw;
    raw.reserve(argv.size() + 1);
    for (const auto& a : argv) raw.push_back(const_cast<char*>(a.c_str()));
    raw.push_back(nullptr);
    pid_t pid = ::fork();
    if (pid < 0) throw SpawnFailure(std::strerror(errno));
    if (pid == 0) {
        ::execv(raw[0], raw.data());
        std::fprintf(stderr, "execv %s: %s\n", raw[0], std::strerror(errno));
        ::_exit(127);
    }
    return pid;
}

pid_t spawn_shell(const std::string& command) {
    return spawn_argv({"/bin/sh", "-c", command});
}

struct AgentInvocation {
    std::string role;
    uint32_t index = 0;
    std::string host;  // empty = local
};

pid_t spawn_agent(const ExperimentConfig& config, const RunHandle& handle,
                  const AgentInvocation& inv, int repeat,
                  const fs::path& repeat_dir, const std::string& listen_addr,
                  const std::string& connect_addr, const fs::path& port_file) {
    std::string binary = config.deployment.agent_binary.empty()
                             ? self_executable()
                             : config.deployment.agent_binary;
    std::vector<std::string> argv{
        binary,          "agent",
        "--role",        inv.role,
        "--index",       std::to_string(inv.index),
        "--config",      (handle.run_dir / "config.json").string(),
        "--out",         repeat_dir.string(),
        "--repeat",      std::to_string(repeat)};
    if (!listen_addr.empty()) {
        argv.push_back("--listen");
        argv.push_back(listen_addr);
    }
    if (!connect_addr.empty()) {
        argv.push_back("--connect");
        argv.push_back(connect_addr);
    }
    if (!port_file.empty()) {
        argv.push_back("--port-file");
        argv.push_back(port_file.string());
    }
    if (inv.host.empty()) return spawn_argv(argv);

    std::string cmd;
    for (const auto& a : argv) {
        if (!cmd.empty()) cmd += " ";
        cmd += shell_quote(a);
    }
    std::string rendered =
        replace_all(replace_all(config.deployment.shell_template, "{host}",
                                shell_quote(inv.host)),
                    "{cmd}", cmd);
    return spawn_shell(rendered);
}

bool pid_alive(pid_t pid) { return ::kill(pid, 0) == 0; }

void kill_processes(std::vector<ProcessRecord>& processes) {
    for (auto& p : processes)
        if (p.pid > 0 && pid_alive(p.pid)) ::kill(p.pid, SIGTERM);
    auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(3);
    for (auto& p : processes) {
        if (p.pid <= 0) continue;
        for (;;) {
            int status = 0;
            pid_t r = ::waitpid(p.pid, &status, WNOHANG);
            if (r == p.pid || (r < 0 && errno == ECHILD)) break;
            if (std::chrono::steady_clock::now() > deadline) {
                ::kill(p.pid, SIGKILL);
                ::waitpid(p.pid, &status, 0);
                break;
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(20));
        }
        p.pid = -1;
    }
}

std::string host_for(const ExperimentConfig& config, size_t slot) {
    if (config.deployment.mode != DeployMode::remote_shell) return "";
    const auto& hosts = config.deployment.hosts;
    return hosts[slot % hosts.size()];
}

void start_repeat(RunHandle& handle, int repeat) {
    const ExperimentConfig& config = handle.config;
    scenario::CatalogEntry entry = scenario::catalog_info(config.scenario);
    fs::path repeat_dir = handle.run_dir / ("repeat_" + std::to_string(repeat));
    fs::create_directories(repeat_dir);

    bool remote = config.deployment.mode == DeployMode::remote_shell;
    std::string agg_host = host_for(config, 0);
    std::string bind_host = remote ? "0.0.0.0" : "127.0.0.1";
    std::string listen_addr =
        bind_host + ":" + std::to_string(config.deployment.port);
    fs::path port_file;
    if (!remote && config.deployment.port == 0)
        port_file = repeat_dir / ".agg_port";

    AgentInvocation agg{"aggregator", 0, agg_host};
    pid_t agg_pid = spawn_agent(config, handle, agg, repeat, repeat_dir,
                                listen_addr, "", port_file);
    handle.processes.push_back({agg_pid, "aggregator", 0, agg_host});

    // Learn the aggregator's port before starting any client.
    uint16_t port = config.deployment.port;
    if (!port_file.empty()) {
        auto deadline =
            std::chrono::steady_clock::now() + std::chrono::seconds(20);
        for (;;) {
            if (fs::exists(port_file)) {
                std::string text = read_text_file(port_file);
                if (!text.empty() && text.back() == '\n') {
                    port = static_cast<uint16_t>(std::stoi(text));
                    break;
                }
            }
            int status = 0;
            if (::waitpid(agg_pid, &status, WNOHANG) == agg_pid) {
                handle.processes.back().pid = -1;
                kill_processes(handle.processes);
                int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
                if (code == 10)
                    throw PortConflict("aggregator could not bind its port");
                throw SpawnFailure("aggregator exited with code " +
                                   std::to_string(code) + " before binding");
            }
            if (std::chrono::steady_clock::now() > deadline) {
                kill_processes(handle.processes);
                throw SpawnFailure("timed out waiting for the aggregator port");
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(20));
        }
    } else {
        // Fixed port: give the remote/pinned aggregator a moment and fail
        // fast if its process is already gone.
        auto deadline =
            std::chrono::steady_clock::now() + std::chrono::seconds(2);
        while (std::chrono::steady_clock::now() < deadline) {
            int status = 0;
            if (::waitpid(agg_pid, &status, WNOHANG) == agg_pid) {
                handle.processes.back().pid = -1;
                kill_processes(handle.processes);
                int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
                if (code == 10)
                    throw PortConflict("aggregator could not bind its port");
                if (remote)
                    throw HostUnreachable("aggregator host '" + agg_host +
                                          "' failed (exit " +
                                          std::to_string(code) + ")");
                throw SpawnFailure("aggregator exited with code " +
                                   std::to_string(code) + " before binding");
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(50));
        }
    }

    std::string connect_host = remote && !agg_host.empty() ? agg_host
                                                           : "127.0.0.1";
    std::string connect_addr = connect_host + ":" + std::to_string(port);
    for (uint32_t k = 0; k < entry.num_clients; ++k) {
        AgentInvocation client{"client", k, host_for(config, k + 1)};
        pid_t pid = spawn_agent(config, handle, client, repeat, repeat_dir, "",
                                connect_addr, "");
        handle.processes.push_back({pid, "client", k, client.host});
    }

    if (handle.sampler)
        for (const auto& p : handle.processes)
            if (p.pid > 0) handle.sampler->add_pid(p.pid);

    handle.log_paths.push_back(repeat_dir / "aggregator_0.log");
    for (uint32_t k = 0; k < entry.num_clients; ++k)
        handle.log_paths.push_back(
            repeat_dir / ("client_" + std::to_string(k + 1) + ".log"));
}

// Waits for the current repeat's processes; returns false on any failure.
bool wait_repeat(RunHandle& handle) {
    auto deadline = std::chrono::steady_clock::now() +
                    std::chrono::seconds(handle.config.deployment.timeout_s);
    bool ok = true;
    for (;;) {
        bool any_alive = false;
        for (auto& p : handle.processes) {
            if (p.pid <= 0) continue;
            int status = 0;
            pid_t r = ::waitpid(p.pid, &status, WNOHANG);
            if (r == p.pid) {
                if (handle.sampler) handle.sampler->remove_pid(p.pid);
                int code = WIFEXITED(status) ? WEXITSTATUS(status) : 128;
                if (code != 0) {
                    ok = false;
                    handle.failure = p.role + " " + std::to_string(p.index) +
                                     " exited with code " + std::to_string(code);
                }
                p.pid = -1;
            } else if (r == 0) {
                any_alive = true;
            } else {
                p.pid = -1;
            }
        }
        if (!any_alive) break;
        if (!ok || g_interrupted.load() ||
            std::chrono::steady_clock::now() > deadline) {
            kill_processes(handle.processes);
            if (ok && g_interrupted.load()) {
                ok = false;
                handle.failure = "interrupted";
            } else if (ok) {
                ok = false;
                handle.failure = "timed out after " +
                                 std::to_string(
                                     handle.config.deployment.timeout_s) +
                                 " s";
            }
            break;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    return ok;
}

void run_all_in_process(RunHandle& handle) {
    const ExperimentConfig& config = handle.config;
    scenario::Scenario s =
        scenario::load_scenario(config.scenario, resolve_cache_dir(config));

    handle.sampler = std::make_shared<MemorySamplerHandle>(
        handle.run_dir / "memory.jsonl", config.deployment.memory_interval_ms);
    handle.sampler->add_pid(::getpid());

    for (int repeat = 0; repeat < config.repeats; ++repeat) {
        fs::path repeat_dir =
            handle.run_dir / ("repeat_" + std::to_string(repeat));
        fs::create_directories(repeat_dir);
        engine::TrainConfig train = config.training;
        train.seed = config.training.seed + static_cast<uint64_t>(repeat);
        protocol::Session session = protocol::make_session(
            s, config.model, train, config.algorithm, config.mask_histograms);

        std::vector<std::unique_ptr<eventlog::Logger>> loggers;
        std::vector<eventlog::Logger*> raw;
        loggers.push_back(std::make_unique<eventlog::Logger>(
            repeat_dir / "aggregator_0.log", eventlog::AgentType::aggregator));
        for (uint32_t i = 1; i <= session.total_clients; ++i)
            loggers.push_back(std::make_unique<eventlog::Logger>(
                repeat_dir / ("client_" + std::to_string(i) + ".log"),
                eventlog::AgentType::client));
        for (auto& l : loggers) {
            raw.push_back(l.get());
            handle.log_paths.push_back(l->path());
        }

        auto result = protocol::run_in_process(s, session, raw);
        engine::save_checkpoint(result.aggregator.params,
                                repeat_dir / "model.json");
        handle.metric_values.push_back(result.aggregator.metric_value);
        for (auto& l : loggers) l->close();
    }
    handle.sampler->stop();
    handle.status = RunStatus::finished;
}

} // namespace

RunHandle launch(const ExperimentConfig& config) {
    g_interrupted.store(false);  // stale interrupts do not poison new runs
    RunHandle handle;
    handle.config = config;
    handle.run_id = make_run_id();
    handle.run_dir = config.deployment.out_dir / handle.run_id;
    fs::create_directories(handle.run_dir);
    write_text_file(handle.run_dir / "config.json",
                    effective_config_text(config));

    if (config.deployment.mode == DeployMode::in_process) {
        run_all_in_process(handle);
        return handle;
    }

    // Pinned ports are probed up front so the conflict surfaces before any
    // client process exists.
    if (config.deployment.mode == DeployMode::local_processes &&
        config.deployment.port != 0) {
        try {
            transport::TcpListener probe(
                "127.0.0.1:" + std::to_string(config.deployment.port));
        } catch (const BindFailure& e) {
            throw PortConflict(e.what());
        }
    }

    handle.sampler = std::make_shared<MemorySamplerHandle>(
        handle.run_dir / "memory.jsonl", config.deployment.memory_interval_ms);
    start_repeat(handle, 0);
    handle.next_repeat = 1;
    handle.status = RunStatus::running;
    return handle;
}

void wait(RunHandle& handle) {
    if (handle.status != RunStatus::running) return;
    bool ok = wait_repeat(handle);
    while (ok && handle.next_repeat < handle.config.repeats) {
        start_repeat(handle, handle.next_repeat);
        handle.next_repeat++;
        ok = wait_repeat(handle);
    }
    if (handle.sampler) handle.sampler->stop();
    handle.status = ok ? RunStatus::finished : RunStatus::failed;
}

void terminate(RunHandle& handle) {
    kill_processes(handle.processes);
    if (handle.sampler) handle.sampler->stop();
    if (handle.status == RunStatus::running) {
        handle.status = RunStatus::failed;
        if (handle.failure.empty()) handle.failure = "terminated";
    }
}

std::filesystem::path collect(RunHandle& handle) {
    std::vector<std::string> missing;
    for (const auto& path : handle.log_paths) {
        if (fs::exists(path)) continue;
        // Remote logs are fetched through the copy template.
        std::string host;
        for (const auto& p : handle.processes)
            if (!p.host.empty()) host = p.host;
        if (!host.empty()) {
            std::string cmd = replace_all(
                replace_all(
                    replace_all(handle.config.deployment.copy_template, "{host}",
                                shell_quote(host)),
                    "{path}", shell_quote(path.string())),
                "{local}", shell_quote(path.string()));
            pid_t pid = spawn_shell(cmd);
            int status = 0;
            ::waitpid(pid, &status, 0);
        }
        if (!fs::exists(path)) missing.push_back(path.string());
    }

    ordered_json meta;
    meta["run_id"] = handle.run_id;
    meta["status"] = handle.status == RunStatus::finished ? "finished"
                     : handle.status == RunStatus::failed ? "failed"
                                                          : "running";
    meta["failure"] = handle.failure;
    meta["missing_logs"] = missing;
    ordered_json procs = ordered_json::array();
    for (const auto& p : handle.processes)
        procs.push_back({{"role", p.role},
                         {"index", p.index},
                         {"host", p.host.empty() ? "local" : p.host}});
    meta["processes"] = procs;
    write_text_file(handle.run_dir / "collection_meta.json",
                    meta.dump(2) + "\n");
    return handle.run_dir;
}

// --- agent entry ----------------------------------------------------------------

int run_agent(const AgentArgs& args) {
    ExperimentConfig config = parse_config(args.config_path);
    config.training.seed += static_cast<uint64_t>(args.repeat);

    scenario::Scenario s =
        scenario::load_scenario(config.scenario, resolve_cache_dir(config));
    protocol::Session session =
        protocol::make_session(s, config.model, config.training,
                               config.algorithm, config.mask_histograms);
    auto engine_impl = make_engine(config.engine);

    if (args.role == "aggregator") {
        std::unique_ptr<transport::TcpListener> listener;
        try {
            listener = std::make_unique<transport::TcpListener>(
                args.listen_addr, transport::PeerId{transport::Role::aggregator,
                                                    0});
        } catch (const BindFailure& e) {
            std::fprintf(stderr, "%s\n", e.what());
            return 10;  // recognized by the launcher as a port conflict
        }
        if (!args.port_file.empty())
            write_text_file(args.port_file,
                            std::to_string(listener->port()) + "\n");

        eventlog::Logger log(args.out_dir / "aggregator_0.log",
                             eventlog::AgentType::aggregator);
        std::vector<transport::EndpointPtr> owned(session.total_clients);
        for (uint32_t i = 0; i < session.total_clients; ++i) {
            auto ep = listener->accept(std::chrono::seconds(30));
            if (ep->peer().role != transport::Role::client ||
                ep->peer().index < 1 ||
                ep->peer().index > session.total_clients)
                throw MalformedHeader("unexpected peer identity");
            uint32_t slot = ep->peer().index - 1;
            ep->attach_logger(&log);
            owned[slot] = std::move(ep);
        }
        std::vector<transport::Endpoint*> endpoints;
        for (auto& ep : owned) endpoints.push_back(ep.get());

        scenario::Scenario working =
            s.setting == scenario::Setting::vertical ? scenario::align_vertical(s)
                                                     : s;
        auto result =
            engine_impl->run_aggregator(endpoints, working, session, &log);
        engine::save_checkpoint(result.params, args.out_dir / "model.json");
        log.close();
        return 0;
    }

    if (args.role != "client") {
        std::fprintf(stderr, "unknown agent role '%s'\n", args.role.c_str());
        return 2;
    }
    uint32_t client_id = session.client_ids.at(args.index);
    eventlog::Logger log(
        args.out_dir / ("client_" + std::to_string(args.index + 1) + ".log"),
        eventlog::AgentType::client);
    if (const char* crash = std::getenv("FEDBENCH_TEST_CLIENT_EXIT")) {
        if (std::stoul(crash) == args.index) {
            log.emit("training", eventlog::Action::start);
            ::_exit(3);  // test hook: die with a partial log on disk
        }
    }
    auto ep = transport::tcp_connect(
        args.connect_addr,
        transport::PeerId{transport::Role::client,
                          static_cast<uint16_t>(args.index + 1)},
        std::chrono::seconds(20));
    ep->attach_logger(&log);
    scenario::Scenario working =
        s.setting == scenario::Setting::vertical ? scenario::align_vertical(s)
                                                 : s;
    engine_impl->run_client(*ep, working, client_id, session, &log);
    log.close();
    return 0;
}

} // namespace fedbench::orchestrator
