#include <csignal>
#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "fedbench/advisor.hpp"
#include "fedbench/analyzer.hpp"
#include "fedbench/errors.hpp"
#include "fedbench/orchestrator.hpp"
#include "fedbench/scenario.hpp"
#include "fedbench/util.hpp"

namespace fb = fedbench;

namespace {

void handle_signal(int) { fb::orchestrator::request_interrupt(); }

int cmd_run(const std::string& config_path, const std::string& out_dir,
            const std::string& cache_dir, bool print_effective, bool json_out) {
    fb::orchestrator::ExperimentConfig config =
        fb::orchestrator::parse_config(config_path);
    if (!out_dir.empty()) config.deployment.out_dir = out_dir;
    if (!cache_dir.empty()) config.cache_dir = cache_dir;
    if (print_effective) {
        std::cout << fb::orchestrator::effective_config_text(config);
        return 0;
    }

    std::signal(SIGINT, handle_signal);
    std::signal(SIGTERM, handle_signal);

    // Warm the scenario cache up front so every agent finds it ready.
    fb::scenario::load_scenario(config.scenario,
                                fb::orchestrator::resolve_cache_dir(config));

    auto handle = fb::orchestrator::launch(config);
    fb::orchestrator::wait(handle);
    auto run_dir = fb::orchestrator::collect(handle);

    auto report = fb::analyzer::analyze(run_dir);
    fb::write_text_file(run_dir / "report.json",
                        fb::analyzer::report_to_json(report));
    if (json_out) {
        std::cout << fb::analyzer::report_to_json(report);
    } else {
        std::cout << fb::analyzer::render_report(report);
        std::cout << "report     : " << (run_dir / "report.json").string()
                  << "\n";
    }
    if (handle.status != fb::orchestrator::RunStatus::finished) {
        std::cerr << "run failed: " << handle.failure << "\n";
        return 1;
    }
    return 0;
}

int cmd_analyze(const std::string& run_dir, bool json_out) {
    auto report = fb::analyzer::analyze(run_dir);
    fb::write_text_file(std::filesystem::path(run_dir) / "report.json",
                        fb::analyzer::report_to_json(report));
    if (json_out) {
        std::cout << fb::analyzer::report_to_json(report);
    } else {
        std::cout << fb::analyzer::render_report(report);
    }
    return 0;
}

int cmd_compare(const std::vector<std::string>& run_dirs, bool json_out) {
    std::vector<fb::analyzer::Report> reports;
    for (const auto& dir : run_dirs)
        reports.push_back(fb::analyzer::analyze(dir));
    auto table = fb::analyzer::compare(reports);
    std::cout << (json_out ? fb::analyzer::comparison_to_json(table)
                           : fb::analyzer::render_comparison(table));
    return 0;
}

int cmd_fetch(const std::string& name, const std::string& cache_dir) {
    std::filesystem::path cache = cache_dir;
    if (cache.empty()) {
        fb::orchestrator::ExperimentConfig dummy;
        cache = fb::orchestrator::resolve_cache_dir(dummy);
    }
    auto s = fb::scenario::load_scenario(name, cache);
    std::cout << "scenario : " << s.name << "\n";
    std::cout << "setting  : " << fb::scenario::setting_name(s.setting) << "\n";
    std::cout << "task     : " << fb::scenario::task_name(s.task) << "\n";
    std::cout << "metric   : " << fb::scenario::metric_name(s.metric) << "\n";
    std::cout << "clients  : " << s.num_clients() << "\n";
    std::cout << "samples  : " << s.total_samples() << "\n";
    for (const auto& c : s.clients)
        std::cout << "  client " << c.client_id << ": " << c.train.num_rows()
                  << " train / " << c.test.num_rows() << " test rows, "
                  << c.train.num_features << " features"
                  << (c.train.labels ? " (labels)" : "") << "\n";
    std::cout << "cached at " << (cache / s.name).string() << "\n";
    return 0;
}

int cmd_scenarios() {
    for (const auto& name : fb::scenario::catalog_names()) {
        auto info = fb::scenario::catalog_info(name);
        std::cout << name << "  [" << fb::scenario::setting_name(info.setting)
                  << ", " << fb::scenario::metric_name(info.metric) << ", "
                  << info.num_clients << " clients"
                  << (info.fetch_required ? ", requires fetch" : "") << "]\n";
    }
    return 0;
}

int cmd_advise(const std::string& requirements_path, const std::string& matrix,
               bool json_out) {
    fb::advisor::FeatureMatrix m = matrix.empty()
                                       ? fb::advisor::shipped_matrix()
                                       : fb::advisor::load_matrix(matrix);
    auto req = fb::advisor::requirement_from_json(
        fb::read_text_file(requirements_path));
    auto selection = fb::advisor::select(req, m);
    std::cout << (json_out ? fb::advisor::selection_to_json(selection)
                           : fb::advisor::render_selection(selection));
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"fedbench - federated learning benchmark toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_dir, cache_dir, run_dir, matrix_path;
    std::string requirements_path, scenario_name;
    std::vector<std::string> compare_dirs;
    bool print_effective = false, json_out = false;

    auto* run = app.add_subcommand("run",
                                   "launch, supervise, collect and analyze an "
                                   "experiment from a config file");
    run->add_option("config", config_path, "experiment config (JSON)")
        ->required();
    run->add_option("--out-dir", out_dir, "override deployment.out_dir");
    run->add_option("--cache-dir", cache_dir, "override the scenario cache");
    run->add_flag("--print-effective-config", print_effective,
                  "dump the defaulted config and exit");
    run->add_flag("--json", json_out, "print the report as JSON");

    auto* analyze = app.add_subcommand("analyze",
                                       "produce the model/system report for a "
                                       "collected run directory");
    analyze->add_option("run_dir", run_dir, "run directory")->required();
    analyze->add_flag("--json", json_out, "print the report as JSON");

    auto* compare = app.add_subcommand("compare",
                                       "compare reports from several runs of "
                                       "the same scenario");
    compare->add_option("run_dirs", compare_dirs, "two or more run directories")
        ->expected(-2);
    compare->add_flag("--json", json_out, "print the table as JSON");

    auto* fetch = app.add_subcommand("fetch",
                                     "download/materialize a scenario into "
                                     "the cache and print its layout");
    fetch->add_option("scenario", scenario_name, "catalog scenario name")
        ->required();
    fetch->add_option("--cache-dir", cache_dir, "cache directory");

    app.add_subcommand("scenarios", "list the scenario catalog");

    auto* advise = app.add_subcommand("advise",
                                      "rank FL frameworks for a requirements "
                                      "file using the shipped feature matrix");
    advise->add_option("requirements", requirements_path,
                       "requirements file (JSON)")
        ->required();
    advise->add_option("--matrix", matrix_path, "alternative feature matrix");
    advise->add_flag("--json", json_out, "print the ranking as JSON");

    // internal: spawned for every aggregator/client process
    fb::orchestrator::AgentArgs agent_args;
    std::string agent_config, agent_out, agent_port_file;
    auto* agent = app.add_subcommand("agent", "");
    agent->group("");  // hidden
    agent->add_option("--role", agent_args.role)->required();
    agent->add_option("--index", agent_args.index)->required();
    agent->add_option("--config", agent_config)->required();
    agent->add_option("--out", agent_out)->required();
    agent->add_option("--repeat", agent_args.repeat);
    agent->add_option("--listen", agent_args.listen_addr);
    agent->add_option("--connect", agent_args.connect_addr);
    agent->add_option("--port-file", agent_port_file);

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed())
            return cmd_run(config_path, out_dir, cache_dir, print_effective,
                           json_out);
        if (analyze->parsed()) return cmd_analyze(run_dir, json_out);
        if (compare->parsed()) return cmd_compare(compare_dirs, json_out);
        if (fetch->parsed()) return cmd_fetch(scenario_name, cache_dir);
        if (app.get_subcommand("scenarios")->parsed()) return cmd_scenarios();
        if (advise->parsed())
            return cmd_advise(requirements_path, matrix_path, json_out);
        if (agent->parsed()) {
            agent_args.config_path = agent_config;
            agent_args.out_dir = agent_out;
            agent_args.port_file = agent_port_file;
            return fb::orchestrator::run_agent(agent_args);
        }
    } catch (const fb::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
