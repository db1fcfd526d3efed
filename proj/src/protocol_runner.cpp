#include <exception>
#include <thread>

#include "fedbench/errors.hpp"
#include "fedbench/protocol.hpp"

namespace fedbench::protocol {

using eventlog::Action;

AggregatorResult run_aggregator(std::span<transport::Endpoint* const> clients,
                                const scenario::Scenario& s,
                                const Session& session, eventlog::Logger* log,
                                const RoundHook& on_round) {
    if (log) log->emit("training", Action::start);
    engine::ModelParams params;
    if (session.algorithm == "fedavg") {
        params = fedavg_aggregator(clients, session, log, on_round);
    } else if (session.algorithm == "histsecagg_gbdt") {
        params = histsecagg_aggregator(clients, session, log);
    } else if (session.algorithm == "vertical_regression") {
        params = vertical_regression_aggregator(clients, session, log);
    } else if (session.algorithm == "vertical_gbdt") {
        params = vertical_gbdt_aggregator(clients, session, log);
    } else {
        throw IncompatibleCombination("unknown algorithm '" + session.algorithm +
                                      "'");
    }
    if (log) log->emit("training", Action::end);

    scenario::DatasetTable test = scenario::global_test_view(s);
    if (log) log->emit("model_evaluation", Action::start);
    auto preds = engine::predict(params, test.features, test.num_rows(),
                                 test.num_features);
    double value = scenario::evaluate(preds, *test.labels, s.metric);
    double display = s.metric == scenario::Metric::mse ? value : value * 100.0;
    std::string metric = scenario::metric_name(s.metric);
    if (log)
        log->emit("model_evaluation", Action::end,
                  {{metric, eventlog::MetricValue(display)}});

    AggregatorResult result;
    result.params = std::move(params);
    result.metric_name = metric;
    result.metric_value = display;
    return result;
}

void run_client(transport::Endpoint& server, const scenario::Scenario& s,
                uint32_t client_id, const Session& session,
                eventlog::Logger* log) {
    const scenario::ClientPartition& slice = s.client(client_id);
    if (log) log->emit("training", Action::start);
    if (session.algorithm == "fedavg") {
        fedavg_client(server, client_id, slice.train, session, log);
    } else if (session.algorithm == "histsecagg_gbdt") {
        histsecagg_client(server, client_id, slice.train, session, log);
    } else if (session.algorithm == "vertical_regression") {
        vertical_regression_party(server, client_id, slice, session, log);
    } else if (session.algorithm == "vertical_gbdt") {
        vertical_gbdt_party(server, client_id, slice, session, log);
    } else {
        throw IncompatibleCombination("unknown algorithm '" + session.algorithm +
                                      "'");
    }
    if (log) log->emit("training", Action::end);
}

InProcessResult run_in_process(const scenario::Scenario& s,
                               const Session& session,
                               std::span<eventlog::Logger* const> loggers,
                               const RoundHook& on_round) {
    scenario::Scenario working =
        s.setting == scenario::Setting::vertical ? scenario::align_vertical(s)
                                                 : s;
    uint32_t n = session.total_clients;
    transport::InProcessHub hub(static_cast<int>(n));

    auto logger_at = [&](size_t i) -> eventlog::Logger* {
        return i < loggers.size() ? loggers[i] : nullptr;
    };

    std::vector<transport::EndpointPtr> agg_eps;
    std::vector<transport::Endpoint*> agg_raw;
    for (uint32_t i = 1; i <= n; ++i) {
        auto ep = hub.aggregator_endpoint(static_cast<uint16_t>(i));
        ep->attach_logger(logger_at(0));
        agg_raw.push_back(ep.get());
        agg_eps.push_back(std::move(ep));
    }

    std::vector<std::exception_ptr> client_errors(n);
    std::vector<std::thread> threads;
    threads.reserve(n);
    for (uint32_t i = 0; i < n; ++i) {
        uint32_t client_id = session.client_ids[i];
        eventlog::Logger* log = logger_at(i + 1);
        threads.emplace_back([&, i, client_id, log] {
            try {
                auto ep = hub.client_endpoint(static_cast<uint16_t>(i + 1));
                ep->attach_logger(log);
                run_client(*ep, working, client_id, session, log);
            } catch (...) {
                client_errors[i] = std::current_exception();
            }
        });
    }

    InProcessResult result;
    std::exception_ptr agg_error;
    try {
        result.aggregator =
            run_aggregator(agg_raw, working, session, logger_at(0), on_round);
    } catch (...) {
        agg_error = std::current_exception();
    }
    for (auto& ep : agg_eps) ep->close();
    for (auto& t : threads) t.join();
    if (agg_error) std::rethrow_exception(agg_error);
    for (auto& err : client_errors)
        if (err) std::rethrow_exception(err);

    result.transport_bytes = hub.counter().bytes.load();
    result.transport_frames = hub.counter().frames.load();
    result.payload_sizes = hub.payload_sizes();
    return result;
}

} // namespace fedbench::protocol
