#include <algorithm>

#include "fedbench/errors.hpp"
#include "fedbench/protocol.hpp"
#include "fedbench/util.hpp"

namespace fedbench::protocol {

using engine::ClientUpdate;
using engine::ModelParams;
using eventlog::Action;
using transport::Frame;
using transport::MsgType;

uint64_t round_client_seed(uint64_t seed, int round, uint32_t client_id) {
    return mix_seed(seed, 0x726f756e64ULL, static_cast<uint64_t>(round),
                    client_id);
}

uint64_t vertical_round_seed(uint64_t seed, int round) {
    return mix_seed(seed, 0x76657274ULL, static_cast<uint64_t>(round));
}

Session make_session(const scenario::Scenario& s, const engine::ModelSpec& model,
                     const engine::TrainConfig& train,
                     const std::string& algorithm, bool mask_histograms) {
    Session session;
    session.algorithm = algorithm;
    session.model = model;
    session.model.objective = s.task;
    session.train = train;
    session.task = s.task;
    session.num_classes = s.num_classes;
    session.num_features = s.total_features();
    session.total_clients = static_cast<uint32_t>(s.num_clients());
    if (s.vertical_split) session.label_party = s.vertical_split->label_party;
    std::vector<const scenario::ClientPartition*> ordered;
    for (const auto& c : s.clients) ordered.push_back(&c);
    std::sort(ordered.begin(), ordered.end(),
              [](auto* a, auto* b) { return a->client_id < b->client_id; });
    for (const auto* c : ordered) {
        session.client_ids.push_back(c->client_id);
        session.party_feature_counts.push_back(c->train.num_features);
    }
    session.mask_histograms = mask_histograms;
    return session;
}

ModelParams fedavg_aggregator(std::span<transport::Endpoint* const> clients,
                              const Session& session, eventlog::Logger* log,
                              const RoundHook& on_round) {
    const auto& train = session.train;
    int total = static_cast<int>(session.total_clients);
    int per_round =
        train.clients_per_round > 0 ? train.clients_per_round : total;

    ModelParams params = engine::init_model(session.model, session.num_features,
                                            session.num_classes, train.seed);

    for (int round = 0; round < train.rounds; ++round) {
        if (log) log->emit("training." + std::to_string(round), Action::start);
        auto selected =
            engine::sample_clients(total, per_round, round, train.seed);

        Frame broadcast;
        broadcast.msg_type = MsgType::model_broadcast;
        broadcast.round = static_cast<uint32_t>(round);
        broadcast.sender = {transport::Role::aggregator, 0};
        broadcast.payload = engine::serialize_params(params);
        for (uint32_t id : selected) clients[id]->send(broadcast);

        std::vector<ClientUpdate> updates;
        updates.reserve(selected.size());
        for (uint32_t id : selected) {
            auto [frame, bytes] = clients[id]->recv();
            if (frame.msg_type != MsgType::client_update)
                throw MalformedHeader("expected client_update frame");
            updates.push_back(engine::deserialize_update(frame.payload));
        }

        double loss = 0.0;
        int64_t samples = 0;
        for (const auto& u : updates) {
            loss += u.train_loss * static_cast<double>(u.num_samples);
            samples += u.num_samples;
        }
        loss /= static_cast<double>(samples);

        std::string comp = "computation." + std::to_string(round);
        if (log) log->emit(comp, Action::start);
        params = engine::aggregate_fedavg(updates);
        if (log)
            log->emit(comp, Action::end,
                      {{"flop", eventlog::MetricValue(engine::aggregate_flops(
                           params, updates.size()))},
                       {"loss", eventlog::MetricValue(loss)}});

        if (on_round) on_round(round, params);
        if (log) log->emit("training." + std::to_string(round), Action::end);
    }

    Frame shutdown;
    shutdown.msg_type = MsgType::shutdown;
    shutdown.round = static_cast<uint32_t>(train.rounds);
    shutdown.sender = {transport::Role::aggregator, 0};
    for (auto* ep : clients) ep->send(shutdown);
    return params;
}

void fedavg_client(transport::Endpoint& server, uint32_t client_id,
                   const scenario::DatasetTable& train_data,
                   const Session& session, eventlog::Logger* log) {
    for (;;) {
        auto [frame, bytes] = server.recv();
        if (frame.msg_type == MsgType::shutdown) break;
        if (frame.msg_type != MsgType::model_broadcast)
            throw MalformedHeader("expected model_broadcast frame");
        int round = static_cast<int>(frame.round);
        ModelParams params = engine::deserialize_params(frame.payload);

        engine::TrainConfig cfg = session.train;
        cfg.seed = round_client_seed(session.train.seed, round, client_id);

        std::string comp = "computation." + std::to_string(round);
        if (log) log->emit(comp, Action::start);
        ClientUpdate update = engine::local_train(params, train_data, cfg);
        update.client_id = client_id;
        if (log)
            log->emit(comp, Action::end,
                      {{"flop", eventlog::MetricValue(engine::train_flops(
                           params, update.num_samples, cfg.local_epochs))},
                       {"loss", eventlog::MetricValue(update.train_loss)}});

        Frame reply;
        reply.msg_type = MsgType::client_update;
        reply.round = frame.round;
        reply.sender = {transport::Role::client,
                        static_cast<uint16_t>(client_id + 1)};
        reply.payload = engine::serialize_update(update);
        server.send(reply);
    }
}

} // namespace fedbench::protocol
