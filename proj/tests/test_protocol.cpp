#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "fedbench/engine.hpp"
#include "fedbench/errors.hpp"
#include "fedbench/eventlog.hpp"
#include "fedbench/protocol.hpp"
#include "fedbench/scenario.hpp"
#include "fedbench/util.hpp"
#include "testsupport.hpp"

using namespace fedbench;
using namespace fedbench::protocol;
using engine::ModelKind;
using engine::ModelParams;
using engine::ModelSpec;
using engine::TrainConfig;
using scenario::Scenario;
using scenario::Task;

namespace {

double rel_diff(double a, double b) {
    double denom = std::max({std::abs(a), std::abs(b), 1e-12});
    return std::abs(a - b) / denom;
}

// Plain centralized SGD with momentum for binary logistic regression,
// written independently of the engine: one velocity reset per round.
std::vector<double> oracle_logistic_round(const std::vector<double>& start,
                                          const scenario::DatasetTable& data,
                                          const TrainConfig& cfg,
                                          uint64_t round_seed) {
    size_t d = data.num_features;
    std::vector<double> w = start;  // d weights then bias
    std::vector<double> velocity(w.size(), 0.0);
    std::vector<size_t> order(data.num_rows());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    auto rng = make_rng(round_seed, 0x73687566ULL);
    for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        deterministic_shuffle(order, rng);
        for (size_t start_i = 0; start_i < order.size();
             start_i += cfg.batch_size) {
            size_t stop = std::min(order.size(),
                                   start_i + size_t(cfg.batch_size));
            std::vector<double> grad(w.size(), 0.0);
            for (size_t k = start_i; k < stop; ++k) {
                auto x = data.row(order[k]);
                double z = w[d];
                for (size_t j = 0; j < d; ++j) z += w[j] * x[j];
                double delta = 1.0 / (1.0 + std::exp(-z)) - (*data.labels)[order[k]];
                for (size_t j = 0; j < d; ++j) grad[j] += delta * x[j];
                grad[d] += delta;
            }
            double inv = 1.0 / double(stop - start_i);
            for (size_t j = 0; j < w.size(); ++j) {
                velocity[j] = cfg.momentum * velocity[j] -
                              cfg.learning_rate * (grad[j] * inv);
                w[j] += velocity[j];
            }
        }
    }
    return w;
}

} // namespace

TEST_CASE("fedavg with one client equals centralized SGD round by round") {
    std::mt19937_64 rng(2024);
    for (int instance = 0; instance < 20; ++instance) {
        bool use_mlp = instance % 2 == 1;
        Scenario s = test::random_horizontal_scenario(100 + instance, 1,
                                                      30 + rng() % 30,
                                                      2 + rng() % 4);
        ModelSpec model;
        if (use_mlp) {
            model.kind = ModelKind::mlp;
            model.hidden_layers = {4 + rng() % 5};
        } else {
            model.kind = ModelKind::logistic_regression;
        }
        TrainConfig train;
        train.rounds = 3;
        train.local_epochs = 1 + int(rng() % 2);
        train.batch_size = 8;
        train.learning_rate = 0.05;
        train.momentum = 0.9;
        train.seed = 5000 + instance;

        Session session = make_session(s, model, train, "fedavg");
        std::vector<ModelParams> federated_rounds;
        run_in_process(s, session, {}, [&](int, const ModelParams& p) {
            federated_rounds.push_back(p);
        });
        REQUIRE(federated_rounds.size() == size_t(train.rounds));

        const auto& data = s.clients[0].train;
        if (!use_mlp) {
            std::vector<double> w(data.num_features + 1, 0.0);
            for (int round = 0; round < train.rounds; ++round) {
                w = oracle_logistic_round(
                    w, data, train,
                    round_client_seed(train.seed, round, 0));
                for (size_t j = 0; j < w.size(); ++j)
                    CHECK(rel_diff(w[j], federated_rounds[size_t(round)].dense[j]) <=
                          1e-12);
            }
        } else {
            // direct engine path, no transport: the federated bit-path must
            // add nothing on top of it
            ModelSpec direct = model;
            direct.objective = s.task;
            ModelParams params = engine::init_model(direct, data.num_features,
                                                    s.num_classes, train.seed);
            for (int round = 0; round < train.rounds; ++round) {
                TrainConfig cfg = train;
                cfg.seed = round_client_seed(train.seed, round, 0);
                params = engine::local_train(params, data, cfg).new_params;
                for (size_t j = 0; j < params.dense.size(); ++j)
                    CHECK(rel_diff(params.dense[j],
                                   federated_rounds[size_t(round)].dense[j]) <=
                          1e-12);
            }
        }
    }
}

TEST_CASE("two-client fedavg runs deterministically with client sampling") {
    Scenario s = test::random_horizontal_scenario(77, 5, 40, 3);
    ModelSpec model;
    model.kind = ModelKind::logistic_regression;
    TrainConfig train;
    train.rounds = 4;
    train.clients_per_round = 2;
    train.seed = 9;
    Session session = make_session(s, model, train, "fedavg");
    auto a = run_in_process(s, session);
    auto b = run_in_process(s, session);
    CHECK(a.aggregator.params.dense == b.aggregator.params.dense);
    CHECK(a.aggregator.metric_value == b.aggregator.metric_value);
}

static void check_tree_equality(const std::vector<gbdt::Tree>& a,
                                const std::vector<gbdt::Tree>& b) {
    REQUIRE(a.size() == b.size());
    for (size_t t = 0; t < a.size(); ++t) {
        REQUIRE(a[t].nodes.size() == b[t].nodes.size());
        for (size_t n = 0; n < a[t].nodes.size(); ++n) {
            const auto& na = a[t].nodes[n];
            const auto& nb = b[t].nodes[n];
            CHECK(na.feature == nb.feature);
            CHECK(na.bin == nb.bin);
            CHECK(na.split_value == nb.split_value);
            CHECK(na.left == nb.left);
            CHECK(na.right == nb.right);
            if (na.is_leaf() && nb.is_leaf())
                CHECK(rel_diff(na.leaf_weight, nb.leaf_weight) <= 1e-9);
        }
    }
}

TEST_CASE("single-client federated gbdt is identical to the centralized fit") {
    Scenario s = test::random_horizontal_scenario(31, 1, 150, 4);
    ModelSpec spec;
    spec.kind = ModelKind::gbdt;
    spec.gbdt.num_trees = 6;
    spec.gbdt.num_bins = 16;
    spec.gbdt.max_depth = 3;
    auto central = fit_gbdt(s, spec, GbdtProtocol::centralized);
    auto federated = fit_gbdt(s, spec, GbdtProtocol::horizontal_histsecagg);
    // single client: the merge is an identity, trees match bit for bit
    CHECK(central.ensemble == federated.ensemble);
}

TEST_CASE("two-client gbdt with shared bins matches pooled training node by node") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Scenario s = test::random_horizontal_scenario(400 + seed, 2,
                                                      120 + seed * 10, 4);
        ModelSpec spec;
        spec.kind = ModelKind::gbdt;
        spec.gbdt.num_trees = 5;
        spec.gbdt.num_bins = 12;
        spec.gbdt.max_depth = 3;
        auto central = fit_gbdt(s, spec, GbdtProtocol::centralized);
        auto federated = fit_gbdt(s, spec, GbdtProtocol::horizontal_histsecagg);
        check_tree_equality(central.ensemble, federated.ensemble);
    }
}

TEST_CASE("vertical secureboost matches centralized training on joined features") {
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Scenario s = test::random_vertical_scenario(700 + seed, 90, 3, 4);
        ModelSpec spec;
        spec.kind = ModelKind::gbdt;
        spec.gbdt.num_trees = 4;
        spec.gbdt.num_bins = 10;
        spec.gbdt.max_depth = 3;
        auto central = fit_gbdt(s, spec, GbdtProtocol::centralized);
        auto federated =
            fit_gbdt(s, spec, GbdtProtocol::vertical_secureboost_plain);
        check_tree_equality(central.ensemble, federated.ensemble);
    }
}

TEST_CASE("multiclass gbdt trains one tree per class per round") {
    scenario::SyntheticSpec sp;
    sp.name = "mc";
    sp.task = Task::multiclass_classification;
    sp.num_classes = 3;
    sp.clients = 2;
    sp.features = 5;
    sp.rows_per_client = {120};
    sp.class_margin = 0.2;
    Scenario s = scenario::generate_synthetic(sp, 6);
    ModelSpec spec;
    spec.kind = ModelKind::gbdt;
    spec.gbdt.num_trees = 5;
    spec.gbdt.num_bins = 8;
    spec.gbdt.max_depth = 3;
    auto central = fit_gbdt(s, spec, GbdtProtocol::centralized);
    CHECK(central.ensemble.size() == 15);
    auto federated = fit_gbdt(s, spec, GbdtProtocol::horizontal_histsecagg);
    check_tree_equality(central.ensemble, federated.ensemble);
}

TEST_CASE("vertical regression: a single party equals plain local training") {
    Scenario s = test::random_vertical_scenario(55, 60, 5, 0);
    // collapse to one party holding everything
    s.clients.resize(1);
    s.vertical_split->features_per_party.erase(1);
    ModelSpec model;
    model.kind = ModelKind::logistic_regression;
    TrainConfig train;
    train.rounds = 3;
    train.batch_size = 16;
    train.seed = 4;
    Session session = make_session(s, model, train, "vertical_regression");
    auto result = run_in_process(s, session);

    ModelSpec direct = model;
    direct.objective = s.task;
    ModelParams params =
        engine::init_model(direct, s.total_features(), 2, train.seed);
    const auto& data = s.clients[0].train;
    for (int round = 0; round < train.rounds; ++round) {
        TrainConfig cfg = train;
        cfg.seed = vertical_round_seed(train.seed, round);
        params = engine::local_train(params, data, cfg).new_params;
    }
    REQUIRE(result.aggregator.params.dense.size() == params.dense.size());
    for (size_t j = 0; j < params.dense.size(); ++j)
        CHECK(rel_diff(params.dense[j], result.aggregator.params.dense[j]) <=
              1e-12);
}

TEST_CASE("vertical regression: two parties equal the joined centralized model") {
    for (uint64_t seed = 0; seed < 4; ++seed) {
        Scenario s = test::random_vertical_scenario(900 + seed, 80, 3, 4);
        ModelSpec model;
        model.kind = ModelKind::logistic_regression;
        TrainConfig train;
        train.rounds = 3;
        train.batch_size = 16;
        train.learning_rate = 0.1;
        train.seed = 100 + seed;
        Session session = make_session(s, model, train, "vertical_regression");
        auto result = run_in_process(s, session);

        scenario::DatasetTable joined = scenario::joint_train_view(s);
        ModelSpec direct = model;
        direct.objective = s.task;
        ModelParams params =
            engine::init_model(direct, joined.num_features, 2, train.seed);
        for (int round = 0; round < train.rounds; ++round) {
            TrainConfig cfg = train;
            cfg.seed = vertical_round_seed(train.seed, round);
            params = engine::local_train(params, joined, cfg).new_params;
        }
        for (size_t j = 0; j < params.dense.size(); ++j)
            CHECK(rel_diff(params.dense[j],
                           result.aggregator.params.dense[j]) <= 1e-9);
    }
}

TEST_CASE("masked histogram aggregation leaves the model unchanged") {
    Scenario s = test::random_horizontal_scenario(640, 2, 150, 4);
    ModelSpec spec;
    spec.kind = ModelKind::gbdt;
    spec.gbdt.num_trees = 4;
    spec.gbdt.num_bins = 12;
    spec.gbdt.max_depth = 3;
    spec.objective = s.task;
    TrainConfig train;

    Session plain = make_session(s, spec, train, "histsecagg_gbdt", false);
    Session masked = make_session(s, spec, train, "histsecagg_gbdt", true);
    auto a = run_in_process(s, plain);
    auto b = run_in_process(s, masked);
    check_tree_equality(a.aggregator.params.ensemble,
                        b.aggregator.params.ensemble);
    CHECK(a.aggregator.metric_value ==
          doctest::Approx(b.aggregator.metric_value).epsilon(1e-9));
}

TEST_CASE("pairwise masks cancel in the modular sum") {
    std::mt19937_64 rng(8);
    std::vector<uint32_t> clients{0, 1, 2, 3};
    for (int trial = 0; trial < 20; ++trial) {
        size_t n = 1 + rng() % 40;
        std::vector<std::vector<double>> values(clients.size(),
                                                std::vector<double>(n));
        std::vector<double> plain_sum(n, 0.0);
        for (size_t c = 0; c < clients.size(); ++c)
            for (size_t i = 0; i < n; ++i) {
                values[c][i] = normal01(rng) * 100.0;
                plain_sum[i] += values[c][i];
            }
        std::vector<int64_t> acc;
        for (size_t c = 0; c < clients.size(); ++c) {
            auto part = mask_values(values[c], kMaskFixedPointScale, 42,
                                    clients[c], clients);
            if (acc.empty()) acc.assign(n, 0);
            masked_sum_into(acc, part);
        }
        auto recovered = dequantize(acc, kMaskFixedPointScale);
        for (size_t i = 0; i < n; ++i)
            CHECK(std::abs(recovered[i] - plain_sum[i]) <=
                  double(clients.size()) / kMaskFixedPointScale);
    }
}

TEST_CASE("in-process byte accounting: logs, counter and frame arithmetic agree") {
    test::TempDir tmp("bytes");
    Scenario s = test::random_horizontal_scenario(3, 2, 50, 4);
    ModelSpec model;
    model.kind = ModelKind::logistic_regression;
    TrainConfig train;
    train.rounds = 3;
    train.seed = 1;
    Session session = make_session(s, model, train, "fedavg");

    std::vector<std::unique_ptr<eventlog::Logger>> owned;
    std::vector<eventlog::Logger*> loggers;
    owned.push_back(std::make_unique<eventlog::Logger>(
        tmp.path() / "aggregator_0.log", eventlog::AgentType::aggregator));
    owned.push_back(std::make_unique<eventlog::Logger>(
        tmp.path() / "client_1.log", eventlog::AgentType::client));
    owned.push_back(std::make_unique<eventlog::Logger>(
        tmp.path() / "client_2.log", eventlog::AgentType::client));
    for (auto& l : owned) loggers.push_back(l.get());

    auto result = run_in_process(s, session, loggers);
    for (auto& l : owned) l->close();

    uint64_t logged = 0;
    for (const auto& name :
         {"aggregator_0.log", "client_1.log", "client_2.log"}) {
        for (const auto& rec : eventlog::parse_file(tmp.path() / name)) {
            const auto* ev = std::get_if<eventlog::EventRecord>(&rec);
            if (!ev || ev->action != eventlog::Action::end) continue;
            if (ev->event.rfind("communication.", 0) != 0) continue;
            for (const auto& [key, value] : ev->metrics)
                if (key == "byte")
                    logged += uint64_t(value.as_double());
        }
    }
    uint64_t arithmetic = 0;
    for (size_t payload : result.payload_sizes)
        arithmetic += 2 * (transport::kHeaderBytes + payload);

    CHECK(logged == result.transport_bytes);
    CHECK(arithmetic == result.transport_bytes);
}

TEST_CASE("vertical regression on the bundled surrogate reaches the reference band") {
    test::TempDir cache("protocol_dcv");
    Scenario s = scenario::load_scenario("default_credit_vertical", cache);
    ModelSpec model;
    model.kind = ModelKind::logistic_regression;
    TrainConfig train;
    train.rounds = 10;
    train.batch_size = 128;
    train.learning_rate = 0.01;
    train.momentum = 0.9;
    train.seed = 42;
    Session session = make_session(s, model, train, "vertical_regression");
    auto result = run_in_process(s, session);
    CHECK(result.aggregator.metric_name == "auc");
    CHECK(result.aggregator.metric_value >= 65.0);
    CHECK(result.aggregator.metric_value <= 72.0);
}
