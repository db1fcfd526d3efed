#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "fedbench/engine.hpp"
#include "fedbench/errors.hpp"
#include "fedbench/scenario.hpp"
#include "fedbench/util.hpp"
#include "testsupport.hpp"

using namespace fedbench;
using namespace fedbench::engine;
using scenario::Task;

static ModelSpec logistic_spec() {
    ModelSpec spec;
    spec.kind = ModelKind::logistic_regression;
    spec.objective = Task::binary_classification;
    return spec;
}

static ModelSpec mlp_spec(std::vector<size_t> hidden, Task task) {
    ModelSpec spec;
    spec.kind = ModelKind::mlp;
    spec.hidden_layers = std::move(hidden);
    spec.objective = task;
    return spec;
}

TEST_CASE("init_model: zero logistic weights including the bias") {
    ModelParams p = init_model(logistic_spec(), 10, 2, 123);
    CHECK(p.param_count() == 11);
    for (double v : p.dense) CHECK(v == 0.0);
}

TEST_CASE("init_model: mlp is deterministic in the seed") {
    auto spec = mlp_spec({128}, Task::binary_classification);
    ModelParams a = init_model(spec, 20, 2, 1);
    ModelParams b = init_model(spec, 20, 2, 1);
    CHECK(a.dense == b.dense);
    ModelParams c = init_model(spec, 20, 2, 2);
    CHECK(a.dense != c.dense);
    // Glorot bound
    double limit = std::sqrt(6.0 / (20 + 128));
    for (size_t i = 0; i < 20 * 128; ++i) {
        CHECK(a.dense[i] <= limit);
        CHECK(a.dense[i] >= -limit);
    }
}

TEST_CASE("init_model: 3x128 mlp parameter count arithmetic") {
    auto spec = mlp_spec({128, 128, 128}, Task::binary_classification);
    ModelParams p = init_model(spec, 23, 2, 9);
    size_t expected = 23 * 128 + 128 + 2 * (128 * 128 + 128) + 128 * 1 + 1;
    CHECK(p.param_count() == expected);
}

TEST_CASE("predict: zero logistic model answers 0.5 everywhere") {
    ModelParams p = init_model(logistic_spec(), 4, 2, 0);
    auto table = test::make_table(6, 4, 5);
    auto preds = predict(p, table.features, 6, 4);
    for (double v : preds) CHECK(v == 0.5);
}

TEST_CASE("predict: linear model is a plain dot product") {
    ModelSpec spec;
    spec.kind = ModelKind::linear_regression;
    spec.objective = Task::regression;
    ModelParams p = init_model(spec, 2, 2, 0);
    p.dense = {1.0, 0.0, 0.0};  // w=(1,0), b=0
    std::vector<double> x{2.0, 3.0};
    auto preds = predict(p, x, 1, 2);
    CHECK(preds[0] == 2.0);
}

TEST_CASE("predict: a single one-leaf tree goes through the sigmoid link") {
    ModelParams p;
    p.kind = ModelKind::gbdt;
    p.objective = Task::binary_classification;
    p.num_outputs = 1;
    gbdt::Tree tree;
    gbdt::TreeNode leaf;
    leaf.leaf_weight = 0.7;
    tree.nodes.push_back(leaf);
    p.ensemble.push_back(tree);
    std::vector<double> x{1.0, 2.0};
    auto preds = predict(p, x, 1, 2);
    CHECK(preds[0] == doctest::Approx(1.0 / (1.0 + std::exp(-0.7))));
}

TEST_CASE("local_train: zero learning rate leaves the params unchanged") {
    auto table = test::make_table(20, 3, 8);
    ModelParams p = init_model(mlp_spec({8}, Task::binary_classification), 3, 2, 1);
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.local_epochs = 2;
    cfg.batch_size = 4;
    auto update = local_train(p, table, cfg);
    CHECK(update.new_params.dense == p.dense);
    CHECK(update.num_samples == 20);
}

// Finite differences of the loss reconstructed from predict(); central
// differences at eps=1e-6, relative error under 1e-4.
namespace {

double loss_from_predictions(const ModelParams& params,
                             const scenario::DatasetTable& data) {
    auto preds = predict(params, data.features, data.num_rows(),
                         data.num_features);
    const auto& y = *data.labels;
    double total = 0.0;
    size_t n = data.num_rows();
    switch (params.objective) {
        case Task::binary_classification:
            for (size_t i = 0; i < n; ++i) {
                double p = std::min(std::max(preds[i], 1e-12), 1.0 - 1e-12);
                total += -(y[i] * std::log(p) + (1.0 - y[i]) * std::log(1.0 - p));
            }
            break;
        case Task::multiclass_classification:
            for (size_t i = 0; i < n; ++i) {
                double p = preds[i * params.num_outputs +
                                 static_cast<size_t>(y[i])];
                total += -std::log(std::max(p, 1e-300));
            }
            break;
        case Task::regression:
            for (size_t i = 0; i < n; ++i) {
                double d = preds[i] - y[i];
                total += d * d;
            }
            break;
    }
    return total / static_cast<double>(n);
}

void check_gradient(const ModelSpec& spec, size_t features, size_t classes,
                    uint64_t seed) {
    bool multiclass = spec.objective == Task::multiclass_classification;
    auto table = test::make_table(12, features, seed, true, true);
    if (multiclass)
        for (auto& y : *table.labels)
            y = static_cast<double>(mix_seed(seed, size_t(y * 31)) % classes);

    ModelParams p = init_model(spec, features, classes, seed);
    if (spec.kind == ModelKind::logistic_regression) {
        auto rng = make_rng(seed, 0x77);
        for (auto& v : p.dense) v = 0.3 * normal01(rng);
    }
    TrainConfig cfg;
    cfg.local_epochs = 1;
    cfg.batch_size = static_cast<int>(table.num_rows());  // one full batch
    cfg.momentum = 0.0;
    cfg.learning_rate = 1e-3;
    cfg.seed = seed;
    auto update = local_train(p, table, cfg);

    // implied gradient of the single step: (p - p') / lr
    std::vector<double> grad(p.dense.size());
    for (size_t j = 0; j < grad.size(); ++j)
        grad[j] = (p.dense[j] - update.new_params.dense[j]) / cfg.learning_rate;

    const double eps = 1e-6;
    auto rng = make_rng(seed, 0x99);
    size_t checked = 0;
    for (size_t j = 0; j < grad.size(); ++j) {
        // spot-check a subset of coordinates on big models
        if (grad.size() > 64 && uniform01(rng) > 64.0 / grad.size()) continue;
        ModelParams plus = p, minus = p;
        plus.dense[j] += eps;
        minus.dense[j] -= eps;
        double fd = (loss_from_predictions(plus, table) -
                     loss_from_predictions(minus, table)) /
                    (2.0 * eps);
        double denom = std::max({std::abs(fd), std::abs(grad[j]), 1e-3});
        CHECK(std::abs(fd - grad[j]) / denom < 1e-4);
        ++checked;
    }
    CHECK(checked > 0);
}

} // namespace

TEST_CASE("gradients match central finite differences") {
    for (uint64_t seed = 1; seed <= 6; ++seed) {
        check_gradient(logistic_spec(), 5, 2, seed);
        check_gradient(mlp_spec({7}, Task::binary_classification), 4, 2,
                       seed + 100);
        check_gradient(mlp_spec({6, 5}, Task::multiclass_classification), 4, 3,
                       seed + 200);
    }
    ModelSpec linear;
    linear.kind = ModelKind::linear_regression;
    linear.objective = Task::regression;
    for (uint64_t seed = 1; seed <= 3; ++seed)
        check_gradient(linear, 5, 2, seed + 300);
}

TEST_CASE("divergence raises NonFiniteLoss") {
    ModelSpec linear;
    linear.kind = ModelKind::linear_regression;
    linear.objective = Task::regression;
    auto table = test::make_table(30, 4, 3, true, false);
    for (auto& v : table.features) v *= 1e3;
    ModelParams p = init_model(linear, 4, 2, 1);
    TrainConfig cfg;
    cfg.learning_rate = 1e6;
    cfg.local_epochs = 50;
    cfg.batch_size = 30;
    CHECK_THROWS_AS(local_train(p, table, cfg), NonFiniteLoss);
}

TEST_CASE("aggregate_fedavg: single update passes through bit-exactly") {
    auto table = test::make_table(10, 3, 2);
    ModelParams p = init_model(mlp_spec({4}, Task::binary_classification), 3, 2, 7);
    TrainConfig cfg;
    auto update = local_train(p, table, cfg);
    auto merged = aggregate_fedavg(std::vector<ClientUpdate>{update});
    CHECK(merged.dense == update.new_params.dense);
}

TEST_CASE("aggregate_fedavg: opposite params with equal weights cancel") {
    ModelParams p = init_model(logistic_spec(), 3, 2, 0);
    ClientUpdate a, b;
    a.new_params = p;
    b.new_params = p;
    for (size_t j = 0; j < p.dense.size(); ++j) {
        a.new_params.dense[j] = 1.5 * (double(j) + 1.0);
        b.new_params.dense[j] = -a.new_params.dense[j];
    }
    a.num_samples = b.num_samples = 17;
    auto merged = aggregate_fedavg(std::vector<ClientUpdate>{a, b});
    for (double v : merged.dense) CHECK(v == 0.0);
}

TEST_CASE("aggregate_fedavg: sample-weighted mean, (3,1) -> 2.0") {
    ModelParams scalar;
    scalar.kind = ModelKind::linear_regression;
    scalar.objective = Task::regression;
    scalar.shapes = {{0, 1}};  // bias only
    scalar.dense = {0.0};
    ClientUpdate a, b;
    a.new_params = scalar;
    a.new_params.dense = {1.0};
    a.num_samples = 3;
    b.new_params = scalar;
    b.new_params.dense = {5.0};
    b.num_samples = 1;
    auto merged = aggregate_fedavg(std::vector<ClientUpdate>{a, b});
    CHECK(merged.dense[0] == 2.0);
}

TEST_CASE("aggregate_fedavg: weight scaling invariance") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<ClientUpdate> updates(3);
        for (auto& u : updates) {
            u.new_params = init_model(logistic_spec(), 4, 2, rng());
            for (auto& v : u.new_params.dense) v = normal01(rng);
            u.num_samples = 1 + int64_t(rng() % 50);
        }
        auto base = aggregate_fedavg(updates);
        int64_t scale = 2 + int64_t(rng() % 9);
        for (auto& u : updates) u.num_samples *= scale;
        auto scaled = aggregate_fedavg(updates);
        CHECK(base.dense == scaled.dense);
    }
}

TEST_CASE("aggregate_fedavg error paths") {
    CHECK_THROWS_AS(aggregate_fedavg({}), EmptyUpdateSet);
    ClientUpdate a, b;
    a.new_params = init_model(logistic_spec(), 3, 2, 0);
    b.new_params = init_model(logistic_spec(), 4, 2, 0);
    a.num_samples = b.num_samples = 1;
    CHECK_THROWS_AS(aggregate_fedavg(std::vector<ClientUpdate>{a, b}),
                    ShapeMismatch);
}

TEST_CASE("sample_clients") {
    auto all = sample_clients(10, 10, 3, 42);
    CHECK(all.size() == 10);
    for (uint32_t i = 0; i < 10; ++i) CHECK(all[i] == i);

    auto twenty = sample_clients(894, 20, 0, 42);
    CHECK(twenty.size() == 20);
    std::set<uint32_t> unique(twenty.begin(), twenty.end());
    CHECK(unique.size() == 20);
    for (uint32_t id : twenty) CHECK(id < 894);

    CHECK(sample_clients(100, 5, 7, 9) == sample_clients(100, 5, 7, 9));
    CHECK(sample_clients(100, 5, 7, 9) != sample_clients(100, 5, 8, 9));

    CHECK_THROWS_AS(sample_clients(5, 6, 0, 0), InvalidK);
    CHECK_THROWS_AS(sample_clients(5, 0, 0, 0), InvalidK);
}

TEST_CASE("params serialization round trip") {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 10; ++trial) {
        ModelParams p = init_model(
            mlp_spec({1 + rng() % 6, 1 + rng() % 6},
                     Task::binary_classification),
            1 + rng() % 8, 2, rng());
        for (auto& v : p.dense) v = normal01(rng);
        CHECK(deserialize_params(serialize_params(p)) == p);

        ClientUpdate u;
        u.client_id = uint32_t(rng() % 100);
        u.num_samples = int64_t(1 + rng() % 1000);
        u.train_loss = normal01(rng);
        u.new_params = p;
        auto back = deserialize_update(serialize_update(u));
        CHECK(back.client_id == u.client_id);
        CHECK(back.num_samples == u.num_samples);
        CHECK(back.train_loss == u.train_loss);
        CHECK(back.new_params == p);
    }
    // tree ensembles survive too
    ModelParams trees;
    trees.kind = ModelKind::gbdt;
    trees.objective = Task::regression;
    gbdt::Tree t;
    gbdt::TreeNode split;
    split.feature = 2;
    split.bin = 5;
    split.split_value = 0.25;
    split.left = 1;
    split.right = 2;
    t.nodes = {split, {}, {}};
    t.nodes[1].leaf_weight = -0.5;
    t.nodes[2].leaf_weight = 0.75;
    trees.ensemble = {t};
    CHECK(deserialize_params(serialize_params(trees)) == trees);
}

TEST_CASE("checkpoint files round trip exactly") {
    test::TempDir tmp("ckpt");
    ModelParams p = init_model(mlp_spec({5}, Task::binary_classification), 3, 2, 4);
    auto rng = make_rng(1, 2);
    for (auto& v : p.dense) v = normal01(rng) * 1e-7;
    save_checkpoint(p, tmp.path() / "model.json");
    CHECK(load_checkpoint(tmp.path() / "model.json") == p);
}

TEST_CASE("training is deterministic given seed, config and data") {
    auto table = test::make_table(40, 5, 21);
    ModelParams p = init_model(mlp_spec({16}, Task::binary_classification), 5, 2, 3);
    TrainConfig cfg;
    cfg.local_epochs = 3;
    cfg.batch_size = 8;
    cfg.seed = 77;
    auto a = local_train(p, table, cfg);
    auto b = local_train(p, table, cfg);
    CHECK(a.new_params.dense == b.new_params.dense);
    CHECK(a.train_loss == b.train_loss);
    cfg.seed = 78;
    auto c = local_train(p, table, cfg);
    CHECK(a.new_params.dense != c.new_params.dense);
}
