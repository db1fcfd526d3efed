#include "fedbench/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "fedbench/errors.hpp"
#include "fedbench/util.hpp"

namespace fedbench::scenario {

std::string setting_name(Setting s) {
    switch (s) {
        case Setting::horizontal_cross_silo: return "horizontal_cross_silo";
        case Setting::horizontal_cross_device: return "horizontal_cross_device";
        case Setting::vertical: return "vertical";
    }
    return "?";
}

std::string task_name(Task t) {
    switch (t) {
        case Task::binary_classification: return "binary_classification";
        case Task::multiclass_classification: return "multiclass_classification";
        case Task::regression: return "regression";
    }
    return "?";
}

std::string metric_name(Metric m) {
    switch (m) {
        case Metric::accuracy: return "accuracy";
        case Metric::auc: return "auc";
        case Metric::mse: return "mse";
    }
    return "?";
}

Setting setting_from_name(const std::string& name) {
    if (name == "horizontal_cross_silo") return Setting::horizontal_cross_silo;
    if (name == "horizontal_cross_device") return Setting::horizontal_cross_device;
    if (name == "vertical") return Setting::vertical;
    throw ParseError("unknown setting '" + name + "'");
}

Task task_from_name(const std::string& name) {
    if (name == "binary_classification") return Task::binary_classification;
    if (name == "multiclass_classification") return Task::multiclass_classification;
    if (name == "regression") return Task::regression;
    throw ParseError("unknown task '" + name + "'");
}

Metric metric_from_name(const std::string& name) {
    if (name == "accuracy") return Metric::accuracy;
    if (name == "auc") return Metric::auc;
    if (name == "mse") return Metric::mse;
    throw ParseError("unknown metric '" + name + "'");
}

size_t Scenario::total_features() const {
    if (clients.empty()) return 0;
    if (setting == Setting::vertical) {
        size_t total = 0;
        for (const auto& c : clients) total += c.train.num_features;
        return total;
    }
    return clients.front().train.num_features;
}

size_t Scenario::total_samples() const {
    if (setting == Setting::vertical) {
        // parties share the same aligned rows
        if (clients.empty()) return 0;
        return clients.front().train.num_rows() + clients.front().test.num_rows();
    }
    size_t total = 0;
    for (const auto& c : clients) total += c.train.num_rows() + c.test.num_rows();
    return total;
}

const ClientPartition& Scenario::client(uint32_t id) const {
    for (const auto& c : clients)
        if (c.client_id == id) return c;
    throw UnknownScenario("no client " + std::to_string(id) + " in " + name);
}

bool id_hash_test_split(const std::string& scenario_name, const std::string& id,
                        double test_fraction) {
    std::string digest = sha256_hex(scenario_name + ":" + id);
    uint64_t h = std::stoull(digest.substr(0, 15), nullptr, 16);
    return static_cast<double>(h % 10000) < test_fraction * 10000.0;
}

// --- align_vertical ---------------------------------------------------------

namespace {

DatasetTable reorder_by_ids(const DatasetTable& table,
                            const std::vector<std::string>& order) {
    std::unordered_map<std::string, size_t> index;
    index.reserve(table.num_rows());
    for (size_t i = 0; i < table.num_rows(); ++i) index.emplace(table.ids[i], i);
    DatasetTable out;
    out.num_features = table.num_features;
    if (table.labels) out.labels.emplace();
    for (const auto& id : order) out.append_row_from(table, index.at(id));
    return out;
}

std::vector<std::string> common_ids_in_first_order(
    const Scenario& s, const DatasetTable& (*pick)(const ClientPartition&)) {
    std::vector<const DatasetTable*> tables;
    for (const auto& c : s.clients) tables.push_back(&pick(c));
    std::vector<std::string> order = tables.front()->ids;
    for (size_t p = 1; p < tables.size(); ++p) {
        std::unordered_set<std::string> present(tables[p]->ids.begin(),
                                                tables[p]->ids.end());
        std::erase_if(order, [&](const std::string& id) {
            return present.find(id) == present.end();
        });
    }
    return order;
}

const DatasetTable& pick_train(const ClientPartition& c) { return c.train; }
const DatasetTable& pick_test(const ClientPartition& c) { return c.test; }

} // namespace

Scenario align_vertical(const Scenario& s) {
    if (s.setting != Setting::vertical)
        throw AlignmentError("scenario '" + s.name + "' is not vertical");
    if (s.clients.empty()) throw AlignmentError("no parties");

    Scenario out = s;
    std::sort(out.clients.begin(), out.clients.end(),
              [](const ClientPartition& a, const ClientPartition& b) {
                  return a.client_id < b.client_id;
              });

    auto train_order = common_ids_in_first_order(out, pick_train);
    auto test_order = common_ids_in_first_order(out, pick_test);
    if (train_order.empty() && test_order.empty())
        throw NoCommonIds("no ids shared by all parties in '" + s.name + "'");

    for (auto& party : out.clients) {
        party.train = reorder_by_ids(party.train, train_order);
        party.test = reorder_by_ids(party.test, test_order);
    }
    return out;
}

namespace {

DatasetTable joined_vertical_view(const Scenario& s, bool use_test) {
    const Scenario aligned = align_vertical(s);
    auto pick = [&](const ClientPartition& c) -> const DatasetTable& {
        return use_test ? c.test : c.train;
    };
    const ClientPartition* label_party = nullptr;
    for (const auto& c : aligned.clients) {
        if (aligned.vertical_split &&
            c.client_id == aligned.vertical_split->label_party)
            label_party = &c;
    }
    if (!label_party || !pick(*label_party).labels)
        throw AlignmentError("vertical scenario has no label party with labels");

    DatasetTable out;
    size_t rows = pick(aligned.clients.front()).num_rows();
    out.num_features = 0;
    for (const auto& c : aligned.clients) out.num_features += pick(c).num_features;
    out.labels.emplace();
    for (size_t i = 0; i < rows; ++i) {
        std::vector<double> row;
        row.reserve(out.num_features);
        for (const auto& c : aligned.clients) {
            auto r = pick(c).row(i);
            row.insert(row.end(), r.begin(), r.end());
        }
        out.append_row(pick(*label_party).ids[i], row,
                       (*pick(*label_party).labels)[i]);
    }
    return out;
}

} // namespace

DatasetTable global_test_view(const Scenario& s) {
    if (s.setting == Setting::vertical) return joined_vertical_view(s, true);

    std::vector<const ClientPartition*> ordered;
    for (const auto& c : s.clients) ordered.push_back(&c);
    std::sort(ordered.begin(), ordered.end(),
              [](const ClientPartition* a, const ClientPartition* b) {
                  return a->client_id < b->client_id;
              });
    DatasetTable out;
    for (const auto* c : ordered) {
        if (out.num_features == 0) {
            out.num_features = c->test.num_features;
            if (c->test.labels) out.labels.emplace();
        }
        for (size_t i = 0; i < c->test.num_rows(); ++i)
            out.append_row_from(c->test, i);
    }
    return out;
}

DatasetTable joint_train_view(const Scenario& s) {
    if (s.setting != Setting::vertical)
        throw AlignmentError("joint_train_view applies to vertical scenarios");
    return joined_vertical_view(s, false);
}

// --- evaluate ---------------------------------------------------------------

double evaluate(std::span<const double> predictions,
                std::span<const double> labels, Metric metric) {
    if (labels.empty() || predictions.empty())
        throw LengthMismatch("empty predictions or labels");
    if (predictions.size() % labels.size() != 0)
        throw LengthMismatch(std::to_string(predictions.size()) +
                             " predictions vs " + std::to_string(labels.size()) +
                             " labels");
    const size_t n = labels.size();
    const size_t per_row = predictions.size() / n;

    switch (metric) {
        case Metric::accuracy: {
            size_t hits = 0;
            for (size_t i = 0; i < n; ++i) {
                double predicted;
                if (per_row == 1) {
                    predicted = predictions[i] > 0.5 ? 1.0 : 0.0;
                } else {
                    size_t best = 0;
                    for (size_t c = 1; c < per_row; ++c)
                        if (predictions[i * per_row + c] >
                            predictions[i * per_row + best])
                            best = c;
                    predicted = static_cast<double>(best);
                }
                if (predicted == labels[i]) ++hits;
            }
            return static_cast<double>(hits) / static_cast<double>(n);
        }
        case Metric::auc: {
            if (per_row != 1)
                throw LengthMismatch("auc expects one score per row");
            size_t positives = 0;
            for (double y : labels) {
                if (y != 0.0 && y != 1.0)
                    throw DegenerateAuc("auc labels must be 0/1");
                if (y == 1.0) ++positives;
            }
            size_t negatives = n - positives;
            if (positives == 0 || negatives == 0)
                throw DegenerateAuc("labels contain a single class");
            // Mann-Whitney with average ranks over tied prediction groups.
            std::vector<size_t> order(n);
            std::iota(order.begin(), order.end(), size_t{0});
            std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
                return predictions[a] < predictions[b];
            });
            double rank_sum_pos = 0.0;
            size_t i = 0;
            while (i < n) {
                size_t j = i;
                while (j < n && predictions[order[j]] == predictions[order[i]]) ++j;
                double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
                for (size_t k = i; k < j; ++k)
                    if (labels[order[k]] == 1.0) rank_sum_pos += avg_rank;
                i = j;
            }
            double pos = static_cast<double>(positives);
            double neg = static_cast<double>(negatives);
            return (rank_sum_pos - pos * (pos + 1.0) / 2.0) / (pos * neg);
        }
        case Metric::mse: {
            if (per_row != 1)
                throw LengthMismatch("mse expects one value per row");
            double sum = 0.0;
            for (size_t i = 0; i < n; ++i) {
                double d = predictions[i] - labels[i];
                sum += d * d;
            }
            return sum / static_cast<double>(n);
        }
    }
    throw LengthMismatch("unreachable metric");
}

// --- generate_synthetic -----------------------------------------------------

namespace {

struct LinearTruth {
    size_t outputs = 1;
    size_t features = 0;
    std::vector<double> weights;  // outputs x features
    std::vector<double> bias;     // outputs

    double score(std::span<const double> x, size_t out) const {
        double z = bias[out];
        const double* w = weights.data() + out * features;
        for (size_t f = 0; f < features; ++f) z += w[f] * x[f];
        return z;
    }
};

LinearTruth make_truth(const SyntheticSpec& spec, std::mt19937_64& rng) {
    LinearTruth t;
    t.features = spec.features;
    t.outputs = spec.task == Task::multiclass_classification ? spec.num_classes : 1;
    t.weights.resize(t.outputs * t.features);
    t.bias.resize(t.outputs);
    for (auto& w : t.weights) w = normal01(rng);
    for (auto& b : t.bias) b = 0.25 * normal01(rng);
    // Unit-normalize each output's weight row so noise scales are comparable
    // across feature counts.
    for (size_t o = 0; o < t.outputs; ++o) {
        double norm = 0.0;
        for (size_t f = 0; f < t.features; ++f) {
            double w = t.weights[o * t.features + f];
            norm += w * w;
        }
        norm = std::sqrt(norm);
        if (norm > 0)
            for (size_t f = 0; f < t.features; ++f)
                t.weights[o * t.features + f] /= norm;
    }
    return t;
}

double make_label(const SyntheticSpec& spec, const LinearTruth& truth,
                  std::span<const double> x, std::mt19937_64& rng) {
    switch (spec.task) {
        case Task::binary_classification: {
            double z = truth.score(x, 0);
            if (spec.bernoulli_scale > 0.0) {
                double p = 1.0 / (1.0 + std::exp(-spec.bernoulli_scale * z));
                return uniform01(rng) < p ? 1.0 : 0.0;
            }
            double noisy = z + spec.noise * normal01(rng);
            return noisy > 0.0 ? 1.0 : 0.0;
        }
        case Task::multiclass_classification: {
            size_t best = 0;
            double best_score = -1e300, second = -1e300;
            for (size_t c = 0; c < truth.outputs; ++c) {
                double z = truth.score(x, c) + spec.noise * normal01(rng);
                if (z > best_score) {
                    second = best_score;
                    best_score = z;
                    best = c;
                } else if (z > second) {
                    second = z;
                }
            }
            if (best_score - second < spec.class_margin) return -1.0;  // resample
            return static_cast<double>(best);
        }
        case Task::regression:
            return truth.score(x, 0) + spec.noise * normal01(rng);
    }
    return 0.0;
}

void validate_spec(const SyntheticSpec& spec) {
    if (spec.clients < 1) throw InvalidSpec("clients must be >= 1");
    if (spec.features < 1) throw InvalidSpec("features must be >= 1");
    if (spec.rows_per_client.empty())
        throw InvalidSpec("rows_per_client must be given");
    if (spec.rows_per_client.size() != 1 &&
        spec.rows_per_client.size() != spec.clients)
        throw InvalidSpec("rows_per_client must have 1 or `clients` entries");
    for (size_t rows : spec.rows_per_client)
        if (rows < 2) throw InvalidSpec("each client needs at least 2 rows");
    if (spec.task == Task::multiclass_classification && spec.num_classes < 2)
        throw InvalidSpec("multiclass needs num_classes >= 2");
    if (spec.test_fraction <= 0.0 || spec.test_fraction >= 1.0)
        throw InvalidSpec("test_fraction must be in (0,1)");
    if (spec.setting == Setting::vertical) {
        if (!spec.vertical) throw InvalidSpec("vertical layout missing");
        size_t total = 0;
        for (const auto& [party, count] : spec.vertical->features_per_party)
            total += count;
        if (total != spec.features)
            throw InvalidSpec("vertical feature counts must sum to `features`");
        if (spec.vertical->features_per_party.size() != spec.clients)
            throw InvalidSpec("vertical layout must cover every party");
    }
}

size_t rows_for_client(const SyntheticSpec& spec, size_t client) {
    return spec.rows_per_client.size() == 1 ? spec.rows_per_client[0]
                                            : spec.rows_per_client[client];
}

void draw_row(const SyntheticSpec& spec, const LinearTruth& truth,
              std::mt19937_64& rng, std::vector<double>& x, double& y) {
    for (;;) {
        for (auto& v : x) v = normal01(rng);
        y = make_label(spec, truth, x, rng);
        bool resample = spec.task == Task::multiclass_classification && y < 0.0;
        if (!resample) return;
    }
}

} // namespace

Scenario generate_synthetic(const SyntheticSpec& spec, uint64_t seed) {
    validate_spec(spec);

    Scenario out;
    out.name = spec.name;
    out.setting = spec.setting;
    out.task = spec.task;
    out.num_classes =
        spec.task == Task::multiclass_classification ? spec.num_classes : 2;
    out.metric = spec.task == Task::regression ? Metric::mse
                 : spec.task == Task::multiclass_classification
                     ? Metric::accuracy
                     : Metric::auc;

    auto truth_rng = make_rng(seed, 0x7472757468ULL);  // independent of rows
    LinearTruth truth = make_truth(spec, truth_rng);

    if (spec.setting != Setting::vertical) {
        for (size_t c = 0; c < spec.clients; ++c) {
            ClientPartition part;
            part.client_id = static_cast<uint32_t>(c);
            part.train.num_features = spec.features;
            part.train.labels.emplace();
            part.test.num_features = spec.features;
            part.test.labels.emplace();
            auto rng = make_rng(seed, 1, c);
            size_t rows = rows_for_client(spec, c);
            std::vector<double> x(spec.features);
            for (size_t r = 0; r < rows; ++r) {
                double y = 0.0;
                draw_row(spec, truth, rng, x, y);
                std::string id =
                    "c" + std::to_string(c) + "_r" + std::to_string(r);
                bool is_test = id_hash_test_split(spec.name, id, spec.test_fraction);
                (is_test ? part.test : part.train).append_row(id, x, y);
            }
            if (part.train.num_rows() == 0 || part.test.num_rows() == 0)
                throw InvalidSpec("client " + std::to_string(c) +
                                  " ended with an empty split; add rows");
            out.clients.push_back(std::move(part));
        }
        return out;
    }

    // Vertical: generate the joint rows once, then slice columns per party.
    out.vertical_split = spec.vertical;
    std::vector<uint32_t> party_ids;
    for (const auto& [party, _] : spec.vertical->features_per_party)
        party_ids.push_back(party);
    std::sort(party_ids.begin(), party_ids.end());

    std::vector<ClientPartition> parties;
    for (uint32_t party : party_ids) {
        ClientPartition p;
        p.client_id = party;
        p.train.num_features = spec.vertical->features_per_party.at(party);
        p.test.num_features = p.train.num_features;
        if (party == spec.vertical->label_party) {
            p.train.labels.emplace();
            p.test.labels.emplace();
        }
        parties.push_back(std::move(p));
    }

    auto rng = make_rng(seed, 1, 0);
    size_t rows = rows_for_client(spec, 0);
    std::vector<double> x(spec.features);
    for (size_t r = 0; r < rows; ++r) {
        double y = 0.0;
        draw_row(spec, truth, rng, x, y);
        std::string id = "r" + std::to_string(r);
        bool is_test = id_hash_test_split(spec.name, id, spec.test_fraction);
        size_t offset = 0;
        for (auto& party : parties) {
            auto& table = is_test ? party.test : party.train;
            std::span<const double> slice(x.data() + offset, table.num_features);
            std::optional<double> label;
            if (party.client_id == spec.vertical->label_party) label = y;
            table.append_row(id, slice, label);
            offset += table.num_features;
        }
    }
    for (const auto& p : parties)
        if (p.train.num_rows() == 0 || p.test.num_rows() == 0)
            throw InvalidSpec("vertical split ended with an empty side");
    out.clients = std::move(parties);
    return out;
}

} // namespace fedbench::scenario
