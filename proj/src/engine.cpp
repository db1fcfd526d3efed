#include "fedbench/engine.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>

#include <nlohmann/json.hpp>

#include "fedbench/errors.hpp"
#include "fedbench/util.hpp"

namespace fedbench::engine {

using scenario::Task;

std::string model_kind_name(ModelKind k) {
    switch (k) {
        case ModelKind::logistic_regression: return "logistic_regression";
        case ModelKind::linear_regression: return "linear_regression";
        case ModelKind::mlp: return "mlp";
        case ModelKind::gbdt: return "gbdt";
    }
    return "?";
}

ModelKind model_kind_from_name(const std::string& name) {
    if (name == "logistic_regression") return ModelKind::logistic_regression;
    if (name == "linear_regression") return ModelKind::linear_regression;
    if (name == "mlp") return ModelKind::mlp;
    if (name == "gbdt") return ModelKind::gbdt;
    throw ParseError("unknown model kind '" + name + "'");
}

void ModelSpec::validate() const {
    if (kind == ModelKind::mlp) {
        if (hidden_layers.empty())
            throw InvalidSpec("mlp needs at least one hidden layer");
        for (size_t w : hidden_layers)
            if (w < 1) throw InvalidSpec("hidden layer width must be >= 1");
    } else if (!hidden_layers.empty()) {
        throw InvalidSpec("hidden_layers only apply to mlp");
    }
    if (kind == ModelKind::gbdt) {
        if (gbdt.num_trees < 1) throw InvalidSpec("num_trees must be >= 1");
        if (gbdt.num_bins < 2) throw InvalidSpec("num_bins must be >= 2");
        if (gbdt.max_depth < 1) throw InvalidSpec("max_depth must be >= 1");
    }
}

size_t ModelParams::num_features() const {
    return shapes.empty() ? 0 : shapes.front().in;
}

// --- dense model internals --------------------------------------------------

namespace {

size_t dense_size(const std::vector<LayerShape>& shapes) {
    size_t n = 0;
    for (const auto& s : shapes)
        n += static_cast<size_t>(s.in) * s.out + s.out;
    return n;
}

std::vector<LayerShape> layer_shapes(const ModelSpec& spec, size_t num_features,
                                     size_t outputs) {
    std::vector<LayerShape> shapes;
    size_t in = num_features;
    if (spec.kind == ModelKind::mlp) {
        for (size_t width : spec.hidden_layers) {
            shapes.push_back({static_cast<uint32_t>(in),
                              static_cast<uint32_t>(width)});
            in = width;
        }
    }
    shapes.push_back({static_cast<uint32_t>(in), static_cast<uint32_t>(outputs)});
    return shapes;
}

// Views into the flat parameter vector: weights then biases per layer.
struct LayerView {
    const double* w;
    const double* b;
    size_t in, out;
};

std::vector<LayerView> layer_views(const ModelParams& p) {
    std::vector<LayerView> views;
    size_t offset = 0;
    for (const auto& s : p.shapes) {
        LayerView v;
        v.in = s.in;
        v.out = s.out;
        v.w = p.dense.data() + offset;
        offset += static_cast<size_t>(s.in) * s.out;
        v.b = p.dense.data() + offset;
        offset += s.out;
        views.push_back(v);
    }
    return views;
}

// Forward for one sample; fills z (pre-activation) and a (post-activation)
// per layer. Hidden layers use ReLU, the output layer is linear.
void forward_sample(const std::vector<LayerView>& layers,
                    std::span<const double> x,
                    std::vector<std::vector<double>>& z,
                    std::vector<std::vector<double>>& a) {
    std::span<const double> input = x;
    for (size_t l = 0; l < layers.size(); ++l) {
        const auto& layer = layers[l];
        z[l].assign(layer.out, 0.0);
        for (size_t o = 0; o < layer.out; ++o) {
            double acc = layer.b[o];
            const double* w = layer.w + o * layer.in;
            for (size_t i = 0; i < layer.in; ++i) acc += w[i] * input[i];
            z[l][o] = acc;
        }
        if (l + 1 < layers.size()) {
            a[l].resize(layer.out);
            for (size_t o = 0; o < layer.out; ++o)
                a[l][o] = z[l][o] > 0.0 ? z[l][o] : 0.0;
            input = a[l];
        }
    }
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Per-sample loss and dL/dz at the output layer (unscaled by batch size).
double loss_and_delta(Task objective, std::span<const double> z, double label,
                      std::vector<double>& delta) {
    switch (objective) {
        case Task::binary_classification: {
            double s = z[0];
            double p = sigmoid(s);
            delta.assign(1, p - label);
            return std::max(s, 0.0) - s * label + std::log1p(std::exp(-std::abs(s)));
        }
        case Task::multiclass_classification: {
            size_t c_count = z.size();
            double max_z = *std::max_element(z.begin(), z.end());
            double denom = 0.0;
            for (double v : z) denom += std::exp(v - max_z);
            delta.resize(c_count);
            size_t y = static_cast<size_t>(label);
            for (size_t c = 0; c < c_count; ++c) {
                double p = std::exp(z[c] - max_z) / denom;
                delta[c] = p - (c == y ? 1.0 : 0.0);
            }
            return std::log(denom) + max_z - z[y];
        }
        case Task::regression: {
            double d = z[0] - label;
            delta.assign(1, 2.0 * d);
            return d * d;
        }
    }
    return 0.0;
}

// Accumulates one sample's parameter gradient into `grad` (same layout as
// `dense`). Returns the sample loss.
double backward_sample(const std::vector<LayerView>& layers, Task objective,
                       std::span<const double> x, double label,
                       std::vector<double>& grad,
                       std::vector<std::vector<double>>& z,
                       std::vector<std::vector<double>>& a,
                       std::vector<double>& delta,
                       std::vector<double>& delta_prev) {
    forward_sample(layers, x, z, a);
    double loss = loss_and_delta(objective, z.back(), label, delta);

    size_t offset = grad.size();
    for (size_t l = layers.size(); l-- > 0;) {
        const auto& layer = layers[l];
        offset -= layer.in * layer.out + layer.out;
        double* gw = grad.data() + offset;
        double* gb = gw + layer.in * layer.out;
        std::span<const double> input = l == 0 ? x : std::span<const double>(a[l - 1]);
        for (size_t o = 0; o < layer.out; ++o) {
            double d = delta[o];
            gb[o] += d;
            double* row = gw + o * layer.in;
            for (size_t i = 0; i < layer.in; ++i) row[i] += d * input[i];
        }
        if (l > 0) {
            delta_prev.assign(layer.in, 0.0);
            for (size_t o = 0; o < layer.out; ++o) {
                double d = delta[o];
                const double* row = layers[l].w + o * layer.in;
                for (size_t i = 0; i < layer.in; ++i)
                    delta_prev[i] += row[i] * d;
            }
            for (size_t i = 0; i < layer.in; ++i)
                if (z[l - 1][i] <= 0.0) delta_prev[i] = 0.0;
            std::swap(delta, delta_prev);
        }
    }
    return loss;
}

void check_dense(const ModelParams& params) {
    if (params.kind == ModelKind::gbdt)
        throw InvalidSpec("operation does not apply to gbdt params");
    if (params.dense.size() != dense_size(params.shapes))
        throw ShapeMismatch("flat parameter count does not match shapes");
}

} // namespace

ModelParams init_model(const ModelSpec& spec, size_t num_features,
                       size_t num_classes, uint64_t seed) {
    spec.validate();
    if (num_features < 1) throw InvalidSpec("num_features must be >= 1");

    ModelParams p;
    p.kind = spec.kind;
    p.objective = spec.objective;
    if (spec.kind == ModelKind::gbdt) {
        p.num_outputs =
            spec.objective == Task::multiclass_classification ? num_classes : 1;
        return p;
    }
    size_t outputs = 1;
    if (spec.objective == Task::multiclass_classification) {
        if (num_classes < 2) throw InvalidSpec("multiclass needs >= 2 classes");
        outputs = num_classes;
    }
    p.num_outputs = outputs;
    p.shapes = layer_shapes(spec, num_features, outputs);
    p.dense.assign(dense_size(p.shapes), 0.0);

    if (spec.kind == ModelKind::mlp) {
        auto rng = make_rng(seed, 0x696e6974ULL);
        size_t offset = 0;
        for (const auto& s : p.shapes) {
            double limit = std::sqrt(6.0 / (static_cast<double>(s.in) + s.out));
            size_t weights = static_cast<size_t>(s.in) * s.out;
            for (size_t i = 0; i < weights; ++i)
                p.dense[offset + i] = uniform_range(rng, -limit, limit);
            offset += weights + s.out;  // biases stay zero
        }
    }
    return p;
}

ClientUpdate local_train(const ModelParams& params,
                         const scenario::DatasetTable& data,
                         const TrainConfig& cfg) {
    check_dense(params);
    if (data.num_rows() < 1) throw InvalidSpec("no training rows");
    if (!data.labels) throw InvalidSpec("training data has no labels");
    if (data.num_features != params.num_features())
        throw ShapeMismatch("data width " + std::to_string(data.num_features) +
                            " != model width " +
                            std::to_string(params.num_features()));
    if (cfg.local_epochs < 1 || cfg.batch_size < 1)
        throw InvalidSpec("epochs and batch_size must be positive");

    ModelParams out = params;
    const size_t n = data.num_rows();
    const size_t param_count = out.dense.size();
    std::vector<double> velocity(param_count, 0.0);
    std::vector<double> grad(param_count);
    std::vector<std::vector<double>> z(out.shapes.size()), a(out.shapes.size());
    std::vector<double> delta, delta_prev;
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    auto rng = make_rng(cfg.seed, 0x73687566ULL);

    double last_epoch_loss = 0.0;
    for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        deterministic_shuffle(order, rng);
        double epoch_loss = 0.0;
        for (size_t start = 0; start < n; start += cfg.batch_size) {
            size_t stop = std::min(n, start + cfg.batch_size);
            size_t batch = stop - start;
            std::fill(grad.begin(), grad.end(), 0.0);
            auto layers = layer_views(out);
            double batch_loss = 0.0;
            for (size_t k = start; k < stop; ++k) {
                size_t row = order[k];
                batch_loss += backward_sample(layers, out.objective,
                                              data.row(row),
                                              (*data.labels)[row], grad, z, a,
                                              delta, delta_prev);
            }
            if (!std::isfinite(batch_loss))
                throw NonFiniteLoss("loss diverged at epoch " +
                                    std::to_string(epoch));
            double inv_batch = 1.0 / static_cast<double>(batch);
            for (size_t j = 0; j < param_count; ++j) {
                double g = grad[j] * inv_batch;
                velocity[j] = cfg.momentum * velocity[j] - cfg.learning_rate * g;
                out.dense[j] += velocity[j];
            }
            epoch_loss += batch_loss;
        }
        last_epoch_loss = epoch_loss / static_cast<double>(n);
    }

    ClientUpdate update;
    update.new_params = std::move(out);
    update.num_samples = static_cast<int64_t>(n);
    update.train_loss = last_epoch_loss;
    return update;
}

ModelParams aggregate_fedavg(std::span<const ClientUpdate> updates) {
    if (updates.empty()) throw EmptyUpdateSet("no client updates");
    const ModelParams& first = updates.front().new_params;
    if (first.kind == ModelKind::gbdt)
        throw ShapeMismatch("tree ensembles cannot be averaged");
    int64_t total = 0;
    for (const auto& u : updates) {
        if (u.num_samples < 1) throw InvalidSpec("num_samples must be >= 1");
        if (u.new_params.shapes != first.shapes ||
            u.new_params.kind != first.kind)
            throw ShapeMismatch("client update shapes are not congruent");
        total += u.num_samples;
    }
    ModelParams out = first;
    std::fill(out.dense.begin(), out.dense.end(), 0.0);
    for (const auto& u : updates) {
        double w = static_cast<double>(u.num_samples) / static_cast<double>(total);
        for (size_t j = 0; j < out.dense.size(); ++j)
            out.dense[j] += w * u.new_params.dense[j];
    }
    return out;
}

std::vector<uint32_t> sample_clients(int total, int k, int round,
                                     uint64_t seed) {
    if (k < 1 || k > total)
        throw InvalidK("k=" + std::to_string(k) + " with " +
                       std::to_string(total) + " clients");
    std::vector<uint32_t> ids(static_cast<size_t>(total));
    std::iota(ids.begin(), ids.end(), 0u);
    auto rng = make_rng(seed, 0x73616d70ULL, static_cast<uint64_t>(round));
    for (int i = 0; i < k; ++i) {
        size_t j = i + static_cast<size_t>(
                           bounded_rand(rng, static_cast<uint64_t>(total - i)));
        std::swap(ids[static_cast<size_t>(i)], ids[j]);
    }
    ids.resize(static_cast<size_t>(k));
    std::sort(ids.begin(), ids.end());
    return ids;
}

std::vector<double> predict(const ModelParams& params,
                            std::span<const double> features, size_t rows,
                            size_t cols) {
    if (features.size() != rows * cols)
        throw ShapeMismatch("feature buffer does not match rows x cols");

    if (params.kind == ModelKind::gbdt) {
        size_t outputs = params.num_outputs;
        std::vector<double> margins(rows * outputs, 0.0);
        for (size_t t = 0; t < params.ensemble.size(); ++t) {
            size_t output = t % outputs;
            const auto& tree = params.ensemble[t];
            for (size_t r = 0; r < rows; ++r)
                margins[r * outputs + output] +=
                    tree.predict_margin(features.subspan(r * cols, cols));
        }
        if (params.objective == Task::regression) return margins;
        if (outputs == 1) {
            for (auto& m : margins) m = sigmoid(m);
            return margins;
        }
        for (size_t r = 0; r < rows; ++r) {
            double* row = margins.data() + r * outputs;
            double max_m = *std::max_element(row, row + outputs);
            double denom = 0.0;
            for (size_t c = 0; c < outputs; ++c) {
                row[c] = std::exp(row[c] - max_m);
                denom += row[c];
            }
            for (size_t c = 0; c < outputs; ++c) row[c] /= denom;
        }
        return margins;
    }

    check_dense(params);
    if (cols != params.num_features())
        throw ShapeMismatch("feature width " + std::to_string(cols) +
                            " != model width " +
                            std::to_string(params.num_features()));
    auto layers = layer_views(params);
    std::vector<std::vector<double>> z(params.shapes.size()),
        a(params.shapes.size());
    size_t outputs = params.num_outputs;
    std::vector<double> out(rows * outputs);
    for (size_t r = 0; r < rows; ++r) {
        forward_sample(layers, features.subspan(r * cols, cols), z, a);
        const auto& logits = z.back();
        switch (params.objective) {
            case Task::binary_classification:
                out[r] = sigmoid(logits[0]);
                break;
            case Task::regression:
                out[r] = logits[0];
                break;
            case Task::multiclass_classification: {
                double max_z = *std::max_element(logits.begin(), logits.end());
                double denom = 0.0;
                for (size_t c = 0; c < outputs; ++c)
                    denom += std::exp(logits[c] - max_z);
                for (size_t c = 0; c < outputs; ++c)
                    out[r * outputs + c] = std::exp(logits[c] - max_z) / denom;
                break;
            }
        }
    }
    return out;
}

double dataset_loss(const ModelParams& params,
                    const scenario::DatasetTable& data) {
    check_dense(params);
    if (!data.labels) throw InvalidSpec("data has no labels");
    auto layers = layer_views(params);
    std::vector<std::vector<double>> z(params.shapes.size()),
        a(params.shapes.size());
    std::vector<double> delta;
    double total = 0.0;
    for (size_t r = 0; r < data.num_rows(); ++r) {
        forward_sample(layers, data.row(r), z, a);
        total += loss_and_delta(params.objective, z.back(), (*data.labels)[r],
                                delta);
    }
    return total / static_cast<double>(data.num_rows());
}

int64_t train_flops(const ModelParams& params, int64_t rows, int epochs) {
    if (params.kind == ModelKind::gbdt) return 0;
    int64_t per_sample = 0;
    for (const auto& s : params.shapes)
        per_sample += 2ll * s.in * s.out;
    // forward + backward roughly costs three matrix passes
    return 3 * per_sample * rows * epochs;
}

int64_t aggregate_flops(const ModelParams& params, size_t num_updates) {
    return 2ll * static_cast<int64_t>(params.dense.size()) *
           static_cast<int64_t>(num_updates);
}

// --- serialization ----------------------------------------------------------

namespace {

void put_u32le(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_i32le(std::vector<uint8_t>& out, int32_t v) {
    put_u32le(out, static_cast<uint32_t>(v));
}
void put_u64le(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_f64le(std::vector<uint8_t>& out, double v) {
    put_u64le(out, std::bit_cast<uint64_t>(v));
}

struct Reader {
    std::span<const uint8_t> bytes;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > bytes.size())
            throw MalformedHeader("short model payload");
    }
    uint8_t u8() {
        need(1);
        return bytes[pos++];
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(bytes[pos++]) << (8 * i);
        return v;
    }
    int32_t i32() { return static_cast<int32_t>(u32()); }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(bytes[pos++]) << (8 * i);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
};

} // namespace

std::vector<uint8_t> serialize_params(const ModelParams& params) {
    std::vector<uint8_t> out;
    out.push_back(static_cast<uint8_t>(params.kind));
    out.push_back(static_cast<uint8_t>(params.objective));
    put_u32le(out, static_cast<uint32_t>(params.num_outputs));
    put_u32le(out, static_cast<uint32_t>(params.shapes.size()));
    for (const auto& s : params.shapes) {
        put_u32le(out, s.in);
        put_u32le(out, s.out);
    }
    put_u64le(out, params.dense.size());
    for (double v : params.dense) put_f64le(out, v);
    put_u32le(out, static_cast<uint32_t>(params.ensemble.size()));
    for (const auto& tree : params.ensemble) {
        put_u32le(out, static_cast<uint32_t>(tree.nodes.size()));
        for (const auto& n : tree.nodes) {
            put_i32le(out, n.feature);
            put_i32le(out, n.bin);
            put_f64le(out, n.split_value);
            put_i32le(out, n.left);
            put_i32le(out, n.right);
            put_f64le(out, n.leaf_weight);
        }
    }
    return out;
}

static ModelParams read_params(Reader& r) {
    ModelParams p;
    p.kind = static_cast<ModelKind>(r.u8());
    p.objective = static_cast<Task>(r.u8());
    p.num_outputs = r.u32();
    uint32_t n_shapes = r.u32();
    for (uint32_t i = 0; i < n_shapes; ++i) {
        LayerShape s;
        s.in = r.u32();
        s.out = r.u32();
        p.shapes.push_back(s);
    }
    uint64_t dense_count = r.u64();
    p.dense.reserve(dense_count);
    for (uint64_t i = 0; i < dense_count; ++i) p.dense.push_back(r.f64());
    uint32_t n_trees = r.u32();
    for (uint32_t t = 0; t < n_trees; ++t) {
        gbdt::Tree tree;
        uint32_t n_nodes = r.u32();
        for (uint32_t i = 0; i < n_nodes; ++i) {
            gbdt::TreeNode n;
            n.feature = r.i32();
            n.bin = r.i32();
            n.split_value = r.f64();
            n.left = r.i32();
            n.right = r.i32();
            n.leaf_weight = r.f64();
            tree.nodes.push_back(n);
        }
        p.ensemble.push_back(std::move(tree));
    }
    return p;
}

ModelParams deserialize_params(std::span<const uint8_t> bytes) {
    Reader r{bytes};
    ModelParams p = read_params(r);
    if (r.pos != bytes.size())
        throw MalformedHeader("trailing bytes in model payload");
    return p;
}

std::vector<uint8_t> serialize_update(const ClientUpdate& update) {
    std::vector<uint8_t> out;
    put_u32le(out, update.client_id);
    put_u64le(out, static_cast<uint64_t>(update.num_samples));
    put_f64le(out, update.train_loss);
    auto params = serialize_params(update.new_params);
    out.insert(out.end(), params.begin(), params.end());
    return out;
}

ClientUpdate deserialize_update(std::span<const uint8_t> bytes) {
    Reader r{bytes};
    ClientUpdate u;
    u.client_id = r.u32();
    u.num_samples = static_cast<int64_t>(r.u64());
    u.train_loss = r.f64();
    u.new_params = read_params(r);
    if (r.pos != bytes.size())
        throw MalformedHeader("trailing bytes in update payload");
    return u;
}

void save_checkpoint(const ModelParams& params,
                     const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["format_version"] = 1;
    j["kind"] = model_kind_name(params.kind);
    j["objective"] = scenario::task_name(params.objective);
    j["num_outputs"] = params.num_outputs;
    auto shapes = nlohmann::json::array();
    for (const auto& s : params.shapes) shapes.push_back({s.in, s.out});
    j["shapes"] = shapes;
    auto dense = nlohmann::json::array();
    for (double v : params.dense) dense.push_back(v);
    j["dense"] = dense;
    auto trees = nlohmann::json::array();
    for (const auto& tree : params.ensemble) {
        auto nodes = nlohmann::json::array();
        for (const auto& n : tree.nodes)
            nodes.push_back({{"feature", n.feature},
                             {"bin", n.bin},
                             {"split_value", n.split_value},
                             {"left", n.left},
                             {"right", n.right},
                             {"leaf_weight", n.leaf_weight}});
        trees.push_back(nodes);
    }
    j["trees"] = trees;
    write_text_file(path, j.dump(2) + "\n");
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("checkpoint " + path.string() + ": " + e.what());
    }
    if (j.value("format_version", 0) != 1)
        throw ParseError("unsupported checkpoint version");
    ModelParams p;
    p.kind = model_kind_from_name(j.at("kind").get<std::string>());
    p.objective = scenario::task_from_name(j.at("objective").get<std::string>());
    p.num_outputs = j.at("num_outputs").get<size_t>();
    for (const auto& s : j.at("shapes"))
        p.shapes.push_back({s.at(0).get<uint32_t>(), s.at(1).get<uint32_t>()});
    for (const auto& v : j.at("dense")) p.dense.push_back(v.get<double>());
    for (const auto& tree_json : j.at("trees")) {
        gbdt::Tree tree;
        for (const auto& n : tree_json) {
            gbdt::TreeNode node;
            node.feature = n.at("feature").get<int32_t>();
            node.bin = n.at("bin").get<int32_t>();
            node.split_value = n.at("split_value").get<double>();
            node.left = n.at("left").get<int32_t>();
            node.right = n.at("right").get<int32_t>();
            node.leaf_weight = n.at("leaf_weight").get<double>();
            tree.nodes.push_back(node);
        }
        p.ensemble.push_back(std::move(tree));
    }
    return p;
}

} // namespace fedbench::engine
