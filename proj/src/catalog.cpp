#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <fcntl.h>
#include <fstream>
#include <map>
#include <set>
#include <unordered_set>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "fedbench/errors.hpp"
#include "fedbench/scenario.hpp"
#include "fedbench/util.hpp"

namespace fedbench::scenario {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ManifestFile {
    uint32_t client_id = 0;
    std::string split;  // "train" | "test"
    std::string path;
    std::string sha256;  // empty = unpinned (trust-on-first-use)
};

struct FetchSource {
    std::string name;
    std::string url;
    std::string sha256;  // empty = unpinned
};

struct FetchAssign {
    std::string source;
    uint32_t client_id = 0;
    std::string role;  // "train" | "shared_test"
};

struct Manifest {
    std::string name;
    Setting setting = Setting::horizontal_cross_silo;
    Task task = Task::binary_classification;
    Metric metric = Metric::auc;
    size_t num_classes = 2;
    std::optional<VerticalLayout> vertical;
    std::vector<ManifestFile> files;
    std::string source_kind;  // bundled | generator | fetch
    json generator;           // SyntheticSpec fields + seed
    std::vector<FetchSource> fetch_sources;
    std::vector<FetchAssign> fetch_assign;
    std::string id_column = "id";
    std::string label_column = "y";
    double test_fraction = 0.2;
    fs::path dir;  // directory holding the manifest (for bundled payloads)
};

VerticalLayout parse_vertical_layout(const json& j) {
    VerticalLayout layout;
    layout.label_party = j.at("label_party").get<uint32_t>();
    for (const auto& [key, value] : j.at("features_per_party").items())
        layout.features_per_party[static_cast<uint32_t>(std::stoul(key))] =
            value.get<size_t>();
    return layout;
}

Manifest parse_manifest(const fs::path& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw ParseError("manifest " + path.string() + ": " + e.what());
    }
    Manifest m;
    m.dir = path.parent_path();
    try {
        m.name = j.at("name").get<std::string>();
        m.setting = setting_from_name(j.at("setting").get<std::string>());
        m.task = task_from_name(j.at("task").get<std::string>());
        m.metric = metric_from_name(j.at("metric").get<std::string>());
        m.num_classes = j.value("num_classes", size_t{2});
        if (j.contains("vertical_split"))
            m.vertical = parse_vertical_layout(j.at("vertical_split"));
        for (const auto& f : j.at("files")) {
            ManifestFile mf;
            mf.client_id = f.at("client_id").get<uint32_t>();
            mf.split = f.at("split").get<std::string>();
            mf.path = f.at("path").get<std::string>();
            if (f.contains("sha256") && !f.at("sha256").is_null())
                mf.sha256 = f.at("sha256").get<std::string>();
            m.files.push_back(std::move(mf));
        }
        const auto& src = j.at("source");
        m.source_kind = src.at("kind").get<std::string>();
        if (m.source_kind == "generator") {
            m.generator = src.at("generator");
        } else if (m.source_kind == "fetch") {
            for (const auto& s : src.at("sources")) {
                FetchSource fsrc;
                fsrc.name = s.at("name").get<std::string>();
                fsrc.url = s.at("url").get<std::string>();
                if (s.contains("sha256") && !s.at("sha256").is_null())
                    fsrc.sha256 = s.at("sha256").get<std::string>();
                m.fetch_sources.push_back(std::move(fsrc));
            }
            for (const auto& a : src.at("assign")) {
                FetchAssign fa;
                fa.source = a.at("source").get<std::string>();
                fa.role = a.at("role").get<std::string>();
                if (a.contains("client_id"))
                    fa.client_id = a.at("client_id").get<uint32_t>();
                m.fetch_assign.push_back(std::move(fa));
            }
            m.id_column = src.value("id_column", std::string("id"));
            m.label_column = src.value("label_column", std::string("y"));
            m.test_fraction = src.value("test_fraction", 0.2);
        } else if (m.source_kind != "bundled") {
            throw ParseError("unknown source kind '" + m.source_kind + "'");
        }
    } catch (const json::exception& e) {
        throw ParseError("manifest " + path.string() + ": " + e.what());
    }
    return m;
}

// Exclusive advisory lock so concurrent loads materialize the cache once.
class CacheLock {
public:
    explicit CacheLock(const fs::path& lock_path) {
        fd_ = ::open(lock_path.c_str(), O_CREAT | O_RDWR, 0644);
        if (fd_ < 0) throw IoFailure("cannot open lock " + lock_path.string());
        if (::flock(fd_, LOCK_EX) != 0) {
            ::close(fd_);
            throw IoFailure("cannot lock " + lock_path.string());
        }
    }
    ~CacheLock() {
        if (fd_ >= 0) {
            ::flock(fd_, LOCK_UN);
            ::close(fd_);
        }
    }

private:
    int fd_ = -1;
};

json read_cache_meta(const fs::path& dir) {
    fs::path p = dir / "cache_meta.json";
    if (!fs::exists(p)) return json::object();
    try {
        return json::parse(read_text_file(p));
    } catch (const json::exception&) {
        return json::object();
    }
}

void write_cache_meta(const fs::path& dir, const json& meta) {
    write_text_file(dir / "cache_meta.json", meta.dump(2) + "\n");
}

// True when every manifest file exists and matches its pinned or
// trust-on-first-use checksum. Throws on a genuine mismatch.
bool cache_is_complete(const Manifest& m, const fs::path& dir) {
    json meta = read_cache_meta(dir);
    bool all_present = true;
    for (const auto& f : m.files) {
        fs::path p = dir / f.path;
        if (!fs::exists(p)) {
            all_present = false;
            continue;
        }
        std::string actual = sha256_file_hex(p);
        std::string expected = f.sha256;
        if (expected.empty() && meta.contains(f.path))
            expected = meta.at(f.path).get<std::string>();
        if (!expected.empty() && actual != expected)
            throw ChecksumMismatch(f.path + ": expected " + expected + ", got " +
                                   actual);
    }
    return all_present;
}

void verify_or_pin(const Manifest& m, const fs::path& dir) {
    json meta = read_cache_meta(dir);
    bool meta_changed = false;
    for (const auto& f : m.files) {
        fs::path p = dir / f.path;
        if (!fs::exists(p)) throw FetchFailure("missing cache file " + f.path);
        std::string actual = sha256_file_hex(p);
        if (!f.sha256.empty()) {
            if (actual != f.sha256)
                throw ChecksumMismatch(f.path + ": expected " + f.sha256 +
                                       ", got " + actual);
        } else {
            meta[f.path] = actual;
            meta_changed = true;
        }
    }
    if (meta_changed) write_cache_meta(dir, meta);
}

SyntheticSpec spec_from_json(const Manifest& m) {
    const json& g = m.generator;
    SyntheticSpec spec;
    spec.name = m.name;
    spec.setting = m.setting;
    spec.task = m.task;
    spec.num_classes = m.num_classes;
    spec.clients = g.at("clients").get<size_t>();
    spec.features = g.at("features").get<size_t>();
    if (g.at("rows_per_client").is_array()) {
        for (const auto& r : g.at("rows_per_client"))
            spec.rows_per_client.push_back(r.get<size_t>());
    } else {
        spec.rows_per_client.push_back(g.at("rows_per_client").get<size_t>());
    }
    spec.noise = g.value("noise", 0.0);
    spec.test_fraction = g.value("test_fraction", 0.2);
    spec.bernoulli_scale = g.value("bernoulli_scale", 0.0);
    spec.class_margin = g.value("class_margin", 0.0);
    spec.vertical = m.vertical;
    return spec;
}

void materialize_generator(const Manifest& m, const fs::path& dir) {
    SyntheticSpec spec = spec_from_json(m);
    uint64_t seed = m.generator.at("seed").get<uint64_t>();
    Scenario s = generate_synthetic(spec, seed);
    for (const auto& client : s.clients) {
        write_csv(client.train,
                  dir / (std::to_string(client.client_id) + "_train.csv"));
        write_csv(client.test,
                  dir / (std::to_string(client.client_id) + "_test.csv"));
    }
}

void materialize_bundled(const Manifest& m, const fs::path& dir) {
    for (const auto& f : m.files) {
        fs::path src = m.dir / f.path;
        if (!fs::exists(src))
            throw FetchFailure("bundled file missing from catalog: " +
                               src.string());
        fs::copy_file(src, dir / f.path, fs::copy_options::overwrite_existing);
    }
}

std::string download(const std::string& url) {
    if (url.rfind("file://", 0) == 0) {
        fs::path p = url.substr(7);
        if (!fs::exists(p)) throw FetchFailure("no such file: " + p.string());
        return read_text_file(p);
    }
    std::string scheme, rest;
    if (url.rfind("http://", 0) == 0) {
        scheme = "http";
        rest = url.substr(7);
    } else if (url.rfind("https://", 0) == 0) {
        scheme = "https";
        rest = url.substr(8);
    } else {
        throw FetchFailure("unsupported url: " + url);
    }
    auto slash = rest.find('/');
    std::string host = slash == std::string::npos ? rest : rest.substr(0, slash);
    std::string path = slash == std::string::npos ? "/" : rest.substr(slash);
    httplib::Result res;
    if (scheme == "https") {
        httplib::SSLClient client(host);
        client.set_connection_timeout(10);
        client.set_read_timeout(60);
        client.enable_server_certificate_verification(false);
        res = client.Get(path);
    } else {
        httplib::Client client(host);
        client.set_connection_timeout(10);
        client.set_read_timeout(60);
        res = client.Get(path);
    }
    if (!res)
        throw FetchFailure(url + ": " + httplib::to_string(res.error()));
    if (res->status != 200)
        throw FetchFailure(url + ": HTTP " + std::to_string(res->status));
    return res->body;
}

// Reads a third-party CSV by header names: the id column (synthesized from
// the row index when absent), the label column, and every remaining column
// as a feature in file order.
DatasetTable read_source_csv(const std::string& text, const std::string& id_col,
                             const std::string& label_col) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> header;
    size_t pos = 0;
    bool first = true;
    while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        std::string line = text.substr(
            pos, eol == std::string::npos ? std::string::npos : eol - pos);
        pos = eol == std::string::npos ? text.size() : eol + 1;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        size_t start = 0;
        for (;;) {
            size_t comma = line.find(',', start);
            if (comma == std::string::npos) {
                fields.push_back(line.substr(start));
                break;
            }
            fields.push_back(line.substr(start, comma - start));
            start = comma + 1;
        }
        if (first) {
            header = std::move(fields);
            first = false;
        } else {
            rows.push_back(std::move(fields));
        }
    }
    if (header.empty()) throw FetchFailure("source csv has no header");

    int id_idx = -1, label_idx = -1;
    std::vector<size_t> feature_idx;
    for (size_t i = 0; i < header.size(); ++i) {
        if (header[i] == id_col) {
            id_idx = static_cast<int>(i);
        } else if (header[i] == label_col) {
            label_idx = static_cast<int>(i);
        } else {
            feature_idx.push_back(i);
        }
    }

    DatasetTable table;
    table.num_features = feature_idx.size();
    if (label_idx >= 0) table.labels.emplace();
    size_t row_no = 0;
    for (const auto& fields : rows) {
        if (fields.size() != header.size())
            throw FetchFailure("ragged source csv row " + std::to_string(row_no));
        std::string id = id_idx >= 0 ? fields[static_cast<size_t>(id_idx)]
                                     : std::to_string(row_no);
        std::vector<double> x;
        x.reserve(feature_idx.size());
        for (size_t f : feature_idx) x.push_back(std::stod(fields[f]));
        std::optional<double> label;
        if (label_idx >= 0)
            label = std::stod(fields[static_cast<size_t>(label_idx)]);
        table.append_row(std::move(id), x, label);
        ++row_no;
    }
    return table;
}

void materialize_fetch(const Manifest& m, const fs::path& dir) {
    std::map<std::string, DatasetTable> sources;
    for (const auto& src : m.fetch_sources) {
        std::string body = download(src.url);
        if (!src.sha256.empty()) {
            std::string actual = sha256_hex(body);
            if (actual != src.sha256)
                throw ChecksumMismatch(src.url + ": expected " + src.sha256 +
                                       ", got " + actual);
        }
        sources[src.name] = read_source_csv(body, m.id_column, m.label_column);
    }

    std::map<uint32_t, DatasetTable> train, test;
    const DatasetTable* shared_test = nullptr;
    std::vector<uint32_t> client_order;
    for (const auto& a : m.fetch_assign) {
        auto it = sources.find(a.source);
        if (it == sources.end())
            throw FetchFailure("assign references unknown source '" + a.source +
                               "'");
        if (a.role == "shared_test") {
            shared_test = &it->second;
        } else if (a.role == "train") {
            client_order.push_back(a.client_id);
            train[a.client_id] = std::move(it->second);
        } else {
            throw FetchFailure("unknown assign role '" + a.role + "'");
        }
    }

    for (uint32_t client : client_order) {
        DatasetTable& full = train[client];
        DatasetTable tr, te;
        tr.num_features = te.num_features = full.num_features;
        if (full.labels) {
            tr.labels.emplace();
            te.labels.emplace();
        }
        if (shared_test) {
            tr = std::move(full);
        } else {
            for (size_t i = 0; i < full.num_rows(); ++i) {
                bool is_test =
                    id_hash_test_split(m.name, full.ids[i], m.test_fraction);
                (is_test ? te : tr).append_row_from(full, i);
            }
        }
        train[client] = std::move(tr);
        test[client] = std::move(te);
    }

    if (shared_test) {
        // Contiguous halves, one per client, so the global view replays the
        // shared file in order.
        size_t n = shared_test->num_rows();
        size_t k = client_order.size();
        size_t offset = 0;
        for (size_t c = 0; c < k; ++c) {
            size_t take = n / k + (c < n % k ? 1 : 0);
            DatasetTable& te = test[client_order[c]];
            te.num_features = shared_test->num_features;
            if (shared_test->labels) te.labels.emplace();
            for (size_t i = 0; i < take; ++i)
                te.append_row_from(*shared_test, offset + i);
            offset += take;
        }
    }

    for (uint32_t client : client_order) {
        write_csv(train[client], dir / (std::to_string(client) + "_train.csv"));
        write_csv(test[client], dir / (std::to_string(client) + "_test.csv"));
    }
}

Scenario read_cached(const Manifest& m, const fs::path& dir) {
    Scenario s;
    s.name = m.name;
    s.setting = m.setting;
    s.task = m.task;
    s.metric = m.metric;
    s.num_classes = m.num_classes;
    s.vertical_split = m.vertical;

    std::map<uint32_t, ClientPartition> parts;
    for (const auto& f : m.files) {
        DatasetTable table = read_csv(dir / f.path);
        auto& part = parts[f.client_id];
        part.client_id = f.client_id;
        (f.split == "train" ? part.train : part.test) = std::move(table);
    }
    for (auto& [id, part] : parts) s.clients.push_back(std::move(part));
    std::sort(s.clients.begin(), s.clients.end(),
              [](const ClientPartition& a, const ClientPartition& b) {
                  return a.client_id < b.client_id;
              });

    // Contract checks: widths agree, per-client train/test ids disjoint,
    // vertical layouts add up and have exactly one label party.
    for (const auto& c : s.clients) {
        if (c.train.num_features != c.test.num_features)
            throw ParseError(m.name + ": train/test width mismatch for client " +
                             std::to_string(c.client_id));
        std::unordered_set<std::string> train_ids(c.train.ids.begin(),
                                                  c.train.ids.end());
        for (const auto& id : c.test.ids)
            if (train_ids.count(id))
                throw ParseError(m.name + ": id '" + id +
                                 "' in both splits of client " +
                                 std::to_string(c.client_id));
    }
    if (s.setting == Setting::vertical) {
        if (!s.vertical_split)
            throw ParseError(m.name + ": vertical scenario without layout");
        size_t labels_seen = 0;
        size_t width = 0;
        for (const auto& c : s.clients) {
            width += c.train.num_features;
            if (c.train.labels) ++labels_seen;
            size_t expected =
                s.vertical_split->features_per_party.at(c.client_id);
            if (c.train.num_features != expected)
                throw ParseError(m.name + ": party " +
                                 std::to_string(c.client_id) + " has " +
                                 std::to_string(c.train.num_features) +
                                 " features, layout says " +
                                 std::to_string(expected));
        }
        if (labels_seen != 1)
            throw ParseError(m.name + ": expected exactly one label party, saw " +
                             std::to_string(labels_seen));
    }
    return s;
}

} // namespace

std::filesystem::path catalog_dir() { return data_dir() / "scenarios"; }

std::vector<std::string> catalog_names() {
    std::vector<std::string> names;
    fs::path dir = catalog_dir();
    if (!fs::exists(dir)) return names;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_directory() && fs::exists(entry.path() / "manifest.json"))
            names.push_back(entry.path().filename().string());
    }
    std::sort(names.begin(), names.end());
    return names;
}

CatalogEntry catalog_info(const std::string& name) {
    fs::path manifest_path = catalog_dir() / name / "manifest.json";
    if (!fs::exists(manifest_path))
        throw UnknownScenario(name + " (no manifest under " +
                              catalog_dir().string() + ")");
    Manifest m = parse_manifest(manifest_path);
    CatalogEntry entry;
    entry.name = m.name;
    entry.setting = m.setting;
    entry.task = m.task;
    entry.metric = m.metric;
    entry.num_classes = m.num_classes;
    std::set<uint32_t> ids;
    for (const auto& f : m.files) ids.insert(f.client_id);
    entry.num_clients = ids.size();
    entry.fetch_required = m.source_kind == "fetch";
    return entry;
}

Scenario load_scenario(const std::string& name,
                       const std::filesystem::path& cache_dir) {
    fs::path manifest_path = catalog_dir() / name / "manifest.json";
    if (!fs::exists(manifest_path))
        throw UnknownScenario(name + " (no manifest under " +
                              catalog_dir().string() + ")");
    Manifest m = parse_manifest(manifest_path);

    fs::path dir = cache_dir / name;
    fs::create_directories(dir);
    CacheLock lock(cache_dir / (name + ".lock"));

    if (!cache_is_complete(m, dir)) {
        if (m.source_kind == "bundled") {
            materialize_bundled(m, dir);
        } else if (m.source_kind == "generator") {
            materialize_generator(m, dir);
        } else {
            materialize_fetch(m, dir);
        }
        verify_or_pin(m, dir);
    }
    return read_cached(m, dir);
}

} // namespace fedbench::scenario
