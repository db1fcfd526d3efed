#include "fedbench/advisor.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fedbench/errors.hpp"
#include "fedbench/util.hpp"

namespace fedbench::advisor {

using nlohmann::json;
using nlohmann::ordered_json;

std::string flag_name(Flag f) {
    switch (f) {
        case Flag::yes: return "Y";
        case Flag::no: return "N";
        case Flag::claimed_but_broken: return "Y*";
        case Flag::not_applicable: return "N/A";
    }
    return "?";
}

Flag flag_from_name(const std::string& name) {
    if (name == "Y") return Flag::yes;
    if (name == "N") return Flag::no;
    if (name == "Y*") return Flag::claimed_but_broken;
    if (name == "N/A") return Flag::not_applicable;
    throw SchemaError("unknown flag value '" + name + "'");
}

Tri tri_from_name(const std::string& name) {
    if (name == "yes") return Tri::yes;
    if (name == "no") return Tri::no;
    if (name == "unsure") return Tri::unsure;
    throw SchemaError("unknown tri-state '" + name + "'");
}

const std::vector<std::string>& required_attributes() {
    static const std::vector<std::string> attrs = {
        "model_support.horizontal.regression",
        "model_support.horizontal.neural_network",
        "model_support.horizontal.tree",
        "model_support.vertical.regression",
        "model_support.vertical.neural_network",
        "model_support.vertical.tree",
        "deployment.single_host_simulation",
        "deployment.multi_host",
        "deployment.cross_device",
        "privacy.no_third_party_vertical",
        "privacy.aggregator_no_model_params",
        "privacy.secure_aggregation",
        "privacy.clients_no_model_params_vertical",
        "privacy.clients_no_gradients_vertical",
        "privacy.central_dp",
        "docs.tutorial",
        "docs.code_example",
        "docs.api",
        "engineering.tests_benchmark",
        "engineering.gpu",
        "blocks.cnn",
        "blocks.rnn",
    };
    return attrs;
}

FeatureMatrix matrix_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw SchemaError(std::string("matrix: ") + e.what());
    }
    FeatureMatrix matrix;
    try {
        for (const auto& fw : j.at("frameworks")) {
            Framework f;
            f.name = fw.at("name").get<std::string>();
            f.category = fw.value("category", "");
            for (const auto& [key, value] : fw.at("flags").items())
                f.flags[key] = flag_from_name(value.get<std::string>());
            const json lists = fw.value("lists", json::object());
            for (const auto& [key, value] : lists.items()) {
                for (const auto& item : value)
                    f.lists[key].push_back(item.get<std::string>());
            }
            const json ranks = fw.value("system_rank", json::object());
            for (const auto& [setting, factors] : ranks.items()) {
                for (const auto& [factor, rank] : factors.items())
                    f.system_rank[setting][factor] = rank.get<int>();
            }
            matrix.frameworks.push_back(std::move(f));
        }
    } catch (const json::exception& e) {
        throw SchemaError(std::string("matrix: ") + e.what());
    }
    if (matrix.frameworks.empty()) throw SchemaError("matrix has no frameworks");
    for (const auto& f : matrix.frameworks) {
        for (const auto& attr : required_attributes()) {
            if (!f.flags.count(attr))
                throw SchemaError("framework '" + f.name +
                                  "' is missing attribute '" + attr + "'");
        }
        if (!f.lists.count("ml_backend"))
            throw SchemaError("framework '" + f.name +
                              "' is missing attribute 'ml_backend'");
    }
    return matrix;
}

FeatureMatrix load_matrix(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path))
        throw SchemaError("no such matrix file: " + path.string());
    return matrix_from_json(read_text_file(path));
}

std::string matrix_to_json(const FeatureMatrix& matrix) {
    ordered_json j;
    auto frameworks = ordered_json::array();
    for (const auto& f : matrix.frameworks) {
        ordered_json fw;
        fw["name"] = f.name;
        fw["category"] = f.category;
        ordered_json flags;
        for (const auto& [key, value] : f.flags) flags[key] = flag_name(value);
        fw["flags"] = flags;
        ordered_json lists;
        for (const auto& [key, value] : f.lists) lists[key] = value;
        fw["lists"] = lists;
        ordered_json ranks;
        for (const auto& [setting, factors] : f.system_rank) {
            ordered_json fr;
            for (const auto& [factor, rank] : factors) fr[factor] = rank;
            ranks[setting] = fr;
        }
        fw["system_rank"] = ranks;
        frameworks.push_back(std::move(fw));
    }
    j["frameworks"] = frameworks;
    return j.dump(2) + "\n";
}

void save_matrix(const FeatureMatrix& matrix,
                 const std::filesystem::path& path) {
    write_text_file(path, matrix_to_json(matrix));
}

FeatureMatrix shipped_matrix() {
    return load_matrix(data_dir() / "advisor_matrix.json");
}

Requirement requirement_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw SchemaError(std::string("requirement: ") + e.what());
    }
    Requirement req;
    req.setting = j.at("setting").get<std::string>();
    req.model_kind = j.at("model").get<std::string>();
    for (const auto& p : j.value("privacy", json::array()))
        req.privacy_needs.push_back(p.get<std::string>());
    req.deployment = j.value("deployment", req.deployment);
    if (j.contains("resource_priority")) {
        req.resource_priority.clear();
        for (const auto& r : j.at("resource_priority"))
            req.resource_priority.push_back(r.get<std::string>());
    }
    req.backend_preference = j.value("backend", "");
    req.differential_privacy =
        tri_from_name(j.value("differential_privacy", "unsure"));

    if (req.setting != "horizontal" && req.setting != "vertical")
        throw SchemaError("setting must be horizontal or vertical");
    if (req.model_kind != "regression" && req.model_kind != "neural_network" &&
        req.model_kind != "tree")
        throw SchemaError("model must be regression, neural_network or tree");
    std::set<std::string> priority(req.resource_priority.begin(),
                                   req.resource_priority.end());
    if (priority != std::set<std::string>{"time", "communication", "memory"})
        throw SchemaError(
            "resource_priority must be a permutation of time, communication, "
            "memory");
    return req;
}

namespace {

bool flag_ok(const Framework& f, const std::string& attr) {
    auto it = f.flags.find(attr);
    return it != f.flags.end() && it->second == Flag::yes;
}

std::string system_setting_key(const Requirement& req) {
    if (req.setting == "horizontal") return "horizontal_nn";
    return req.model_kind == "tree" ? "vertical_tree" : "vertical_nn";
}

int rank_of(const Framework& f, const std::string& setting,
            const std::string& factor) {
    auto s = f.system_rank.find(setting);
    if (s == f.system_rank.end()) return 99;
    auto r = s->second.find(factor);
    return r == s->second.end() ? 99 : r->second;
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    return s;
}

} // namespace

Selection select(const Requirement& req, const FeatureMatrix& matrix) {
    Selection out;
    std::vector<const Framework*> survivors;
    for (const auto& f : matrix.frameworks) survivors.push_back(&f);
    std::sort(survivors.begin(), survivors.end(),
              [](const Framework* a, const Framework* b) {
                  return a->name < b->name;
              });

    std::vector<std::string> eliminated;
    auto apply_filter = [&](const std::string& description,
                            auto&& predicate) {
        std::vector<const Framework*> kept;
        std::vector<std::string> dropped;
        for (const auto* f : survivors) {
            if (predicate(*f)) {
                kept.push_back(f);
            } else {
                dropped.push_back(f->name);
                eliminated.push_back(f->name + " fails: " + description);
            }
        }
        std::string line = "filter [" + description + "]: ";
        if (dropped.empty()) {
            line += "all pass";
        } else {
            line += "drops ";
            for (size_t i = 0; i < dropped.size(); ++i)
                line += (i ? ", " : "") + dropped[i];
        }
        out.trace.push_back(line);
        survivors = std::move(kept);
    };

    std::string support_attr =
        "model_support." + req.setting + "." + req.model_kind;
    apply_filter(support_attr + " = Y",
                 [&](const Framework& f) { return flag_ok(f, support_attr); });

    std::string deploy_attr = "deployment." + req.deployment;
    apply_filter(deploy_attr + " = Y",
                 [&](const Framework& f) { return flag_ok(f, deploy_attr); });

    for (const auto& need : req.privacy_needs)
        apply_filter(need + " = Y",
                     [&](const Framework& f) { return flag_ok(f, need); });

    if (req.differential_privacy == Tri::yes)
        apply_filter("privacy.central_dp = Y", [&](const Framework& f) {
            return flag_ok(f, "privacy.central_dp");
        });

    if (!req.backend_preference.empty()) {
        std::string want = lower(req.backend_preference);
        apply_filter("ml_backend includes " + want, [&](const Framework& f) {
            auto it = f.lists.find("ml_backend");
            if (it == f.lists.end()) return false;
            for (const auto& backend : it->second)
                if (lower(backend) == want) return true;
            return false;
        });
    }

    if (survivors.empty()) {
        std::string why = "no framework satisfies the requirement; ";
        for (const auto& e : eliminated) why += e + "; ";
        throw NoMatch(why);
    }

    std::string setting_key = system_setting_key(req);
    out.trace.push_back("ordering survivors by " + setting_key + " ranks: " +
                        req.resource_priority[0] + " > " +
                        req.resource_priority[1] + " > " +
                        req.resource_priority[2]);
    if (req.differential_privacy == Tri::unsure)
        out.trace.push_back(
            "differential privacy unsure: DP-capable frameworks break ties "
            "first");

    std::vector<Recommendation> recs;
    for (const auto* f : survivors) {
        Recommendation rec;
        rec.framework = f->name;
        for (const auto& factor : req.resource_priority)
            rec.ranks.push_back(rank_of(*f, setting_key, factor));
        rec.dp_capable = flag_ok(*f, "privacy.central_dp");
        recs.push_back(std::move(rec));
    }
    bool dp_tiebreak = req.differential_privacy == Tri::unsure;
    std::stable_sort(recs.begin(), recs.end(),
                     [&](const Recommendation& a, const Recommendation& b) {
                         if (a.ranks != b.ranks) return a.ranks < b.ranks;
                         if (dp_tiebreak && a.dp_capable != b.dp_capable)
                             return a.dp_capable;
                         return a.framework < b.framework;
                     });
    for (const auto& rec : recs) {
        std::string line = "rank " + rec.framework + ": ";
        for (size_t i = 0; i < req.resource_priority.size(); ++i) {
            line += req.resource_priority[i] + "=" +
                    (rec.ranks[i] == 99 ? "unranked"
                                        : std::to_string(rec.ranks[i]));
            if (i + 1 < req.resource_priority.size()) line += ", ";
        }
        if (rec.dp_capable) line += ", dp-capable";
        out.trace.push_back(line);
    }
    out.ranked = std::move(recs);
    return out;
}

std::string render_selection(const Selection& selection) {
    std::ostringstream out;
    out << "recommendation:\n";
    for (size_t i = 0; i < selection.ranked.size(); ++i)
        out << "  " << (i + 1) << ". " << selection.ranked[i].framework << "\n";
    out << "decision trace:\n";
    for (const auto& line : selection.trace) out << "  - " << line << "\n";
    return out.str();
}

std::string selection_to_json(const Selection& selection) {
    ordered_json j;
    auto ranked = ordered_json::array();
    for (const auto& rec : selection.ranked)
        ranked.push_back({{"framework", rec.framework},
                          {"ranks", rec.ranks},
                          {"dp_capable", rec.dp_capable}});
    j["ranked"] = ranked;
    j["trace"] = selection.trace;
    return j.dump(2) + "\n";
}

} // namespace fedbench::advisor
