#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace fedbench::advisor {

// Qualitative feature flags; asterisk entries ("claimed but cannot run")
// count as `no` wherever support is required.
enum class Flag { yes, no, claimed_but_broken, not_applicable };

std::string flag_name(Flag f);
Flag flag_from_name(const std::string& name);

struct Framework {
    std::string name;
    std::string category;
    std::map<std::string, Flag> flags;
    std::map<std::string, std::vector<std::string>> lists;  // e.g. ml_backend
    // setting key -> factor -> ordinal rank (1 = best); absent = unranked.
    std::map<std::string, std::map<std::string, int>> system_rank;
};

struct FeatureMatrix {
    std::vector<Framework> frameworks;
};

// The attributes every framework row must cover.
const std::vector<std::string>& required_attributes();

FeatureMatrix load_matrix(const std::filesystem::path& path);
FeatureMatrix matrix_from_json(const std::string& text);
std::string matrix_to_json(const FeatureMatrix& matrix);
void save_matrix(const FeatureMatrix& matrix,
                 const std::filesystem::path& path);
// The matrix shipped with the toolkit (data/advisor_matrix.json).
FeatureMatrix shipped_matrix();

enum class Tri { yes, no, unsure };
Tri tri_from_name(const std::string& name);

struct Requirement {
    std::string setting;     // "horizontal" | "vertical"
    std::string model_kind;  // "regression" | "neural_network" | "tree"
    std::vector<std::string> privacy_needs;  // privacy.* attribute names
    std::string deployment = "single_host_simulation";
    // permutation of {"time", "communication", "memory"}
    std::vector<std::string> resource_priority = {"time", "communication",
                                                  "memory"};
    std::string backend_preference;  // empty = no preference
    Tri differential_privacy = Tri::unsure;
};

Requirement requirement_from_json(const std::string& text);

struct Recommendation {
    std::string framework;
    std::vector<int> ranks;  // per priority factor; 99 = unranked
    bool dp_capable = false;
};

struct Selection {
    std::vector<Recommendation> ranked;
    std::vector<std::string> trace;  // every branch taken, human readable
};

// Hard-filters by functionality, then orders the survivors by the
// requirement's resource priority using the encoded system observations.
// Deterministic and independent of matrix row order; throws NoMatch with
// the eliminating constraints in the message when nothing survives.
Selection select(const Requirement& req, const FeatureMatrix& matrix);

std::string render_selection(const Selection& selection);
std::string selection_to_json(const Selection& selection);

} // namespace fedbench::advisor
