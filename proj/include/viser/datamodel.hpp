#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

namespace viser {

class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Closed taxonomy: bonafide plus the seven attack types the leave-one-out
// protocol iterates over. Unknown tags are rejected at parse time.
enum class AttackType {
    bonafide = 0,
    printout,
    diseased,
    post_mortem,
    synthetic,
    contacts_plus_print,
    textured_contact,
    artificial,
};

inline constexpr std::array<AttackType, 8> kAllTags = {
    AttackType::bonafide,        AttackType::printout,
    AttackType::diseased,        AttackType::post_mortem,
    AttackType::synthetic,       AttackType::contacts_plus_print,
    AttackType::textured_contact, AttackType::artificial,
};

inline constexpr std::array<AttackType, 7> kAttackTags = {
    AttackType::printout,          AttackType::diseased,
    AttackType::post_mortem,       AttackType::synthetic,
    AttackType::contacts_plus_print, AttackType::textured_contact,
    AttackType::artificial,
};

inline const char* to_string(AttackType t) {
    switch (t) {
        case AttackType::bonafide: return "bonafide";
        case AttackType::printout: return "printout";
        case AttackType::diseased: return "diseased";
        case AttackType::post_mortem: return "post_mortem";
        case AttackType::synthetic: return "synthetic";
        case AttackType::contacts_plus_print: return "contacts_plus_print";
        case AttackType::textured_contact: return "textured_contact";
        case AttackType::artificial: return "artificial";
    }
    return "?";
}

inline std::optional<AttackType> parse_attack_type(const std::string& tag) {
    for (AttackType t : kAllTags)
        if (tag == to_string(t)) return t;
    return std::nullopt;
}

inline std::string closed_tag_set_message() {
    std::string msg = "known tags:";
    for (AttackType t : kAllTags) {
        msg += ' ';
        msg += to_string(t);
    }
    return msg;
}

enum class Label { bonafide = 0, attack = 1 };

inline const char* to_string(Label l) { return l == Label::bonafide ? "bonafide" : "attack"; }

struct IrisSample {
    std::string sample_id;
    std::string image_path;
    Label label = Label::bonafide;
    AttackType attack_type = AttackType::bonafide;
    std::string source_corpus;
};

struct DatasetManifest {
    std::vector<IrisSample> samples;
    int image_height = 0;
    int image_width = 0;
    // samples whose image file could not be resolved at load; the manifest
    // still loads, downstream stages decide how to handle the gaps
    std::vector<std::string> unresolved_images;

    bool degraded() const { return !unresolved_images.empty(); }

    std::map<AttackType, int> histogram() const {
        std::map<AttackType, int> counts;
        for (const auto& s : samples) counts[s.attack_type] += 1;
        return counts;
    }

    const IrisSample* find(const std::string& sample_id) const {
        for (const auto& s : samples)
            if (s.sample_id == sample_id) return &s;
        return nullptr;
    }
};

namespace detail {

inline IrisSample sample_from_json(const nlohmann::json& rec, size_t line_no) {
    auto require = [&](const char* key) -> const nlohmann::json& {
        if (!rec.contains(key))
            throw ParseError("manifest line " + std::to_string(line_no) + ": missing key '" +
                             key + "'");
        return rec.at(key);
    };
    IrisSample s;
    s.sample_id = require("sample_id").get<std::string>();
    s.image_path = require("image_path").get<std::string>();
    const std::string label = require("label").get<std::string>();
    if (label == "bonafide")
        s.label = Label::bonafide;
    else if (label == "attack")
        s.label = Label::attack;
    else
        throw ValidationError("manifest line " + std::to_string(line_no) +
                              ": unknown label '" + label + "' (bonafide|attack)");
    const std::string tag = require("attack_type").get<std::string>();
    const auto parsed = parse_attack_type(tag);
    if (!parsed)
        throw ValidationError("manifest line " + std::to_string(line_no) +
                              ": unknown attack_type '" + tag + "'; " + closed_tag_set_message());
    s.attack_type = *parsed;
    s.source_corpus = require("source_corpus").get<std::string>();
    return s;
}

}  // namespace detail

inline void validate_manifest(const DatasetManifest& manifest) {
    std::set<std::string> seen;
    bool any_bonafide = false;
    for (const auto& s : manifest.samples) {
        if (!seen.insert(s.sample_id).second)
            throw ValidationError("duplicate sample_id '" + s.sample_id + "'");
        const bool is_attack_label = s.label == Label::attack;
        const bool is_attack_type = s.attack_type != AttackType::bonafide;
        if (is_attack_label != is_attack_type)
            throw ValidationError("sample '" + s.sample_id +
                                  "': label and attack_type disagree (label=attack iff "
                                  "attack_type != bonafide)");
        if (!is_attack_label) any_bonafide = true;
    }
    if (!any_bonafide) throw ValidationError("no bonafide samples");
}

// Line-delimited JSON, one record per line; blank lines ignored. Relative
// image paths resolve against image_base (or the manifest's directory);
// missing files mark the manifest degraded rather than failing the load.
inline DatasetManifest load_manifest(const std::filesystem::path& path,
                                     int image_height = 0, int image_width = 0,
                                     std::filesystem::path image_base = {}) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open manifest " + path.string());
    DatasetManifest manifest;
    manifest.image_height = image_height;
    manifest.image_width = image_width;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError("manifest line " + std::to_string(line_no) + ": " + e.what());
        }
        manifest.samples.push_back(detail::sample_from_json(rec, line_no));
    }
    validate_manifest(manifest);
    if (image_base.empty()) image_base = path.parent_path();
    for (const auto& s : manifest.samples) {
        auto img = std::filesystem::path(s.image_path);
        if (img.is_relative()) img = image_base / img;
        if (!std::filesystem::exists(img)) manifest.unresolved_images.push_back(s.sample_id);
    }
    return manifest;
}

inline void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write manifest " + path.string());
    for (const auto& s : manifest.samples) {
        nlohmann::json rec{{"sample_id", s.sample_id},
                           {"image_path", s.image_path},
                           {"label", to_string(s.label)},
                           {"attack_type", to_string(s.attack_type)},
                           {"source_corpus", s.source_corpus}};
        out << rec.dump() << '\n';
    }
}

struct SummaryRow {
    Label label;
    AttackType attack_type;
    std::string source_corpus;
    int count = 0;
};

inline std::vector<SummaryRow> manifest_summary(const DatasetManifest& manifest) {
    std::map<std::tuple<Label, AttackType, std::string>, int> counts;
    for (const auto& s : manifest.samples)
        counts[{s.label, s.attack_type, s.source_corpus}] += 1;
    std::vector<SummaryRow> rows;
    rows.reserve(counts.size());
    for (const auto& [key, count] : counts)
        rows.push_back({std::get<0>(key), std::get<1>(key), std::get<2>(key), count});
    return rows;
}

}  // namespace viser
