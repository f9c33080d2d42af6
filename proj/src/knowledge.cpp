#include "kiim/knowledge.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

using nlohmann::json;

namespace kiim::knowledge {

uint64_t AreaStats::digest() const {
    std::ostringstream os;
    os << state_id << ";" << groups << "x" << classes << ";";
    os.precision(17);
    for (double a : area) os << a << ",";
    return nn::fnv1a(os.str());
}

void AreaStats::merge(const AreaStats& other) {
    if (groups != other.groups || classes != other.classes)
        throw ValidationError("AreaStats::merge: dimension mismatch");
    for (size_t i = 0; i < area.size(); ++i) area[i] += other.area[i];
}

uint64_t ProjectionMatrix::digest() const {
    std::ostringstream os;
    os << state_id << ";" << groups << "x" << classes << ";";
    os.precision(17);
    for (double v : rows) os << v << ",";
    return nn::fnv1a(os.str());
}

void ProjectionMatrix::validate() const {
    if (static_cast<int>(rows.size()) != groups * classes)
        throw ValidationError("projection: row storage size mismatch");
    for (int g = 0; g < groups; ++g) {
        double s = 0.0;
        for (int k = 0; k < classes; ++k) {
            double v = at(g, k);
            if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("projection: entry outside [0,1]");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-9) throw ValidationError("projection: row does not sum to 1");
    }
}

namespace {

std::map<std::string, std::string> read_csv_map(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open mapping table: " + path);
    std::map<std::string, std::string> out;
    std::string line;
    bool first = true;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (first) {
            first = false;
            if (line.rfind("raw_label,", 0) == 0) continue;  // header
        }
        // raw labels may contain commas only if quoted; the shipped tables
        // never need quoting, so split on the last comma
        auto pos = line.rfind(',');
        if (pos == std::string::npos) throw ValidationError("malformed mapping row: " + line);
        out[line.substr(0, pos)] = line.substr(pos + 1);
    }
    return out;
}

void write_csv_map(const std::map<std::string, std::string>& m, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "raw_label,target\n";
    for (const auto& [raw, target] : m) os << raw << "," << target << "\n";
}

}  // namespace

LabelMappingTable load_mapping_tables(const std::string& irrigation_csv, const std::string& crop_csv) {
    LabelMappingTable t;
    t.irrigation_map = read_csv_map(irrigation_csv);
    t.crop_map = read_csv_map(crop_csv);
    return t;
}

void write_default_tables(const std::string& irrigation_csv, const std::string& crop_csv) {
    const LabelMappingTable& t = default_mapping_tables();
    write_csv_map(t.irrigation_map, irrigation_csv);
    write_csv_map(t.crop_map, crop_csv);
}

int map_irrigation_label(const std::string& raw, const LabelMappingTable& table, bool strict,
                         MappingStats* stats) {
    auto it = table.irrigation_map.find(raw);
    if (it == table.irrigation_map.end()) {
        if (strict) throw ValidationError("unknown irrigation label: " + raw);
        if (stats) ++stats->unknown_irrigation;
        return kRemoved;
    }
    if (it->second == "Flood") return core::kFlood;
    if (it->second == "Sprinkler") return core::kSprinkler;
    if (it->second == "Drip") return core::kDrip;
    if (it->second == "Removed") return kRemoved;
    throw ValidationError("invalid irrigation mapping target: " + it->second);
}

int map_crop_label(const std::string& raw, const LabelMappingTable& table, const core::ClassVocab& vocab,
                   bool strict, MappingStats* stats) {
    auto it = table.crop_map.find(raw);
    std::string group;
    if (it == table.crop_map.end()) {
        if (strict) throw ValidationError("unknown crop label: " + raw);
        if (stats) ++stats->unknown_crop;
        group = "UNK";
    } else {
        group = it->second;
    }
    int idx = vocab.crop_group_index(group);
    if (idx < 1) throw ValidationError("crop group not in vocabulary: " + group);
    return idx;
}

AreaStats estimate_area_stats(const core::DatasetManifest& manifest) {
    if (manifest.patches.empty()) throw ValidationError("estimate_area_stats: empty manifest");
    AreaStats stats;
    stats.groups = manifest.vocab.num_groups();
    stats.classes = manifest.vocab.num_classes();
    stats.area.assign(static_cast<size_t>(stats.groups) * stats.classes, 0.0);

    bool any_training = false;
    std::string state;
    bool single_state = true;
    for (const auto& rec : manifest.patches) {
        if (rec.split == "test") continue;
        any_training = true;
        if (state.empty())
            state = rec.state_id;
        else if (state != rec.state_id)
            single_state = false;
        core::Sample s = core::load_sample(manifest.patch_path(rec), manifest.vocab);
        for (int64_t i = 0; i < s.pixels(); ++i)
            stats.at(s.crop[static_cast<size_t>(i)], s.label[static_cast<size_t>(i)]) += 1.0;
    }
    if (!any_training) throw ValidationError("projection must be built from training data");
    stats.state_id = single_state ? state : "multi";
    return stats;
}

ProjectionMatrix build_projection_matrix(const AreaStats& stats, int num_classes) {
    if (num_classes != stats.classes) throw ValidationError("build_projection_matrix: class count mismatch");
    for (double a : stats.area) {
        if (!(a >= 0.0) || !std::isfinite(a)) throw ValidationError("build_projection_matrix: negative area entry");
    }
    ProjectionMatrix p;
    p.state_id = stats.state_id;
    p.source_digest = stats.digest();
    p.groups = stats.groups;
    p.classes = stats.classes;
    p.rows.assign(stats.area.size(), 0.0);
    for (int g = 0; g < p.groups; ++g) {
        double total = 0.0;
        for (int k = 0; k < p.classes; ++k) total += stats.at(g, k);
        for (int k = 0; k < p.classes; ++k)
            p.rows[static_cast<size_t>(g) * p.classes + k] =
                total > 0.0 ? stats.at(g, k) / total : 1.0 / p.classes;
    }
    p.validate();
    return p;
}

nn::Tensor project_crop_indices(const std::vector<uint8_t>& crop_map, int height, int width,
                                const ProjectionMatrix& p) {
    const int64_t hw = static_cast<int64_t>(height) * width;
    if (static_cast<int64_t>(crop_map.size()) != hw)
        throw ValidationError("project_crop_indices: shape mismatch");
    nn::Tensor out({p.classes, height, width});
    for (int64_t i = 0; i < hw; ++i) {
        const uint8_t g = crop_map[static_cast<size_t>(i)];
        if (g >= p.groups) throw ValidationError("project_crop_indices: crop value out of range");
        const double* row = p.row(g);
        for (int k = 0; k < p.classes; ++k) out[k * hw + i] = row[k];
    }
    return out;
}

nn::Tensor project_crop_mask(const std::vector<uint8_t>& crop_onehot, int height, int width,
                             const ProjectionMatrix& p) {
    const int64_t hw = static_cast<int64_t>(height) * width;
    if (static_cast<int64_t>(crop_onehot.size()) != hw * p.groups)
        throw ValidationError("project_crop_mask: dimension mismatch with projection matrix");
    std::vector<uint8_t> crop(static_cast<size_t>(hw), 255);
    for (int g = 0; g < p.groups; ++g)
        for (int64_t i = 0; i < hw; ++i)
            if (crop_onehot[static_cast<size_t>(g) * hw + i]) {
                if (crop[static_cast<size_t>(i)] != 255)
                    throw ValidationError("project_crop_mask: one-hot has multiple set channels");
                crop[static_cast<size_t>(i)] = static_cast<uint8_t>(g);
            }
    for (uint8_t g : crop)
        if (g == 255) throw ValidationError("project_crop_mask: one-hot has empty pixel");
    return project_crop_indices(crop, height, width, p);
}

void save_projection(const ProjectionMatrix& p, const std::string& path) {
    const core::ClassVocab vocab = core::ClassVocab::standard();
    json j;
    j["format"] = "kiim-projection";
    j["state_id"] = p.state_id;
    j["source_digest"] = p.source_digest;
    j["crop_groups"] = vocab.crop_groups;
    j["irrigation_classes"] = vocab.irrigation_classes;
    json rows = json::array();
    for (int g = 0; g < p.groups; ++g) {
        json row = json::array();
        for (int k = 0; k < p.classes; ++k) row.push_back(p.at(g, k));
        rows.push_back(std::move(row));
    }
    j["rows"] = std::move(rows);
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << j.dump(1) << "\n";
}

ProjectionMatrix load_projection(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path);
    json j = json::parse(is);
    ProjectionMatrix p;
    p.state_id = j.value("state_id", "");
    p.source_digest = j.value("source_digest", 0ULL);
    auto rows = j.at("rows");
    p.groups = static_cast<int>(rows.size());
    p.classes = p.groups ? static_cast<int>(rows[0].size()) : 0;
    for (const auto& row : rows)
        for (const auto& v : row) p.rows.push_back(v.get<double>());
    p.validate();
    return p;
}

}  // namespace kiim::knowledge
