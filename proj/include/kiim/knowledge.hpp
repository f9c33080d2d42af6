#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kiim/core.hpp"
#include "kiim/tensor.hpp"

namespace kiim::knowledge {

// Sentinel for irrigation subtypes the source tables discard.
inline constexpr int kRemoved = -1;

struct LabelMappingTable {
    // raw subtype -> one of {"Flood","Sprinkler","Drip","Removed"}
    std::map<std::string, std::string> irrigation_map;
    // raw crop -> crop group name (one of the 20 groups incl. "UNK")
    std::map<std::string, std::string> crop_map;
};

// Counters for lenient-mode fallbacks.
struct MappingStats {
    uint64_t unknown_irrigation = 0;
    uint64_t unknown_crop = 0;
};

// Built-in defaults covering the full source vocabularies.
const LabelMappingTable& default_mapping_tables();
LabelMappingTable load_mapping_tables(const std::string& irrigation_csv, const std::string& crop_csv);
void write_default_tables(const std::string& irrigation_csv, const std::string& crop_csv);

// Returns an irrigation class index (flood/sprinkler/drip) or kRemoved.
// Unknown raw labels throw in strict mode, otherwise count as removed.
int map_irrigation_label(const std::string& raw, const LabelMappingTable& table, bool strict = false,
                         MappingStats* stats = nullptr);

// Returns a crop group index in [1,20]. Unknown raw crops throw in strict
// mode, otherwise fall back to the UNK group.
int map_crop_label(const std::string& raw, const LabelMappingTable& table, const core::ClassVocab& vocab,
                   bool strict = false, MappingStats* stats = nullptr);

struct AreaStats {
    std::string state_id;
    int groups = 0, classes = 0;
    std::vector<double> area;  // [G*K], pixel counts

    double& at(int g, int k) { return area[static_cast<size_t>(g) * classes + k]; }
    double at(int g, int k) const { return area[static_cast<size_t>(g) * classes + k]; }
    uint64_t digest() const;
    void merge(const AreaStats& other);
};

struct ProjectionMatrix {
    std::string state_id;
    uint64_t source_digest = 0;
    int groups = 0, classes = 0;
    std::vector<double> rows;  // [G*K], each row sums to 1

    double at(int g, int k) const { return rows[static_cast<size_t>(g) * classes + k]; }
    const double* row(int g) const { return rows.data() + static_cast<size_t>(g) * classes; }
    uint64_t digest() const;
    void validate() const;
};

// Pixel counts of (crop group, irrigation class) over the manifest's
// training split. Patches without a split tag count as training; a manifest
// holding only test patches is rejected.
AreaStats estimate_area_stats(const core::DatasetManifest& manifest);

// Eq. 2: row-normalized areas, uniform 1/K for all-zero rows.
ProjectionMatrix build_projection_matrix(const AreaStats& stats, int num_classes);

// Per-pixel lookup of the P row selected by the one-hot crop channel.
// crop_onehot is planar [G][H][W]; the result is planar [K][H][W].
nn::Tensor project_crop_mask(const std::vector<uint8_t>& crop_onehot, int height, int width,
                             const ProjectionMatrix& p);
// Fast path used by the model: same output, indexed crop map input.
nn::Tensor project_crop_indices(const std::vector<uint8_t>& crop_map, int height, int width,
                                const ProjectionMatrix& p);

void save_projection(const ProjectionMatrix& p, const std::string& path);
ProjectionMatrix load_projection(const std::string& path);

}  // namespace kiim::knowledge
