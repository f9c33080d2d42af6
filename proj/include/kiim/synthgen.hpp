#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kiim/core.hpp"
#include "kiim/knowledge.hpp"

namespace kiim::synthgen {

enum class FieldShape { Rect, Disc };

struct FieldInfo {
    FieldShape shape = FieldShape::Rect;
    int crop = 0;
    int irrigation = 0;
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // bbox, inclusive
};

struct StateSpec {
    std::string state_id = "state_a";
    int scene_size = 256;
    int patch_size = 64;
    int fields_per_scene = 42;
    int rect_min = 8, rect_max = 16;
    int disc_rmin = 5, disc_rmax = 8;
    double sprinkler_disc_fraction = 0.7;  // discs only ever mark sprinkler fields
    std::vector<double> crop_freq;         // [G], index 0 unused
    std::vector<double> p_true;            // [G*K], row-stochastic
    std::vector<double> signature;         // [G*K*6] band means, defaulted when empty
    double noise_std = 0.02;

    void validate() const;
    uint64_t digest() const;
    std::string to_json_string() const;
    static StateSpec from_json_string(const std::string& s);
    static StateSpec load(const std::string& path);
    void save(const std::string& path) const;
};

struct Scene {
    core::Sample sample;
    std::vector<FieldInfo> fields;
    uint64_t spec_digest = 0;
    uint64_t seed = 0;
    int fields_skipped = 0;  // placement attempts that ran out of retries
};

// Band means per (crop group, irrigation class): irrigation drives the
// NIR/SWIR contrast (flood bright in NDWI, drip weak), crops drive RGB.
std::vector<double> default_signature_table(uint64_t signature_seed, int groups, int classes);

// The four-state toy corpus: shared signatures, per-state crop mixes and
// crop->irrigation preferences with drip prevalence from ~20% down to ~3%.
// State D prefers drip on different crops than the others.
StateSpec default_state_spec(int which);

Scene generate_scene(const StateSpec& spec, uint64_t seed);

std::vector<core::Sample> patchify(const Scene& scene, int patch_size);

// keeps a patch iff its non-irrigated fraction is <= max_nonirrigated_fraction
std::vector<core::Sample> filter_patches(std::vector<core::Sample> samples,
                                         double max_nonirrigated_fraction = 0.95);

// Generates scenes until n_patches filtered patches exist, writes them plus a
// manifest into out_dir. Deterministic in (spec, seed).
core::DatasetManifest build_corpus(const StateSpec& spec, int n_patches, uint64_t seed,
                                   const std::string& out_dir,
                                   const std::string& manifest_name = "manifest.json");

// 2:1-style multi-state builder: every patch containing the minority class is
// included, then majority patches are drawn across states until
// total == ratio * minority_count.
core::DatasetManifest build_multistate_dataset(const std::vector<core::DatasetManifest>& state_manifests,
                                               int target_minority_class, double imbalance_ratio,
                                               uint64_t seed);

// in-memory accumulation used by the manifest-level estimator and the
// large-sample recovery tests
void accumulate_area_stats(knowledge::AreaStats& stats, const core::Sample& sample);

}  // namespace kiim::synthgen
