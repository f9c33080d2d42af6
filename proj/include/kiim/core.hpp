#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace kiim {

struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace core {

// ---------------------------------------------------------------------------
// Vocabularies
// ---------------------------------------------------------------------------

struct ClassVocab {
    std::vector<std::string> irrigation_classes;  // K = 4
    std::vector<std::string> crop_groups;         // G = 21, index 0 = background

    static ClassVocab standard();
    int num_classes() const { return static_cast<int>(irrigation_classes.size()); }
    int num_groups() const { return static_cast<int>(crop_groups.size()); }
    uint64_t hash() const;
    void validate() const;
    int crop_group_index(const std::string& name) const;  // -1 when absent
};

inline constexpr int kNonIrrigated = 0;
inline constexpr int kFlood = 1;
inline constexpr int kSprinkler = 2;
inline constexpr int kDrip = 3;

// canonical band order; extra bands may follow and are ignored by the model
const std::vector<std::string>& canonical_band_names();
inline constexpr int kNumCanonicalBands = 6;
enum Band { kRed = 0, kGreen = 1, kBlue = 2, kNir = 3, kSwir1 = 4, kSwir2 = 5 };

// ---------------------------------------------------------------------------
// Sample
// ---------------------------------------------------------------------------

// One patch. Bands are stored planar [B][H][W] as float32 reflectance in
// [0,1]; crop/land/label are [H][W] uint8 rasters.
struct Sample {
    std::string patch_id;
    std::string state_id;
    int height = 0, width = 0, num_bands = 0;
    std::vector<std::string> band_names;
    std::vector<float> bands;
    std::vector<uint8_t> crop;
    std::vector<uint8_t> land;
    std::vector<uint8_t> label;

    int64_t pixels() const { return static_cast<int64_t>(height) * width; }
    float band_at(int b, int y, int x) const {
        return bands[(static_cast<size_t>(b) * height + y) * width + x];
    }
    const float* band_plane(int b) const { return bands.data() + static_cast<size_t>(b) * height * width; }
};

void validate_sample(const Sample& s, const ClassVocab& vocab);

// Count of band values clipped into [0,1] since process start.
uint64_t band_clip_warning_count();

std::string save_sample(const Sample& s, const std::string& path);
Sample load_sample(const std::string& path, const ClassVocab& vocab);

// one-hot over crop groups, planar [G][H][W]
std::vector<uint8_t> one_hot_crop(const std::vector<uint8_t>& crop_map, int height, int width, int groups);

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct PatchRecord {
    std::string patch_id;
    std::string state_id;
    std::string file;  // relative to manifest root
    std::array<int64_t, 4> class_pixel_counts{};
    std::string split;  // "", "train" or "test"
};

struct DatasetManifest {
    std::string root;  // absolute after load
    int patch_size = 0;
    ClassVocab vocab;
    std::vector<PatchRecord> patches;

    size_t size() const { return patches.size(); }
    std::string patch_path(const PatchRecord& rec) const;
};

PatchRecord make_patch_record(const Sample& s, const std::string& file, const ClassVocab& vocab);
void save_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest(const std::string& path, bool check_files = true);

// Deterministic disjoint split; train size = floor(N * train_fraction).
// Assignment depends only on (patch ids, fraction, seed).
std::pair<DatasetManifest, DatasetManifest> split_dataset(const DatasetManifest& m, double train_fraction,
                                                          uint64_t seed);

// Deterministic fold index per patch for k-fold cross-validation.
std::vector<int> k_fold_assignments(const DatasetManifest& m, int folds, uint64_t seed, bool stratified);

DatasetManifest manifest_subset(const DatasetManifest& m, const std::vector<size_t>& indices);

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

enum class FusionMode { Cross, Self, None };
enum class AttentionApply { Input, PreLogits };
enum class EnsembleMode { Geometric, Arithmetic };

std::string to_string(FusionMode m);
std::string to_string(AttentionApply m);
std::string to_string(EnsembleMode m);
FusionMode fusion_mode_from_string(const std::string& s);
AttentionApply attention_apply_from_string(const std::string& s);
EnsembleMode ensemble_mode_from_string(const std::string& s);

struct ExperimentConfig {
    // encoder / decoder
    int patch_embed = 4;
    std::vector<int> stage_dims{32, 64, 128, 256};
    std::vector<int> depths{1, 1, 1, 1};
    std::vector<int> heads{1, 2, 4, 8};
    int window = 4;
    int mlp_ratio = 2;
    int attn_hidden = 16;
    double alpha_fusion_init = 0.8;
    std::array<double, 2> ensemble_w_init{0.5, 0.5};

    // ablation flags
    bool use_attention_module = true;
    bool use_projection_module = true;
    bool use_land_masked_dice = true;
    FusionMode fusion_mode = FusionMode::Cross;
    AttentionApply attention_apply = AttentionApply::Input;
    EnsembleMode ensemble_mode = EnsembleMode::Geometric;

    // loss / optimizer
    double loss_alpha = 0.5;
    double learning_rate = 2e-4;
    int batch_size = 4;
    int max_steps = 300;
    int eval_every = 0;  // 0 = once per epoch, capped at 200 steps
    uint64_t seed = 7;
    bool stratified_folds = false;

    void validate() const;
    std::string to_json_string() const;
    static ExperimentConfig from_json_string(const std::string& s);
    static ExperimentConfig load(const std::string& path);
    void save(const std::string& path) const;
    uint64_t digest() const;
};

}  // namespace core
}  // namespace kiim
