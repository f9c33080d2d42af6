#include "kiim/core.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "kiim/binio.hpp"
#include "kiim/tensor.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace kiim::core {

// ---------------------------------------------------------------------------
// Vocabularies
// ---------------------------------------------------------------------------

ClassVocab ClassVocab::standard() {
    ClassVocab v;
    v.irrigation_classes = {"non_irrigated", "flood", "sprinkler", "drip"};
    v.crop_groups = {"background",       "Alfalfa",  "Cereals",   "Cover Crop", "Fibres",
                     "Fruits",           "Grass",    "Green House", "Herb Group", "Horticulture",
                     "Nursery",          "Nuts",     "Oil-bearing crops", "Orchard", "Pulses",
                     "Roots and Tubers", "Shrub Plants", "Sugar Crops", "UNK", "Vegetables",
                     "Vineyard"};
    return v;
}

uint64_t ClassVocab::hash() const {
    std::string joined;
    for (const auto& s : irrigation_classes) joined += s + "\x1f";
    joined += "\x1e";
    for (const auto& s : crop_groups) joined += s + "\x1f";
    return nn::fnv1a(joined);
}

void ClassVocab::validate() const {
    if (irrigation_classes.size() != 4) throw ValidationError("vocab: expected 4 irrigation classes");
    if (crop_groups.size() != 21) throw ValidationError("vocab: expected 21 crop groups");
    if (crop_groups[0] != "background") throw ValidationError("vocab: crop group 0 must be background");
    for (const auto* list : {&irrigation_classes, &crop_groups}) {
        auto sorted = *list;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            throw ValidationError("vocab: duplicate class name");
    }
}

int ClassVocab::crop_group_index(const std::string& name) const {
    for (size_t i = 0; i < crop_groups.size(); ++i)
        if (crop_groups[i] == name) return static_cast<int>(i);
    return -1;
}

const std::vector<std::string>& canonical_band_names() {
    static const std::vector<std::string> names = {"Red", "Green", "Blue", "NIR", "SWIR1", "SWIR2"};
    return names;
}

// ---------------------------------------------------------------------------
// Sample
// ---------------------------------------------------------------------------

namespace {
std::atomic<uint64_t> g_clip_warnings{0};
}

uint64_t band_clip_warning_count() { return g_clip_warnings.load(); }

void validate_sample(const Sample& s, const ClassVocab& vocab) {
    const int64_t hw = s.pixels();
    if (s.height <= 0 || s.width <= 0) throw ValidationError("sample " + s.patch_id + ": empty raster");
    if (s.height != s.width)
        throw ValidationError("sample " + s.patch_id + ": shape mismatch, rasters must be square");
    if (s.num_bands < kNumCanonicalBands)
        throw ValidationError("sample " + s.patch_id + ": fewer than 6 bands");
    if (static_cast<int64_t>(s.bands.size()) != hw * s.num_bands)
        throw ValidationError("sample " + s.patch_id + ": shape mismatch between bands and rasters");
    if (static_cast<int64_t>(s.crop.size()) != hw || static_cast<int64_t>(s.land.size()) != hw ||
        static_cast<int64_t>(s.label.size()) != hw)
        throw ValidationError("sample " + s.patch_id + ": shape mismatch between rasters");
    if (static_cast<int>(s.band_names.size()) != s.num_bands)
        throw ValidationError("sample " + s.patch_id + ": band name count mismatch");
    for (int b = 0; b < kNumCanonicalBands; ++b)
        if (s.band_names[static_cast<size_t>(b)] != canonical_band_names()[static_cast<size_t>(b)])
            throw ValidationError("sample " + s.patch_id + ": bands not in canonical order");
    for (float v : s.bands)
        if (!std::isfinite(v)) throw ValidationError("sample " + s.patch_id + ": bands not finite");
    const int k = vocab.num_classes(), g = vocab.num_groups();
    for (int64_t i = 0; i < hw; ++i) {
        if (s.label[static_cast<size_t>(i)] >= k)
            throw ValidationError("sample " + s.patch_id + ": label out of range");
        if (s.crop[static_cast<size_t>(i)] >= g)
            throw ValidationError("sample " + s.patch_id + ": crop value out of range");
        if (s.land[static_cast<size_t>(i)] > 1)
            throw ValidationError("sample " + s.patch_id + ": land mask not binary");
    }
}

std::string save_sample(const Sample& s, const std::string& path) {
    binio::Container c;
    json meta;
    meta["format"] = "kiim-patch";
    meta["patch_id"] = s.patch_id;
    meta["state_id"] = s.state_id;
    meta["band_names"] = s.band_names;
    meta["vocab_hash"] = ClassVocab::standard().hash();
    meta["height"] = s.height;
    meta["width"] = s.width;
    c.meta_json = meta.dump();

    // disk layout is H x W x B interleaved
    std::vector<float> hwb(static_cast<size_t>(s.pixels()) * s.num_bands);
    for (int b = 0; b < s.num_bands; ++b) {
        const float* plane = s.band_plane(b);
        for (int64_t p = 0; p < s.pixels(); ++p) hwb[static_cast<size_t>(p) * s.num_bands + b] = plane[p];
    }
    c.add_f32("bands", {s.height, s.width, s.num_bands}, hwb.data());
    c.add_u8("crop", {s.height, s.width}, s.crop.data());
    c.add_u8("land", {s.height, s.width}, s.land.data());
    c.add_u8("label", {s.height, s.width}, s.label.data());
    binio::write_container(c, path);
    return path;
}

Sample load_sample(const std::string& path, const ClassVocab& vocab) {
    if (!fs::exists(path)) throw IoError("missing file: " + path);
    binio::Container c = binio::read_container(path);
    json meta = json::parse(c.meta_json);
    const std::string ctx = "patch " + path;

    Sample s;
    s.patch_id = meta.value("patch_id", "");
    s.state_id = meta.value("state_id", "");
    s.height = meta.at("height").get<int>();
    s.width = meta.at("width").get<int>();
    std::vector<std::string> stored_names = meta.at("band_names").get<std::vector<std::string>>();

    const auto& bands_arr = c.require("bands", ctx);
    if (bands_arr.dims.size() != 3 || bands_arr.dims[0] != s.height || bands_arr.dims[1] != s.width)
        throw ValidationError(ctx + ": shape mismatch in bands raster");
    const int file_bands = static_cast<int>(bands_arr.dims[2]);
    if (static_cast<int>(stored_names.size()) != file_bands)
        throw ValidationError(ctx + ": band name count mismatch");

    for (const char* name : {"crop", "land", "label"}) {
        const auto& a = c.require(name, ctx);
        if (a.dims.size() != 2 || a.dims[0] != s.height || a.dims[1] != s.width)
            throw ValidationError(ctx + ": shape mismatch in " + std::string(name) + " raster");
    }

    // normalize band order: canonical six first, extras after in stored order
    std::vector<int> order;
    for (const auto& want : canonical_band_names()) {
        auto it = std::find(stored_names.begin(), stored_names.end(), want);
        if (it == stored_names.end()) throw ValidationError(ctx + ": missing band " + want);
        order.push_back(static_cast<int>(it - stored_names.begin()));
    }
    for (int b = 0; b < file_bands; ++b)
        if (std::find(order.begin(), order.end(), b) == order.end()) order.push_back(b);

    std::vector<float> hwb = c.as_f32("bands", ctx);
    s.num_bands = file_bands;
    s.band_names.clear();
    for (int b : order) s.band_names.push_back(stored_names[static_cast<size_t>(b)]);
    s.bands.resize(hwb.size());
    const int64_t hw = s.pixels();
    uint64_t clipped = 0;
    for (size_t bi = 0; bi < order.size(); ++bi) {
        const int src = order[bi];
        float* plane = s.bands.data() + bi * static_cast<size_t>(hw);
        for (int64_t p = 0; p < hw; ++p) {
            float v = hwb[static_cast<size_t>(p) * file_bands + src];
            if (!std::isfinite(v)) throw ValidationError(ctx + ": bands not finite");
            if (v < 0.0f) {
                v = 0.0f;
                ++clipped;
            } else if (v > 1.0f) {
                v = 1.0f;
                ++clipped;
            }
            plane[p] = v;
        }
    }
    if (clipped) g_clip_warnings.fetch_add(clipped);

    s.crop = c.as_u8("crop", ctx);
    s.land = c.as_u8("land", ctx);
    s.label = c.as_u8("label", ctx);
    validate_sample(s, vocab);
    return s;
}

std::vector<uint8_t> one_hot_crop(const std::vector<uint8_t>& crop_map, int height, int width, int groups) {
    const int64_t hw = static_cast<int64_t>(height) * width;
    if (static_cast<int64_t>(crop_map.size()) != hw) throw ValidationError("one_hot_crop: shape mismatch");
    for (uint8_t v : crop_map)
        if (v >= groups) throw ValidationError("one_hot_crop: crop value out of range");
    std::vector<uint8_t> out(static_cast<size_t>(groups) * hw, 0);
    for (int64_t p = 0; p < hw; ++p) out[static_cast<size_t>(crop_map[static_cast<size_t>(p)]) * hw + p] = 1;
    return out;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

std::string DatasetManifest::patch_path(const PatchRecord& rec) const {
    return (fs::path(root) / rec.file).string();
}

PatchRecord make_patch_record(const Sample& s, const std::string& file, const ClassVocab& vocab) {
    PatchRecord r;
    r.patch_id = s.patch_id;
    r.state_id = s.state_id;
    r.file = file;
    for (uint8_t v : s.label) r.class_pixel_counts[v] += 1;
    (void)vocab;
    return r;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
    json j;
    j["format"] = "kiim-manifest";
    j["root"] = ".";
    j["patch_size"] = m.patch_size;
    j["vocab"] = {{"irrigation_classes", m.vocab.irrigation_classes}, {"crop_groups", m.vocab.crop_groups}};
    json patches = json::array();
    for (const auto& p : m.patches) {
        json rec;
        rec["patch_id"] = p.patch_id;
        rec["state_id"] = p.state_id;
        rec["file"] = p.file;
        rec["class_pixel_counts"] = p.class_pixel_counts;
        if (!p.split.empty()) rec["split"] = p.split;
        patches.push_back(std::move(rec));
    }
    j["patches"] = std::move(patches);
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << j.dump(1) << "\n";
    if (!os.good()) throw IoError("write failed: " + path);
}

DatasetManifest load_manifest(const std::string& path, bool check_files) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path);
    json j = json::parse(is, nullptr, true);
    DatasetManifest m;
    fs::path base = fs::absolute(fs::path(path)).parent_path();
    m.root = (base / j.value("root", ".")).lexically_normal().string();
    m.patch_size = j.value("patch_size", 0);
    m.vocab.irrigation_classes = j.at("vocab").at("irrigation_classes").get<std::vector<std::string>>();
    m.vocab.crop_groups = j.at("vocab").at("crop_groups").get<std::vector<std::string>>();
    m.vocab.validate();
    const int64_t expected = static_cast<int64_t>(m.patch_size) * m.patch_size;
    for (const auto& rec : j.at("patches")) {
        PatchRecord p;
        p.patch_id = rec.at("patch_id").get<std::string>();
        p.state_id = rec.value("state_id", "");
        p.file = rec.at("file").get<std::string>();
        auto counts = rec.at("class_pixel_counts").get<std::vector<int64_t>>();
        if (counts.size() != 4) throw ValidationError("manifest: expected 4 class pixel counts");
        std::copy(counts.begin(), counts.end(), p.class_pixel_counts.begin());
        p.split = rec.value("split", "");
        int64_t total = 0;
        for (int64_t c : p.class_pixel_counts) total += c;
        if (expected > 0 && total != expected)
            throw ValidationError("manifest: pixel counts of " + p.patch_id + " do not sum to patch area");
        if (check_files && !fs::exists(m.patch_path(p)))
            throw ValidationError("manifest: referenced file missing: " + m.patch_path(p));
        m.patches.push_back(std::move(p));
    }
    return m;
}

namespace {
uint64_t patch_rank(const std::string& patch_id, uint64_t seed) {
    return nn::splitmix64(nn::fnv1a(patch_id) ^ nn::splitmix64(seed));
}
}  // namespace

std::pair<DatasetManifest, DatasetManifest> split_dataset(const DatasetManifest& m, double train_fraction,
                                                          uint64_t seed) {
    if (m.patches.empty()) throw ValidationError("split_dataset: empty manifest");
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw ValidationError("split_dataset: train_fraction must be in (0,1)");
    std::vector<size_t> idx(m.patches.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
        uint64_t ra = patch_rank(m.patches[a].patch_id, seed);
        uint64_t rb = patch_rank(m.patches[b].patch_id, seed);
        if (ra != rb) return ra < rb;
        return m.patches[a].patch_id < m.patches[b].patch_id;
    });
    const size_t n_train = static_cast<size_t>(std::floor(static_cast<double>(m.patches.size()) * train_fraction));
    DatasetManifest train = m, test = m;
    train.patches.clear();
    test.patches.clear();
    for (size_t i = 0; i < idx.size(); ++i) {
        PatchRecord rec = m.patches[idx[i]];
        rec.split = i < n_train ? "train" : "test";
        (i < n_train ? train : test).patches.push_back(std::move(rec));
    }
    auto by_id = [](const PatchRecord& a, const PatchRecord& b) { return a.patch_id < b.patch_id; };
    std::sort(train.patches.begin(), train.patches.end(), by_id);
    std::sort(test.patches.begin(), test.patches.end(), by_id);
    return {std::move(train), std::move(test)};
}

std::vector<int> k_fold_assignments(const DatasetManifest& m, int folds, uint64_t seed, bool stratified) {
    if (folds < 2) throw ValidationError("k_fold_assignments: folds must be >= 2");
    if (m.patches.empty()) throw ValidationError("k_fold_assignments: empty manifest");
    std::vector<int> fold(m.patches.size(), 0);
    auto assign_group = [&](std::vector<size_t>& group) {
        std::sort(group.begin(), group.end(), [&](size_t a, size_t b) {
            uint64_t ra = patch_rank(m.patches[a].patch_id, seed);
            uint64_t rb = patch_rank(m.patches[b].patch_id, seed);
            if (ra != rb) return ra < rb;
            return m.patches[a].patch_id < m.patches[b].patch_id;
        });
        for (size_t i = 0; i < group.size(); ++i) fold[group[i]] = static_cast<int>(i % folds);
    };
    if (!stratified) {
        std::vector<size_t> all(m.patches.size());
        for (size_t i = 0; i < all.size(); ++i) all[i] = i;
        assign_group(all);
    } else {
        // stratify by dominant irrigated class of the patch
        std::map<int, std::vector<size_t>> groups;
        for (size_t i = 0; i < m.patches.size(); ++i) {
            const auto& c = m.patches[i].class_pixel_counts;
            int dom = 0;
            int64_t best = -1;
            for (int k = 1; k < 4; ++k)
                if (c[static_cast<size_t>(k)] > best) {
                    best = c[static_cast<size_t>(k)];
                    dom = k;
                }
            if (best == 0) dom = 0;
            groups[dom].push_back(i);
        }
        for (auto& [dom, g] : groups) assign_group(g);
    }
    return fold;
}

DatasetManifest manifest_subset(const DatasetManifest& m, const std::vector<size_t>& indices) {
    DatasetManifest out = m;
    out.patches.clear();
    for (size_t i : indices) out.patches.push_back(m.patches.at(i));
    return out;
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

std::string to_string(FusionMode m) {
    switch (m) {
        case FusionMode::Cross: return "cross";
        case FusionMode::Self: return "self";
        case FusionMode::None: return "none";
    }
    return "cross";
}
std::string to_string(AttentionApply m) { return m == AttentionApply::Input ? "input" : "pre_logits"; }
std::string to_string(EnsembleMode m) { return m == EnsembleMode::Geometric ? "geometric" : "arithmetic"; }

FusionMode fusion_mode_from_string(const std::string& s) {
    if (s == "cross") return FusionMode::Cross;
    if (s == "self") return FusionMode::Self;
    if (s == "none") return FusionMode::None;
    throw ValidationError("invalid fusion_mode: " + s);
}
AttentionApply attention_apply_from_string(const std::string& s) {
    if (s == "input") return AttentionApply::Input;
    if (s == "pre_logits") return AttentionApply::PreLogits;
    throw ValidationError("invalid attention_apply: " + s);
}
EnsembleMode ensemble_mode_from_string(const std::string& s) {
    if (s == "geometric") return EnsembleMode::Geometric;
    if (s == "arithmetic") return EnsembleMode::Arithmetic;
    throw ValidationError("invalid ensemble_mode: " + s);
}

void ExperimentConfig::validate() const {
    if (!(loss_alpha >= 0.0 && loss_alpha <= 1.0)) throw ValidationError("config: loss_alpha must be in [0,1]");
    if (stage_dims.empty() || stage_dims.size() != depths.size() || stage_dims.size() != heads.size())
        throw ValidationError("config: stage_dims/depths/heads must have equal length");
    for (size_t s = 0; s < stage_dims.size(); ++s)
        if (stage_dims[s] % heads[s] != 0) throw ValidationError("config: stage dim not divisible by heads");
    if (patch_embed < 1 || (patch_embed & (patch_embed - 1)) != 0)
        throw ValidationError("config: patch_embed must be a power of two");
    if (batch_size < 1 || max_steps < 1 || learning_rate <= 0.0) throw ValidationError("config: bad optimizer");
    if (!(alpha_fusion_init >= 0.0 && alpha_fusion_init <= 1.0))
        throw ValidationError("config: alpha_fusion_init must be in [0,1]");
}

std::string ExperimentConfig::to_json_string() const {
    json j;
    j["patch_embed"] = patch_embed;
    j["stage_dims"] = stage_dims;
    j["depths"] = depths;
    j["heads"] = heads;
    j["window"] = window;
    j["mlp_ratio"] = mlp_ratio;
    j["attn_hidden"] = attn_hidden;
    j["alpha_fusion_init"] = alpha_fusion_init;
    j["ensemble_w_init"] = ensemble_w_init;
    j["use_attention_module"] = use_attention_module;
    j["use_projection_module"] = use_projection_module;
    j["use_land_masked_dice"] = use_land_masked_dice;
    j["fusion_mode"] = to_string(fusion_mode);
    j["attention_apply"] = to_string(attention_apply);
    j["ensemble_mode"] = to_string(ensemble_mode);
    j["loss_alpha"] = loss_alpha;
    j["learning_rate"] = learning_rate;
    j["batch_size"] = batch_size;
    j["max_steps"] = max_steps;
    j["eval_every"] = eval_every;
    j["seed"] = seed;
    j["stratified_folds"] = stratified_folds;
    return j.dump(1);
}

ExperimentConfig ExperimentConfig::from_json_string(const std::string& s) {
    json j = json::parse(s);
    ExperimentConfig c;
    c.patch_embed = j.value("patch_embed", c.patch_embed);
    c.stage_dims = j.value("stage_dims", c.stage_dims);
    c.depths = j.value("depths", c.depths);
    c.heads = j.value("heads", c.heads);
    c.window = j.value("window", c.window);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.attn_hidden = j.value("attn_hidden", c.attn_hidden);
    c.alpha_fusion_init = j.value("alpha_fusion_init", c.alpha_fusion_init);
    c.ensemble_w_init = j.value("ensemble_w_init", c.ensemble_w_init);
    c.use_attention_module = j.value("use_attention_module", c.use_attention_module);
    c.use_projection_module = j.value("use_projection_module", c.use_projection_module);
    c.use_land_masked_dice = j.value("use_land_masked_dice", c.use_land_masked_dice);
    c.fusion_mode = fusion_mode_from_string(j.value("fusion_mode", to_string(c.fusion_mode)));
    c.attention_apply = attention_apply_from_string(j.value("attention_apply", to_string(c.attention_apply)));
    c.ensemble_mode = ensemble_mode_from_string(j.value("ensemble_mode", to_string(c.ensemble_mode)));
    c.loss_alpha = j.value("loss_alpha", c.loss_alpha);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.seed = j.value("seed", c.seed);
    c.stratified_folds = j.value("stratified_folds", c.stratified_folds);
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return from_json_string(ss.str());
}

void ExperimentConfig::save(const std::string& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << to_json_string() << "\n";
}

uint64_t ExperimentConfig::digest() const { return nn::fnv1a(to_json_string()); }

}  // namespace kiim::core
