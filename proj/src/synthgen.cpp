#include "kiim/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "kiim/tensor.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace kiim::synthgen {

namespace {
constexpr int kG = 21, kK = 4, kB = 6;

double hash_unit(uint64_t seed, uint64_t a, uint64_t b, uint64_t c) {
    uint64_t h = nn::splitmix64(seed ^ nn::splitmix64(a * 0x9e37 + b * 0x79b9 + c));
    return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);
}
}  // namespace

void StateSpec::validate() const {
    if (scene_size <= 0 || patch_size <= 0 || scene_size % patch_size != 0)
        throw ValidationError("StateSpec: scene size must be a positive multiple of patch size");
    if (crop_freq.size() != kG) throw ValidationError("StateSpec: crop_freq must have 21 entries");
    if (crop_freq[0] != 0.0) throw ValidationError("StateSpec: background cannot carry crop frequency");
    double total = 0.0;
    for (double f : crop_freq) {
        if (f < 0.0) throw ValidationError("StateSpec: negative crop frequency");
        total += f;
    }
    if (total <= 0.0) throw ValidationError("StateSpec: empty crop frequency vector");
    if (p_true.size() != static_cast<size_t>(kG) * kK) throw ValidationError("StateSpec: p_true must be 21x4");
    for (int g = 0; g < kG; ++g) {
        double s = 0.0;
        for (int k = 0; k < kK; ++k) {
            double v = p_true[static_cast<size_t>(g) * kK + k];
            if (v < 0.0 || v > 1.0) throw ValidationError("StateSpec: p_true entry outside [0,1]");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-9) throw ValidationError("StateSpec: p_true row does not sum to 1");
    }
    if (!signature.empty() && signature.size() != static_cast<size_t>(kG) * kK * kB)
        throw ValidationError("StateSpec: signature table must be 21x4x6");
    for (double v : signature)
        if (v < 0.0 || v > 1.0) throw ValidationError("StateSpec: signature mean outside [0,1]");
    if (noise_std < 0.0) throw ValidationError("StateSpec: negative noise std");
    if (rect_min < 2 || rect_max < rect_min || disc_rmin < 2 || disc_rmax < disc_rmin)
        throw ValidationError("StateSpec: bad field size distribution");
}

uint64_t StateSpec::digest() const { return nn::fnv1a(to_json_string()); }

std::string StateSpec::to_json_string() const {
    json j;
    j["state_id"] = state_id;
    j["scene_size"] = scene_size;
    j["patch_size"] = patch_size;
    j["fields_per_scene"] = fields_per_scene;
    j["rect_min"] = rect_min;
    j["rect_max"] = rect_max;
    j["disc_rmin"] = disc_rmin;
    j["disc_rmax"] = disc_rmax;
    j["sprinkler_disc_fraction"] = sprinkler_disc_fraction;
    j["crop_freq"] = crop_freq;
    j["p_true"] = p_true;
    j["signature"] = signature;
    j["noise_std"] = noise_std;
    return j.dump(1);
}

StateSpec StateSpec::from_json_string(const std::string& s) {
    json j = json::parse(s);
    StateSpec spec;
    spec.state_id = j.value("state_id", spec.state_id);
    spec.scene_size = j.value("scene_size", spec.scene_size);
    spec.patch_size = j.value("patch_size", spec.patch_size);
    spec.fields_per_scene = j.value("fields_per_scene", spec.fields_per_scene);
    spec.rect_min = j.value("rect_min", spec.rect_min);
    spec.rect_max = j.value("rect_max", spec.rect_max);
    spec.disc_rmin = j.value("disc_rmin", spec.disc_rmin);
    spec.disc_rmax = j.value("disc_rmax", spec.disc_rmax);
    spec.sprinkler_disc_fraction = j.value("sprinkler_disc_fraction", spec.sprinkler_disc_fraction);
    spec.crop_freq = j.at("crop_freq").get<std::vector<double>>();
    spec.p_true = j.at("p_true").get<std::vector<double>>();
    spec.signature = j.value("signature", std::vector<double>{});
    spec.noise_std = j.value("noise_std", spec.noise_std);
    spec.validate();
    return spec;
}

StateSpec StateSpec::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open state spec: " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return from_json_string(ss.str());
}

void StateSpec::save(const std::string& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << to_json_string() << "\n";
}

std::vector<double> default_signature_table(uint64_t signature_seed, int groups, int classes) {
    std::vector<double> sig(static_cast<size_t>(groups) * classes * kB);
    for (int g = 0; g < groups; ++g) {
        const double u1 = hash_unit(signature_seed, g, 1, 0);
        const double u2 = hash_unit(signature_seed, g, 2, 0);
        const double u3 = hash_unit(signature_seed, g, 3, 0);
        const double u4 = hash_unit(signature_seed, g, 4, 0);
        for (int k = 0; k < classes; ++k) {
            double* m = sig.data() + (static_cast<size_t>(g) * classes + k) * kB;
            m[core::kRed] = 0.14 + 0.14 * u1;
            m[core::kGreen] = 0.16 + 0.16 * u2;
            m[core::kBlue] = 0.08 + 0.10 * u3;
            switch (k) {
                case core::kNonIrrigated:
                    m[core::kNir] = 0.26 + 0.06 * u4;
                    m[core::kSwir1] = 0.30 + 0.04 * u1;
                    m[core::kSwir2] = 0.27 + 0.04 * u2;
                    break;
                case core::kFlood:
                    m[core::kNir] = 0.54 + 0.06 * u4;
                    m[core::kSwir1] = 0.12 + 0.03 * u1;
                    m[core::kSwir2] = 0.10 + 0.02 * u2;
                    break;
                case core::kSprinkler:
                    m[core::kNir] = 0.48 + 0.07 * u4;
                    m[core::kSwir1] = 0.25 + 0.04 * u1;
                    m[core::kSwir2] = 0.17 + 0.03 * u2;
                    break;
                default:  // drip: crop-dependent NDVI, weak NDWI
                    m[core::kNir] = 0.40 + 0.10 * u4;
                    m[core::kSwir1] = 0.36 + 0.04 * u1;
                    m[core::kSwir2] = 0.22 + 0.03 * u2;
                    break;
            }
        }
    }
    // bare background
    double* bg = sig.data();
    bg[core::kRed] = 0.22;
    bg[core::kGreen] = 0.20;
    bg[core::kBlue] = 0.17;
    bg[core::kNir] = 0.24;
    bg[core::kSwir1] = 0.33;
    bg[core::kSwir2] = 0.30;
    return sig;
}

namespace {

std::vector<double> uniform_row() { return {0.25, 0.25, 0.25, 0.25}; }

std::vector<double> dominant_row(int k, double p = 0.92) {
    std::vector<double> row(kK, (1.0 - p) / (kK - 1));
    row[static_cast<size_t>(k)] = p;
    return row;
}

struct CropMix {
    int group;
    double freq;
    int dominant_class;
};

StateSpec make_state(const std::string& id, const std::vector<CropMix>& mix) {
    StateSpec s;
    s.state_id = id;
    s.crop_freq.assign(kG, 0.0);
    s.p_true.assign(static_cast<size_t>(kG) * kK, 0.0);
    // background row: scenes never irrigate bare soil
    std::vector<double> bg = {1.0, 0.0, 0.0, 0.0};
    std::copy(bg.begin(), bg.end(), s.p_true.begin());
    for (int g = 1; g < kG; ++g) {
        auto row = uniform_row();
        std::copy(row.begin(), row.end(), s.p_true.begin() + static_cast<size_t>(g) * kK);
    }
    for (const auto& m : mix) {
        s.crop_freq[static_cast<size_t>(m.group)] = m.freq;
        auto row = dominant_row(m.dominant_class);
        std::copy(row.begin(), row.end(), s.p_true.begin() + static_cast<size_t>(m.group) * kK);
    }
    // signatures are shared across states so cross-state transfer is possible
    s.signature = default_signature_table(nn::fnv1a("kiim-signatures"), kG, kK);
    s.validate();
    return s;
}

}  // namespace

StateSpec default_state_spec(int which) {
    // crop group indices in the standard vocabulary
    constexpr int Alfalfa = 1, Cereals = 2, Fruits = 5, Grass = 6, Nuts = 11, Orchard = 13, Pulses = 14,
                  Roots = 15, Sugar = 17, Vegetables = 19, Vineyard = 20;
    switch (which) {
        case 0:  // drip-rich
            return make_state("state_a", {{Alfalfa, 0.18, core::kFlood},
                                          {Cereals, 0.18, core::kFlood},
                                          {Fruits, 0.12, core::kSprinkler},
                                          {Grass, 0.12, core::kSprinkler},
                                          {Vegetables, 0.08, core::kSprinkler},
                                          {Nuts, 0.10, core::kDrip},
                                          {Vineyard, 0.12, core::kDrip},
                                          {Orchard, 0.10, core::kDrip}});
        case 1:  // flood-heavy
            return make_state("state_b", {{Alfalfa, 0.25, core::kFlood},
                                          {Cereals, 0.20, core::kFlood},
                                          {Sugar, 0.10, core::kFlood},
                                          {Grass, 0.15, core::kSprinkler},
                                          {Vegetables, 0.10, core::kSprinkler},
                                          {Fruits, 0.08, core::kSprinkler},
                                          {Vineyard, 0.06, core::kDrip},
                                          {Orchard, 0.06, core::kDrip}});
        case 2:  // sprinkler-heavy
            return make_state("state_c", {{Grass, 0.22, core::kSprinkler},
                                          {Cereals, 0.20, core::kSprinkler},
                                          {Alfalfa, 0.15, core::kSprinkler},
                                          {Fruits, 0.15, core::kSprinkler},
                                          {Roots, 0.12, core::kSprinkler},
                                          {Pulses, 0.08, core::kFlood},
                                          {Vineyard, 0.05, core::kDrip},
                                          {Orchard, 0.03, core::kDrip}});
        case 3:  // drip-rare target state; drip sits on crops other states sprinkle
            return make_state("state_d", {{Alfalfa, 0.25, core::kFlood},
                                          {Cereals, 0.22, core::kSprinkler},
                                          {Grass, 0.20, core::kSprinkler},
                                          {Fruits, 0.12, core::kSprinkler},
                                          {Pulses, 0.10, core::kFlood},
                                          {Roots, 0.07, core::kFlood},
                                          {Vegetables, 0.04, core::kDrip}});
        default:
            throw ValidationError("default_state_spec: expected 0..3");
    }
}

namespace {

int sample_categorical(const std::vector<double>& weights, double total, nn::Rng& rng) {
    double r = rng.uniform(0.0, total);
    double acc = 0.0;
    for (size_t i = 0; i < weights.size(); ++i) {
        acc += weights[i];
        if (r < acc) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size() - 1);
}

int sample_row(const double* row, int n, nn::Rng& rng) {
    double r = rng.uniform(0.0, 1.0);
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        acc += row[i];
        if (r < acc) return i;
    }
    return n - 1;
}

}  // namespace

Scene generate_scene(const StateSpec& spec, uint64_t seed) {
    spec.validate();
    nn::Rng rng(nn::derive_seed(seed, "synthgen"));
    const int n = spec.scene_size;
    const int64_t area = static_cast<int64_t>(n) * n;

    Scene scene;
    scene.spec_digest = spec.digest();
    scene.seed = seed;
    core::Sample& s = scene.sample;
    s.state_id = spec.state_id;
    s.patch_id = spec.state_id + "_s" + std::to_string(seed);
    s.height = s.width = n;
    s.num_bands = kB;
    s.band_names = core::canonical_band_names();
    s.crop.assign(static_cast<size_t>(area), 0);
    s.land.assign(static_cast<size_t>(area), 0);
    s.label.assign(static_cast<size_t>(area), 0);

    std::vector<uint8_t> occupied(static_cast<size_t>(area), 0);
    double freq_total = 0.0;
    for (double f : spec.crop_freq) freq_total += f;

    auto cell_free = [&](int x0, int y0, int x1, int y1) {
        if (x0 < 0 || y0 < 0 || x1 >= n || y1 >= n) return false;
        for (int y = std::max(0, y0 - 1); y <= std::min(n - 1, y1 + 1); ++y)
            for (int x = std::max(0, x0 - 1); x <= std::min(n - 1, x1 + 1); ++x)
                if (occupied[static_cast<size_t>(y) * n + x]) return false;
        return true;
    };

    for (int f = 0; f < spec.fields_per_scene; ++f) {
        const int crop = sample_categorical(spec.crop_freq, freq_total, rng);
        const int irr = sample_row(spec.p_true.data() + static_cast<size_t>(crop) * kK, kK, rng);
        const bool disc = irr == core::kSprinkler && rng.uniform(0.0, 1.0) < spec.sprinkler_disc_fraction;

        bool placed = false;
        for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
            FieldInfo info;
            info.crop = crop;
            info.irrigation = irr;
            if (disc) {
                const int r = static_cast<int>(rng.uniform_int(spec.disc_rmin, spec.disc_rmax));
                const int cx = static_cast<int>(rng.uniform_int(r, n - 1 - r));
                const int cy = static_cast<int>(rng.uniform_int(r, n - 1 - r));
                info.shape = FieldShape::Disc;
                info.x0 = cx - r;
                info.y0 = cy - r;
                info.x1 = cx + r;
                info.y1 = cy + r;
                if (!cell_free(info.x0, info.y0, info.x1, info.y1)) continue;
                for (int y = info.y0; y <= info.y1; ++y)
                    for (int x = info.x0; x <= info.x1; ++x) {
                        const int64_t dx = x - cx, dy = y - cy;
                        if (dx * dx + dy * dy > static_cast<int64_t>(r) * r) continue;
                        const size_t i = static_cast<size_t>(y) * n + x;
                        occupied[i] = 1;
                        s.crop[i] = static_cast<uint8_t>(crop);
                        s.land[i] = 1;
                        s.label[i] = static_cast<uint8_t>(irr);
                    }
            } else {
                const int w = static_cast<int>(rng.uniform_int(spec.rect_min, spec.rect_max));
                const int h = static_cast<int>(rng.uniform_int(spec.rect_min, spec.rect_max));
                const int x0 = static_cast<int>(rng.uniform_int(0, n - w));
                const int y0 = static_cast<int>(rng.uniform_int(0, n - h));
                info.shape = FieldShape::Rect;
                info.x0 = x0;
                info.y0 = y0;
                info.x1 = x0 + w - 1;
                info.y1 = y0 + h - 1;
                if (!cell_free(info.x0, info.y0, info.x1, info.y1)) continue;
                for (int y = info.y0; y <= info.y1; ++y)
                    for (int x = info.x0; x <= info.x1; ++x) {
                        const size_t i = static_cast<size_t>(y) * n + x;
                        occupied[i] = 1;
                        s.crop[i] = static_cast<uint8_t>(crop);
                        s.land[i] = 1;
                        s.label[i] = static_cast<uint8_t>(irr);
                    }
            }
            scene.fields.push_back(info);
            placed = true;
        }
        if (!placed) ++scene.fields_skipped;
    }
    if (scene.fields.empty()) throw ValidationError("generate_scene: could not place any field");

    const std::vector<double>& sig =
        spec.signature.empty() ? default_signature_table(nn::fnv1a("kiim-signatures"), kG, kK) : spec.signature;
    s.bands.resize(static_cast<size_t>(area) * kB);
    for (int64_t i = 0; i < area; ++i) {
        const double* m = sig.data() + (static_cast<size_t>(s.crop[static_cast<size_t>(i)]) * kK +
                                        s.label[static_cast<size_t>(i)]) *
                                           kB;
        for (int b = 0; b < kB; ++b) {
            double v = m[b];
            if (spec.noise_std > 0.0) v += rng.normal(0.0, spec.noise_std);
            s.bands[static_cast<size_t>(b) * area + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return scene;
}

std::vector<core::Sample> patchify(const Scene& scene, int patch_size) {
    const core::Sample& src = scene.sample;
    if (patch_size <= 0 || src.height % patch_size != 0 || src.width % patch_size != 0)
        throw ValidationError("patchify: scene dimensions not divisible by patch size");
    const int rows = src.height / patch_size, cols = src.width / patch_size;
    const int64_t hw = static_cast<int64_t>(patch_size) * patch_size;
    std::vector<core::Sample> out;
    out.reserve(static_cast<size_t>(rows) * cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            core::Sample p;
            p.patch_id = src.patch_id + "_r" + std::to_string(r) + "c" + std::to_string(c);
            p.state_id = src.state_id;
            p.height = p.width = patch_size;
            p.num_bands = src.num_bands;
            p.band_names = src.band_names;
            p.bands.resize(static_cast<size_t>(hw) * src.num_bands);
            p.crop.resize(static_cast<size_t>(hw));
            p.land.resize(static_cast<size_t>(hw));
            p.label.resize(static_cast<size_t>(hw));
            for (int y = 0; y < patch_size; ++y) {
                const int64_t sy = static_cast<int64_t>(r) * patch_size + y;
                const int64_t src_off = sy * src.width + static_cast<int64_t>(c) * patch_size;
                const int64_t dst_off = static_cast<int64_t>(y) * patch_size;
                for (int b = 0; b < src.num_bands; ++b)
                    std::copy_n(src.bands.data() + static_cast<size_t>(b) * src.pixels() + src_off, patch_size,
                                p.bands.data() + static_cast<size_t>(b) * hw + dst_off);
                std::copy_n(src.crop.data() + src_off, patch_size, p.crop.data() + dst_off);
                std::copy_n(src.land.data() + src_off, patch_size, p.land.data() + dst_off);
                std::copy_n(src.label.data() + src_off, patch_size, p.label.data() + dst_off);
            }
            out.push_back(std::move(p));
        }
    }
    return out;
}

std::vector<core::Sample> filter_patches(std::vector<core::Sample> samples, double max_nonirrigated_fraction) {
    if (!(max_nonirrigated_fraction > 0.0 && max_nonirrigated_fraction <= 1.0))
        throw ValidationError("filter_patches: fraction must be in (0,1]");
    std::vector<core::Sample> kept;
    for (auto& s : samples) {
        int64_t non_irr = 0;
        for (uint8_t v : s.label) non_irr += v == core::kNonIrrigated;
        if (static_cast<double>(non_irr) / static_cast<double>(s.pixels()) <= max_nonirrigated_fraction)
            kept.push_back(std::move(s));
    }
    return kept;
}

core::DatasetManifest build_corpus(const StateSpec& spec, int n_patches, uint64_t seed,
                                   const std::string& out_dir, const std::string& manifest_name) {
    spec.validate();
    fs::create_directories(out_dir);
    core::DatasetManifest manifest;
    manifest.root = fs::absolute(out_dir).string();
    manifest.patch_size = spec.patch_size;
    manifest.vocab = core::ClassVocab::standard();

    const int per_scene = (spec.scene_size / spec.patch_size) * (spec.scene_size / spec.patch_size);
    const int max_scenes = std::max(8, 8 * (n_patches / std::max(1, per_scene) + 1));
    for (int i = 0; i < max_scenes && static_cast<int>(manifest.patches.size()) < n_patches; ++i) {
        Scene scene = generate_scene(spec, nn::derive_seed(seed, "scene", static_cast<uint64_t>(i)));
        for (auto& p : filter_patches(patchify(scene, spec.patch_size))) {
            if (static_cast<int>(manifest.patches.size()) >= n_patches) break;
            const std::string file = p.patch_id + ".kp";
            core::save_sample(p, (fs::path(out_dir) / file).string());
            manifest.patches.push_back(core::make_patch_record(p, file, manifest.vocab));
        }
    }
    if (static_cast<int>(manifest.patches.size()) < n_patches)
        throw ValidationError("build_corpus: field density too low to produce requested patches");
    core::save_manifest(manifest, (fs::path(out_dir) / manifest_name).string());
    return core::load_manifest((fs::path(out_dir) / manifest_name).string());
}

core::DatasetManifest build_multistate_dataset(const std::vector<core::DatasetManifest>& state_manifests,
                                               int target_minority_class, double imbalance_ratio,
                                               uint64_t seed) {
    if (state_manifests.empty()) throw ValidationError("build_multistate_dataset: no manifests");
    if (target_minority_class < 0 || target_minority_class >= kK)
        throw ValidationError("build_multistate_dataset: minority class out of range");
    if (imbalance_ratio < 1.0) throw ValidationError("build_multistate_dataset: ratio must be >= 1");

    core::DatasetManifest out;
    out.root = "";
    out.patch_size = state_manifests.front().patch_size;
    out.vocab = state_manifests.front().vocab;
    const uint64_t vocab_hash = out.vocab.hash();

    struct Entry {
        core::PatchRecord rec;
        uint64_t rank;
    };
    std::vector<Entry> minority, majority;
    for (const auto& m : state_manifests) {
        if (m.vocab.hash() != vocab_hash)
            throw ValidationError("build_multistate_dataset: vocabulary mismatch between states");
        if (m.patch_size != out.patch_size)
            throw ValidationError("build_multistate_dataset: patch size mismatch between states");
        for (const auto& rec : m.patches) {
            Entry e;
            e.rec = rec;
            e.rec.file = (fs::path(m.root) / rec.file).string();  // absolute in the merged manifest
            e.rec.split = "train";
            e.rank = nn::splitmix64(nn::fnv1a(rec.patch_id) ^ nn::splitmix64(seed));
            (rec.class_pixel_counts[static_cast<size_t>(target_minority_class)] > 0 ? minority : majority)
                .push_back(std::move(e));
        }
    }
    if (minority.empty()) throw ValidationError("build_multistate_dataset: no minority patches available");
    const int64_t total = std::llround(imbalance_ratio * static_cast<double>(minority.size()));
    const int64_t extra = total - static_cast<int64_t>(minority.size());
    if (extra > static_cast<int64_t>(majority.size()))
        throw ValidationError("build_multistate_dataset: insufficient patches for requested total");

    auto by_rank = [](const Entry& a, const Entry& b) {
        if (a.rank != b.rank) return a.rank < b.rank;
        return a.rec.patch_id < b.rec.patch_id;
    };
    std::sort(majority.begin(), majority.end(), by_rank);
    for (const auto& e : minority) out.patches.push_back(e.rec);
    for (int64_t i = 0; i < extra; ++i) out.patches.push_back(majority[static_cast<size_t>(i)].rec);
    std::sort(out.patches.begin(), out.patches.end(),
              [](const core::PatchRecord& a, const core::PatchRecord& b) { return a.patch_id < b.patch_id; });
    return out;
}

void accumulate_area_stats(knowledge::AreaStats& stats, const core::Sample& sample) {
    for (int64_t i = 0; i < sample.pixels(); ++i)
        stats.at(sample.crop[static_cast<size_t>(i)], sample.label[static_cast<size_t>(i)]) += 1.0;
}

}  // namespace kiim::synthgen
