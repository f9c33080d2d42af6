#include "kiim/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "kiim/png_io.hpp"
#include "kiim/spectral.hpp"
#include "kiim/synthgen.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace kiim::harness {

double median(std::vector<double> v) {
    if (v.empty()) throw ValidationError("median of empty set");
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace {

std::string hex_digest(uint64_t d) {
    char buf[17];
    snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(d));
    return buf;
}

std::vector<core::Sample> load_all(const core::DatasetManifest& m) {
    std::vector<core::Sample> out;
    out.reserve(m.patches.size());
    for (const auto& rec : m.patches) out.push_back(core::load_sample(m.patch_path(rec), m.vocab));
    return out;
}

struct SampleInputs {
    spectral::Streams streams;
    nn::Tensor land;      // [H,W]
    nn::Tensor y_rows;    // [H*W,K] one-hot
    nn::Tensor y_chw;     // [K,H,W] one-hot
};

SampleInputs prepare(const core::Sample& s, int num_classes) {
    SampleInputs in;
    in.streams = spectral::assemble_streams(s);
    in.land = nn::Tensor({s.height, s.width});
    for (int64_t i = 0; i < s.pixels(); ++i) in.land[i] = s.land[static_cast<size_t>(i)];
    in.y_chw = objective::one_hot_labels(s.label, s.height, s.width, num_classes);
    const int64_t hw = s.pixels();
    in.y_rows = nn::Tensor({static_cast<int>(hw), num_classes});
    for (int64_t p = 0; p < hw; ++p) in.y_rows[p * num_classes + s.label[static_cast<size_t>(p)]] = 1.0;
    return in;
}

// loss graph for one sample; dice enters through its closed-form gradient
nn::Var build_loss(const network::ForwardResult& fr, const SampleInputs& in,
                   const core::ExperimentConfig& cfg, objective::LossBreakdown* breakdown) {
    const int64_t hw = static_cast<int64_t>(fr.height) * fr.width;
    nn::Var log_probs = nn::log_softmax_rows(fr.mix_rows);
    nn::Var ce = nn::mul_scalar(nn::sum(nn::mul(nn::constant(in.y_rows), log_probs)),
                                -1.0 / static_cast<double>(hw));
    breakdown->ce = ce->val[0];
    breakdown->pixels_counted = hw;
    if (!cfg.use_land_masked_dice) {
        breakdown->alpha = 1.0;
        breakdown->dice = 0.0;
        breakdown->total = breakdown->ce;
        return ce;
    }
    const int k = in.y_chw.dim(0);
    nn::Var probs_chw = nn::rows_to_chw(fr.ensemble_rows, k, fr.height, fr.width);
    nn::Tensor dgrad;
    const double dice_val = objective::dice_loss_with_prob_grad(in.y_chw, probs_chw->val, in.land, &dgrad);
    nn::Var dice = nn::custom_scalar(probs_chw, dice_val, std::move(dgrad));
    breakdown->alpha = cfg.loss_alpha;
    breakdown->dice = dice_val;
    breakdown->total = cfg.loss_alpha * breakdown->ce + (1.0 - cfg.loss_alpha) * dice_val;
    return nn::add(nn::mul_scalar(ce, cfg.loss_alpha), nn::mul_scalar(dice, 1.0 - cfg.loss_alpha));
}

metrics::MetricReport report_on(const network::Model& model, const knowledge::ProjectionMatrix* projection,
                                const std::vector<core::Sample>& samples) {
    if (samples.empty()) throw ValidationError("evaluate: empty manifest");
    metrics::ConfusionCounts counts(model.vocab().num_classes());
    for (const auto& s : samples) {
        network::ModelOutput out = model.forward(s, projection);
        metrics::accumulate_confusion_into(counts, out.argmax, s.label);
    }
    return metrics::compute_metrics(counts, model.vocab().irrigation_classes);
}

void write_log(const std::string& path, const std::vector<StepLog>& logs) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    for (const auto& l : logs) {
        json j = {{"step", l.step}, {"ce", l.ce}, {"dice", l.dice}, {"total", l.total}, {"alpha", l.alpha}};
        if (l.val_macro_iou) j["val_macro_iou"] = *l.val_macro_iou;
        os << j.dump() << "\n";
    }
}

}  // namespace

std::string RunReport::to_json_string() const {
    json j;
    j["config_digest"] = config_digest;
    j["tag"] = tag;
    j["seed"] = seed;
    j["steps"] = steps;
    j["wall_seconds"] = wall_seconds;
    j["selected"] = {{"learning_rate", learning_rate}, {"batch_size", batch_size}, {"loss_alpha", loss_alpha}};
    j["train"] = json::parse(train_report.to_json_string());
    j["val"] = json::parse(val_report.to_json_string());
    return j.dump(1);
}

void RunReport::save(const std::string& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << to_json_string() << "\n";
}

TrainResult train(const core::ExperimentConfig& config, const core::DatasetManifest& train_manifest,
                  const core::DatasetManifest& val_manifest, const knowledge::ProjectionMatrix* projection,
                  const TrainOptions& opts) {
    config.validate();
    if (train_manifest.patches.empty() || val_manifest.patches.empty())
        throw ValidationError("train: empty manifest");
    const auto t0 = std::chrono::steady_clock::now();

    network::Model model(config, train_manifest.vocab);
    network::AdamOptimizer adam(config.learning_rate);
    int64_t start_step = 0;
    if (opts.resume && opts.init_from) throw ValidationError("train: resume and init_from are exclusive");
    if (opts.resume) {
        network::restore_into(model, *opts.resume);
        adam.set_t(opts.resume->adam_t);
        start_step = opts.resume->step;
    } else if (opts.init_from) {
        network::restore_into(model, *opts.init_from);
        for (const auto& name : model.params().names()) {  // weights only: fresh optimizer state
            model.params().at(name).adam_m.fill(0.0);
            model.params().at(name).adam_v.fill(0.0);
        }
    } else {
        model.init_params(config.seed);
    }

    std::vector<core::Sample> train_samples = load_all(train_manifest);
    std::vector<core::Sample> val_samples = load_all(val_manifest);
    std::vector<SampleInputs> prepared;
    prepared.reserve(train_samples.size());
    for (const auto& s : train_samples) prepared.push_back(prepare(s, model.vocab().num_classes()));

    const int64_t n_train = static_cast<int64_t>(train_samples.size());
    const int64_t steps_per_epoch = (n_train + config.batch_size - 1) / config.batch_size;
    const int64_t eval_every =
        config.eval_every > 0 ? config.eval_every : std::min<int64_t>(steps_per_epoch, 200);

    TrainResult result;
    result.report.config_digest = hex_digest(config.digest());
    result.report.tag = opts.tag;
    result.report.seed = config.seed;
    result.report.learning_rate = config.learning_rate;
    result.report.batch_size = config.batch_size;
    result.report.loss_alpha = config.use_land_masked_dice ? config.loss_alpha : 1.0;

    double best_iou = -1.0;
    bool have_best = false;
    std::vector<size_t> order(static_cast<size_t>(n_train));

    const int64_t stop_step = opts.stop_after_step > 0 ? std::min<int64_t>(opts.stop_after_step, config.max_steps)
                                                       : config.max_steps;
    for (int64_t step = start_step; step < stop_step; ++step) {
        const int64_t epoch = step / steps_per_epoch;
        const int64_t pos = step % steps_per_epoch;
        if (pos == 0 || order.empty()) {
            for (size_t i = 0; i < order.size(); ++i) order[i] = i;
            std::mt19937_64 gen(nn::derive_seed(config.seed, "data-order", static_cast<uint64_t>(epoch)));
            std::shuffle(order.begin(), order.end(), gen);
        }
        const int64_t lo = pos * config.batch_size;
        const int64_t hi = std::min<int64_t>(lo + config.batch_size, n_train);
        const int64_t batch_n = hi - lo;

        model.params().zero_grads();
        StepLog log;
        log.step = step + 1;
        for (int64_t bi = lo; bi < hi; ++bi) {
            const core::Sample& s = train_samples[order[static_cast<size_t>(bi)]];
            const SampleInputs& in = prepared[order[static_cast<size_t>(bi)]];
            network::ForwardInput fin;
            fin.streams = &in.streams;
            fin.land = &in.land;
            fin.crop = &s.crop;
            fin.projection = projection;
            fin.height = s.height;
            fin.width = s.width;
            network::ForwardResult fr = model.forward_nodes(fin);
            objective::LossBreakdown b;
            nn::Var loss = build_loss(fr, in, config, &b);
            if (!std::isfinite(b.total))
                throw DivergenceError("train: non-finite loss at step " + std::to_string(step + 1));
            nn::backward(nn::mul_scalar(loss, 1.0 / static_cast<double>(batch_n)));
            model.accumulate_grads(fr.bound);
            log.ce += b.ce / static_cast<double>(batch_n);
            log.dice += b.dice / static_cast<double>(batch_n);
            log.total += b.total / static_cast<double>(batch_n);
            log.alpha = b.alpha;
        }
        adam.step(model.params());

        if ((step + 1) % eval_every == 0 || step + 1 == stop_step) {
            metrics::MetricReport vr = report_on(model, projection, val_samples);
            const double iou = vr.macro_iou.value_or(0.0);
            log.val_macro_iou = iou;
            if (iou > best_iou) {
                best_iou = iou;
                result.best = network::make_checkpoint(model, projection);
                result.best.step = step + 1;
                result.best.adam_t = adam.t();
                result.best.epoch = epoch;
                result.best.best_val_macro_iou = best_iou;
                have_best = true;
            }
        }
        result.report.trajectory.push_back(log);
    }

    result.final_state = network::make_checkpoint(model, projection);
    result.final_state.step = stop_step;
    result.final_state.adam_t = adam.t();
    result.final_state.epoch = stop_step / std::max<int64_t>(1, steps_per_epoch);
    result.final_state.best_val_macro_iou = best_iou;
    if (!have_best) result.best = result.final_state;

    result.report.steps = stop_step;
    if (!opts.skip_final_reports) {
        network::Model best_model(config, train_manifest.vocab);
        network::restore_into(best_model, result.best);
        result.report.train_report = report_on(best_model, projection, train_samples);
        result.report.val_report = report_on(best_model, projection, val_samples);
    }
    result.report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!opts.out_dir.empty()) {
        fs::create_directories(opts.out_dir);
        network::save_checkpoint(result.best, (fs::path(opts.out_dir) / "best.ckpt").string());
        network::save_checkpoint(result.final_state, (fs::path(opts.out_dir) / "final.ckpt").string());
        write_log((fs::path(opts.out_dir) / "train_log.jsonl").string(), result.report.trajectory);
        result.report.save((fs::path(opts.out_dir) / "report.json").string());
    }
    return result;
}

metrics::MetricReport evaluate_samples(const network::Model& model,
                                       const knowledge::ProjectionMatrix* projection,
                                       const std::vector<core::Sample>& samples) {
    return report_on(model, projection, samples);
}

metrics::MetricReport evaluate(const network::Checkpoint& ckpt, const core::DatasetManifest& manifest) {
    if (manifest.patches.empty()) throw ValidationError("evaluate: empty manifest");
    if (ckpt.vocab.hash() != manifest.vocab.hash())
        throw ValidationError("evaluate: checkpoint and manifest vocabularies differ");
    network::Model model(ckpt.config, ckpt.vocab);
    network::restore_into(model, ckpt);
    const knowledge::ProjectionMatrix* p = ckpt.projection.rows.empty() ? nullptr : &ckpt.projection;
    return report_on(model, p, load_all(manifest));
}

TransferResult pretrain_then_finetune(const core::DatasetManifest& pretrain_manifest,
                                      const core::DatasetManifest& target_train,
                                      const core::DatasetManifest& target_val, double fraction,
                                      const core::ExperimentConfig& config,
                                      const knowledge::ProjectionMatrix* pretrain_projection,
                                      const knowledge::ProjectionMatrix* target_projection,
                                      const std::string& out_dir) {
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw ValidationError("pretrain_then_finetune: fraction must be in (0,1]");
    if (pretrain_manifest.vocab.hash() != target_train.vocab.hash())
        throw ValidationError("pretrain_then_finetune: vocabulary mismatch between phases");

    TransferResult result;
    auto [pre_train, pre_val] = core::split_dataset(pretrain_manifest, 0.9, config.seed);
    TrainOptions opts1;
    opts1.tag = "pretrain";
    if (!out_dir.empty()) opts1.out_dir = (fs::path(out_dir) / "pretrain").string();
    result.pretrain = train(config, pre_train, pre_val, pretrain_projection, opts1);

    // deterministic fraction of the target training data
    std::vector<size_t> idx(target_train.patches.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
        const uint64_t ra =
            nn::splitmix64(nn::fnv1a(target_train.patches[a].patch_id) ^ nn::splitmix64(config.seed));
        const uint64_t rb =
            nn::splitmix64(nn::fnv1a(target_train.patches[b].patch_id) ^ nn::splitmix64(config.seed));
        if (ra != rb) return ra < rb;
        return target_train.patches[a].patch_id < target_train.patches[b].patch_id;
    });
    const size_t take = std::max<size_t>(
        1, static_cast<size_t>(std::floor(fraction * static_cast<double>(idx.size()))));
    idx.resize(take);
    core::DatasetManifest ft_train = core::manifest_subset(target_train, idx);

    const int pct = static_cast<int>(std::lround(fraction * 100.0));
    result.finetune_tag = "base+" + std::to_string(pct) + "%";
    TrainOptions opts2;
    opts2.tag = result.finetune_tag;
    opts2.init_from = &result.pretrain.best;
    if (!out_dir.empty()) opts2.out_dir = (fs::path(out_dir) / "finetune").string();
    result.finetune = train(config, ft_train, target_val, target_projection, opts2);
    return result;
}

std::string GridSearchResult::to_json_string() const {
    json cells_json = json::array();
    for (const auto& c : cells) {
        json j = {{"learning_rate", c.learning_rate},
                  {"batch_size", c.batch_size},
                  {"loss_alpha", c.loss_alpha},
                  {"fold_ious", c.fold_ious}};
        j["mean_iou"] = c.mean_iou ? json(*c.mean_iou) : json(nullptr);
        if (!c.error.empty()) j["error"] = c.error;
        cells_json.push_back(std::move(j));
    }
    json j;
    j["cells"] = std::move(cells_json);
    j["best_config"] = json::parse(best_config.to_json_string());
    return j.dump(1);
}

GridSearchResult grid_search(const core::ExperimentConfig& base, std::vector<double> learning_rates,
                             std::vector<int> batch_sizes, std::vector<double> alphas, int folds,
                             const core::DatasetManifest& data) {
    if (learning_rates.empty() || batch_sizes.empty() || alphas.empty())
        throw ValidationError("grid_search: empty grid");
    std::sort(learning_rates.begin(), learning_rates.end());
    std::sort(batch_sizes.begin(), batch_sizes.end());
    std::sort(alphas.begin(), alphas.end());
    const std::vector<int> fold_of = core::k_fold_assignments(data, folds, base.seed, base.stratified_folds);

    GridSearchResult result;
    const GridCell* best_cell = nullptr;
    for (double lr : learning_rates) {
        for (int bs : batch_sizes) {
            for (double alpha : alphas) {
                GridCell cell;
                cell.learning_rate = lr;
                cell.batch_size = bs;
                cell.loss_alpha = alpha;
                try {
                    for (int f = 0; f < folds; ++f) {
                        std::vector<size_t> tr_idx, va_idx;
                        for (size_t i = 0; i < data.patches.size(); ++i)
                            (fold_of[i] == f ? va_idx : tr_idx).push_back(i);
                        if (tr_idx.empty() || va_idx.empty())
                            throw ValidationError("grid_search: fold without patches");
                        core::DatasetManifest tr = core::manifest_subset(data, tr_idx);
                        core::DatasetManifest va = core::manifest_subset(data, va_idx);
                        for (auto& r : tr.patches) r.split = "train";
                        core::ExperimentConfig cfg = base;
                        cfg.learning_rate = lr;
                        cfg.batch_size = bs;
                        cfg.loss_alpha = alpha;
                        knowledge::ProjectionMatrix p;
                        const knowledge::ProjectionMatrix* pp = nullptr;
                        if (cfg.use_projection_module) {
                            p = knowledge::build_projection_matrix(knowledge::estimate_area_stats(tr),
                                                                   tr.vocab.num_classes());
                            pp = &p;
                        }
                        TrainOptions opts;
                        opts.skip_final_reports = true;
                        TrainResult r = train(cfg, tr, va, pp, opts);
                        cell.fold_ious.push_back(r.best.best_val_macro_iou);
                    }
                    double s = 0.0;
                    for (double v : cell.fold_ious) s += v;
                    cell.mean_iou = s / static_cast<double>(cell.fold_ious.size());
                } catch (const std::exception& e) {
                    cell.error = e.what();
                }
                result.cells.push_back(std::move(cell));
                const GridCell& c = result.cells.back();
                if (c.mean_iou && (!best_cell || *c.mean_iou > *best_cell->mean_iou)) best_cell = &c;
            }
        }
    }
    if (!best_cell) throw ValidationError("grid_search: every cell failed");
    result.best_config = base;
    result.best_config.learning_rate = best_cell->learning_rate;
    result.best_config.batch_size = best_cell->batch_size;
    result.best_config.loss_alpha = best_cell->loss_alpha;
    return result;
}

std::vector<AblationRow> ablate(const core::ExperimentConfig& base, const core::DatasetManifest& train_manifest,
                                const core::DatasetManifest& val_manifest, const std::vector<uint64_t>& seeds,
                                const knowledge::ProjectionMatrix* projection) {
    if (seeds.empty()) throw ValidationError("ablate: no seeds");
    struct RowSpec {
        const char* name;
        bool am, pm, ldl;
        core::FusionMode fusion;
    };
    const RowSpec specs[] = {
        {"AM+PM+LDL+cross", true, true, true, core::FusionMode::Cross},
        {"AM+PM+LDL+self", true, true, true, core::FusionMode::Self},
        {"PM+LDL+cross", false, true, true, core::FusionMode::Cross},
        {"LDL+cross", false, false, true, core::FusionMode::Cross},
        {"PM+cross", false, true, false, core::FusionMode::Cross},
        {"cross", false, false, false, core::FusionMode::Cross},
        {"all-off", false, false, false, core::FusionMode::None},
    };
    std::vector<AblationRow> rows;
    for (const auto& spec : specs) {
        AblationRow row;
        row.name = spec.name;
        row.config = base;
        row.config.use_attention_module = spec.am;
        row.config.use_projection_module = spec.pm;
        row.config.use_land_masked_dice = spec.ldl;
        row.config.fusion_mode = spec.fusion;
        for (uint64_t seed : seeds) {
            core::ExperimentConfig cfg = row.config;
            cfg.seed = seed;
            TrainResult r = train(cfg, train_manifest, val_manifest, spec.pm ? projection : nullptr);
            row.dices.push_back(r.report.val_report.macro_dice.value_or(0.0));
            row.ious.push_back(r.report.val_report.macro_iou.value_or(0.0));
        }
        row.median_dice = median(row.dices);
        row.median_iou = median(row.ious);
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
    std::string out = "configuration       Dice     IoU\n";
    char buf[96];
    for (const auto& r : rows) {
        snprintf(buf, sizeof(buf), "%-18s %.4f  %.4f\n", r.name.c_str(), r.median_dice, r.median_iou);
        out += buf;
    }
    return out;
}

void predict_render(const network::Checkpoint& ckpt, const core::Sample& sample, const std::string& out_path,
                    bool side_by_side) {
    network::Model model(ckpt.config, ckpt.vocab);
    network::restore_into(model, ckpt);
    const knowledge::ProjectionMatrix* p = ckpt.projection.rows.empty() ? nullptr : &ckpt.projection;
    network::ModelOutput out = model.forward(sample, p);
    const int h = sample.height, w = sample.width;
    std::vector<uint8_t> pred_rgb = pngio::colorize_classes(out.argmax);
    if (!side_by_side) {
        pngio::write_rgb(out_path, w, h, pred_rgb);
        return;
    }
    constexpr int margin = 4;
    std::vector<uint8_t> truth_rgb = pngio::colorize_classes(sample.label);
    const int ww = 2 * w + margin;
    std::vector<uint8_t> canvas(static_cast<size_t>(ww) * h * 3, 255);
    for (int y = 0; y < h; ++y) {
        std::copy_n(pred_rgb.data() + static_cast<size_t>(y) * w * 3, w * 3,
                    canvas.data() + static_cast<size_t>(y) * ww * 3);
        std::copy_n(truth_rgb.data() + static_cast<size_t>(y) * w * 3, w * 3,
                    canvas.data() + static_cast<size_t>(y) * ww * 3 + (w + margin) * 3);
    }
    pngio::write_rgb(out_path, ww, h, canvas);
}

}  // namespace kiim::harness
