#pragma once

#include <optional>
#include <string>
#include <vector>

#include "kiim/core.hpp"
#include "kiim/knowledge.hpp"
#include "kiim/metrics.hpp"
#include "kiim/network.hpp"
#include "kiim/objective.hpp"

namespace kiim::harness {

struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct StepLog {
    int64_t step = 0;
    double ce = 0.0, dice = 0.0, total = 0.0, alpha = 1.0;
    std::optional<double> val_macro_iou;
};

struct RunReport {
    std::string config_digest;
    std::string tag;
    uint64_t seed = 0;
    int64_t steps = 0;
    double wall_seconds = 0.0;
    double learning_rate = 0.0;
    int batch_size = 0;
    double loss_alpha = 1.0;
    metrics::MetricReport train_report, val_report;
    std::vector<StepLog> trajectory;

    std::string to_json_string() const;
    void save(const std::string& path) const;
};

struct TrainOptions {
    std::string out_dir;  // when set: train_log.jsonl, best.ckpt, final.ckpt, report.json
    const network::Checkpoint* resume = nullptr;     // continue training (weights + optimizer + step)
    const network::Checkpoint* init_from = nullptr;  // weights-only initialization (fine-tuning)
    std::string tag;
    int64_t stop_after_step = -1;  // early stop for interrupt/resume scenarios
    bool skip_final_reports = false;
};

struct TrainResult {
    network::Checkpoint best;
    network::Checkpoint final_state;
    RunReport report;
};

TrainResult train(const core::ExperimentConfig& config, const core::DatasetManifest& train_manifest,
                  const core::DatasetManifest& val_manifest, const knowledge::ProjectionMatrix* projection,
                  const TrainOptions& opts = {});

metrics::MetricReport evaluate(const network::Checkpoint& ckpt, const core::DatasetManifest& manifest);
metrics::MetricReport evaluate_samples(const network::Model& model,
                                       const knowledge::ProjectionMatrix* projection,
                                       const std::vector<core::Sample>& samples);

struct TransferResult {
    TrainResult pretrain;
    TrainResult finetune;
    std::string finetune_tag;
};

// Two-phase transfer: train on the multi-state manifest, then continue from
// those weights on a deterministic fraction of the target state's training
// data with the target state's own projection matrix.
TransferResult pretrain_then_finetune(const core::DatasetManifest& pretrain_manifest,
                                      const core::DatasetManifest& target_train,
                                      const core::DatasetManifest& target_val, double fraction,
                                      const core::ExperimentConfig& config,
                                      const knowledge::ProjectionMatrix* pretrain_projection,
                                      const knowledge::ProjectionMatrix* target_projection,
                                      const std::string& out_dir = "");

struct GridCell {
    double learning_rate = 0.0;
    int batch_size = 0;
    double loss_alpha = 0.0;
    std::vector<double> fold_ious;
    std::optional<double> mean_iou;
    std::string error;
};

struct GridSearchResult {
    core::ExperimentConfig best_config;
    std::vector<GridCell> cells;
    std::string to_json_string() const;
};

// Full Cartesian grid with k-fold cross-validation; selection by mean
// validation macro-IoU, ties broken by lower learning rate then smaller
// batch. Failed cells are recorded and skipped.
GridSearchResult grid_search(const core::ExperimentConfig& base, std::vector<double> learning_rates,
                             std::vector<int> batch_sizes, std::vector<double> alphas, int folds,
                             const core::DatasetManifest& data);

struct AblationRow {
    std::string name;
    core::ExperimentConfig config;
    std::vector<double> dices, ious;  // per seed
    double median_dice = 0.0, median_iou = 0.0;
};

// The seven module on/off combinations, shared seeds across rows.
std::vector<AblationRow> ablate(const core::ExperimentConfig& base, const core::DatasetManifest& train_manifest,
                                const core::DatasetManifest& val_manifest, const std::vector<uint64_t>& seeds,
                                const knowledge::ProjectionMatrix* projection);
std::string format_ablation_table(const std::vector<AblationRow>& rows);

// argmax class map rendered with the fixed palette; optional prediction|truth
// side-by-side with a 4px margin
void predict_render(const network::Checkpoint& ckpt, const core::Sample& sample, const std::string& out_path,
                    bool side_by_side = false);

double median(std::vector<double> v);

}  // namespace kiim::harness
