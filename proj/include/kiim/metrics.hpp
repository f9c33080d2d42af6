#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace kiim::metrics {

struct ConfusionCounts {
    int num_classes = 0;
    std::vector<int64_t> tp, fp, fn;
    int64_t pixels = 0;

    explicit ConfusionCounts(int k = 0)
        : num_classes(k), tp(static_cast<size_t>(k), 0), fp(static_cast<size_t>(k), 0),
          fn(static_cast<size_t>(k), 0) {}
    int64_t support(int k) const { return tp[static_cast<size_t>(k)] + fn[static_cast<size_t>(k)]; }
    void merge(const ConfusionCounts& other);
};

// Counts over pixels where region_mask==1 (all pixels when mask is null).
// Additive across calls via merge or by accumulating into the same counts.
ConfusionCounts accumulate_confusion(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& truth,
                                     int num_classes, const std::vector<uint8_t>* region_mask = nullptr);
void accumulate_confusion_into(ConfusionCounts& counts, const std::vector<uint8_t>& pred,
                               const std::vector<uint8_t>& truth,
                               const std::vector<uint8_t>* region_mask = nullptr);

struct ClassMetrics {
    int64_t tp = 0, fp = 0, fn = 0;
    std::optional<double> precision, recall, dice, iou;
};

struct MetricReport {
    std::vector<std::string> class_names;
    std::vector<ClassMetrics> per_class;
    // macro means over classes where the metric is defined
    std::optional<double> macro_precision, macro_recall, macro_dice, macro_iou;
    // same, restricted to the irrigated classes (flood/sprinkler/drip)
    std::optional<double> irrigated_macro_dice, irrigated_macro_iou;
    int64_t pixels = 0;

    std::string to_json_string() const;
    std::string format_table() const;
};

// P=tp/(tp+fp), R=tp/(tp+fn), Dice=2PR/(P+R), IoU=tp/(tp+fp+fn); a metric
// with zero denominator is undefined and excluded from macro means.
MetricReport compute_metrics(const ConfusionCounts& counts, const std::vector<std::string>& class_names);

void save_report(const MetricReport& r, const std::string& path);

}  // namespace kiim::metrics
