#include "kiim/metrics.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "kiim/core.hpp"

using nlohmann::json;

namespace kiim::metrics {

void ConfusionCounts::merge(const ConfusionCounts& other) {
    if (num_classes != other.num_classes) throw ValidationError("ConfusionCounts::merge: class count mismatch");
    for (int k = 0; k < num_classes; ++k) {
        tp[static_cast<size_t>(k)] += other.tp[static_cast<size_t>(k)];
        fp[static_cast<size_t>(k)] += other.fp[static_cast<size_t>(k)];
        fn[static_cast<size_t>(k)] += other.fn[static_cast<size_t>(k)];
    }
    pixels += other.pixels;
}

void accumulate_confusion_into(ConfusionCounts& counts, const std::vector<uint8_t>& pred,
                               const std::vector<uint8_t>& truth, const std::vector<uint8_t>* region_mask) {
    if (pred.size() != truth.size()) throw ValidationError("accumulate_confusion: shape mismatch");
    if (region_mask && region_mask->size() != pred.size())
        throw ValidationError("accumulate_confusion: region mask shape mismatch");
    const int k = counts.num_classes;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (region_mask && !(*region_mask)[i]) continue;
        const uint8_t p = pred[i], t = truth[i];
        if (p >= k || t >= k) throw ValidationError("accumulate_confusion: value out of range");
        ++counts.pixels;
        if (p == t) {
            ++counts.tp[p];
        } else {
            ++counts.fp[p];
            ++counts.fn[t];
        }
    }
}

ConfusionCounts accumulate_confusion(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& truth,
                                     int num_classes, const std::vector<uint8_t>* region_mask) {
    ConfusionCounts counts(num_classes);
    accumulate_confusion_into(counts, pred, truth, region_mask);
    return counts;
}

namespace {
std::optional<double> ratio(int64_t num, int64_t denom) {
    if (denom == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(denom);
}

std::optional<double> mean_defined(const std::vector<std::optional<double>>& vals) {
    double s = 0.0;
    int n = 0;
    for (const auto& v : vals)
        if (v) {
            s += *v;
            ++n;
        }
    if (n == 0) return std::nullopt;
    return s / n;
}
}  // namespace

MetricReport compute_metrics(const ConfusionCounts& counts, const std::vector<std::string>& class_names) {
    if (static_cast<int>(class_names.size()) != counts.num_classes)
        throw ValidationError("compute_metrics: class name count mismatch");
    MetricReport r;
    r.class_names = class_names;
    r.pixels = counts.pixels;

    std::vector<std::optional<double>> ps, rs, ds, is;
    for (int k = 0; k < counts.num_classes; ++k) {
        ClassMetrics m;
        m.tp = counts.tp[static_cast<size_t>(k)];
        m.fp = counts.fp[static_cast<size_t>(k)];
        m.fn = counts.fn[static_cast<size_t>(k)];
        m.precision = ratio(m.tp, m.tp + m.fp);
        m.recall = ratio(m.tp, m.tp + m.fn);
        if (m.precision && m.recall && (*m.precision + *m.recall) > 0.0)
            m.dice = 2.0 * *m.precision * *m.recall / (*m.precision + *m.recall);
        m.iou = ratio(m.tp, m.tp + m.fp + m.fn);
        ps.push_back(m.precision);
        rs.push_back(m.recall);
        ds.push_back(m.dice);
        is.push_back(m.iou);
        r.per_class.push_back(m);
    }
    r.macro_precision = mean_defined(ps);
    r.macro_recall = mean_defined(rs);
    r.macro_dice = mean_defined(ds);
    r.macro_iou = mean_defined(is);
    if (counts.num_classes == 4) {
        std::vector<std::optional<double>> di(ds.begin() + 1, ds.end()), ii(is.begin() + 1, is.end());
        r.irrigated_macro_dice = mean_defined(di);
        r.irrigated_macro_iou = mean_defined(ii);
    }
    return r;
}

namespace {
json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string fmt_opt(const std::optional<double>& v) {
    if (!v) return "  --  ";
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << *v;
    return os.str();
}
}  // namespace

std::string MetricReport::to_json_string() const {
    json j;
    j["pixels"] = pixels;
    json classes = json::array();
    for (size_t k = 0; k < per_class.size(); ++k) {
        const auto& m = per_class[k];
        classes.push_back({{"class", class_names[k]},
                           {"tp", m.tp},
                           {"fp", m.fp},
                           {"fn", m.fn},
                           {"precision", opt_json(m.precision)},
                           {"recall", opt_json(m.recall)},
                           {"dice", opt_json(m.dice)},
                           {"iou", opt_json(m.iou)}});
    }
    j["per_class"] = std::move(classes);
    j["macro"] = {{"precision", opt_json(macro_precision)},
                  {"recall", opt_json(macro_recall)},
                  {"dice", opt_json(macro_dice)},
                  {"iou", opt_json(macro_iou)}};
    j["irrigated_macro"] = {{"dice", opt_json(irrigated_macro_dice)}, {"iou", opt_json(irrigated_macro_iou)}};
    return j.dump(1);
}

std::string MetricReport::format_table() const {
    std::ostringstream os;
    os << std::left << std::setw(16) << "class" << std::right << std::setw(8) << "P" << std::setw(8) << "R"
       << std::setw(8) << "Dice" << std::setw(8) << "IoU" << "\n";
    for (size_t k = 0; k < per_class.size(); ++k) {
        const auto& m = per_class[k];
        os << std::left << std::setw(16) << class_names[k] << std::right << std::setw(8) << fmt_opt(m.precision)
           << std::setw(8) << fmt_opt(m.recall) << std::setw(8) << fmt_opt(m.dice) << std::setw(8)
           << fmt_opt(m.iou) << "\n";
    }
    os << std::left << std::setw(16) << "macro" << std::right << std::setw(8) << fmt_opt(macro_precision)
       << std::setw(8) << fmt_opt(macro_recall) << std::setw(8) << fmt_opt(macro_dice) << std::setw(8)
       << fmt_opt(macro_iou) << "\n";
    return os.str();
}

void save_report(const MetricReport& r, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << r.to_json_string() << "\n";
}

}  // namespace kiim::metrics
