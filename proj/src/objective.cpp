#include "kiim/objective.hpp"

#include <cmath>

#include "kiim/core.hpp"

namespace kiim::objective {

namespace {
void check_raster_pair(const nn::Tensor& y, const nn::Tensor& yhat) {
    if (y.ndim() != 3 || !y.same_shape(yhat))
        throw ValidationError("loss: shape mismatch between labels and prediction");
}
}  // namespace

double cross_entropy_loss(const nn::Tensor& y_onehot, const nn::Tensor& y_hat, double eps) {
    check_raster_pair(y_onehot, y_hat);
    const int k = y_hat.dim(0);
    const int64_t hw = static_cast<int64_t>(y_hat.dim(1)) * y_hat.dim(2);
    for (int64_t p = 0; p < hw; ++p) {
        double s = 0.0;
        for (int c = 0; c < k; ++c) s += y_hat[c * hw + p];
        if (std::abs(s - 1.0) > 1e-4) throw ValidationError("cross_entropy_loss: prediction rows not normalized");
    }
    double acc = 0.0;
    for (int c = 0; c < k; ++c)
        for (int64_t p = 0; p < hw; ++p) {
            double yv = y_onehot[c * hw + p];
            if (yv != 0.0) acc += yv * std::log(std::max(y_hat[c * hw + p], eps));
        }
    return -acc / static_cast<double>(hw);
}

double land_masked_dice_loss(const nn::Tensor& y_onehot, const nn::Tensor& y_hat, const nn::Tensor& land) {
    return dice_loss_with_prob_grad(y_onehot, y_hat, land, nullptr);
}

double dice_loss_with_prob_grad(const nn::Tensor& y_onehot, const nn::Tensor& y_hat, const nn::Tensor& land,
                                nn::Tensor* grad_probs) {
    check_raster_pair(y_onehot, y_hat);
    const int k = y_hat.dim(0);
    const int64_t hw = static_cast<int64_t>(y_hat.dim(1)) * y_hat.dim(2);
    if (land.size() != hw) throw ValidationError("dice loss: land mask shape mismatch");
    double mask_total = 0.0;
    for (int64_t p = 0; p < hw; ++p) mask_total += land[p];
    if (mask_total <= 0.0) throw ValidationError("dice loss: all-zero land mask");

    if (grad_probs) *grad_probs = nn::Tensor::zeros(y_hat.shape());
    double ratio_sum = 0.0;
    for (int c = 0; c < k; ++c) {
        double numer = 0.0, denom = 0.0;
        for (int64_t p = 0; p < hw; ++p) {
            const double l = land[p];
            if (l == 0.0) continue;
            const double yv = y_onehot[c * hw + p], hv = y_hat[c * hw + p];
            numer += hv * yv * l;
            denom += l * (yv + hv);
        }
        if (denom == 0.0) {
            ratio_sum += 1.0;  // class absent inside the mask in both Y and Yhat
            continue;
        }
        const double ratio = 2.0 * numer / denom;
        ratio_sum += ratio;
        if (grad_probs) {
            // d(loss)/d(yhat) = -(1/K) * (2*Y*L*denom - 2*numer*L) / denom^2
            const double inv_d2 = 1.0 / (denom * denom);
            for (int64_t p = 0; p < hw; ++p) {
                const double l = land[p];
                if (l == 0.0) continue;
                const double yv = y_onehot[c * hw + p];
                (*grad_probs)[c * hw + p] =
                    -(2.0 * yv * l * denom - 2.0 * numer * l) * inv_d2 / static_cast<double>(k);
            }
        }
    }
    return 1.0 - ratio_sum / static_cast<double>(k);
}

LossBreakdown composite_loss(const nn::Tensor& y_onehot, const nn::Tensor& y_hat, const nn::Tensor& land,
                             double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("composite_loss: alpha must be in [0,1]");
    LossBreakdown b;
    b.alpha = alpha;
    b.ce = cross_entropy_loss(y_onehot, y_hat);
    b.dice = land_masked_dice_loss(y_onehot, y_hat, land);
    b.total = alpha * b.ce + (1.0 - alpha) * b.dice;
    b.pixels_counted = static_cast<int64_t>(y_hat.dim(1)) * y_hat.dim(2);
    return b;
}

nn::Tensor softmax_over_classes(const nn::Tensor& logits) {
    const int k = logits.dim(0);
    const int64_t hw = static_cast<int64_t>(logits.dim(1)) * logits.dim(2);
    nn::Tensor out(logits.shape());
    for (int64_t p = 0; p < hw; ++p) {
        double mx = logits[p];
        for (int c = 1; c < k; ++c) mx = std::max(mx, logits[c * hw + p]);
        double z = 0.0;
        for (int c = 0; c < k; ++c) {
            double e = std::exp(logits[c * hw + p] - mx);
            out[c * hw + p] = e;
            z += e;
        }
        for (int c = 0; c < k; ++c) out[c * hw + p] /= z;
    }
    return out;
}

LossWithGrad composite_loss_with_logit_grad(const nn::Tensor& y_onehot, const nn::Tensor& logits,
                                            const nn::Tensor& land, double alpha) {
    const int k = logits.dim(0);
    const int64_t hw = static_cast<int64_t>(logits.dim(1)) * logits.dim(2);
    nn::Tensor probs = softmax_over_classes(logits);

    LossWithGrad out;
    out.breakdown = composite_loss(y_onehot, probs, land, alpha);
    out.grad_logits = nn::Tensor::zeros(logits.shape());

    // CE term: d/dlogit = (softmax - Y) / (H*W)
    const double inv_hw = 1.0 / static_cast<double>(hw);
    for (int c = 0; c < k; ++c)
        for (int64_t p = 0; p < hw; ++p)
            out.grad_logits[c * hw + p] += alpha * (probs[c * hw + p] - y_onehot[c * hw + p]) * inv_hw;

    if (alpha < 1.0) {
        nn::Tensor dprobs;
        dice_loss_with_prob_grad(y_onehot, probs, land, &dprobs);
        // chain through the per-pixel softmax
        for (int64_t p = 0; p < hw; ++p) {
            double dot = 0.0;
            for (int c = 0; c < k; ++c) dot += dprobs[c * hw + p] * probs[c * hw + p];
            for (int c = 0; c < k; ++c)
                out.grad_logits[c * hw + p] +=
                    (1.0 - alpha) * probs[c * hw + p] * (dprobs[c * hw + p] - dot);
        }
    }
    return out;
}

nn::Tensor one_hot_labels(const std::vector<uint8_t>& labels, int height, int width, int num_classes) {
    const int64_t hw = static_cast<int64_t>(height) * width;
    if (static_cast<int64_t>(labels.size()) != hw) throw ValidationError("one_hot_labels: shape mismatch");
    nn::Tensor out({num_classes, height, width});
    for (int64_t p = 0; p < hw; ++p) {
        if (labels[static_cast<size_t>(p)] >= num_classes)
            throw ValidationError("one_hot_labels: label out of range");
        out[labels[static_cast<size_t>(p)] * hw + p] = 1.0;
    }
    return out;
}

}  // namespace kiim::objective
