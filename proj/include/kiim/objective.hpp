#pragma once

#include <cstdint>

#include "kiim/tensor.hpp"

namespace kiim::objective {

inline constexpr double kLogEps = 1e-8;  // shared with the ensemble's probability floor

struct LossBreakdown {
    double total = 0.0;
    double ce = 0.0;
    double dice = 0.0;
    double alpha = 1.0;
    int64_t pixels_counted = 0;
};

// All rasters are planar [K,H,W]; the land mask is [H,W].

// -(1/(H*W)) * sum_k sum_ij Y * log(max(Yhat, eps)); Yhat rows must sum to 1
// within 1e-4.
double cross_entropy_loss(const nn::Tensor& y_onehot, const nn::Tensor& y_hat, double eps = kLogEps);

// 1 - (1/K) * sum_k 2*sum(Yhat*Y*L) / sum(L*(Y+Yhat)); a class whose masked
// denominator is zero contributes a ratio of 1 (absent class, no penalty).
double land_masked_dice_loss(const nn::Tensor& y_onehot, const nn::Tensor& y_hat, const nn::Tensor& land);

LossBreakdown composite_loss(const nn::Tensor& y_onehot, const nn::Tensor& y_hat, const nn::Tensor& land,
                             double alpha);

// Loss and analytic gradient with respect to pre-softmax logits
// (Yhat = softmax(logits) per pixel).
struct LossWithGrad {
    LossBreakdown breakdown;
    nn::Tensor grad_logits;  // [K,H,W]
};
LossWithGrad composite_loss_with_logit_grad(const nn::Tensor& y_onehot, const nn::Tensor& logits,
                                            const nn::Tensor& land, double alpha);

// Dice loss plus gradient w.r.t. the probabilities themselves; backs the
// autodiff node used in training.
double dice_loss_with_prob_grad(const nn::Tensor& y_onehot, const nn::Tensor& y_hat, const nn::Tensor& land,
                                nn::Tensor* grad_probs);

nn::Tensor softmax_over_classes(const nn::Tensor& logits);  // [K,H,W] -> [K,H,W]
nn::Tensor one_hot_labels(const std::vector<uint8_t>& labels, int height, int width, int num_classes);

}  // namespace kiim::objective
