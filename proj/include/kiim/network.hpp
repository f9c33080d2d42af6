#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "kiim/autodiff.hpp"
#include "kiim/core.hpp"
#include "kiim/knowledge.hpp"
#include "kiim/spectral.hpp"

namespace kiim::network {

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct Param {
    nn::Tensor value;
    nn::Tensor grad;
    nn::Tensor adam_m;
    nn::Tensor adam_v;
};

class ParamStore {
public:
    nn::Tensor& create(const std::string& name, std::vector<int> shape);
    Param& at(const std::string& name);
    const Param& at(const std::string& name) const;
    bool has(const std::string& name) const { return map_.count(name) > 0; }
    const std::vector<std::string>& names() const { return order_; }
    size_t count() const { return order_.size(); }
    int64_t total_elements() const;
    void zero_grads();

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Param> map_;
};

// Leaves created from the store for one forward pass; gradients flow back via
// accumulate_grads after backward().
struct BoundParams {
    std::unordered_map<std::string, nn::Var> leaves;
    nn::Var at(const std::string& name) const;
};

class AdamOptimizer {
public:
    explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
    void step(ParamStore& params);
    int64_t t() const { return t_; }
    void set_t(int64_t t) { t_ = t; }
    double learning_rate() const { return lr_; }

private:
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Module parameter bundles for the standalone operation entry points
// ---------------------------------------------------------------------------

struct AttentionParams {
    nn::Tensor conv1_w, conv1_b;  // [Ca,1,3,3] / [Ca]
    nn::Tensor conv2_w, conv2_b;  // [1,Ca,3,3] / [1]
};

struct FusionParams {
    // 1x1 convolution projections per stream, [C,C,1,1] weights with [C] bias
    nn::Tensor rgb_q_w, rgb_q_b, rgb_k_w, rgb_k_b, rgb_v_w, rgb_v_b;
    nn::Tensor vi_q_w, vi_q_b, vi_k_w, vi_k_b, vi_v_w, vi_v_b;
    double alpha = 0.8;
};

struct EnsembleParams {
    nn::Tensor w;  // [2]: stream branch, projection branch
    core::EnsembleMode mode = core::EnsembleMode::Geometric;
};

// sequential 3x3 convs + sigmoid on the land mask; values in (0,1)
nn::Tensor soft_attention(const nn::Tensor& land_mask, const AttentionParams& params);

// softmax(Q K^T / sqrt(C)) V over the H'*W' spatial positions
nn::Tensor scaled_dot_attention(const nn::Tensor& q, const nn::Tensor& k, const nn::Tensor& v);

// alpha * Attn(Q_vi,K_rgb,V_rgb) + (1-alpha) * Attn(Q_rgb,K_vi,V_vi)
nn::Tensor bidirectional_fuse(const nn::Tensor& f_rgb, const nn::Tensor& f_vi, const FusionParams& params);

// softmax(u1*log softmax(logits) + u2*log(probs+eps)) with (u1,u2)=softmax(w)
nn::Tensor ensemble_combine(const nn::Tensor& stream_logits, const nn::Tensor& projection_probs,
                            const EnsembleParams& params, double eps = 1e-8);

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct ForwardInput {
    const spectral::Streams* streams = nullptr;
    const nn::Tensor* land = nullptr;             // [H,W]
    const std::vector<uint8_t>* crop = nullptr;   // [H*W]
    const knowledge::ProjectionMatrix* projection = nullptr;
    int height = 0, width = 0;
};

struct ForwardResult {
    BoundParams bound;
    nn::Var attention;                       // [1,H,W]
    std::vector<nn::Var> rgb_stages, vi_stages;  // encoder features per stage, CHW
    nn::Var stream_logits;                   // [K,H,W]
    nn::Var mix_rows;                        // [H*W,K] pre-softmax ensemble input
    nn::Var ensemble_rows;                   // [H*W,K] probabilities
    nn::Tensor projection_probs;             // [K,H,W]
    int height = 0, width = 0;
};

struct ModelOutput {
    nn::Tensor attention_map;     // [H,W]
    nn::Tensor stream_logits;     // [K,H,W]
    nn::Tensor projection_probs;  // [K,H,W]
    nn::Tensor ensemble_probs;    // [K,H,W]
    std::vector<uint8_t> argmax;  // [H*W]
};

class Model {
public:
    Model(core::ExperimentConfig config, core::ClassVocab vocab);

    void init_params(uint64_t seed);
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const core::ExperimentConfig& config() const { return config_; }
    const core::ClassVocab& vocab() const { return vocab_; }

    BoundParams bind() const;
    void accumulate_grads(const BoundParams& bound);

    ForwardResult forward_nodes(const ForwardInput& in) const;
    ModelOutput forward(const core::Sample& sample, const knowledge::ProjectionMatrix* projection) const;

private:
    core::ExperimentConfig config_;
    core::ClassVocab vocab_;
    ParamStore params_;

    void register_params();
    nn::Var encode_stage_tokens(const BoundParams& b, nn::Var tokens, int stage, int resolution) const;
    std::vector<nn::Var> encode(const BoundParams& b, const nn::Var& image) const;
};

ModelOutput snapshot_output(const ForwardResult& fr);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
    core::ExperimentConfig config;
    core::ClassVocab vocab;
    std::vector<std::string> vi_channel_order;
    knowledge::ProjectionMatrix projection;  // empty rows when projection module unused
    int64_t step = 0;
    int64_t adam_t = 0;
    int64_t epoch = 0;
    double best_val_macro_iou = -1.0;
    std::map<std::string, nn::Tensor> values, adam_m, adam_v;
};

Checkpoint make_checkpoint(const Model& model, const knowledge::ProjectionMatrix* projection);
void restore_into(Model& model, const Checkpoint& ckpt);
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace kiim::network
