#include "kiim/network.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "kiim/binio.hpp"
#include "kiim/objective.hpp"

using nlohmann::json;

namespace kiim::network {

// ---------------------------------------------------------------------------
// ParamStore / Adam
// ---------------------------------------------------------------------------

nn::Tensor& ParamStore::create(const std::string& name, std::vector<int> shape) {
    if (map_.count(name)) throw ValidationError("ParamStore: duplicate parameter " + name);
    Param p;
    p.value = nn::Tensor(std::move(shape));
    p.grad = nn::Tensor::zeros(p.value.shape());
    p.adam_m = nn::Tensor::zeros(p.value.shape());
    p.adam_v = nn::Tensor::zeros(p.value.shape());
    order_.push_back(name);
    return map_.emplace(name, std::move(p)).first->second.value;
}

Param& ParamStore::at(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw ValidationError("ParamStore: unknown parameter " + name);
    return it->second;
}

const Param& ParamStore::at(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw ValidationError("ParamStore: unknown parameter " + name);
    return it->second;
}

int64_t ParamStore::total_elements() const {
    int64_t n = 0;
    for (const auto& name : order_) n += map_.at(name).value.size();
    return n;
}

void ParamStore::zero_grads() {
    for (const auto& name : order_) map_.at(name).grad.fill(0.0);
}

nn::Var BoundParams::at(const std::string& name) const {
    auto it = leaves.find(name);
    if (it == leaves.end()) throw ValidationError("BoundParams: unknown parameter " + name);
    return it->second;
}

void AdamOptimizer::step(ParamStore& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& name : params.names()) {
        Param& p = params.at(name);
        for (int64_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            p.adam_m[i] = beta1_ * p.adam_m[i] + (1.0 - beta1_) * g;
            p.adam_v[i] = beta2_ * p.adam_v[i] + (1.0 - beta2_) * g * g;
            const double mhat = p.adam_m[i] / bc1;
            const double vhat = p.adam_v[i] / bc2;
            p.value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

// ---------------------------------------------------------------------------
// Standalone operation entry points
// ---------------------------------------------------------------------------

namespace {

nn::Var attention_over_positions(const nn::Var& q, const nn::Var& k, const nn::Var& v) {
    const int c = q->val.dim(0), h = q->val.dim(1), w = q->val.dim(2);
    const double scale = 1.0 / std::sqrt(static_cast<double>(c));
    nn::Var rows = nn::attention_blocks(nn::chw_to_rows(q), nn::chw_to_rows(k), nn::chw_to_rows(v), h * w, 1,
                                        scale);
    return nn::rows_to_chw(rows, c, h, w);
}

nn::Var conv1x1(const nn::Var& x, const nn::Var& w, const nn::Var& b) { return nn::conv2d(x, w, b, 1, 0); }

nn::Tensor land_chw(const nn::Tensor& land) {
    if (land.ndim() == 3) return land;
    return nn::Tensor({1, land.dim(0), land.dim(1)}, land.raw());
}

}  // namespace

nn::Tensor soft_attention(const nn::Tensor& land_mask, const AttentionParams& params) {
    for (int64_t i = 0; i < land_mask.size(); ++i)
        if (land_mask[i] != 0.0 && land_mask[i] != 1.0)
            throw ValidationError("soft_attention: land mask not binary");
    nn::Var x = nn::constant(land_chw(land_mask));
    nn::Var h = nn::relu(nn::conv2d(x, nn::constant(params.conv1_w), nn::constant(params.conv1_b), 1, 1));
    nn::Var out = nn::sigmoid(nn::conv2d(h, nn::constant(params.conv2_w), nn::constant(params.conv2_b), 1, 1));
    return nn::Tensor({out->val.dim(1), out->val.dim(2)}, out->val.raw());
}

nn::Tensor scaled_dot_attention(const nn::Tensor& q, const nn::Tensor& k, const nn::Tensor& v) {
    if (!q.same_shape(k) || !q.same_shape(v)) throw ValidationError("scaled_dot_attention: shape mismatch");
    return attention_over_positions(nn::constant(q), nn::constant(k), nn::constant(v))->val;
}

nn::Tensor bidirectional_fuse(const nn::Tensor& f_rgb, const nn::Tensor& f_vi, const FusionParams& p) {
    if (!f_rgb.same_shape(f_vi)) throw ValidationError("bidirectional_fuse: shape mismatch");
    nn::Var rgb = nn::constant(f_rgb), vi = nn::constant(f_vi);
    nn::Var q_rgb = conv1x1(rgb, nn::constant(p.rgb_q_w), nn::constant(p.rgb_q_b));
    nn::Var k_rgb = conv1x1(rgb, nn::constant(p.rgb_k_w), nn::constant(p.rgb_k_b));
    nn::Var v_rgb = conv1x1(rgb, nn::constant(p.rgb_v_w), nn::constant(p.rgb_v_b));
    nn::Var q_vi = conv1x1(vi, nn::constant(p.vi_q_w), nn::constant(p.vi_q_b));
    nn::Var k_vi = conv1x1(vi, nn::constant(p.vi_k_w), nn::constant(p.vi_k_b));
    nn::Var v_vi = conv1x1(vi, nn::constant(p.vi_v_w), nn::constant(p.vi_v_b));
    nn::Var f_vi_att = attention_over_positions(q_rgb, k_vi, v_vi);
    nn::Var f_rgb_att = attention_over_positions(q_vi, k_rgb, v_rgb);
    return nn::blend(f_rgb_att, f_vi_att, nn::constant(nn::Tensor::scalar(p.alpha)))->val;
}

nn::Tensor ensemble_combine(const nn::Tensor& stream_logits, const nn::Tensor& projection_probs,
                            const EnsembleParams& params, double eps) {
    if (!stream_logits.same_shape(projection_probs)) throw ValidationError("ensemble: shape mismatch");
    const int k = stream_logits.dim(0), h = stream_logits.dim(1), w = stream_logits.dim(2);
    nn::Var u = nn::softmax_vec(nn::constant(params.w));
    nn::Var sl_rows = nn::chw_to_rows(nn::constant(stream_logits));
    nn::Var pp_rows = nn::chw_to_rows(nn::constant(projection_probs));
    nn::Var mix;
    if (params.mode == core::EnsembleMode::Geometric) {
        nn::Tensor log_pp = pp_rows->val;
        for (int64_t i = 0; i < log_pp.size(); ++i) log_pp[i] = std::log(log_pp[i] + eps);
        mix = nn::add(nn::scale_by(nn::log_softmax_rows(sl_rows), nn::at_index(u, 0)),
                      nn::scale_by(nn::constant(log_pp), nn::at_index(u, 1)));
    } else {
        mix = nn::add(nn::scale_by(nn::softmax_rows(sl_rows), nn::at_index(u, 0)),
                      nn::scale_by(pp_rows, nn::at_index(u, 1)));
    }
    return nn::rows_to_chw(nn::softmax_rows(mix), k, h, w)->val;
}

// ---------------------------------------------------------------------------
// Model construction
// ---------------------------------------------------------------------------

Model::Model(core::ExperimentConfig config, core::ClassVocab vocab)
    : config_(std::move(config)), vocab_(std::move(vocab)) {
    config_.validate();
    vocab_.validate();
    register_params();
}

namespace {
int window_for(int resolution, int preferred) {
    for (int w = std::min(resolution, preferred); w > 1; --w)
        if (resolution % w == 0) return w;
    return 1;
}
}  // namespace

void Model::register_params() {
    const auto& dims = config_.stage_dims;
    const int stages = static_cast<int>(dims.size());
    const int k = vocab_.num_classes();

    params_.create("attn.conv1.w", {config_.attn_hidden, 1, 3, 3});
    params_.create("attn.conv1.b", {config_.attn_hidden});
    params_.create("attn.conv2.w", {1, config_.attn_hidden, 3, 3});
    params_.create("attn.conv2.b", {1});

    params_.create("encoder.embed.w", {dims[0], 3, config_.patch_embed, config_.patch_embed});
    params_.create("encoder.embed.b", {dims[0]});
    params_.create("encoder.embed.ln.g", {dims[0]});
    params_.create("encoder.embed.ln.b", {dims[0]});
    for (int s = 0; s < stages; ++s) {
        const int c = dims[static_cast<size_t>(s)];
        for (int d = 0; d < config_.depths[static_cast<size_t>(s)]; ++d) {
            const std::string p = "encoder.s" + std::to_string(s) + ".b" + std::to_string(d) + ".";
            params_.create(p + "ln1.g", {c});
            params_.create(p + "ln1.b", {c});
            for (const char* proj : {"q", "k", "v"}) {
                params_.create(p + proj + ".w", {c, c});
                params_.create(p + proj + ".b", {c});
            }
            params_.create(p + "proj.w", {c, c});
            params_.create(p + "proj.b", {c});
            params_.create(p + "ln2.g", {c});
            params_.create(p + "ln2.b", {c});
            params_.create(p + "mlp1.w", {c, c * config_.mlp_ratio});
            params_.create(p + "mlp1.b", {c * config_.mlp_ratio});
            params_.create(p + "mlp2.w", {c * config_.mlp_ratio, c});
            params_.create(p + "mlp2.b", {c});
        }
        if (s + 1 < stages) {
            const std::string p = "encoder.m" + std::to_string(s) + ".";
            params_.create(p + "ln.g", {4 * c});
            params_.create(p + "ln.b", {4 * c});
            params_.create(p + "w", {4 * c, dims[static_cast<size_t>(s) + 1]});
            params_.create(p + "b", {dims[static_cast<size_t>(s) + 1]});
        }
    }

    const int cf = dims[static_cast<size_t>(stages - 1)];
    for (const char* stream : {"rgb", "vi"}) {
        for (const char* proj : {"q", "k", "v"}) {
            params_.create(std::string("fusion.") + stream + "." + proj + ".w", {cf, cf, 1, 1});
            params_.create(std::string("fusion.") + stream + "." + proj + ".b", {cf});
        }
    }
    params_.create("fusion.alpha", {1});

    // decoder: one conv per skip level, then upsampling to full resolution
    int cur = cf;
    for (int s = stages - 2; s >= 0; --s) {
        const std::string p = "decoder.skip" + std::to_string(s) + ".";
        params_.create(p + "w", {dims[static_cast<size_t>(s)], cur + dims[static_cast<size_t>(s)], 3, 3});
        params_.create(p + "b", {dims[static_cast<size_t>(s)]});
        cur = dims[static_cast<size_t>(s)];
    }
    int extra = 0;
    for (int pe = config_.patch_embed; pe > 1; pe >>= 1) ++extra;
    for (int j = 1; j <= extra; ++j) {
        const int out_c = std::max(dims[0] >> j, 4);
        const int in_c = cur + (j == extra ? 3 : 0);  // final level sees the blended input streams
        const std::string p = "decoder.up" + std::to_string(j) + ".";
        params_.create(p + "w", {out_c, in_c, 3, 3});
        params_.create(p + "b", {out_c});
        cur = out_c;
    }
    params_.create("decoder.refine.w", {cur, cur, 3, 3});
    params_.create("decoder.refine.b", {cur});
    params_.create("decoder.head.w", {k, cur, 1, 1});
    params_.create("decoder.head.b", {k});

    params_.create("ensemble.w", {2});
}

void Model::init_params(uint64_t seed) {
    nn::Rng rng(nn::derive_seed(seed, "init"));
    for (const auto& name : params_.names()) {
        nn::Tensor& t = params_.at(name).value;
        if (name == "fusion.alpha") {
            t[0] = config_.alpha_fusion_init;
        } else if (name == "ensemble.w") {
            t[0] = config_.ensemble_w_init[0];
            t[1] = config_.ensemble_w_init[1];
        } else if (name.ends_with(".g")) {
            t.fill(1.0);
        } else if (name.ends_with(".b")) {
            t.fill(0.0);
        } else {
            for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.trunc_normal(0.02);
        }
    }
}

BoundParams Model::bind() const {
    BoundParams b;
    for (const auto& name : params_.names()) b.leaves.emplace(name, nn::leaf(params_.at(name).value));
    return b;
}

void Model::accumulate_grads(const BoundParams& bound) {
    for (const auto& [name, var] : bound.leaves) {
        if (var->grad.empty()) continue;
        nn::Tensor& g = params_.at(name).grad;
        for (int64_t i = 0; i < g.size(); ++i) g[i] += var->grad[i];
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

namespace {

std::vector<int> window_partition_indices(int r, int ws) {
    std::vector<int> idx;
    idx.reserve(static_cast<size_t>(r) * r);
    for (int wy = 0; wy < r / ws; ++wy)
        for (int wx = 0; wx < r / ws; ++wx)
            for (int y = 0; y < ws; ++y)
                for (int x = 0; x < ws; ++x) idx.push_back((wy * ws + y) * r + (wx * ws + x));
    return idx;
}

std::vector<int> invert_permutation(const std::vector<int>& idx) {
    std::vector<int> inv(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) inv[static_cast<size_t>(idx[i])] = static_cast<int>(i);
    return inv;
}

std::vector<int> merge_indices(int r) {
    std::vector<int> idx;
    idx.reserve(static_cast<size_t>(r) * r);
    for (int y = 0; y < r / 2; ++y)
        for (int x = 0; x < r / 2; ++x) {
            idx.push_back((2 * y) * r + 2 * x);
            idx.push_back((2 * y) * r + 2 * x + 1);
            idx.push_back((2 * y + 1) * r + 2 * x);
            idx.push_back((2 * y + 1) * r + 2 * x + 1);
        }
    return idx;
}

}  // namespace

nn::Var Model::encode_stage_tokens(const BoundParams& b, nn::Var tokens, int stage, int resolution) const {
    const int c = config_.stage_dims[static_cast<size_t>(stage)];
    const int heads = config_.heads[static_cast<size_t>(stage)];
    const int ws = window_for(resolution, config_.window);
    const double scale = 1.0 / std::sqrt(static_cast<double>(c / heads));
    const std::vector<int> part = window_partition_indices(resolution, ws);
    const std::vector<int> unpart = invert_permutation(part);

    for (int d = 0; d < config_.depths[static_cast<size_t>(stage)]; ++d) {
        const std::string p = "encoder.s" + std::to_string(stage) + ".b" + std::to_string(d) + ".";
        nn::Var h = nn::layer_norm(tokens, b.at(p + "ln1.g"), b.at(p + "ln1.b"));
        h = nn::gather_rows(h, part);
        nn::Var q = nn::linear(h, b.at(p + "q.w"), b.at(p + "q.b"));
        nn::Var k = nn::linear(h, b.at(p + "k.w"), b.at(p + "k.b"));
        nn::Var v = nn::linear(h, b.at(p + "v.w"), b.at(p + "v.b"));
        nn::Var a = nn::attention_blocks(q, k, v, ws * ws, heads, scale);
        a = nn::linear(a, b.at(p + "proj.w"), b.at(p + "proj.b"));
        a = nn::gather_rows(a, unpart);
        tokens = nn::add(tokens, a);
        nn::Var m = nn::layer_norm(tokens, b.at(p + "ln2.g"), b.at(p + "ln2.b"));
        m = nn::linear(m, b.at(p + "mlp1.w"), b.at(p + "mlp1.b"));
        m = nn::gelu(m);
        m = nn::linear(m, b.at(p + "mlp2.w"), b.at(p + "mlp2.b"));
        tokens = nn::add(tokens, m);
    }
    return tokens;
}

std::vector<nn::Var> Model::encode(const BoundParams& b, const nn::Var& image) const {
    const int h = image->val.dim(1);
    const int pe = config_.patch_embed;
    const int stages = static_cast<int>(config_.stage_dims.size());
    int r = h / pe;

    nn::Var x = nn::conv2d(image, b.at("encoder.embed.w"), b.at("encoder.embed.b"), pe, 0);
    nn::Var tokens = nn::chw_to_rows(x);
    tokens = nn::layer_norm(tokens, b.at("encoder.embed.ln.g"), b.at("encoder.embed.ln.b"));

    std::vector<nn::Var> features;
    for (int s = 0; s < stages; ++s) {
        tokens = encode_stage_tokens(b, tokens, s, r);
        features.push_back(nn::rows_to_chw(tokens, config_.stage_dims[static_cast<size_t>(s)], r, r));
        if (s + 1 < stages) {
            const std::string p = "encoder.m" + std::to_string(s) + ".";
            tokens = nn::gather_rows(tokens, merge_indices(r));
            tokens = nn::reshape(tokens, {r * r / 4, 4 * config_.stage_dims[static_cast<size_t>(s)]});
            tokens = nn::layer_norm(tokens, b.at(p + "ln.g"), b.at(p + "ln.b"));
            tokens = nn::linear(tokens, b.at(p + "w"), b.at(p + "b"));
            r /= 2;
        }
    }
    return features;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

ForwardResult Model::forward_nodes(const ForwardInput& in) const {
    if (!in.streams || !in.land || !in.crop) throw ValidationError("forward: missing inputs");
    const int h = in.height, w = in.width;
    if (h != w) throw ValidationError("forward: inputs must be square");
    if (h % config_.patch_embed != 0) throw ValidationError("forward: size not divisible by patch embedding");
    const int stages = static_cast<int>(config_.stage_dims.size());
    if ((h / config_.patch_embed) % (1 << (stages - 1)) != 0)
        throw ValidationError("forward: size incompatible with encoder depth");
    const int k = vocab_.num_classes();

    ForwardResult fr;
    fr.height = h;
    fr.width = w;
    fr.bound = bind();
    const BoundParams& b = fr.bound;

    // (1) soft attention on the land mask
    if (config_.use_attention_module) {
        nn::Var land = nn::constant(land_chw(*in.land));
        nn::Var a1 = nn::relu(nn::conv2d(land, b.at("attn.conv1.w"), b.at("attn.conv1.b"), 1, 1));
        fr.attention = nn::sigmoid(nn::conv2d(a1, b.at("attn.conv2.w"), b.at("attn.conv2.b"), 1, 1));
    } else {
        fr.attention = nn::constant(nn::Tensor::full({1, h, w}, 1.0));
    }

    nn::Var rgb = nn::constant(in.streams->rgb);
    nn::Var vi = nn::constant(in.streams->vi);
    if (config_.use_attention_module && config_.attention_apply == core::AttentionApply::Input) {
        rgb = nn::mul_channel_broadcast(rgb, fr.attention);
        vi = nn::mul_channel_broadcast(vi, fr.attention);
    }

    // (2) shared encoder over both streams
    fr.rgb_stages = encode(b, rgb);
    fr.vi_stages = encode(b, vi);

    // (3) fusion at the deepest stage
    nn::Var alpha = b.at("fusion.alpha");
    nn::Var f_rgb = fr.rgb_stages.back();
    nn::Var f_vi = fr.vi_stages.back();
    nn::Var fused;
    if (config_.fusion_mode == core::FusionMode::None) {
        fused = nn::blend(f_rgb, f_vi, alpha);
    } else {
        nn::Var q_rgb = conv1x1(f_rgb, b.at("fusion.rgb.q.w"), b.at("fusion.rgb.q.b"));
        nn::Var k_rgb = conv1x1(f_rgb, b.at("fusion.rgb.k.w"), b.at("fusion.rgb.k.b"));
        nn::Var v_rgb = conv1x1(f_rgb, b.at("fusion.rgb.v.w"), b.at("fusion.rgb.v.b"));
        nn::Var q_vi = conv1x1(f_vi, b.at("fusion.vi.q.w"), b.at("fusion.vi.q.b"));
        nn::Var k_vi = conv1x1(f_vi, b.at("fusion.vi.k.w"), b.at("fusion.vi.k.b"));
        nn::Var v_vi = conv1x1(f_vi, b.at("fusion.vi.v.w"), b.at("fusion.vi.v.b"));
        nn::Var rgb_att, vi_att;
        if (config_.fusion_mode == core::FusionMode::Cross) {
            vi_att = attention_over_positions(q_rgb, k_vi, v_vi);
            rgb_att = attention_over_positions(q_vi, k_rgb, v_rgb);
        } else {
            rgb_att = attention_over_positions(q_rgb, k_rgb, v_rgb);
            vi_att = attention_over_positions(q_vi, k_vi, v_vi);
        }
        fused = nn::blend(rgb_att, vi_att, alpha);
    }

    // (4) decoder with alpha-blended skip connections
    nn::Var x = fused;
    for (int s = stages - 2; s >= 0; --s) {
        const std::string p = "decoder.skip" + std::to_string(s) + ".";
        x = nn::upsample_nearest2(x);
        nn::Var skip = nn::blend(fr.rgb_stages[static_cast<size_t>(s)], fr.vi_stages[static_cast<size_t>(s)],
                                 alpha);
        x = nn::concat_channels(x, skip);
        x = nn::relu(nn::conv2d(x, b.at(p + "w"), b.at(p + "b"), 1, 1));
    }
    int extra = 0;
    for (int pe = config_.patch_embed; pe > 1; pe >>= 1) ++extra;
    for (int j = 1; j <= extra; ++j) {
        const std::string p = "decoder.up" + std::to_string(j) + ".";
        x = nn::upsample_nearest2(x);
        if (j == extra) x = nn::concat_channels(x, nn::blend(rgb, vi, alpha));
        x = nn::relu(nn::conv2d(x, b.at(p + "w"), b.at(p + "b"), 1, 1));
    }
    x = nn::relu(nn::conv2d(x, b.at("decoder.refine.w"), b.at("decoder.refine.b"), 1, 1));
    if (config_.use_attention_module && config_.attention_apply == core::AttentionApply::PreLogits)
        x = nn::mul_channel_broadcast(x, fr.attention);
    fr.stream_logits = conv1x1(x, b.at("decoder.head.w"), b.at("decoder.head.b"));

    // (5) projection branch
    const bool project = config_.use_projection_module && in.projection != nullptr;
    if (config_.use_projection_module && in.projection == nullptr)
        throw ValidationError("forward: projection module enabled but no projection matrix given");
    if (project) {
        if (in.projection->groups != vocab_.num_groups() || in.projection->classes != k)
            throw ValidationError("forward: projection matrix dimensions do not match vocabulary");
        fr.projection_probs = knowledge::project_crop_indices(*in.crop, h, w, *in.projection);
    } else {
        fr.projection_probs = nn::Tensor::full({k, h, w}, 1.0 / k);
    }

    // (6) ensemble
    nn::Var sl_rows = nn::chw_to_rows(fr.stream_logits);
    if (project) {
        nn::Var u = nn::softmax_vec(b.at("ensemble.w"));
        nn::Var pp_rows = nn::chw_to_rows(nn::constant(fr.projection_probs));
        if (config_.ensemble_mode == core::EnsembleMode::Geometric) {
            nn::Tensor log_pp = pp_rows->val;
            for (int64_t i = 0; i < log_pp.size(); ++i) log_pp[i] = std::log(log_pp[i] + objective::kLogEps);
            fr.mix_rows = nn::add(nn::scale_by(nn::log_softmax_rows(sl_rows), nn::at_index(u, 0)),
                                  nn::scale_by(nn::constant(log_pp), nn::at_index(u, 1)));
        } else {
            fr.mix_rows = nn::add(nn::scale_by(nn::softmax_rows(sl_rows), nn::at_index(u, 0)),
                                  nn::scale_by(pp_rows, nn::at_index(u, 1)));
        }
    } else {
        fr.mix_rows = sl_rows;  // bypass: ensemble returns softmax(stream_logits)
    }
    fr.ensemble_rows = nn::softmax_rows(fr.mix_rows);
    return fr;
}

ModelOutput snapshot_output(const ForwardResult& fr) {
    ModelOutput out;
    const int h = fr.height, w = fr.width;
    out.attention_map = nn::Tensor({h, w}, fr.attention->val.raw());
    out.stream_logits = fr.stream_logits->val;
    out.projection_probs = fr.projection_probs;
    const int k = fr.stream_logits->val.dim(0);
    const int64_t hw = static_cast<int64_t>(h) * w;
    out.ensemble_probs = nn::Tensor({k, h, w});
    out.argmax.assign(static_cast<size_t>(hw), 0);
    for (int64_t p = 0; p < hw; ++p) {
        int best = 0;
        double bv = -1.0;
        for (int c = 0; c < k; ++c) {
            const double v = fr.ensemble_rows->val[p * k + c];
            out.ensemble_probs[c * hw + p] = v;
            if (v > bv) {
                bv = v;
                best = c;
            }
        }
        out.argmax[static_cast<size_t>(p)] = static_cast<uint8_t>(best);
    }
    return out;
}

ModelOutput Model::forward(const core::Sample& sample, const knowledge::ProjectionMatrix* projection) const {
    spectral::Streams streams = spectral::assemble_streams(sample);
    nn::Tensor land({sample.height, sample.width});
    for (int64_t i = 0; i < sample.pixels(); ++i) land[i] = sample.land[static_cast<size_t>(i)];
    ForwardInput in;
    in.streams = &streams;
    in.land = &land;
    in.crop = &sample.crop;
    in.projection = projection;
    in.height = sample.height;
    in.width = sample.width;
    return snapshot_output(forward_nodes(in));
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

Checkpoint make_checkpoint(const Model& model, const knowledge::ProjectionMatrix* projection) {
    Checkpoint c;
    c.config = model.config();
    c.vocab = model.vocab();
    c.vi_channel_order = spectral::vi_channel_order();
    if (projection) c.projection = *projection;
    for (const auto& name : model.params().names()) {
        const Param& p = model.params().at(name);
        c.values[name] = p.value;
        c.adam_m[name] = p.adam_m;
        c.adam_v[name] = p.adam_v;
    }
    return c;
}

void restore_into(Model& model, const Checkpoint& ckpt) {
    for (const auto& name : model.params().names()) {
        Param& p = model.params().at(name);
        auto it = ckpt.values.find(name);
        if (it == ckpt.values.end()) throw ValidationError("checkpoint: missing parameter " + name);
        if (!it->second.same_shape(p.value)) throw ValidationError("checkpoint: shape mismatch for " + name);
        p.value = it->second;
        p.adam_m = ckpt.adam_m.at(name);
        p.adam_v = ckpt.adam_v.at(name);
    }
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    binio::Container c;
    json meta;
    meta["format"] = "kiim-checkpoint";
    meta["config"] = json::parse(ckpt.config.to_json_string());
    meta["vocab"] = {{"irrigation_classes", ckpt.vocab.irrigation_classes},
                     {"crop_groups", ckpt.vocab.crop_groups}};
    meta["vi_channel_order"] = ckpt.vi_channel_order;
    meta["projection"] = {{"state_id", ckpt.projection.state_id},
                          {"source_digest", ckpt.projection.source_digest},
                          {"groups", ckpt.projection.groups},
                          {"classes", ckpt.projection.classes},
                          {"rows", ckpt.projection.rows},
                          {"digest", ckpt.projection.rows.empty() ? 0 : ckpt.projection.digest()}};
    meta["step"] = ckpt.step;
    meta["adam_t"] = ckpt.adam_t;
    meta["epoch"] = ckpt.epoch;
    meta["best_val_macro_iou"] = ckpt.best_val_macro_iou;
    c.meta_json = meta.dump();

    auto add_group = [&](const char* prefix, const std::map<std::string, nn::Tensor>& group) {
        for (const auto& [name, t] : group) {
            std::vector<int64_t> dims(t.shape().begin(), t.shape().end());
            c.add_f64(std::string(prefix) + "/" + name, std::move(dims), t.data());
        }
    };
    add_group("param", ckpt.values);
    add_group("adam_m", ckpt.adam_m);
    add_group("adam_v", ckpt.adam_v);
    binio::write_container(c, path);
}

Checkpoint load_checkpoint(const std::string& path) {
    binio::Container c = binio::read_container(path);
    json meta = json::parse(c.meta_json);
    if (meta.value("format", "") != "kiim-checkpoint") throw IoError("not a checkpoint file: " + path);
    Checkpoint ckpt;
    ckpt.config = core::ExperimentConfig::from_json_string(meta.at("config").dump());
    ckpt.vocab.irrigation_classes = meta.at("vocab").at("irrigation_classes").get<std::vector<std::string>>();
    ckpt.vocab.crop_groups = meta.at("vocab").at("crop_groups").get<std::vector<std::string>>();
    ckpt.vi_channel_order = meta.at("vi_channel_order").get<std::vector<std::string>>();
    const auto& pj = meta.at("projection");
    ckpt.projection.state_id = pj.value("state_id", "");
    ckpt.projection.source_digest = pj.value("source_digest", 0ULL);
    ckpt.projection.groups = pj.value("groups", 0);
    ckpt.projection.classes = pj.value("classes", 0);
    ckpt.projection.rows = pj.value("rows", std::vector<double>{});
    ckpt.step = meta.value("step", int64_t{0});
    ckpt.adam_t = meta.value("adam_t", int64_t{0});
    ckpt.epoch = meta.value("epoch", int64_t{0});
    ckpt.best_val_macro_iou = meta.value("best_val_macro_iou", -1.0);

    for (const auto& [name, arr] : c.arrays) {
        auto slash = name.find('/');
        if (slash == std::string::npos) continue;
        const std::string group = name.substr(0, slash), pname = name.substr(slash + 1);
        std::vector<int> shape(arr.dims.begin(), arr.dims.end());
        nn::Tensor t(shape, c.as_f64(name, "checkpoint"));
        if (group == "param")
            ckpt.values[pname] = std::move(t);
        else if (group == "adam_m")
            ckpt.adam_m[pname] = std::move(t);
        else if (group == "adam_v")
            ckpt.adam_v[pname] = std::move(t);
    }
    return ckpt;
}

}  // namespace kiim::network
