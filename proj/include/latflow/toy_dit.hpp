#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "latflow/context.hpp"
#include "latflow/dmat.hpp"
#include "latflow/latent.hpp"
#include "latflow/nn_kernels.hpp"

namespace latflow {

struct DitConfig {
    std::int64_t d_model = 32;
    std::int64_t n_heads = 4;
    std::int64_t n_layers = 2;
    std::int64_t d_text = 16;
    std::int64_t mlp_mult = 2;
    std::int64_t channels = 2;
    std::int64_t k_stages = 3;
    PatchKernel noisy_kernel{1, 1, 1};
    double rope_base = 10000.0;
    RopeIndexing rope_mode = RopeIndexing::PostPatch;
    double norm_eps = 1e-6;
    double time_scale = 1000.0;  // blend value -> sinusoid position

    std::int64_t d_head() const { return d_model / n_heads; }
    void validate() const;
};

struct DitLayerParams {
    DMat norm1_g, norm2_g, norm3_g;  // 1 x D
    DMat wq, wk, wv, wo;             // D x D
    DMat bq, bk, bv, bo;             // 1 x D
    DMat amp;                        // n_heads x d_head, ones = plain attention
    DMat cq, co;                     // D x D
    DMat cbq, cbo;                   // 1 x D
    DMat ck, cv;                     // d_text x D
    DMat mlp_w1, mlp_b1;             // D x H, 1 x H
    DMat mlp_w2, mlp_b2;             // H x D, 1 x D
};

struct DitParams {
    DitConfig cfg;
    MemoryPlan plan;
    std::array<DMat, 3> hist_embed;  // (C * kernel volume) x D, no bias: zero frames embed to zero
    DMat noisy_embed;                // (C * noisy kernel volume) x D
    DMat time_w1, time_b1, time_w2, time_b2;
    DMat stage_embed;  // K x D, added to noisy tokens only
    std::vector<DitLayerParams> layers;
    DMat final_norm_g;
    DMat head_w, head_b;  // D x (C * noisy kernel volume)
};

// Allocate zeroed parameters with the right shapes.
DitParams make_dit_params(const DitConfig& cfg, const MemoryPlan& plan);
// Scaled-normal init (1/sqrt(fan_in)); gains and amps start at one, biases and
// the output head at zero so an untrained model predicts the zero field.
void init_dit_params(DitParams& p, Rng& rng);

void for_each_param(DitParams& p, const std::function<void(const std::string&, DMat&)>& fn);
void for_each_param(const DitParams& p, const std::function<void(const std::string&, const DMat&)>& fn);
DitParams zeros_like(const DitParams& p);
std::int64_t param_count(const DitParams& p);

// Saved activations for one batch item. Norm layers keep scalar row stats only;
// their backward recomputes normalized rows (full-cache copies are stored just
// when store_normalized is set, for the bitwise reference comparison).
struct DitLayerRecord {
    DMat x_in;
    NormCache n1;
    DMat q, k_preamp, k, v;  // q,k after rotation; k_preamp before the amp scaling
    std::vector<DMat> probs;
    DMat ctx;
    DMat x_mid;
    NormCache n2;  // noisy rows
    DMat q2, kt, vt, ctx2;
    std::vector<DMat> probs2;
    DMat x_mid2;
    NormCache n3;
    DMat mlp_pre;
    DMat z1, z2, z3;  // full-cache mode only
};

struct DitItemRecord {
    std::array<DMat, 3> hist_patches;
    DMat noisy_patches;
    std::vector<std::int64_t> positions;  // per token row
    std::int64_t n_noisy = 0, n_hist = 0;
    DMat time_feat, time_feat0;
    DMat time_pre, time_pre0;  // pre-silu hidden of the conditioning mlp
    std::vector<DitLayerRecord> layers;
    DMat x_final;
    NormCache nf;
    DMat zf;  // full-cache mode only
};

struct DitRecord {
    std::vector<DitItemRecord> items;
    LatentDims noisy_dims;
    double lambda = 0.0;
    std::int64_t stage = 1;
    bool store_normalized = false;

    // token activations after layer l (input of the next block), for probe heads
    const DMat& layer_output(std::int64_t item, std::int64_t layer) const;
};

// Gradients injected at layer outputs (noisy rows), keyed by layer index.
struct TapGrads {
    std::vector<std::map<std::int64_t, DMat>> per_item;
};

// Sinusoidal timestep features, half sin / half cos.
DMat timestep_features(double value, std::int64_t dim, double base = 10000.0);

// Patch-embed the assembled history of batch item b: [long | mid | short] rows,
// bias-free so zero frames yield exactly zero rows.
DMat embed_history(const DitParams& p, const HistoryContext& hist, std::int64_t b);
DMat embed_noisy(const DitParams& p, const DLatent& noisy, std::int64_t b);

// Predict the velocity field over the noisy latent. History tokens are
// conditioned at blend 0 regardless of `lambda`; stage embedding touches noisy
// tokens only. History rows pass through the text cross block untouched.
DLatent dit_forward(const DitParams& p, const DLatent& noisy, const HistoryContext& hist, const PromptEmbedding& text,
                    double lambda, std::int64_t stage, DitRecord* record = nullptr);

// Accumulate parameter gradients into `grads` and return the gradient with
// respect to the noisy input. `tap_grads` lets probe heads add gradient at
// intermediate layer outputs.
DLatent dit_backward(const DitParams& p, const DitRecord& rec, const HistoryContext& hist,
                     const PromptEmbedding& text, const DLatent& grad_out, DitParams& grads,
                     const TapGrads* tap_grads = nullptr);

// Named-tensor checkpoint container, version 1: magic "HCKP", a directory of
// (name, dims, f64 payload) entries plus meta tensors that rebuild the
// architecture. Dim mismatches on load fail with a ConfigError naming the tensor.
void save_checkpoint(const std::string& path, const DitParams& p);
DitParams load_checkpoint(const std::string& path);

}  // namespace latflow
