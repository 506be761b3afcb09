#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "latflow/context.hpp"
#include "latflow/dmat.hpp"
#include "latflow/latent.hpp"

namespace latflow {

// ---- activations ----

inline double silu(double x) {
    double s = 1.0 / (1.0 + std::exp(-x));
    return x * s;
}

inline double dsilu(double x) {
    double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

// ---- norms ----
// Caches hold per-row scalar statistics only; backward recomputes normalized
// values from input + stats. A reference backward that reads a fully cached
// normalized tensor must agree bitwise (same expressions, same order).

struct NormCache {
    std::vector<double> inv_rms;  // one scalar per row
};

struct LayerNormCache {
    std::vector<double> mean, inv_std;  // two scalars per row
};

DMat rmsnorm(const DMat& x, const DMat& gain, double eps, NormCache* cache);
void rmsnorm_backward(const DMat& dy, const DMat& x, const DMat& gain, const NormCache& cache, DMat& dx, DMat& dgain);
void rmsnorm_backward_ref(const DMat& dy, const DMat& z_cached, const DMat& gain, const NormCache& cache, DMat& dx,
                          DMat& dgain);

DMat layernorm(const DMat& x, const DMat& gain, double eps, LayerNormCache* cache);
void layernorm_backward(const DMat& dy, const DMat& x, const DMat& gain, const LayerNormCache& cache, DMat& dx,
                        DMat& dgain);

// ---- rotary embedding ----
// Temporal-only rotation: pair j of each head turns by pos * base^(-2j/d_head).
// The backward pass is the same rotation with negated sine (the inverse).

DMat rope_apply(const DMat& x, const std::vector<std::int64_t>& positions, double base, std::int64_t n_heads);
DMat rope_apply_inverse(const DMat& x, const std::vector<std::int64_t>& positions, double base, std::int64_t n_heads);

// ---- attention ----

void softmax_row(double* row, std::int64_t n);

// Joint self-attention over [noisy | history] rows (rows 0..n_noisy-1 are
// noisy). History keys are scaled per head-dim by amp (n_heads x d_head) before
// the dot product; amp = 1 reduces to plain attention, amp = 0 zeroes every
// history logit pre-softmax. Output covers all query rows.
DMat guidance_attention(const DMat& q, const DMat& k, const DMat& v, std::int64_t n_noisy, const DMat& amp,
                        std::int64_t n_heads, std::vector<DMat>* probs_out = nullptr,
                        std::vector<DMat>* logits_out = nullptr);

// Split-argument form mirroring the published interface; concatenates noisy
// rows first and calls the joint kernel.
DMat guidance_attention_split(const DMat& q_noisy, const DMat& k_noisy, const DMat& v_noisy, const DMat& q_hist,
                              const DMat& k_hist, const DMat& v_hist, const DMat& amp, std::int64_t n_heads);

// Text cross-attention for noisy queries only.
DMat cross_attention(const DMat& q, const DMat& k_text, const DMat& v_text, std::int64_t n_heads,
                     std::vector<DMat>* probs_out = nullptr);

// ---- patching ----

// Extract non-overlapping (kt,kh,kw) patches of batch item b over frames
// [t_begin, t_begin+t_count). Row order: temporal patch, then row, then column;
// within a row: channel-major then (dt,dh,dw). Rows = (t_count/kt)*(H/kh)*(W/kw).
DMat patchify(const Latent& x, std::int64_t b, std::int64_t t_begin, std::int64_t t_count, const PatchKernel& k);
DMat patchify(const DLatent& x, std::int64_t b, std::int64_t t_begin, std::int64_t t_count, const PatchKernel& k);

// Adjoint of patchify for full-tensor coverage (t_begin 0, t_count = T):
// scatter-add patch rows back into the tensor.
void unpatchify_add(DLatent& out, std::int64_t b, const DMat& rows, const PatchKernel& k);

}  // namespace latflow
