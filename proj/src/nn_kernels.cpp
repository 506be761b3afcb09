#include "latflow/nn_kernels.hpp"

#include <algorithm>
#include <cmath>

namespace latflow {

DMat rmsnorm(const DMat& x, const DMat& gain, double eps, NormCache* cache) {
    if (gain.rows != 1 || gain.cols != x.cols) throw DimensionError("rmsnorm gain must be 1 x cols");
    DMat y(x.rows, x.cols);
    if (cache) cache->inv_rms.assign(static_cast<std::size_t>(x.rows), 0.0);
    for (std::int64_t i = 0; i < x.rows; i++) {
        const double* xi = x.row(i);
        double ms = 0.0;
        for (std::int64_t j = 0; j < x.cols; j++) ms += xi[j] * xi[j];
        double r = 1.0 / std::sqrt(ms / static_cast<double>(x.cols) + eps);
        if (cache) cache->inv_rms[static_cast<std::size_t>(i)] = r;
        double* yi = y.row(i);
        for (std::int64_t j = 0; j < x.cols; j++) yi[j] = (xi[j] * r) * gain.a[static_cast<std::size_t>(j)];
    }
    return y;
}

namespace {

// Shared inner row backward so the fused and full-cache paths execute the
// exact same expressions on z, in the same order.
inline void norm_row_backward(const double* dy, const double* z, const double* g, double r, std::int64_t n,
                              double* dx, double* dg) {
    double s = 0.0;
    for (std::int64_t j = 0; j < n; j++) s += dy[j] * g[j] * z[j];
    s /= static_cast<double>(n);
    for (std::int64_t j = 0; j < n; j++) {
        dx[j] += r * (dy[j] * g[j] - z[j] * s);
        dg[j] += dy[j] * z[j];
    }
}

}  // namespace

void rmsnorm_backward(const DMat& dy, const DMat& x, const DMat& gain, const NormCache& cache, DMat& dx, DMat& dgain) {
    if (dx.rows != x.rows || dx.cols != x.cols) dx = DMat(x.rows, x.cols);
    if (dgain.rows != 1 || dgain.cols != x.cols) dgain = DMat(1, x.cols);
    std::vector<double> z(static_cast<std::size_t>(x.cols));
    for (std::int64_t i = 0; i < x.rows; i++) {
        double r = cache.inv_rms[static_cast<std::size_t>(i)];
        const double* xi = x.row(i);
        for (std::int64_t j = 0; j < x.cols; j++) z[static_cast<std::size_t>(j)] = xi[j] * r;
        norm_row_backward(dy.row(i), z.data(), gain.a.data(), r, x.cols, dx.row(i), dgain.row(0));
    }
}

void rmsnorm_backward_ref(const DMat& dy, const DMat& z_cached, const DMat& gain, const NormCache& cache, DMat& dx,
                          DMat& dgain) {
    if (dx.rows != z_cached.rows || dx.cols != z_cached.cols) dx = DMat(z_cached.rows, z_cached.cols);
    if (dgain.rows != 1 || dgain.cols != z_cached.cols) dgain = DMat(1, z_cached.cols);
    for (std::int64_t i = 0; i < z_cached.rows; i++) {
        double r = cache.inv_rms[static_cast<std::size_t>(i)];
        norm_row_backward(dy.row(i), z_cached.row(i), gain.a.data(), r, z_cached.cols, dx.row(i), dgain.row(0));
    }
}

DMat layernorm(const DMat& x, const DMat& gain, double eps, LayerNormCache* cache) {
    if (gain.rows != 1 || gain.cols != x.cols) throw DimensionError("layernorm gain must be 1 x cols");
    DMat y(x.rows, x.cols);
    if (cache) {
        cache->mean.assign(static_cast<std::size_t>(x.rows), 0.0);
        cache->inv_std.assign(static_cast<std::size_t>(x.rows), 0.0);
    }
    for (std::int64_t i = 0; i < x.rows; i++) {
        const double* xi = x.row(i);
        double mu = 0.0;
        for (std::int64_t j = 0; j < x.cols; j++) mu += xi[j];
        mu /= static_cast<double>(x.cols);
        double var = 0.0;
        for (std::int64_t j = 0; j < x.cols; j++) {
            double d = xi[j] - mu;
            var += d * d;
        }
        double r = 1.0 / std::sqrt(var / static_cast<double>(x.cols) + eps);
        if (cache) {
            cache->mean[static_cast<std::size_t>(i)] = mu;
            cache->inv_std[static_cast<std::size_t>(i)] = r;
        }
        double* yi = y.row(i);
        for (std::int64_t j = 0; j < x.cols; j++) yi[j] = ((xi[j] - mu) * r) * gain.a[static_cast<std::size_t>(j)];
    }
    return y;
}

void layernorm_backward(const DMat& dy, const DMat& x, const DMat& gain, const LayerNormCache& cache, DMat& dx,
                        DMat& dgain) {
    if (dx.rows != x.rows || dx.cols != x.cols) dx = DMat(x.rows, x.cols);
    if (dgain.rows != 1 || dgain.cols != x.cols) dgain = DMat(1, x.cols);
    std::int64_t n = x.cols;
    for (std::int64_t i = 0; i < x.rows; i++) {
        double mu = cache.mean[static_cast<std::size_t>(i)];
        double r = cache.inv_std[static_cast<std::size_t>(i)];
        const double* xi = x.row(i);
        const double* dyi = dy.row(i);
        double s1 = 0.0, s2 = 0.0;
        for (std::int64_t j = 0; j < n; j++) {
            double z = (xi[j] - mu) * r;
            double dz = dyi[j] * gain.a[static_cast<std::size_t>(j)];
            s1 += dz;
            s2 += dz * z;
            dgain.a[static_cast<std::size_t>(j)] += dyi[j] * z;
        }
        s1 /= static_cast<double>(n);
        s2 /= static_cast<double>(n);
        double* dxi = dx.row(i);
        for (std::int64_t j = 0; j < n; j++) {
            double z = (xi[j] - mu) * r;
            double dz = dyi[j] * gain.a[static_cast<std::size_t>(j)];
            dxi[j] += r * (dz - s1 - z * s2);
        }
    }
}

namespace {

DMat rope_impl(const DMat& x, const std::vector<std::int64_t>& positions, double base, std::int64_t n_heads,
               double sin_sign) {
    if (static_cast<std::int64_t>(positions.size()) != x.rows) throw DimensionError("one position per token row");
    if (x.cols % n_heads != 0) throw DimensionError("feature dim not divisible by head count");
    std::int64_t dh = x.cols / n_heads;
    if (dh % 2 != 0) throw DimensionError("head dim must be even for rotary pairs");
    DMat y(x.rows, x.cols);
    std::int64_t pairs = dh / 2;
    for (std::int64_t i = 0; i < x.rows; i++) {
        double pos = static_cast<double>(positions[static_cast<std::size_t>(i)]);
        const double* xi = x.row(i);
        double* yi = y.row(i);
        for (std::int64_t h = 0; h < n_heads; h++) {
            for (std::int64_t j = 0; j < pairs; j++) {
                double theta = pos * std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(dh));
                double c = std::cos(theta);
                double s = sin_sign * std::sin(theta);
                std::int64_t a = h * dh + 2 * j;
                double x0 = xi[a], x1 = xi[a + 1];
                yi[a] = x0 * c - x1 * s;
                yi[a + 1] = x0 * s + x1 * c;
            }
        }
    }
    return y;
}

}  // namespace

DMat rope_apply(const DMat& x, const std::vector<std::int64_t>& positions, double base, std::int64_t n_heads) {
    return rope_impl(x, positions, base, n_heads, 1.0);
}

DMat rope_apply_inverse(const DMat& x, const std::vector<std::int64_t>& positions, double base, std::int64_t n_heads) {
    return rope_impl(x, positions, base, n_heads, -1.0);
}

void softmax_row(double* row, std::int64_t n) {
    double mx = row[0];
    for (std::int64_t j = 1; j < n; j++) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::int64_t j = 0; j < n; j++) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
    }
    double inv = 1.0 / sum;
    for (std::int64_t j = 0; j < n; j++) row[j] *= inv;
}

DMat guidance_attention(const DMat& q, const DMat& k, const DMat& v, std::int64_t n_noisy, const DMat& amp,
                        std::int64_t n_heads, std::vector<DMat>* probs_out, std::vector<DMat>* logits_out) {
    if (!q.same_shape(k) || !q.same_shape(v)) throw DimensionError("attention inputs must share a shape");
    if (q.cols % n_heads != 0) throw DimensionError("feature dim not divisible by head count");
    std::int64_t dh = q.cols / n_heads;
    if (amp.rows != n_heads || amp.cols != dh) throw DimensionError("amp must be n_heads x d_head");
    std::int64_t l = q.rows;
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    DMat out(l, q.cols);
    if (probs_out) probs_out->assign(static_cast<std::size_t>(n_heads), DMat());
    if (logits_out) logits_out->assign(static_cast<std::size_t>(n_heads), DMat());
    for (std::int64_t h = 0; h < n_heads; h++) {
        std::int64_t off = h * dh;
        DMat probs(l, l);
        for (std::int64_t i = 0; i < l; i++) {
            const double* qi = q.row(i) + off;
            double* pi = probs.row(i);
            for (std::int64_t j = 0; j < l; j++) {
                const double* kj = k.row(j) + off;
                double acc = 0.0;
                if (j >= n_noisy) {
                    const double* ah = amp.row(h);
                    for (std::int64_t d = 0; d < dh; d++) acc += qi[d] * (kj[d] * ah[d]);
                } else {
                    for (std::int64_t d = 0; d < dh; d++) acc += qi[d] * kj[d];
                }
                pi[j] = acc * scale;
            }
        }
        if (logits_out) (*logits_out)[static_cast<std::size_t>(h)] = probs;
        for (std::int64_t i = 0; i < l; i++) softmax_row(probs.row(i), l);
        for (std::int64_t i = 0; i < l; i++) {
            const double* pi = probs.row(i);
            double* oi = out.row(i) + off;
            for (std::int64_t j = 0; j < l; j++) {
                double p = pi[j];
                if (p == 0.0) continue;
                const double* vj = v.row(j) + off;
                for (std::int64_t d = 0; d < dh; d++) oi[d] += p * vj[d];
            }
        }
        if (probs_out) (*probs_out)[static_cast<std::size_t>(h)] = std::move(probs);
    }
    return out;
}

namespace {

DMat vcat(const DMat& a, const DMat& b) {
    if (a.cols != b.cols) throw DimensionError("vcat column mismatch");
    DMat out(a.rows + b.rows, a.cols);
    std::copy(a.a.begin(), a.a.end(), out.a.begin());
    std::copy(b.a.begin(), b.a.end(), out.a.begin() + a.a.size());
    return out;
}

}  // namespace

DMat guidance_attention_split(const DMat& q_noisy, const DMat& k_noisy, const DMat& v_noisy, const DMat& q_hist,
                              const DMat& k_hist, const DMat& v_hist, const DMat& amp, std::int64_t n_heads) {
    return guidance_attention(vcat(q_noisy, q_hist), vcat(k_noisy, k_hist), vcat(v_noisy, v_hist), q_noisy.rows, amp,
                              n_heads);
}

DMat cross_attention(const DMat& q, const DMat& k_text, const DMat& v_text, std::int64_t n_heads,
                     std::vector<DMat>* probs_out) {
    if (!k_text.same_shape(v_text)) throw DimensionError("text keys/values must share a shape");
    if (q.cols != k_text.cols) throw DimensionError("query/key dim mismatch");
    if (q.cols % n_heads != 0) throw DimensionError("feature dim not divisible by head count");
    std::int64_t dh = q.cols / n_heads;
    std::int64_t l = q.rows, lt = k_text.rows;
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    DMat out(l, q.cols);
    if (probs_out) probs_out->assign(static_cast<std::size_t>(n_heads), DMat());
    for (std::int64_t h = 0; h < n_heads; h++) {
        std::int64_t off = h * dh;
        DMat probs(l, lt);
        for (std::int64_t i = 0; i < l; i++) {
            const double* qi = q.row(i) + off;
            double* pi = probs.row(i);
            for (std::int64_t j = 0; j < lt; j++) {
                const double* kj = k_text.row(j) + off;
                double acc = 0.0;
                for (std::int64_t d = 0; d < dh; d++) acc += qi[d] * kj[d];
                pi[j] = acc * scale;
            }
            softmax_row(pi, lt);
            double* oi = out.row(i) + off;
            for (std::int64_t j = 0; j < lt; j++) {
                double p = pi[j];
                const double* vj = v_text.row(j) + off;
                for (std::int64_t d = 0; d < dh; d++) oi[d] += p * vj[d];
            }
        }
        if (probs_out) (*probs_out)[static_cast<std::size_t>(h)] = std::move(probs);
    }
    return out;
}

namespace {

template <class Tensor>
DMat patchify_impl(const Tensor& x, std::int64_t b, std::int64_t t_begin, std::int64_t t_count, const PatchKernel& k) {
    if (t_begin < 0 || t_begin + t_count > x.dims.t) throw DimensionError("patch frame range out of bounds");
    if (t_count % k.t != 0 || x.dims.h % k.h != 0 || x.dims.w % k.w != 0)
        throw DimensionError("dims " + x.dims.str() + " not divisible by patch kernel");
    std::int64_t nt = t_count / k.t, nh = x.dims.h / k.h, nw = x.dims.w / k.w;
    DMat rows(nt * nh * nw, x.dims.c * k.volume());
    std::int64_t r = 0;
    for (std::int64_t tp = 0; tp < nt; tp++)
        for (std::int64_t hp = 0; hp < nh; hp++)
            for (std::int64_t wp = 0; wp < nw; wp++) {
                double* row = rows.row(r++);
                std::int64_t col = 0;
                for (std::int64_t c = 0; c < x.dims.c; c++)
                    for (std::int64_t dt = 0; dt < k.t; dt++)
                        for (std::int64_t dh = 0; dh < k.h; dh++)
                            for (std::int64_t dw = 0; dw < k.w; dw++)
                                row[col++] = static_cast<double>(
                                    x.at(b, c, t_begin + tp * k.t + dt, hp * k.h + dh, wp * k.w + dw));
            }
    return rows;
}

}  // namespace

DMat patchify(const Latent& x, std::int64_t b, std::int64_t t_begin, std::int64_t t_count, const PatchKernel& k) {
    return patchify_impl(x, b, t_begin, t_count, k);
}

DMat patchify(const DLatent& x, std::int64_t b, std::int64_t t_begin, std::int64_t t_count, const PatchKernel& k) {
    return patchify_impl(x, b, t_begin, t_count, k);
}

void unpatchify_add(DLatent& out, std::int64_t b, const DMat& rows, const PatchKernel& k) {
    std::int64_t nt = out.dims.t / k.t, nh = out.dims.h / k.h, nw = out.dims.w / k.w;
    if (rows.rows != nt * nh * nw || rows.cols != out.dims.c * k.volume())
        throw DimensionError("patch rows do not match the target tensor");
    std::int64_t r = 0;
    for (std::int64_t tp = 0; tp < nt; tp++)
        for (std::int64_t hp = 0; hp < nh; hp++)
            for (std::int64_t wp = 0; wp < nw; wp++) {
                const double* row = rows.row(r++);
                std::int64_t col = 0;
                for (std::int64_t c = 0; c < out.dims.c; c++)
                    for (std::int64_t dt = 0; dt < k.t; dt++)
                        for (std::int64_t dh = 0; dh < k.h; dh++)
                            for (std::int64_t dw = 0; dw < k.w; dw++)
                                out.at(b, c, tp * k.t + dt, hp * k.h + dh, wp * k.w + dw) += row[col++];
            }
}

}  // namespace latflow
