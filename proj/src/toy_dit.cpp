#include "latflow/toy_dit.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace latflow {

void DitConfig::validate() const {
    if (d_model < 2 || n_heads < 1 || n_layers < 1 || d_text < 1 || mlp_mult < 1 || channels < 1 || k_stages < 1)
        throw ConfigError("dit config fields must be positive");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if ((d_model / n_heads) % 2 != 0) throw ConfigError("head dim must be even for rotary pairs");
    if (noisy_kernel.t < 1 || noisy_kernel.h < 1 || noisy_kernel.w < 1)
        throw ConfigError("noisy patch kernel must be positive");
}

DitParams make_dit_params(const DitConfig& cfg, const MemoryPlan& plan) {
    cfg.validate();
    plan.validate();
    DitParams p;
    p.cfg = cfg;
    p.plan = plan;
    std::int64_t d = cfg.d_model;
    for (int i = 0; i < 3; i++)
        p.hist_embed[static_cast<std::size_t>(i)] =
            DMat(cfg.channels * plan.kernels[static_cast<std::size_t>(i)].volume(), d);
    p.noisy_embed = DMat(cfg.channels * cfg.noisy_kernel.volume(), d);
    p.time_w1 = DMat(d, d);
    p.time_b1 = DMat(1, d);
    p.time_w2 = DMat(d, d);
    p.time_b2 = DMat(1, d);
    p.stage_embed = DMat(cfg.k_stages, d);
    p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& L : p.layers) {
        L.norm1_g = DMat(1, d);
        L.norm2_g = DMat(1, d);
        L.norm3_g = DMat(1, d);
        L.wq = DMat(d, d);
        L.wk = DMat(d, d);
        L.wv = DMat(d, d);
        L.wo = DMat(d, d);
        L.bq = DMat(1, d);
        L.bk = DMat(1, d);
        L.bv = DMat(1, d);
        L.bo = DMat(1, d);
        L.amp = DMat(cfg.n_heads, cfg.d_head());
        L.cq = DMat(d, d);
        L.co = DMat(d, d);
        L.cbq = DMat(1, d);
        L.cbo = DMat(1, d);
        L.ck = DMat(cfg.d_text, d);
        L.cv = DMat(cfg.d_text, d);
        L.mlp_w1 = DMat(d, cfg.mlp_mult * d);
        L.mlp_b1 = DMat(1, cfg.mlp_mult * d);
        L.mlp_w2 = DMat(cfg.mlp_mult * d, d);
        L.mlp_b2 = DMat(1, d);
    }
    p.final_norm_g = DMat(1, d);
    p.head_w = DMat(d, cfg.channels * cfg.noisy_kernel.volume());
    p.head_b = DMat(1, cfg.channels * cfg.noisy_kernel.volume());
    return p;
}

namespace {

bool name_has(const std::string& name, const char* what) { return name.find(what) != std::string::npos; }

}  // namespace

void init_dit_params(DitParams& p, Rng& rng) {
    for_each_param(p, [&rng](const std::string& name, DMat& m) {
        bool gain = name_has(name, "norm") || name_has(name, ".amp");
        bool bias = name_has(name, ".b") || name_has(name, "_b") || name_has(name, ".cb");
        bool head_w = name == "head.w";
        if (gain) {
            std::fill(m.a.begin(), m.a.end(), 1.0);
        } else if (bias || head_w) {
            std::fill(m.a.begin(), m.a.end(), 0.0);
        } else {
            double scale = 1.0 / std::sqrt(static_cast<double>(m.rows));
            for (auto& v : m.a) v = scale * rng.normal();
        }
    });
}

void for_each_param(DitParams& p, const std::function<void(const std::string&, DMat&)>& fn) {
    for (int i = 0; i < 3; i++) fn("hist_embed." + std::to_string(i), p.hist_embed[static_cast<std::size_t>(i)]);
    fn("noisy_embed", p.noisy_embed);
    fn("time.w1", p.time_w1);
    fn("time.b1", p.time_b1);
    fn("time.w2", p.time_w2);
    fn("time.b2", p.time_b2);
    fn("stage_embed", p.stage_embed);
    for (std::size_t l = 0; l < p.layers.size(); l++) {
        std::string pre = "layers." + std::to_string(l) + ".";
        DitLayerParams& L = p.layers[l];
        fn(pre + "norm1_g", L.norm1_g);
        fn(pre + "norm2_g", L.norm2_g);
        fn(pre + "norm3_g", L.norm3_g);
        fn(pre + "wq", L.wq);
        fn(pre + "wk", L.wk);
        fn(pre + "wv", L.wv);
        fn(pre + "wo", L.wo);
        fn(pre + "bq", L.bq);
        fn(pre + "bk", L.bk);
        fn(pre + "bv", L.bv);
        fn(pre + "bo", L.bo);
        fn(pre + "amp", L.amp);
        fn(pre + "cq", L.cq);
        fn(pre + "co", L.co);
        fn(pre + "cbq", L.cbq);
        fn(pre + "cbo", L.cbo);
        fn(pre + "ck", L.ck);
        fn(pre + "cv", L.cv);
        fn(pre + "mlp_w1", L.mlp_w1);
        fn(pre + "mlp_b1", L.mlp_b1);
        fn(pre + "mlp_w2", L.mlp_w2);
        fn(pre + "mlp_b2", L.mlp_b2);
    }
    fn("final_norm.g", p.final_norm_g);
    fn("head.w", p.head_w);
    fn("head.b", p.head_b);
}

void for_each_param(const DitParams& p, const std::function<void(const std::string&, const DMat&)>& fn) {
    for_each_param(const_cast<DitParams&>(p), [&fn](const std::string& n, DMat& m) { fn(n, m); });
}

DitParams zeros_like(const DitParams& p) { return make_dit_params(p.cfg, p.plan); }

std::int64_t param_count(const DitParams& p) {
    std::int64_t n = 0;
    for_each_param(p, [&n](const std::string&, const DMat& m) { n += m.rows * m.cols; });
    return n;
}

const DMat& DitRecord::layer_output(std::int64_t item, std::int64_t layer) const {
    const DitItemRecord& it = items[static_cast<std::size_t>(item)];
    std::int64_t n_layers = static_cast<std::int64_t>(it.layers.size());
    if (layer < 0 || layer >= n_layers) throw ConfigError("probe layer index out of range");
    if (layer + 1 < n_layers) return it.layers[static_cast<std::size_t>(layer + 1)].x_in;
    return it.x_final;
}

DMat timestep_features(double value, std::int64_t dim, double base) {
    if (dim % 2 != 0) throw ConfigError("timestep feature dim must be even");
    DMat f(1, dim);
    std::int64_t half = dim / 2;
    for (std::int64_t j = 0; j < half; j++) {
        double freq = std::pow(base, -static_cast<double>(j) / static_cast<double>(half));
        f.a[static_cast<std::size_t>(j)] = std::sin(value * freq);
        f.a[static_cast<std::size_t>(half + j)] = std::cos(value * freq);
    }
    return f;
}

namespace {

DMat linear(const DMat& x, const DMat& w, const DMat* b) {
    DMat y = matmul(x, w);
    if (b) {
        if (b->rows != 1 || b->cols != y.cols) throw DimensionError("bias shape mismatch");
        for (std::int64_t i = 0; i < y.rows; i++) {
            double* yi = y.row(i);
            for (std::int64_t j = 0; j < y.cols; j++) yi[j] += b->a[static_cast<std::size_t>(j)];
        }
    }
    return y;
}

// dx += dy w^T, dw += x^T dy, db += colsum(dy)
void linear_backward(const DMat& x, const DMat& w, const DMat& dy, DMat* dx, DMat& dw, DMat* db) {
    if (dx) {
        DMat g = matmul_nt(dy, w);
        add_inplace(*dx, g);
    }
    DMat gw = matmul_tn(x, dy);
    add_inplace(dw, gw);
    if (db) {
        for (std::int64_t i = 0; i < dy.rows; i++) {
            const double* r = dy.row(i);
            for (std::int64_t j = 0; j < dy.cols; j++) db->a[static_cast<std::size_t>(j)] += r[j];
        }
    }
}

DMat take_rows(const DMat& m, std::int64_t r0, std::int64_t n) {
    DMat out(n, m.cols);
    std::copy(m.row(r0), m.row(r0) + n * m.cols, out.a.begin());
    return out;
}

void add_into_rows(DMat& dst, std::int64_t r0, const DMat& src) {
    for (std::int64_t i = 0; i < src.rows; i++) {
        double* d = dst.row(r0 + i);
        const double* s = src.row(i);
        for (std::int64_t j = 0; j < src.cols; j++) d[j] += s[j];
    }
}

void add_row_broadcast(DMat& m, std::int64_t r0, std::int64_t n, const DMat& row) {
    for (std::int64_t i = r0; i < r0 + n; i++) {
        double* d = m.row(i);
        for (std::int64_t j = 0; j < m.cols; j++) d[j] += row.a[static_cast<std::size_t>(j)];
    }
}

// normalized rows z = x * inv_rms, recomputed from scalar stats
DMat recompute_z(const DMat& x, const NormCache& c) {
    DMat z(x.rows, x.cols);
    for (std::int64_t i = 0; i < x.rows; i++) {
        double r = c.inv_rms[static_cast<std::size_t>(i)];
        const double* xi = x.row(i);
        double* zi = z.row(i);
        for (std::int64_t j = 0; j < x.cols; j++) zi[j] = xi[j] * r;
    }
    return z;
}

DMat gain_mul(const DMat& z, const DMat& g) {
    DMat y(z.rows, z.cols);
    for (std::int64_t i = 0; i < z.rows; i++) {
        const double* zi = z.row(i);
        double* yi = y.row(i);
        for (std::int64_t j = 0; j < z.cols; j++) yi[j] = zi[j] * g.a[static_cast<std::size_t>(j)];
    }
    return y;
}

struct TokenGeometry {
    std::int64_t n_noisy = 0, n_hist = 0;
    std::array<std::int64_t, 3> term_rows{};   // token rows per term index (0 short, 1 mid, 2 long)
    std::array<std::int64_t, 3> term_row_off{};  // row offset of each term inside the hist block
    std::vector<std::int64_t> positions;       // per token row, noisy first
};

TokenGeometry token_geometry(const DitParams& p, const LatentDims& noisy_dims) {
    const MemoryPlan& plan = p.plan;
    const DitConfig& cfg = p.cfg;
    if (noisy_dims.c != cfg.channels) throw DimensionError("noisy channel count does not match the model");
    if (noisy_dims.t % cfg.noisy_kernel.t != 0 || noisy_dims.h % cfg.noisy_kernel.h != 0 ||
        noisy_dims.w % cfg.noisy_kernel.w != 0)
        throw DimensionError("noisy dims " + noisy_dims.str() + " not divisible by the noisy patch kernel");
    TokenGeometry g;
    std::int64_t sp_noisy = (noisy_dims.h / cfg.noisy_kernel.h) * (noisy_dims.w / cfg.noisy_kernel.w);
    std::int64_t nt_noisy = noisy_dims.t / cfg.noisy_kernel.t;
    g.n_noisy = nt_noisy * sp_noisy;

    RopePlan rp = rope_indices(plan, noisy_dims.t, cfg.rope_mode, cfg.noisy_kernel.t);
    g.positions.reserve(static_cast<std::size_t>(g.n_noisy));
    for (std::int64_t r = 0; r < g.n_noisy; r++)
        g.positions.push_back(rp.noisy_pos[static_cast<std::size_t>(r / sp_noisy)]);

    std::int64_t row_off = 0, pos_off = 0;
    for (int term : {2, 1, 0}) {
        const PatchKernel& k = plan.kernels[static_cast<std::size_t>(term)];
        std::int64_t nt = plan.frames[static_cast<std::size_t>(term)] / k.t;
        std::int64_t sp = (plan.h / k.h) * (plan.w / k.w);
        g.term_rows[static_cast<std::size_t>(term)] = nt * sp;
        g.term_row_off[static_cast<std::size_t>(term)] = row_off;
        for (std::int64_t r = 0; r < nt * sp; r++)
            g.positions.push_back(rp.hist_pos[static_cast<std::size_t>(pos_off + r / sp)]);
        row_off += nt * sp;
        pos_off += nt;
    }
    g.n_hist = row_off;
    return g;
}

std::int64_t term_t_begin(const MemoryPlan& plan, int term) {
    if (term == 2) return plan.long_begin();
    if (term == 1) return plan.mid_begin();
    return plan.short_begin();
}

}  // namespace

DMat embed_history(const DitParams& p, const HistoryContext& hist, std::int64_t b) {
    const MemoryPlan& plan = p.plan;
    if (hist.frames.dims.t != plan.total_frames() || hist.frames.dims.h != plan.h || hist.frames.dims.w != plan.w ||
        hist.frames.dims.c != p.cfg.channels)
        throw DimensionError("history dims " + hist.frames.dims.str() + " do not match the plan");
    DMat out;
    for (int term : {2, 1, 0}) {
        DMat patches = patchify(hist.frames, b, term_t_begin(plan, term), plan.frames[static_cast<std::size_t>(term)],
                                plan.kernels[static_cast<std::size_t>(term)]);
        DMat rows = matmul(patches, p.hist_embed[static_cast<std::size_t>(term)]);
        if (out.rows == 0) {
            out = std::move(rows);
        } else {
            DMat merged(out.rows + rows.rows, out.cols);
            std::copy(out.a.begin(), out.a.end(), merged.a.begin());
            std::copy(rows.a.begin(), rows.a.end(), merged.a.begin() + out.a.size());
            out = std::move(merged);
        }
    }
    return out;
}

DMat embed_noisy(const DitParams& p, const DLatent& noisy, std::int64_t b) {
    DMat patches = patchify(noisy, b, 0, noisy.dims.t, p.cfg.noisy_kernel);
    return matmul(patches, p.noisy_embed);
}

DLatent dit_forward(const DitParams& p, const DLatent& noisy, const HistoryContext& hist, const PromptEmbedding& text,
                    double lambda, std::int64_t stage, DitRecord* record) {
    const DitConfig& cfg = p.cfg;
    cfg.validate();
    if (stage < 1 || stage > cfg.k_stages) throw ConfigError("stage out of range");
    if (text.cols != cfg.d_text) throw DimensionError("prompt embedding dim mismatch");
    if (noisy.dims.b != hist.frames.dims.b) throw DimensionError("batch mismatch between noisy and history");

    TokenGeometry geo = token_geometry(p, noisy.dims);
    std::int64_t d = cfg.d_model, heads = cfg.n_heads, dh = cfg.d_head();
    std::int64_t ln = geo.n_noisy, lh = geo.n_hist, l = ln + lh;

    DMat feat = timestep_features(lambda * cfg.time_scale, d);
    DMat feat0 = timestep_features(0.0, d);
    DMat tpre = linear(feat, p.time_w1, &p.time_b1);
    DMat tpre0 = linear(feat0, p.time_w1, &p.time_b1);
    DMat tact(1, d), tact0(1, d);
    for (std::int64_t j = 0; j < d; j++) {
        tact.a[static_cast<std::size_t>(j)] = silu(tpre.a[static_cast<std::size_t>(j)]);
        tact0.a[static_cast<std::size_t>(j)] = silu(tpre0.a[static_cast<std::size_t>(j)]);
    }
    DMat temb = linear(tact, p.time_w2, &p.time_b2);
    DMat temb0 = linear(tact0, p.time_w2, &p.time_b2);

    DLatent out(noisy.dims);
    if (record) {
        record->items.clear();
        record->noisy_dims = noisy.dims;
        record->lambda = lambda;
        record->stage = stage;
    }

    for (std::int64_t b = 0; b < noisy.dims.b; b++) {
        DitItemRecord itrec;
        itrec.n_noisy = ln;
        itrec.n_hist = lh;
        itrec.positions = geo.positions;
        itrec.time_feat = feat;
        itrec.time_feat0 = feat0;
        itrec.time_pre = tpre;
        itrec.time_pre0 = tpre0;

        itrec.noisy_patches = patchify(noisy, b, 0, noisy.dims.t, cfg.noisy_kernel);
        DMat x(l, d);
        {
            DMat xn = matmul(itrec.noisy_patches, p.noisy_embed);
            add_into_rows(x, 0, xn);
        }
        for (int term : {2, 1, 0}) {
            DMat patches = patchify(hist.frames, b, term_t_begin(p.plan, term),
                                    p.plan.frames[static_cast<std::size_t>(term)],
                                    p.plan.kernels[static_cast<std::size_t>(term)]);
            DMat rows = matmul(patches, p.hist_embed[static_cast<std::size_t>(term)]);
            add_into_rows(x, ln + geo.term_row_off[static_cast<std::size_t>(term)], rows);
            itrec.hist_patches[static_cast<std::size_t>(term)] = std::move(patches);
        }
        add_row_broadcast(x, 0, ln, temb);
        {
            DMat srow(1, d);
            std::copy(p.stage_embed.row(stage - 1), p.stage_embed.row(stage - 1) + d, srow.a.begin());
            add_row_broadcast(x, 0, ln, srow);
        }
        add_row_broadcast(x, ln, lh, temb0);

        for (std::int64_t li = 0; li < cfg.n_layers; li++) {
            const DitLayerParams& L = p.layers[static_cast<std::size_t>(li)];
            DitLayerRecord lr;
            lr.x_in = x;

            DMat h1 = rmsnorm(x, L.norm1_g, cfg.norm_eps, &lr.n1);
            if (record && record->store_normalized) lr.z1 = recompute_z(x, lr.n1);

            DMat q = rope_apply(linear(h1, L.wq, &L.bq), geo.positions, cfg.rope_base, heads);
            DMat k = rope_apply(linear(h1, L.wk, &L.bk), geo.positions, cfg.rope_base, heads);
            DMat v = linear(h1, L.wv, &L.bv);
            lr.k_preamp = k;
            for (std::int64_t i = ln; i < l; i++) {
                double* ki = k.row(i);
                for (std::int64_t h = 0; h < heads; h++)
                    for (std::int64_t j = 0; j < dh; j++) ki[h * dh + j] *= L.amp(h, j);
            }
            lr.q = q;
            lr.k = k;
            lr.v = v;

            double scale = 1.0 / std::sqrt(static_cast<double>(dh));
            DMat ctx(l, d);
            lr.probs.assign(static_cast<std::size_t>(heads), DMat());
            for (std::int64_t h = 0; h < heads; h++) {
                std::int64_t off = h * dh;
                DMat probs(l, l);
                for (std::int64_t i = 0; i < l; i++) {
                    const double* qi = q.row(i) + off;
                    double* pi = probs.row(i);
                    for (std::int64_t j = 0; j < l; j++) {
                        const double* kj = k.row(j) + off;
                        double acc = 0.0;
                        for (std::int64_t dd = 0; dd < dh; dd++) acc += qi[dd] * kj[dd];
                        pi[j] = acc * scale;
                    }
                    softmax_row(pi, l);
                    double* ci = ctx.row(i) + off;
                    for (std::int64_t j = 0; j < l; j++) {
                        double pv = pi[j];
                        const double* vj = v.row(j) + off;
                        for (std::int64_t dd = 0; dd < dh; dd++) ci[dd] += pv * vj[dd];
                    }
                }
                lr.probs[static_cast<std::size_t>(h)] = std::move(probs);
            }
            lr.ctx = ctx;
            DMat attn = linear(ctx, L.wo, &L.bo);
            add_inplace(x, attn);
            lr.x_mid = x;

            // text cross block, noisy rows only; history rows are untouched
            DMat xn = take_rows(x, 0, ln);
            DMat h2 = rmsnorm(xn, L.norm2_g, cfg.norm_eps, &lr.n2);
            if (record && record->store_normalized) lr.z2 = recompute_z(xn, lr.n2);
            DMat q2 = linear(h2, L.cq, &L.cbq);
            DMat kt = matmul(text, L.ck);
            DMat vt = matmul(text, L.cv);
            lr.q2 = q2;
            lr.kt = kt;
            lr.vt = vt;
            DMat ctx2 = cross_attention(q2, kt, vt, heads, &lr.probs2);
            lr.ctx2 = ctx2;
            DMat delta = linear(ctx2, L.co, &L.cbo);
            add_into_rows(x, 0, delta);
            lr.x_mid2 = x;

            DMat h3 = rmsnorm(x, L.norm3_g, cfg.norm_eps, &lr.n3);
            if (record && record->store_normalized) lr.z3 = recompute_z(x, lr.n3);
            DMat a = linear(h3, L.mlp_w1, &L.mlp_b1);
            lr.mlp_pre = a;
            DMat s(a.rows, a.cols);
            for (std::size_t i = 0; i < a.a.size(); i++) s.a[i] = silu(a.a[i]);
            DMat m = linear(s, L.mlp_w2, &L.mlp_b2);
            add_inplace(x, m);

            if (record) itrec.layers.push_back(std::move(lr));
        }

        DMat xn_final = take_rows(x, 0, ln);
        NormCache nf;
        DMat hn = rmsnorm(xn_final, p.final_norm_g, cfg.norm_eps, &nf);
        DMat head = linear(hn, p.head_w, &p.head_b);
        unpatchify_add(out, b, head, cfg.noisy_kernel);

        if (record) {
            itrec.x_final = x;
            itrec.nf = nf;
            if (record->store_normalized) itrec.zf = recompute_z(xn_final, nf);
            record->items.push_back(std::move(itrec));
        }
    }
    return out;
}

DLatent dit_backward(const DitParams& p, const DitRecord& rec, const HistoryContext& hist,
                     const PromptEmbedding& text, const DLatent& grad_out, DitParams& grads,
                     const TapGrads* tap_grads) {
    const DitConfig& cfg = p.cfg;
    if (!(grad_out.dims == rec.noisy_dims)) throw DimensionError("output gradient dims do not match the record");
    std::int64_t d = cfg.d_model, heads = cfg.n_heads, dh = cfg.d_head();
    DLatent d_noisy(rec.noisy_dims);
    TokenGeometry geo = token_geometry(p, rec.noisy_dims);

    for (std::int64_t b = 0; b < rec.noisy_dims.b; b++) {
        const DitItemRecord& it = rec.items[static_cast<std::size_t>(b)];
        std::int64_t ln = it.n_noisy, lh = it.n_hist, l = ln + lh;

        // head
        DMat dout_rows = patchify(grad_out, b, 0, rec.noisy_dims.t, cfg.noisy_kernel);
        DMat xn_final = take_rows(it.x_final, 0, ln);
        DMat hn = rec.store_normalized ? gain_mul(it.zf, p.final_norm_g)
                                       : gain_mul(recompute_z(xn_final, it.nf), p.final_norm_g);
        DMat dhn(ln, d);
        linear_backward(hn, p.head_w, dout_rows, &dhn, grads.head_w, &grads.head_b);
        DMat dxn(ln, d);
        if (rec.store_normalized)
            rmsnorm_backward_ref(dhn, it.zf, p.final_norm_g, it.nf, dxn, grads.final_norm_g);
        else
            rmsnorm_backward(dhn, xn_final, p.final_norm_g, it.nf, dxn, grads.final_norm_g);

        DMat dx(l, d);
        add_into_rows(dx, 0, dxn);

        for (std::int64_t li = cfg.n_layers - 1; li >= 0; li--) {
            const DitLayerParams& L = p.layers[static_cast<std::size_t>(li)];
            DitLayerParams& G = grads.layers[static_cast<std::size_t>(li)];
            const DitLayerRecord& lr = it.layers[static_cast<std::size_t>(li)];

            if (tap_grads && b < static_cast<std::int64_t>(tap_grads->per_item.size())) {
                auto found = tap_grads->per_item[static_cast<std::size_t>(b)].find(li);
                if (found != tap_grads->per_item[static_cast<std::size_t>(b)].end())
                    add_into_rows(dx, 0, found->second);
            }

            // mlp block: x_out = x_mid2 + (silu(h3 w1 + b1)) w2 + b2
            {
                DMat z3 = rec.store_normalized ? lr.z3 : recompute_z(lr.x_mid2, lr.n3);
                DMat h3 = gain_mul(z3, L.norm3_g);
                DMat s(lr.mlp_pre.rows, lr.mlp_pre.cols);
                for (std::size_t i = 0; i < s.a.size(); i++) s.a[i] = silu(lr.mlp_pre.a[i]);
                DMat ds(s.rows, s.cols);
                linear_backward(s, L.mlp_w2, dx, &ds, G.mlp_w2, &G.mlp_b2);
                DMat da(s.rows, s.cols);
                for (std::size_t i = 0; i < da.a.size(); i++) da.a[i] = ds.a[i] * dsilu(lr.mlp_pre.a[i]);
                DMat dh3(l, d);
                linear_backward(h3, L.mlp_w1, da, &dh3, G.mlp_w1, &G.mlp_b1);
                if (rec.store_normalized)
                    rmsnorm_backward_ref(dh3, lr.z3, L.norm3_g, lr.n3, dx, G.norm3_g);
                else
                    rmsnorm_backward(dh3, lr.x_mid2, L.norm3_g, lr.n3, dx, G.norm3_g);
            }

            // cross block, noisy rows only
            {
                DMat ddelta = take_rows(dx, 0, ln);
                DMat dctx2(ln, d);
                linear_backward(lr.ctx2, L.co, ddelta, &dctx2, G.co, &G.cbo);

                DMat dq2(ln, d), dkt(lr.kt.rows, d), dvt(lr.vt.rows, d);
                double scale = 1.0 / std::sqrt(static_cast<double>(dh));
                for (std::int64_t h = 0; h < heads; h++) {
                    std::int64_t off = h * dh;
                    const DMat& probs = lr.probs2[static_cast<std::size_t>(h)];
                    std::int64_t lt = probs.cols;
                    for (std::int64_t i = 0; i < ln; i++) {
                        const double* pi = probs.row(i);
                        const double* dci = dctx2.row(i) + off;
                        double dot = 0.0;
                        std::vector<double> dp(static_cast<std::size_t>(lt));
                        for (std::int64_t j = 0; j < lt; j++) {
                            const double* vj = lr.vt.row(j) + off;
                            double acc = 0.0;
                            for (std::int64_t dd = 0; dd < dh; dd++) acc += dci[dd] * vj[dd];
                            dp[static_cast<std::size_t>(j)] = acc;
                            dot += pi[j] * acc;
                            double* dvj = dvt.row(j) + off;
                            for (std::int64_t dd = 0; dd < dh; dd++) dvj[dd] += pi[j] * dci[dd];
                        }
                        double* dqi = dq2.row(i) + off;
                        const double* q2i = lr.q2.row(i) + off;
                        for (std::int64_t j = 0; j < lt; j++) {
                            double dl = pi[j] * (dp[static_cast<std::size_t>(j)] - dot) * scale;
                            const double* ktj = lr.kt.row(j) + off;
                            double* dktj = dkt.row(j) + off;
                            for (std::int64_t dd = 0; dd < dh; dd++) {
                                dqi[dd] += dl * ktj[dd];
                                dktj[dd] += dl * q2i[dd];
                            }
                        }
                    }
                }
                DMat gk = matmul_tn(text, dkt);
                add_inplace(G.ck, gk);
                DMat gv = matmul_tn(text, dvt);
                add_inplace(G.cv, gv);

                DMat xn_mid = take_rows(lr.x_mid, 0, ln);
                DMat dh2(ln, d);
                DMat z2 = rec.store_normalized ? lr.z2 : recompute_z(xn_mid, lr.n2);
                DMat h2 = gain_mul(z2, L.norm2_g);
                linear_backward(h2, L.cq, dq2, &dh2, G.cq, &G.cbq);
                DMat dxn2(ln, d);
                if (rec.store_normalized)
                    rmsnorm_backward_ref(dh2, lr.z2, L.norm2_g, lr.n2, dxn2, G.norm2_g);
                else
                    rmsnorm_backward(dh2, xn_mid, L.norm2_g, lr.n2, dxn2, G.norm2_g);
                add_into_rows(dx, 0, dxn2);
            }

            // self attention block
            {
                DMat dctx(l, d);
                linear_backward(lr.ctx, L.wo, dx, &dctx, G.wo, &G.bo);

                DMat dq(l, d), dk_post(l, d), dv(l, d);
                double scale = 1.0 / std::sqrt(static_cast<double>(dh));
                for (std::int64_t h = 0; h < heads; h++) {
                    std::int64_t off = h * dh;
                    const DMat& probs = lr.probs[static_cast<std::size_t>(h)];
                    for (std::int64_t i = 0; i < l; i++) {
                        const double* pi = probs.row(i);
                        const double* dci = dctx.row(i) + off;
                        double dot = 0.0;
                        std::vector<double> dp(static_cast<std::size_t>(l));
                        for (std::int64_t j = 0; j < l; j++) {
                            const double* vj = lr.v.row(j) + off;
                            double acc = 0.0;
                            for (std::int64_t dd = 0; dd < dh; dd++) acc += dci[dd] * vj[dd];
                            dp[static_cast<std::size_t>(j)] = acc;
                            dot += pi[j] * acc;
                            double* dvj = dv.row(j) + off;
                            for (std::int64_t dd = 0; dd < dh; dd++) dvj[dd] += pi[j] * dci[dd];
                        }
                        double* dqi = dq.row(i) + off;
                        const double* qi = lr.q.row(i) + off;
                        for (std::int64_t j = 0; j < l; j++) {
                            double dl = pi[j] * (dp[static_cast<std::size_t>(j)] - dot) * scale;
                            const double* kj = lr.k.row(j) + off;
                            double* dkj = dk_post.row(j) + off;
                            for (std::int64_t dd = 0; dd < dh; dd++) {
                                dqi[dd] += dl * kj[dd];
                                dkj[dd] += dl * qi[dd];
                            }
                        }
                    }
                }

                // amp: k = amp ⊙ k_preamp on history rows
                DMat dk_pre = dk_post;
                for (std::int64_t i = ln; i < l; i++) {
                    double* dki = dk_pre.row(i);
                    const double* kpre = lr.k_preamp.row(i);
                    const double* dkpost = dk_post.row(i);
                    for (std::int64_t h = 0; h < heads; h++)
                        for (std::int64_t j = 0; j < dh; j++) {
                            dki[h * dh + j] = dkpost[h * dh + j] * L.amp(h, j);
                            G.amp(h, j) += dkpost[h * dh + j] * kpre[h * dh + j];
                        }
                }

                DMat dq_pre = rope_apply_inverse(dq, it.positions, cfg.rope_base, heads);
                DMat dk_pre2 = rope_apply_inverse(dk_pre, it.positions, cfg.rope_base, heads);

                DMat z1 = rec.store_normalized ? lr.z1 : recompute_z(lr.x_in, lr.n1);
                DMat h1 = gain_mul(z1, L.norm1_g);
                DMat dh1(l, d);
                linear_backward(h1, L.wq, dq_pre, &dh1, G.wq, &G.bq);
                linear_backward(h1, L.wk, dk_pre2, &dh1, G.wk, &G.bk);
                linear_backward(h1, L.wv, dv, &dh1, G.wv, &G.bv);
                if (rec.store_normalized)
                    rmsnorm_backward_ref(dh1, lr.z1, L.norm1_g, lr.n1, dx, G.norm1_g);
                else
                    rmsnorm_backward(dh1, lr.x_in, L.norm1_g, lr.n1, dx, G.norm1_g);
            }
        }

        // conditioning and embedding backward
        DMat dtemb(1, d), dtemb0(1, d), dstage(1, d);
        for (std::int64_t i = 0; i < ln; i++) {
            const double* r = dx.row(i);
            for (std::int64_t j = 0; j < d; j++) {
                dtemb.a[static_cast<std::size_t>(j)] += r[j];
                dstage.a[static_cast<std::size_t>(j)] += r[j];
            }
        }
        for (std::int64_t i = ln; i < l; i++) {
            const double* r = dx.row(i);
            for (std::int64_t j = 0; j < d; j++) dtemb0.a[static_cast<std::size_t>(j)] += r[j];
        }
        for (std::int64_t j = 0; j < d; j++) grads.stage_embed(rec.stage - 1, j) += dstage.a[static_cast<std::size_t>(j)];

        auto time_mlp_backward = [&](const DMat& feat, const DMat& pre, const DMat& dout) {
            DMat act(1, d);
            for (std::int64_t j = 0; j < d; j++) act.a[static_cast<std::size_t>(j)] = silu(pre.a[static_cast<std::size_t>(j)]);
            DMat dact(1, d);
            linear_backward(act, p.time_w2, dout, &dact, grads.time_w2, &grads.time_b2);
            DMat dpre(1, d);
            for (std::int64_t j = 0; j < d; j++)
                dpre.a[static_cast<std::size_t>(j)] =
                    dact.a[static_cast<std::size_t>(j)] * dsilu(pre.a[static_cast<std::size_t>(j)]);
            linear_backward(feat, p.time_w1, dpre, nullptr, grads.time_w1, &grads.time_b1);
        };
        time_mlp_backward(it.time_feat, it.time_pre, dtemb);
        time_mlp_backward(it.time_feat0, it.time_pre0, dtemb0);

        // token embeddings
        DMat dxn_tok = take_rows(dx, 0, ln);
        DMat dpatch(ln, p.noisy_embed.rows);
        linear_backward(it.noisy_patches, p.noisy_embed, dxn_tok, &dpatch, grads.noisy_embed, nullptr);
        // dpatch currently holds dxn_tok * noisy_embed^T accumulated; scatter to the input latent
        unpatchify_add(d_noisy, b, dpatch, cfg.noisy_kernel);

        for (int term : {2, 1, 0}) {
            std::int64_t r0 = ln + geo.term_row_off[static_cast<std::size_t>(term)];
            std::int64_t nrow = geo.term_rows[static_cast<std::size_t>(term)];
            DMat drows = take_rows(dx, r0, nrow);
            DMat gw = matmul_tn(it.hist_patches[static_cast<std::size_t>(term)], drows);
            add_inplace(grads.hist_embed[static_cast<std::size_t>(term)], gw);
        }
    }
    (void)hist;
    return d_noisy;
}

// ---- checkpoint container ----

namespace {

constexpr char kCkptMagic[4] = {'H', 'C', 'K', 'P'};
constexpr std::uint32_t kCkptVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

std::uint32_t get_u32(std::istream& is, const std::string& path) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw TruncatedError(path + ": truncated checkpoint");
    return v;
}

std::uint64_t get_u64(std::istream& is, const std::string& path) {
    std::uint64_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 8)) throw TruncatedError(path + ": truncated checkpoint");
    return v;
}

void write_entry(std::ostream& os, const std::string& name, const std::vector<double>& payload,
                 std::uint64_t rows, std::uint64_t cols) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, 8);  // dtype: f64
    put_u32(os, 2);  // rank
    put_u64(os, rows);
    put_u64(os, cols);
    os.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * 8));
}

std::vector<double> config_blob(const DitParams& p) {
    const DitConfig& c = p.cfg;
    return {static_cast<double>(c.d_model), static_cast<double>(c.n_heads),   static_cast<double>(c.n_layers),
            static_cast<double>(c.d_text),  static_cast<double>(c.mlp_mult),  static_cast<double>(c.channels),
            static_cast<double>(c.k_stages), static_cast<double>(c.noisy_kernel.t),
            static_cast<double>(c.noisy_kernel.h), static_cast<double>(c.noisy_kernel.w),
            c.rope_base,                    c.rope_mode == RopeIndexing::PostPatch ? 0.0 : 1.0,
            c.norm_eps,                     c.time_scale};
}

std::vector<double> plan_blob(const DitParams& p) {
    const MemoryPlan& m = p.plan;
    std::vector<double> out;
    for (int i = 0; i < 3; i++) out.push_back(static_cast<double>(m.frames[static_cast<std::size_t>(i)]));
    for (int i = 0; i < 3; i++) {
        out.push_back(static_cast<double>(m.kernels[static_cast<std::size_t>(i)].t));
        out.push_back(static_cast<double>(m.kernels[static_cast<std::size_t>(i)].h));
        out.push_back(static_cast<double>(m.kernels[static_cast<std::size_t>(i)].w));
    }
    out.push_back(static_cast<double>(m.h));
    out.push_back(static_cast<double>(m.w));
    return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const DitParams& p) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write(kCkptMagic, 4);
    put_u32(os, kCkptVersion);
    std::uint32_t count = 2;
    for_each_param(p, [&count](const std::string&, const DMat&) { count++; });
    put_u32(os, count);
    write_entry(os, "meta.config", config_blob(p), 1, static_cast<std::uint64_t>(config_blob(p).size()));
    write_entry(os, "meta.plan", plan_blob(p), 1, static_cast<std::uint64_t>(plan_blob(p).size()));
    for_each_param(p, [&os](const std::string& name, const DMat& m) {
        write_entry(os, name, m.a, static_cast<std::uint64_t>(m.rows), static_cast<std::uint64_t>(m.cols));
    });
    if (!os) throw IoError("short write to " + path);
}

DitParams load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4] = {};
    if (!is.read(magic, 4)) throw TruncatedError(path + ": shorter than magic");
    if (std::memcmp(magic, kCkptMagic, 4) != 0) throw BadMagicError(path + ": not a checkpoint container");
    std::uint32_t version = get_u32(is, path);
    if (version != kCkptVersion) throw VersionError(path + ": checkpoint version " + std::to_string(version));
    std::uint32_t count = get_u32(is, path);

    struct Entry {
        std::uint64_t rows, cols;
        std::vector<double> payload;
    };
    std::map<std::string, Entry> entries;
    for (std::uint32_t i = 0; i < count; i++) {
        std::uint32_t name_len = get_u32(is, path);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw TruncatedError(path + ": truncated entry name");
        std::uint32_t dtype = get_u32(is, path);
        if (dtype != 8) throw VersionError(path + ": unsupported dtype " + std::to_string(dtype));
        std::uint32_t rank = get_u32(is, path);
        if (rank != 2) throw VersionError(path + ": unsupported rank " + std::to_string(rank));
        Entry e;
        e.rows = get_u64(is, path);
        e.cols = get_u64(is, path);
        e.payload.resize(e.rows * e.cols);
        if (!is.read(reinterpret_cast<char*>(e.payload.data()), static_cast<std::streamsize>(e.payload.size() * 8)))
            throw TruncatedError(path + ": truncated payload for " + name);
        entries[name] = std::move(e);
    }

    auto meta_it = entries.find("meta.config");
    auto plan_it = entries.find("meta.plan");
    if (meta_it == entries.end() || plan_it == entries.end())
        throw ConfigError(path + ": checkpoint missing meta entries");
    const std::vector<double>& cb = meta_it->second.payload;
    if (cb.size() != 14) throw ConfigError(path + ": bad config meta");
    DitConfig cfg;
    cfg.d_model = static_cast<std::int64_t>(cb[0]);
    cfg.n_heads = static_cast<std::int64_t>(cb[1]);
    cfg.n_layers = static_cast<std::int64_t>(cb[2]);
    cfg.d_text = static_cast<std::int64_t>(cb[3]);
    cfg.mlp_mult = static_cast<std::int64_t>(cb[4]);
    cfg.channels = static_cast<std::int64_t>(cb[5]);
    cfg.k_stages = static_cast<std::int64_t>(cb[6]);
    cfg.noisy_kernel = {static_cast<std::int64_t>(cb[7]), static_cast<std::int64_t>(cb[8]),
                        static_cast<std::int64_t>(cb[9])};
    cfg.rope_base = cb[10];
    cfg.rope_mode = cb[11] == 0.0 ? RopeIndexing::PostPatch : RopeIndexing::PrePatch;
    cfg.norm_eps = cb[12];
    cfg.time_scale = cb[13];
    const std::vector<double>& pb = plan_it->second.payload;
    if (pb.size() != 14) throw ConfigError(path + ": bad plan meta");
    MemoryPlan plan;
    for (int i = 0; i < 3; i++) plan.frames[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(pb[static_cast<std::size_t>(i)]);
    for (int i = 0; i < 3; i++)
        plan.kernels[static_cast<std::size_t>(i)] = {static_cast<std::int64_t>(pb[3 + 3 * static_cast<std::size_t>(i)]),
                                                     static_cast<std::int64_t>(pb[4 + 3 * static_cast<std::size_t>(i)]),
                                                     static_cast<std::int64_t>(pb[5 + 3 * static_cast<std::size_t>(i)])};
    plan.h = static_cast<std::int64_t>(pb[12]);
    plan.w = static_cast<std::int64_t>(pb[13]);

    DitParams p = make_dit_params(cfg, plan);
    for_each_param(p, [&entries, &path](const std::string& name, DMat& m) {
        auto it = entries.find(name);
        if (it == entries.end()) throw ConfigError(path + ": checkpoint missing tensor " + name);
        if (static_cast<std::int64_t>(it->second.rows) != m.rows ||
            static_cast<std::int64_t>(it->second.cols) != m.cols)
            throw ConfigError(path + ": tensor " + name + " has dims " + std::to_string(it->second.rows) + "x" +
                              std::to_string(it->second.cols) + ", expected " + std::to_string(m.rows) + "x" +
                              std::to_string(m.cols));
        m.a = it->second.payload;
    });
    return p;
}

}  // namespace latflow
