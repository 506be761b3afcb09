#include "latflow/optim.hpp"

#include <cmath>

#include "latflow/errors.hpp"

namespace latflow {

void AdamWConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("Adam epsilon must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight decay must be nonnegative");
    if (clip < 0.0) throw ConfigError("gradient clip must be nonnegative");
}

AdamW::AdamW(std::vector<DMat*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const DMat* p : params_) {
        m_.emplace_back(p->rows, p->cols);
        v_.emplace_back(p->rows, p->cols);
    }
}

void AdamW::step(const std::vector<const DMat*>& grads) {
    if (grads.size() != params_.size()) throw DimensionError("gradient list size mismatch");
    double sq = 0.0;
    for (std::size_t i = 0; i < grads.size(); i++) {
        if (grads[i]->rows != params_[i]->rows || grads[i]->cols != params_[i]->cols)
            throw DimensionError("gradient shape mismatch");
        for (double g : grads[i]->a) sq += g * g;
    }
    last_norm_ = std::sqrt(sq);
    double scale = 1.0;
    if (cfg_.clip > 0.0 && last_norm_ > cfg_.clip) scale = cfg_.clip / last_norm_;

    t_++;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); i++) {
        DMat& p = *params_[i];
        DMat& m = m_[i];
        DMat& v = v_[i];
        const DMat& gmat = *grads[i];
        for (std::size_t j = 0; j < p.a.size(); j++) {
            const double g = gmat.a[j] * scale;
            m.a[j] = cfg_.beta1 * m.a[j] + (1.0 - cfg_.beta1) * g;
            v.a[j] = cfg_.beta2 * v.a[j] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m.a[j] / bc1;
            const double vhat = v.a[j] / bc2;
            p.a[j] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p.a[j]);
        }
    }
}

std::vector<DMat*> param_ptrs(DitParams& p) {
    std::vector<DMat*> out;
    for_each_param(p, [&](const std::string&, DMat& t) { out.push_back(&t); });
    return out;
}

std::vector<const DMat*> param_ptrs(const DitParams& p) {
    std::vector<const DMat*> out;
    for_each_param(p, [&](const std::string&, const DMat& t) { out.push_back(&t); });
    return out;
}

}  // namespace latflow
