#pragma once

#include <cstdint>
#include <vector>

#include "latflow/dmat.hpp"
#include "latflow/toy_dit.hpp"

namespace latflow {

struct AdamWConfig {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
    double clip = 1.0;  // global gradient-norm ceiling, 0 disables

    void validate() const;
};

// Decoupled-weight-decay Adam over an explicit parameter list. The pointer
// order fixed at construction is the identity of each state slot; step() must
// receive gradients in the same order and shapes.
class AdamW {
  public:
    AdamW(std::vector<DMat*> params, AdamWConfig cfg);

    void step(const std::vector<const DMat*>& grads);
    double last_grad_norm() const { return last_norm_; }
    std::int64_t steps_taken() const { return t_; }

  private:
    std::vector<DMat*> params_;
    std::vector<DMat> m_, v_;
    AdamWConfig cfg_;
    std::int64_t t_ = 0;
    double last_norm_ = 0.0;
};

// Canonical-order pointer views for optimizer construction and grad passing.
std::vector<DMat*> param_ptrs(DitParams& p);
std::vector<const DMat*> param_ptrs(const DitParams& p);

}  // namespace latflow
