#pragma once

#include <map>
#include <string>
#include <vector>

#include "nsvar/tensor.hpp"

namespace nsvar {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled
    double clip_norm = 1.0;     // global grad-norm clip; <= 0 disables
};

// Linear warmup to peak, then linear decay to zero over the remaining steps.
double linear_lr(double peak, int64_t step, int64_t warmup_steps, int64_t total_steps);

class Adam {
  public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    // Clips grads in place to cfg.clip_norm (global norm over all entries),
    // then applies one Adam step to each named parameter. Returns the
    // pre-clip global gradient norm.
    double step(std::vector<std::pair<std::string, Tensor*>>& params,
                std::map<std::string, Tensor>& grads, double lr);

    const AdamConfig& config() const { return cfg_; }

  private:
    AdamConfig cfg_;
    int64_t t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

}  // namespace nsvar
