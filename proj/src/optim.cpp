#include "nsvar/optim.hpp"

#include <cmath>

namespace nsvar {

double linear_lr(double peak, int64_t step, int64_t warmup_steps, int64_t total_steps) {
    if (warmup_steps > 0 && step < warmup_steps)
        return peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    int64_t rest = total_steps - warmup_steps;
    if (rest <= 0) return peak;
    return peak * static_cast<double>(total_steps - step) / static_cast<double>(rest);
}

double Adam::step(std::vector<std::pair<std::string, Tensor*>>& params,
                  std::map<std::string, Tensor>& grads, double lr) {
    double sq = 0.0;
    for (auto& [name, p] : params) {
        auto it = grads.find(name);
        require(it != grads.end(), "adam: missing gradient for " + name);
        for (double g : it->second.data) sq += g * g;
    }
    double norm = std::sqrt(sq);
    if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) {
        double s = cfg_.clip_norm / norm;
        for (auto& [name, p] : params)
            for (double& g : grads[name].data) g *= s;
    }

    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));

    for (auto& [name, p] : params) {
        Tensor& g = grads[name];
        auto mi = m_.find(name);
        if (mi == m_.end()) {
            m_[name] = Tensor::zeros(p->shape);
            v_[name] = Tensor::zeros(p->shape);
            mi = m_.find(name);
        }
        Tensor& m = mi->second;
        Tensor& v = v_[name];
        for (size_t i = 0; i < p->data.size(); ++i) {
            m.data[i] = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * g.data[i];
            v.data[i] = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * g.data[i] * g.data[i];
            double mhat = m.data[i] / bc1;
            double vhat = v.data[i] / bc2;
            p->data[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p->data[i]);
        }
    }
    return norm;
}

}  // namespace nsvar
