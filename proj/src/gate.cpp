#include "nsvar/gate.hpp"

#include <algorithm>
#include <cmath>

#include "nsvar/rng.hpp"

namespace nsvar {

int popcount64(uint64_t m) {
    int c = 0;
    while (m) {
        m &= m - 1;
        ++c;
    }
    return c;
}

uint64_t gate_mask(const double* preds, int num_experts, double tau) {
    require(num_experts >= 1 && num_experts <= 64, "gate: expert count out of range");
    require(tau >= 0.0 && tau <= 1.0, "gate: tau outside [0, 1]");
    double mx = preds[0];
    for (int i = 1; i < num_experts; ++i) mx = std::max(mx, preds[i]);
    double thr = tau * mx;
    uint64_t mask = 0;
    for (int i = 0; i < num_experts; ++i) {
        require(preds[i] >= 0.0, "gate: negative prediction");
        if (preds[i] >= thr) mask |= (1ull << i);
    }
    return mask;
}

std::vector<bool> gate(const std::vector<double>& preds, double tau) {
    uint64_t m = gate_mask(preds.data(), static_cast<int>(preds.size()), tau);
    std::vector<bool> out(preds.size());
    for (size_t i = 0; i < preds.size(); ++i) out[i] = (m >> i) & 1ull;
    return out;
}

const char* forward_mode_name(ForwardMode m) {
    switch (m) {
        case ForwardMode::Dense: return "dense";
        case ForwardMode::DynkMax: return "dynk_max";
        case ForwardMode::Oracle: return "oracle";
        case ForwardMode::Pruned: return "pruned";
    }
    return "?";
}

ForwardMode forward_mode_from_name(const std::string& s) {
    if (s == "dense") return ForwardMode::Dense;
    if (s == "dynk_max") return ForwardMode::DynkMax;
    if (s == "oracle") return ForwardMode::Oracle;
    if (s == "pruned") return ForwardMode::Pruned;
    fail("unknown forward mode '" + s + "'");
}

bool TauSchedule::is_gated(int scale_1based) const {
    require(scale_1based >= 1 && scale_1based <= num_scales(), "tau schedule: bad scale");
    return tau_by_scale[static_cast<size_t>(scale_1based - 1)] >= 0.0;
}

double TauSchedule::tau_for(int scale_1based) const {
    require(is_gated(scale_1based), "tau schedule: scale is dense");
    return tau_by_scale[static_cast<size_t>(scale_1based - 1)];
}

int TauSchedule::switch_scale() const {
    for (int k = 1; k <= num_scales(); ++k)
        if (is_gated(k)) return k;
    return num_scales() + 1;
}

std::vector<double> TauSchedule::taus() const {
    std::vector<double> out;
    for (double t : tau_by_scale)
        if (t >= 0.0) out.push_back(t);
    return out;
}

TauSchedule TauSchedule::all_dense(int num_scales) {
    TauSchedule s;
    s.tau_by_scale.assign(static_cast<size_t>(num_scales), -1.0);
    return s;
}

TauSchedule TauSchedule::last_scales(int switch_scale, const std::vector<double>& taus,
                                     int num_scales) {
    require(switch_scale >= 1 && switch_scale <= num_scales, "tau schedule: bad switch scale");
    require(static_cast<int>(taus.size()) == num_scales - switch_scale + 1,
            "tau schedule: need one tau per scale from the switch scale on");
    TauSchedule s = all_dense(num_scales);
    for (size_t i = 0; i < taus.size(); ++i) {
        require(taus[i] >= 0.0 && taus[i] <= 1.0, "tau schedule: tau outside [0, 1]");
        s.tau_by_scale[static_cast<size_t>(switch_scale - 1) + i] = taus[i];
    }
    return s;
}

TauSchedule TauSchedule::scale_aware(int switch_scale, const std::vector<double>& taus,
                                     int num_scales) {
    for (size_t i = 1; i < taus.size(); ++i)
        require(taus[i] >= taus[i - 1],
                "tau schedule: scale-aware taus must be non-decreasing toward fine scales");
    return last_scales(switch_scale, taus, num_scales);
}

TauSchedule TauSchedule::uniform(double tau, int num_scales) {
    return last_scales(1, std::vector<double>(static_cast<size_t>(num_scales), tau), num_scales);
}

TauSchedule TauSchedule::single_scale(int scale, double tau, int num_scales) {
    TauSchedule s = all_dense(num_scales);
    require(scale >= 1 && scale <= num_scales, "tau schedule: bad scale");
    require(tau >= 0.0 && tau <= 1.0, "tau schedule: tau outside [0, 1]");
    s.tau_by_scale[static_cast<size_t>(scale - 1)] = tau;
    return s;
}

RouterNet RouterNet::init(int d_model, int width, int num_experts, uint64_t seed) {
    Rng rng(Rng::mix(seed, 0x726f75746572ull));
    auto gauss = [&](std::vector<int64_t> shape, double std) {
        Tensor t = Tensor::zeros(std::move(shape));
        for (double& v : t.data) v = rng.gaussian() * std;
        return t;
    };
    RouterNet r;
    r.w0 = gauss({width, d_model}, 0.1);
    r.b0 = Tensor::zeros({width});
    r.w1 = gauss({width, width}, 0.1);
    r.b1 = Tensor::zeros({width});
    r.w2 = gauss({num_experts, width}, 0.1);
    r.b2 = Tensor::zeros({num_experts});
    return r;
}

Tensor RouterNet::predict(const Tensor& x) const {
    Tensor h0 = linear(x, w0, b0);
    activate_inplace(h0, Activation::Gelu);
    Tensor h1 = linear(h0, w1, b1);
    activate_inplace(h1, Activation::Gelu);
    Tensor out = linear(h1, w2, b2);
    for (double& v : out.data) v = std::fabs(v);
    return out;
}

MoeRowResult moe_forward(const ExpertSet& set, const double* x, Activation act,
                         ForwardMode mode, double tau, const double* router_preds) {
    MoeRowResult res;
    int e_count = set.num_experts;
    switch (mode) {
        case ForwardMode::Dense:
            res.mask = e_count == 64 ? ~0ull : ((1ull << e_count) - 1ull);
            break;
        case ForwardMode::DynkMax:
            require(router_preds != nullptr, "moe_forward: dynk_max needs router predictions");
            res.mask = gate_mask(router_preds, e_count, tau);
            break;
        case ForwardMode::Oracle: {
            auto norms = expert_norms(set, x, act);
            res.mask = gate_mask(norms.data(), e_count, tau);
            break;
        }
        case ForwardMode::Pruned:
            fail("moe_forward: pruned mode applies to dense FFN blocks");
    }
    res.y.assign(static_cast<size_t>(set.d_model()), 0.0);
    for (int e = 0; e < e_count; ++e) {
        if (!((res.mask >> e) & 1ull)) continue;
        ++res.count;
        auto ye = expert_forward(set, e, x, act);
        for (size_t j = 0; j < res.y.size(); ++j) res.y[j] += ye[j];
    }
    for (size_t j = 0; j < res.y.size(); ++j) res.y[j] += set.b2.data[j];
    return res;
}

double GatingTrace::mean_experts_per_token(int scale_1based) const {
    double total = 0.0;
    int64_t n = 0;
    for (const auto& e : entries) {
        if (e.scale != scale_1based) continue;
        total += e.count;
        ++n;
    }
    return n == 0 ? 0.0 : total / static_cast<double>(n);
}

}  // namespace nsvar
