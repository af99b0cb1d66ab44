#include "nsvar/moefy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nsvar/rng.hpp"

namespace nsvar {

namespace {

double sq_dist(const double* a, const double* b, int64_t d) {
    double s = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        double t = a[i] - b[i];
        s += t * t;
    }
    return s;
}

// k-means++ style seeding
std::vector<std::vector<double>> seed_centroids(const Tensor& x, int k, Rng& rng) {
    int64_t n = x.shape[0], d = x.shape[1];
    std::vector<std::vector<double>> cents;
    int64_t first = static_cast<int64_t>(rng.below(static_cast<uint64_t>(n)));
    cents.emplace_back(x.data.begin() + first * d, x.data.begin() + (first + 1) * d);
    std::vector<double> dist(static_cast<size_t>(n));
    while (static_cast<int>(cents.size()) < k) {
        double total = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            double best = sq_dist(x.data.data() + i * d, cents[0].data(), d);
            for (size_t c = 1; c < cents.size(); ++c)
                best = std::min(best, sq_dist(x.data.data() + i * d, cents[c].data(), d));
            dist[static_cast<size_t>(i)] = best;
            total += best;
        }
        int64_t pick;
        if (total <= 0.0) {
            pick = static_cast<int64_t>(rng.below(static_cast<uint64_t>(n)));
        } else {
            double r = rng.uniform() * total;
            pick = n - 1;
            double acc = 0.0;
            for (int64_t i = 0; i < n; ++i) {
                acc += dist[static_cast<size_t>(i)];
                if (acc >= r) {
                    pick = i;
                    break;
                }
            }
        }
        cents.emplace_back(x.data.begin() + pick * d, x.data.begin() + (pick + 1) * d);
    }
    return cents;
}

}  // namespace

ClusterResult balanced_kmeans(const Tensor& unit_vectors, const ClusterConfig& cfg) {
    require(unit_vectors.rank() == 2, "balanced_kmeans: expected 2-d unit matrix");
    int64_t n = unit_vectors.shape[0], d = unit_vectors.shape[1];
    int k = cfg.num_experts;
    require(k >= 1 && n % k == 0, "balanced_kmeans: expert count must divide unit count");
    int64_t cap = n / k;

    Rng rng(Rng::mix(cfg.seed, 0x6b6d65616e73ull));
    auto cents = seed_centroids(unit_vectors, k, rng);

    ClusterResult res;
    std::vector<int> assign(static_cast<size_t>(n), -1);
    std::vector<double> d2(static_cast<size_t>(n * k));

    for (int iter = 0; iter < cfg.max_iters; ++iter) {
        for (int64_t i = 0; i < n; ++i)
            for (int c = 0; c < k; ++c)
                d2[static_cast<size_t>(i * k + c)] =
                    sq_dist(unit_vectors.data.data() + i * d, cents[static_cast<size_t>(c)].data(), d);

        // order units by how much they care: distance gap between their best
        // and second-best centroid, descending; ties by index
        std::vector<int64_t> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        std::vector<double> margin(static_cast<size_t>(n), 0.0);
        for (int64_t i = 0; i < n; ++i) {
            double best = 1e300, second = 1e300;
            for (int c = 0; c < k; ++c) {
                double v = d2[static_cast<size_t>(i * k + c)];
                if (v < best) {
                    second = best;
                    best = v;
                } else if (v < second) {
                    second = v;
                }
            }
            margin[static_cast<size_t>(i)] = (k > 1 ? second - best : 0.0);
        }
        std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
            if (margin[static_cast<size_t>(a)] != margin[static_cast<size_t>(b)])
                return margin[static_cast<size_t>(a)] > margin[static_cast<size_t>(b)];
            return a < b;
        });

        std::vector<int64_t> load(static_cast<size_t>(k), 0);
        std::vector<int> next(static_cast<size_t>(n), -1);
        for (int64_t u : order) {
            int best_c = -1;
            double best_v = 1e300;
            for (int c = 0; c < k; ++c) {
                if (load[static_cast<size_t>(c)] >= cap) continue;
                double v = d2[static_cast<size_t>(u * k + c)];
                if (v < best_v) {
                    best_v = v;
                    best_c = c;
                }
            }
            next[static_cast<size_t>(u)] = best_c;
            load[static_cast<size_t>(best_c)] += 1;
        }

        // centroid update
        auto new_cents = cents;
        for (auto& c : new_cents) std::fill(c.begin(), c.end(), 0.0);
        for (int64_t i = 0; i < n; ++i) {
            auto& c = new_cents[static_cast<size_t>(next[static_cast<size_t>(i)])];
            for (int64_t j = 0; j < d; ++j) c[static_cast<size_t>(j)] += unit_vectors.data[static_cast<size_t>(i * d + j)];
        }
        for (auto& c : new_cents)
            for (double& v : c) v /= static_cast<double>(cap);

        double obj = 0.0;
        for (int64_t i = 0; i < n; ++i)
            obj += sq_dist(unit_vectors.data.data() + i * d,
                           new_cents[static_cast<size_t>(next[static_cast<size_t>(i)])].data(), d);

        // greedy capacitated assignment is not guaranteed monotone; keep the
        // recorded objective sequence non-increasing by rejecting regressions
        if (!res.objectives.empty() && obj > res.objectives.back()) break;

        bool changed = assign != next;
        assign = next;
        cents = std::move(new_cents);
        res.objectives.push_back(obj);
        if (!changed) break;
    }

    res.assignment = std::move(assign);
    return res;
}

ExpertSet split_ffn(const Tensor& w1, const Tensor& b1, const Tensor& w2, const Tensor& b2,
                    const std::vector<int>& assignment) {
    require(w1.rank() == 2 && w2.rank() == 2, "split_ffn: weights must be 2-d");
    int64_t d_ff = w1.shape[0], d_model = w1.shape[1];
    require(w2.shape[0] == d_model && w2.shape[1] == d_ff, "split_ffn: w2 shape mismatch");
    require(static_cast<int64_t>(assignment.size()) == d_ff, "split_ffn: assignment size");

    int num = 0;
    for (int a : assignment) {
        require(a >= 0, "split_ffn: negative assignment");
        num = std::max(num, a + 1);
    }
    std::vector<int64_t> counts(static_cast<size_t>(num), 0);
    for (int a : assignment) counts[static_cast<size_t>(a)] += 1;
    for (int64_t c : counts)
        require(c == counts[0], "split_ffn: assignment is not balanced");

    ExpertSet set;
    set.num_experts = num;
    set.expert_size = static_cast<int>(counts[0]);
    set.assignment = assignment;
    set.b2 = b2;

    for (int e = 0; e < num; ++e) {
        Tensor ew1 = Tensor::zeros({set.expert_size, d_model});
        Tensor eb1 = Tensor::zeros({set.expert_size});
        Tensor ew2 = Tensor::zeros({d_model, set.expert_size});
        int slot = 0;
        for (int64_t u = 0; u < d_ff; ++u) {
            if (assignment[static_cast<size_t>(u)] != e) continue;
            for (int64_t j = 0; j < d_model; ++j)
                ew1.data[static_cast<size_t>(slot * d_model + j)] = w1.data[static_cast<size_t>(u * d_model + j)];
            eb1.data[static_cast<size_t>(slot)] = b1.data[static_cast<size_t>(u)];
            for (int64_t j = 0; j < d_model; ++j)
                ew2.data[static_cast<size_t>(j * set.expert_size + slot)] = w2.data[static_cast<size_t>(j * d_ff + u)];
            ++slot;
        }
        set.w1.push_back(std::move(ew1));
        set.b1.push_back(std::move(eb1));
        set.w2.push_back(std::move(ew2));
    }
    return set;
}

void reassemble_ffn(const ExpertSet& set, Tensor& w1, Tensor& b1, Tensor& w2) {
    int64_t d_ff = set.d_ff(), d_model = set.w1[0].shape[1];
    w1 = Tensor::zeros({d_ff, d_model});
    b1 = Tensor::zeros({d_ff});
    w2 = Tensor::zeros({d_model, d_ff});
    std::vector<int> slot(static_cast<size_t>(set.num_experts), 0);
    for (int64_t u = 0; u < d_ff; ++u) {
        int e = set.assignment[static_cast<size_t>(u)];
        int s = slot[static_cast<size_t>(e)]++;
        for (int64_t j = 0; j < d_model; ++j)
            w1.data[static_cast<size_t>(u * d_model + j)] =
                set.w1[static_cast<size_t>(e)].data[static_cast<size_t>(s * d_model + j)];
        b1.data[static_cast<size_t>(u)] = set.b1[static_cast<size_t>(e)].data[static_cast<size_t>(s)];
        for (int64_t j = 0; j < d_model; ++j)
            w2.data[static_cast<size_t>(j * d_ff + u)] =
                set.w2[static_cast<size_t>(e)].data[static_cast<size_t>(j * set.expert_size + s)];
    }
}

std::vector<double> expert_forward(const ExpertSet& set, int expert, const double* x,
                                   Activation act) {
    const Tensor& w1 = set.w1[static_cast<size_t>(expert)];
    const Tensor& b1 = set.b1[static_cast<size_t>(expert)];
    const Tensor& w2 = set.w2[static_cast<size_t>(expert)];
    int64_t size = w1.shape[0], d = w1.shape[1];
    std::vector<double> h(static_cast<size_t>(size));
    for (int64_t u = 0; u < size; ++u) {
        double s = b1.data[static_cast<size_t>(u)];
        const double* row = w1.data.data() + u * d;
        for (int64_t j = 0; j < d; ++j) s += row[j] * x[j];
        h[static_cast<size_t>(u)] = activate(s, act);
    }
    std::vector<double> y(static_cast<size_t>(d), 0.0);
    for (int64_t u = 0; u < size; ++u) {
        double hu = h[static_cast<size_t>(u)];
        if (hu == 0.0) continue;
        for (int64_t j = 0; j < d; ++j) y[static_cast<size_t>(j)] += w2.data[static_cast<size_t>(j * size + u)] * hu;
    }
    return y;
}

std::vector<double> expert_norms(const ExpertSet& set, const double* x, Activation act) {
    std::vector<double> norms(static_cast<size_t>(set.num_experts));
    for (int e = 0; e < set.num_experts; ++e) {
        auto y = expert_forward(set, e, x, act);
        double s = 0.0;
        for (double v : y) s += v * v;
        norms[static_cast<size_t>(e)] = std::sqrt(s);
    }
    return norms;
}

}  // namespace nsvar
