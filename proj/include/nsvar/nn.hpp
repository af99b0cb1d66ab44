#pragma once

#include <cmath>
#include <string>

#include "nsvar/kernels.hpp"
#include "nsvar/tensor.hpp"

namespace nsvar {

enum class Activation : uint8_t { Gelu = 0, Relu = 1 };

inline const char* activation_name(Activation a) {
    return a == Activation::Gelu ? "gelu" : "relu";
}

inline Activation activation_from_name(const std::string& s) {
    if (s == "gelu") return Activation::Gelu;
    if (s == "relu") return Activation::Relu;
    fail("unknown activation '" + s + "'");
}

inline double activate(double x, Activation a) {
    if (a == Activation::Relu) return x > 0.0 ? x : 0.0;
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476));
}

// y[t x dout] = x[t x din] * w^T + b, with w[dout x din]
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    require(x.cols() == w.shape[1], "linear: width mismatch");
    int64_t t = x.rows(), din = x.cols(), dout = w.shape[0];
    Tensor wt = Tensor::zeros({din, dout});
    transpose(w.data.data(), wt.data.data(), dout, din);
    Tensor y = Tensor::zeros({t, dout});
    matmul(x.data.data(), wt.data.data(), y.data.data(), t, din, dout);
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < dout; ++j) y.data[static_cast<size_t>(i * dout + j)] += b.data[static_cast<size_t>(j)];
    return y;
}

inline void activate_inplace(Tensor& t, Activation a) {
    for (double& v : t.data) v = activate(v, a);
}

}  // namespace nsvar
