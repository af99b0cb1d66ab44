#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "nsvar/common.hpp"

namespace nsvar {

// Dense n-dimensional array of float64, row-major.
// Invariant: product(shape) == data.size().
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    Tensor() = default;

    Tensor(std::vector<int64_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        require(numel_of(shape) == static_cast<int64_t>(data.size()),
                "tensor: shape/data size mismatch");
    }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            require(d > 0, "tensor: dimensions must be positive");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int64_t> s) {
        int64_t n = numel_of(s);
        return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), 0.0));
    }

    static Tensor full(std::vector<int64_t> s, double v) {
        int64_t n = numel_of(s);
        return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), v));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }

    // 2D accessors; rows()/cols() treat a 1D tensor as a single row
    int64_t rows() const { return rank() >= 2 ? shape[0] : 1; }
    int64_t cols() const { return rank() >= 2 ? shape[1] : (rank() == 1 ? shape[0] : 1); }

    double& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * cols() + j)]; }
    double at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * cols() + j)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    double item() const {
        require(numel() == 1, "tensor: item() on non-scalar");
        return data[0];
    }
};

// Throws if any value is NaN or Inf; `where` names the operation for the message.
void ensure_finite(const Tensor& t, const std::string& where);

// Serialization: little-endian, u32 rank, u32 dims, float64 payload.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

}  // namespace nsvar
