#include "nsvar/tensor.hpp"

#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

namespace nsvar {

void ensure_finite(const Tensor& t, const std::string& where) {
    for (double v : t.data) {
        if (!std::isfinite(v)) {
            fail("non-finite value in " + where);
        }
    }
}

namespace {

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    require(is.good(), "tensor read: truncated stream");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    write_u32(os, static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.shape) write_u32(os, static_cast<uint32_t>(d));
    for (double v : t.data) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
        os.write(reinterpret_cast<const char*>(b), 8);
    }
}

Tensor read_tensor(std::istream& is) {
    uint32_t rank = read_u32(is);
    require(rank <= 8, "tensor read: implausible rank");
    std::vector<int64_t> shape(rank);
    for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int64_t>(read_u32(is));
    int64_t n = Tensor::numel_of(shape);
    std::vector<double> data(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        unsigned char b[8];
        is.read(reinterpret_cast<char*>(b), 8);
        require(is.good(), "tensor read: truncated payload");
        uint64_t bits = 0;
        for (int j = 0; j < 8; ++j) bits |= static_cast<uint64_t>(b[j]) << (8 * j);
        double v;
        std::memcpy(&v, &bits, 8);
        data[static_cast<size_t>(i)] = v;
    }
    return Tensor(std::move(shape), std::move(data));
}

}  // namespace nsvar
