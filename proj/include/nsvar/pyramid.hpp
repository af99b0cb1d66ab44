#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nsvar/common.hpp"

namespace nsvar {

// Multi-scale tokenizer stand-in: deterministic per-scale quantization of
// area-averaged downsamples, plus a procedural class-conditional dataset.

struct PyramidConfig {
    std::vector<int> scale_sides;  // strictly increasing, first == 1
    int vocab = 16;
    int num_classes = 4;

    void validate() const;
    int num_scales() const { return static_cast<int>(scale_sides.size()); }
    int image_side() const { return scale_sides.back(); }
    // total token count over all scales
    int total_tokens() const;
    // flatten boundaries: [start, end) per scale
    std::vector<std::pair<int, int>> boundaries() const;
};

struct SyntheticImage {
    int side = 0;
    int class_id = 0;
    std::vector<double> pixels;  // side*side, row-major, values in [0, 1]

    double at(int r, int c) const { return pixels[static_cast<size_t>(r * side + c)]; }
    double& at(int r, int c) { return pixels[static_cast<size_t>(r * side + c)]; }
};

struct TokenHierarchy {
    std::vector<int> scale_sides;
    int vocab = 0;
    // maps[k] is scale k's grid, row-major, side scale_sides[k]
    std::vector<std::vector<int>> maps;

    void validate() const;
    int total_tokens() const;
};

// floor(v * V) clamped to V-1; errors outside [0, 1]
int quantize(double value, int vocab);
// bucket center (token + 0.5) / V
double dequantize(int token, int vocab);

// n procedurally drawn images, one of C shape families each; deterministic in
// (seed, index) so generation can be sharded
std::vector<SyntheticImage> generate_dataset(uint64_t seed, int n, const PyramidConfig& cfg);

TokenHierarchy build_pyramid(const SyntheticImage& img, const PyramidConfig& cfg);

// row-major per scale, concatenated coarse to fine
std::vector<int> flatten(const TokenHierarchy& h);
TokenHierarchy unflatten(const std::vector<int>& tokens, const PyramidConfig& cfg);

// bucket-center intensities of the finest map
std::vector<double> decode_to_image(const TokenHierarchy& h);

// area-average downsample of an S x S grid to s x s (s <= S)
std::vector<double> area_downsample(const std::vector<double>& pixels, int src_side,
                                    int dst_side);

struct LabeledHierarchy {
    int class_id = 0;
    TokenHierarchy tokens;
};

struct TokenDataset {
    PyramidConfig config;
    std::vector<LabeledHierarchy> items;
};

TokenDataset tokenize_dataset(const std::vector<SyntheticImage>& images,
                              const PyramidConfig& cfg);
TokenDataset make_token_dataset(uint64_t seed, int n, const PyramidConfig& cfg);

// NSPD container: header (magic "NSPD", u32 version, n, C, K, sides[K], V),
// then per record u32 class_id + u16 tokens in flatten order. Little-endian.
void write_dataset(const std::string& path, const TokenDataset& ds);
TokenDataset read_dataset(const std::string& path);

}  // namespace nsvar
