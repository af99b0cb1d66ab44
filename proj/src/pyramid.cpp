#include "nsvar/pyramid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "nsvar/rng.hpp"

namespace nsvar {

void PyramidConfig::validate() const {
    require(!scale_sides.empty(), "pyramid config: empty scale list");
    require(scale_sides.front() == 1, "pyramid config: coarsest scale must have side 1");
    for (size_t i = 1; i < scale_sides.size(); ++i)
        require(scale_sides[i] > scale_sides[i - 1], "pyramid config: sides must increase");
    require(vocab >= 2, "pyramid config: vocab must be >= 2");
    require(num_classes >= 1, "pyramid config: need at least one class");
}

int PyramidConfig::total_tokens() const {
    int n = 0;
    for (int s : scale_sides) n += s * s;
    return n;
}

std::vector<std::pair<int, int>> PyramidConfig::boundaries() const {
    std::vector<std::pair<int, int>> b;
    int pos = 0;
    for (int s : scale_sides) {
        b.emplace_back(pos, pos + s * s);
        pos += s * s;
    }
    return b;
}

void TokenHierarchy::validate() const {
    require(!scale_sides.empty() && scale_sides.front() == 1, "hierarchy: bad scale list");
    require(maps.size() == scale_sides.size(), "hierarchy: map count mismatch");
    for (size_t k = 0; k < maps.size(); ++k) {
        int side = scale_sides[k];
        require(static_cast<int>(maps[k].size()) == side * side, "hierarchy: map size mismatch");
        for (int t : maps[k])
            require(t >= 0 && t < vocab, "hierarchy: token outside vocab");
    }
}

int TokenHierarchy::total_tokens() const {
    int n = 0;
    for (int s : scale_sides) n += s * s;
    return n;
}

int quantize(double value, int vocab) {
    require(value >= 0.0 && value <= 1.0, "quantize: value outside [0, 1]");
    int t = static_cast<int>(std::floor(value * static_cast<double>(vocab)));
    return std::min(t, vocab - 1);
}

double dequantize(int token, int vocab) {
    return (static_cast<double>(token) + 0.5) / static_cast<double>(vocab);
}

namespace {

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

// One image per (seed, index); families: 0 disk, 1 bar, 2 checker, 3.. gradients
SyntheticImage draw_image(uint64_t seed, int index, const PyramidConfig& cfg) {
    Rng rng(Rng::mix(seed, static_cast<uint64_t>(index)));
    SyntheticImage img;
    img.side = cfg.image_side();
    img.class_id = static_cast<int>(rng.below(static_cast<uint64_t>(cfg.num_classes)));
    img.pixels.assign(static_cast<size_t>(img.side * img.side), 0.0);

    int side = img.side;
    double bg = rng.uniform(0.05, 0.25);
    double fg = rng.uniform(0.6, 0.95);
    for (double& p : img.pixels) p = bg;

    int family = img.class_id % 4;
    switch (family) {
        case 0: {  // disk
            double cx = rng.uniform(0.25, 0.75) * side;
            double cy = rng.uniform(0.25, 0.75) * side;
            double r = rng.uniform(0.15, 0.35) * side;
            for (int y = 0; y < side; ++y)
                for (int x = 0; x < side; ++x) {
                    double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                    if (dx * dx + dy * dy <= r * r) img.at(y, x) = fg;
                }
            break;
        }
        case 1: {  // axis-aligned bar
            bool horiz = rng.below(2) == 0;
            int w = std::max(1, static_cast<int>(rng.uniform(0.15, 0.4) * side));
            int off = static_cast<int>(rng.below(static_cast<uint64_t>(std::max(1, side - w))));
            for (int y = 0; y < side; ++y)
                for (int x = 0; x < side; ++x) {
                    int c = horiz ? y : x;
                    if (c >= off && c < off + w) img.at(y, x) = fg;
                }
            break;
        }
        case 2: {  // checker
            int cell = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(std::max(1, side / 2))));
            int phase = static_cast<int>(rng.below(2));
            for (int y = 0; y < side; ++y)
                for (int x = 0; x < side; ++x)
                    if (((x / cell + y / cell) & 1) == phase) img.at(y, x) = fg;
            break;
        }
        default: {  // linear gradient
            double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
            double gx = std::cos(angle), gy = std::sin(angle);
            double lo = rng.uniform(0.0, 0.3), hi = rng.uniform(0.7, 1.0);
            for (int y = 0; y < side; ++y)
                for (int x = 0; x < side; ++x) {
                    double u = (gx * (x + 0.5) / side + gy * (y + 0.5) / side + 1.0) / 2.0;
                    img.at(y, x) = lo + (hi - lo) * clamp01(u);
                }
            break;
        }
    }
    for (double& p : img.pixels) p = clamp01(p);
    return img;
}

}  // namespace

std::vector<SyntheticImage> generate_dataset(uint64_t seed, int n, const PyramidConfig& cfg) {
    cfg.validate();
    require(n > 0, "generate_dataset: n must be positive");
    std::vector<SyntheticImage> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(draw_image(seed, i, cfg));
    return out;
}

std::vector<double> area_downsample(const std::vector<double>& pixels, int src_side,
                                    int dst_side) {
    require(dst_side >= 1 && dst_side <= src_side, "area_downsample: bad sides");
    if (dst_side == src_side) return pixels;
    std::vector<double> out(static_cast<size_t>(dst_side * dst_side), 0.0);
    double ratio = static_cast<double>(src_side) / static_cast<double>(dst_side);
    for (int dy = 0; dy < dst_side; ++dy) {
        double y0 = dy * ratio, y1 = (dy + 1) * ratio;
        for (int dx = 0; dx < dst_side; ++dx) {
            double x0 = dx * ratio, x1 = (dx + 1) * ratio;
            double acc = 0.0;
            int sy0 = static_cast<int>(std::floor(y0));
            int sy1 = std::min(src_side, static_cast<int>(std::ceil(y1)));
            int sx0 = static_cast<int>(std::floor(x0));
            int sx1 = std::min(src_side, static_cast<int>(std::ceil(x1)));
            for (int sy = sy0; sy < sy1; ++sy) {
                double wy = std::min<double>(sy + 1, y1) - std::max<double>(sy, y0);
                for (int sx = sx0; sx < sx1; ++sx) {
                    double wx = std::min<double>(sx + 1, x1) - std::max<double>(sx, x0);
                    acc += wy * wx * pixels[static_cast<size_t>(sy * src_side + sx)];
                }
            }
            out[static_cast<size_t>(dy * dst_side + dx)] = acc / (ratio * ratio);
        }
    }
    return out;
}

TokenHierarchy build_pyramid(const SyntheticImage& img, const PyramidConfig& cfg) {
    cfg.validate();
    require(img.side == cfg.image_side(), "build_pyramid: image side mismatch");
    TokenHierarchy h;
    h.scale_sides = cfg.scale_sides;
    h.vocab = cfg.vocab;
    for (int side : cfg.scale_sides) {
        std::vector<double> ds = area_downsample(img.pixels, img.side, side);
        std::vector<int> map(ds.size());
        for (size_t i = 0; i < ds.size(); ++i) map[i] = quantize(clamp01(ds[i]), cfg.vocab);
        h.maps.push_back(std::move(map));
    }
    return h;
}

std::vector<int> flatten(const TokenHierarchy& h) {
    std::vector<int> out;
    out.reserve(static_cast<size_t>(h.total_tokens()));
    for (const auto& m : h.maps) out.insert(out.end(), m.begin(), m.end());
    return out;
}

TokenHierarchy unflatten(const std::vector<int>& tokens, const PyramidConfig& cfg) {
    require(static_cast<int>(tokens.size()) == cfg.total_tokens(),
            "unflatten: token count mismatch");
    TokenHierarchy h;
    h.scale_sides = cfg.scale_sides;
    h.vocab = cfg.vocab;
    size_t pos = 0;
    for (int side : cfg.scale_sides) {
        h.maps.emplace_back(tokens.begin() + static_cast<long>(pos),
                            tokens.begin() + static_cast<long>(pos) + side * side);
        pos += static_cast<size_t>(side * side);
    }
    return h;
}

std::vector<double> decode_to_image(const TokenHierarchy& h) {
    h.validate();
    const auto& finest = h.maps.back();
    std::vector<double> out(finest.size());
    for (size_t i = 0; i < finest.size(); ++i) out[i] = dequantize(finest[i], h.vocab);
    return out;
}

TokenDataset tokenize_dataset(const std::vector<SyntheticImage>& images,
                              const PyramidConfig& cfg) {
    TokenDataset ds;
    ds.config = cfg;
    ds.items.reserve(images.size());
    for (const auto& img : images)
        ds.items.push_back({img.class_id, build_pyramid(img, cfg)});
    return ds;
}

TokenDataset make_token_dataset(uint64_t seed, int n, const PyramidConfig& cfg) {
    return tokenize_dataset(generate_dataset(seed, n, cfg), cfg);
}

namespace {

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u16(std::ostream& os, uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    require(is.good(), "dataset read: truncated file");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

uint16_t get_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    require(is.good(), "dataset read: truncated file");
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

}  // namespace

void write_dataset(const std::string& path, const TokenDataset& ds) {
    std::ofstream os(path, std::ios::binary);
    require(os.good(), "write_dataset: cannot open " + path);
    os.write("NSPD", 4);
    put_u32(os, 1);
    put_u32(os, static_cast<uint32_t>(ds.items.size()));
    put_u32(os, static_cast<uint32_t>(ds.config.num_classes));
    put_u32(os, static_cast<uint32_t>(ds.config.num_scales()));
    for (int s : ds.config.scale_sides) put_u32(os, static_cast<uint32_t>(s));
    put_u32(os, static_cast<uint32_t>(ds.config.vocab));
    for (const auto& item : ds.items) {
        put_u32(os, static_cast<uint32_t>(item.class_id));
        for (int t : flatten(item.tokens)) put_u16(os, static_cast<uint16_t>(t));
    }
    require(os.good(), "write_dataset: write failed for " + path);
}

TokenDataset read_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), "read_dataset: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    require(is.good() && std::equal(magic, magic + 4, "NSPD"), "read_dataset: bad magic");
    uint32_t version = get_u32(is);
    require(version == 1, "read_dataset: unsupported version");
    uint32_t n = get_u32(is);
    TokenDataset ds;
    ds.config.num_classes = static_cast<int>(get_u32(is));
    uint32_t k = get_u32(is);
    ds.config.scale_sides.resize(k);
    for (uint32_t i = 0; i < k; ++i) ds.config.scale_sides[i] = static_cast<int>(get_u32(is));
    ds.config.vocab = static_cast<int>(get_u32(is));
    ds.config.validate();
    int total = ds.config.total_tokens();
    for (uint32_t i = 0; i < n; ++i) {
        LabeledHierarchy item;
        item.class_id = static_cast<int>(get_u32(is));
        std::vector<int> tokens(static_cast<size_t>(total));
        for (int t = 0; t < total; ++t) tokens[static_cast<size_t>(t)] = get_u16(is);
        item.tokens = unflatten(tokens, ds.config);
        item.tokens.validate();
        ds.items.push_back(std::move(item));
    }
    return ds;
}

}  // namespace nsvar
