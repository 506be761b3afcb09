#include "latflow/latent.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace latflow {

std::string LatentDims::str() const {
    return "(" + std::to_string(b) + "," + std::to_string(c) + "," + std::to_string(t) + "," + std::to_string(h) +
           "," + std::to_string(w) + ")";
}

DLatent widen(const Latent& x) {
    DLatent out(x.dims);
    for (std::size_t i = 0; i < x.data.size(); i++) out.data[i] = static_cast<double>(x.data[i]);
    return out;
}

Latent narrow(const DLatent& x) {
    Latent out(x.dims);
    for (std::size_t i = 0; i < x.data.size(); i++) out.data[i] = static_cast<float>(x.data[i]);
    return out;
}

Latent resample_area_to(const Latent& x, std::int64_t new_h, std::int64_t new_w) {
    if (new_h < 1 || new_w < 1 || new_h > x.dims.h || new_w > x.dims.w)
        throw DimensionError("area resample target must satisfy 1 <= new <= old, got (" + std::to_string(new_h) +
                             "," + std::to_string(new_w) + ") from " + x.dims.str());
    LatentDims od = x.dims;
    od.h = new_h;
    od.w = new_w;
    Latent out(od);
    double sh = static_cast<double>(x.dims.h) / static_cast<double>(new_h);
    double sw = static_cast<double>(x.dims.w) / static_cast<double>(new_w);
    for (std::int64_t b = 0; b < od.b; b++)
        for (std::int64_t c = 0; c < od.c; c++)
            for (std::int64_t t = 0; t < od.t; t++)
                for (std::int64_t i = 0; i < new_h; i++) {
                    double h0 = i * sh, h1 = (i + 1) * sh;
                    std::int64_t r0 = static_cast<std::int64_t>(h0);
                    std::int64_t r1 = std::min<std::int64_t>(x.dims.h - 1, static_cast<std::int64_t>(std::ceil(h1)) - 1);
                    for (std::int64_t j = 0; j < new_w; j++) {
                        double w0 = j * sw, w1 = (j + 1) * sw;
                        std::int64_t c0 = static_cast<std::int64_t>(w0);
                        std::int64_t c1 =
                            std::min<std::int64_t>(x.dims.w - 1, static_cast<std::int64_t>(std::ceil(w1)) - 1);
                        double acc = 0.0;
                        for (std::int64_t r = r0; r <= r1; r++) {
                            double wr = std::min<double>(h1, r + 1) - std::max<double>(h0, r);
                            for (std::int64_t cc = c0; cc <= c1; cc++) {
                                double wc = std::min<double>(w1, cc + 1) - std::max<double>(w0, cc);
                                acc += wr * wc * static_cast<double>(x.at(b, c, t, r, cc));
                            }
                        }
                        out.at(b, c, t, i, j) = static_cast<float>(acc / (sh * sw));
                    }
                }
    return out;
}

Latent resample_nearest_to(const Latent& x, std::int64_t new_h, std::int64_t new_w) {
    if (new_h < 1 || new_w < 1) throw DimensionError("nearest resample target must be positive");
    LatentDims od = x.dims;
    od.h = new_h;
    od.w = new_w;
    Latent out(od);
    for (std::int64_t b = 0; b < od.b; b++)
        for (std::int64_t c = 0; c < od.c; c++)
            for (std::int64_t t = 0; t < od.t; t++)
                for (std::int64_t i = 0; i < new_h; i++)
                    for (std::int64_t j = 0; j < new_w; j++)
                        out.at(b, c, t, i, j) = x.at(b, c, t, i * x.dims.h / new_h, j * x.dims.w / new_w);
    return out;
}

ChannelStats section_stats(const Latent& x) {
    ChannelStats s;
    s.mean.assign(static_cast<std::size_t>(x.dims.c), 0.0);
    s.var.assign(static_cast<std::size_t>(x.dims.c), 0.0);
    std::int64_t n = x.dims.b * x.dims.t * x.dims.h * x.dims.w;
    if (n == 0) return s;
    for (std::int64_t c = 0; c < x.dims.c; c++) {
        double acc = 0.0;
        for (std::int64_t b = 0; b < x.dims.b; b++)
            for (std::int64_t t = 0; t < x.dims.t; t++)
                for (std::int64_t h = 0; h < x.dims.h; h++)
                    for (std::int64_t w = 0; w < x.dims.w; w++) acc += static_cast<double>(x.at(b, c, t, h, w));
        double mean = acc / static_cast<double>(n);
        double acc2 = 0.0;
        for (std::int64_t b = 0; b < x.dims.b; b++)
            for (std::int64_t t = 0; t < x.dims.t; t++)
                for (std::int64_t h = 0; h < x.dims.h; h++)
                    for (std::int64_t w = 0; w < x.dims.w; w++) {
                        double d = static_cast<double>(x.at(b, c, t, h, w)) - mean;
                        acc2 += d * d;
                    }
        s.mean[static_cast<std::size_t>(c)] = mean;
        s.var[static_cast<std::size_t>(c)] = acc2 / static_cast<double>(n);
    }
    return s;
}

namespace {

constexpr char kMagic[4] = {'H', 'L', 'A', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

std::uint32_t get_u32(std::istream& is, const std::string& path) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw TruncatedError(path + ": truncated header");
    return v;
}

std::uint64_t get_u64(std::istream& is, const std::string& path) {
    std::uint64_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 8)) throw TruncatedError(path + ": truncated header");
    return v;
}

}  // namespace

void write_latent(const std::string& path, const Latent& x) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    put_u32(os, 5);
    put_u64(os, static_cast<std::uint64_t>(x.dims.b));
    put_u64(os, static_cast<std::uint64_t>(x.dims.c));
    put_u64(os, static_cast<std::uint64_t>(x.dims.t));
    put_u64(os, static_cast<std::uint64_t>(x.dims.h));
    put_u64(os, static_cast<std::uint64_t>(x.dims.w));
    os.write(reinterpret_cast<const char*>(x.data.data()),
             static_cast<std::streamsize>(x.data.size() * sizeof(float)));
    if (!os) throw IoError("short write to " + path);
}

Latent read_latent(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4] = {};
    if (!is.read(magic, 4)) throw TruncatedError(path + ": shorter than magic");
    if (std::memcmp(magic, kMagic, 4) != 0) throw BadMagicError(path + ": not a latent container");
    std::uint32_t version = get_u32(is, path);
    if (version != kVersion)
        throw VersionError(path + ": container version " + std::to_string(version) + ", expected " +
                           std::to_string(kVersion));
    std::uint32_t rank = get_u32(is, path);
    if (rank != 5) throw VersionError(path + ": rank " + std::to_string(rank) + ", expected 5");
    LatentDims d;
    d.b = static_cast<std::int64_t>(get_u64(is, path));
    d.c = static_cast<std::int64_t>(get_u64(is, path));
    d.t = static_cast<std::int64_t>(get_u64(is, path));
    d.h = static_cast<std::int64_t>(get_u64(is, path));
    d.w = static_cast<std::int64_t>(get_u64(is, path));
    if (d.elems() < 0 || d.b < 0 || d.c < 0 || d.t < 0 || d.h < 0 || d.w < 0)
        throw IoError(path + ": bad dims " + d.str());
    Latent x(d);
    if (!is.read(reinterpret_cast<char*>(x.data.data()), static_cast<std::streamsize>(x.data.size() * sizeof(float))))
        throw TruncatedError(path + ": payload shorter than dims " + d.str());
    if (!all_finite(x)) throw NumericError(path + ": non-finite payload");
    return x;
}

Latent seeded_gaussian(LatentDims dims, std::uint64_t seed) {
    Latent x(dims);
    Rng rng(seed);
    for (auto& v : x.data) v = static_cast<float>(rng.normal());
    return x;
}

void copy_frame(Latent& dst, std::int64_t t_dst, const Latent& src, std::int64_t t_src) {
    if (dst.dims.b != src.dims.b || dst.dims.c != src.dims.c || dst.dims.h != src.dims.h || dst.dims.w != src.dims.w)
        throw DimensionError("frame copy between incompatible dims " + dst.dims.str() + " and " + src.dims.str());
    for (std::int64_t b = 0; b < dst.dims.b; b++)
        for (std::int64_t c = 0; c < dst.dims.c; c++)
            for (std::int64_t h = 0; h < dst.dims.h; h++)
                for (std::int64_t w = 0; w < dst.dims.w; w++) dst.at(b, c, t_dst, h, w) = src.at(b, c, t_src, h, w);
}

void zero_frame(Latent& x, std::int64_t t) {
    for (std::int64_t b = 0; b < x.dims.b; b++)
        for (std::int64_t c = 0; c < x.dims.c; c++)
            for (std::int64_t h = 0; h < x.dims.h; h++)
                for (std::int64_t w = 0; w < x.dims.w; w++) x.at(b, c, t, h, w) = 0.0f;
}

bool frame_is_zero(const Latent& x, std::int64_t t) {
    for (std::int64_t b = 0; b < x.dims.b; b++)
        for (std::int64_t c = 0; c < x.dims.c; c++)
            for (std::int64_t h = 0; h < x.dims.h; h++)
                for (std::int64_t w = 0; w < x.dims.w; w++)
                    if (x.at(b, c, t, h, w) != 0.0f) return false;
    return true;
}

void scale_frame(Latent& x, std::int64_t t, float gain) {
    for (std::int64_t b = 0; b < x.dims.b; b++)
        for (std::int64_t c = 0; c < x.dims.c; c++)
            for (std::int64_t h = 0; h < x.dims.h; h++)
                for (std::int64_t w = 0; w < x.dims.w; w++) x.at(b, c, t, h, w) *= gain;
}

bool all_finite(const Latent& x) {
    for (float v : x.data)
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace latflow
