#pragma once

#include <bit>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "latflow/errors.hpp"
#include "latflow/rng.hpp"

namespace latflow {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

// Axes are (batch, channel, time, height, width), row-major, width fastest.
struct LatentDims {
    std::int64_t b = 0, c = 0, t = 0, h = 0, w = 0;

    std::int64_t elems() const { return b * c * t * h * w; }
    std::int64_t frame_elems() const { return b * c * h * w; }
    bool operator==(const LatentDims&) const = default;
    std::string str() const;
};

// Video latent section. Payload is f32; statistics and losses accumulate in f64.
struct Latent {
    LatentDims dims;
    std::vector<float> data;

    Latent() = default;
    explicit Latent(LatentDims d) : dims(d), data(static_cast<std::size_t>(d.elems()), 0.0f) {}

    float& at(std::int64_t b, std::int64_t c, std::int64_t t, std::int64_t h, std::int64_t w) {
        return data[static_cast<std::size_t>((((b * dims.c + c) * dims.t + t) * dims.h + h) * dims.w + w)];
    }
    float at(std::int64_t b, std::int64_t c, std::int64_t t, std::int64_t h, std::int64_t w) const {
        return data[static_cast<std::size_t>((((b * dims.c + c) * dims.t + t) * dims.h + h) * dims.w + w)];
    }
};

// Same layout at f64, used inside the network and the sampler so integration
// exactness and gradient checks are not limited by f32 rounding.
struct DLatent {
    LatentDims dims;
    std::vector<double> data;

    DLatent() = default;
    explicit DLatent(LatentDims d) : dims(d), data(static_cast<std::size_t>(d.elems()), 0.0) {}

    double& at(std::int64_t b, std::int64_t c, std::int64_t t, std::int64_t h, std::int64_t w) {
        return data[static_cast<std::size_t>((((b * dims.c + c) * dims.t + t) * dims.h + h) * dims.w + w)];
    }
    double at(std::int64_t b, std::int64_t c, std::int64_t t, std::int64_t h, std::int64_t w) const {
        return data[static_cast<std::size_t>((((b * dims.c + c) * dims.t + t) * dims.h + h) * dims.w + w)];
    }
};

DLatent widen(const Latent& x);
Latent narrow(const DLatent& x);

struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> var;  // population variance
};

namespace detail {

template <class Tensor>
Tensor upsample_nearest_impl(const Tensor& x, std::int64_t f) {
    if (f < 1) throw DimensionError("upsample factor must be >= 1");
    LatentDims od = x.dims;
    od.h *= f;
    od.w *= f;
    Tensor out(od);
    for (std::int64_t b = 0; b < od.b; b++)
        for (std::int64_t c = 0; c < od.c; c++)
            for (std::int64_t t = 0; t < od.t; t++)
                for (std::int64_t h = 0; h < od.h; h++)
                    for (std::int64_t w = 0; w < od.w; w++)
                        out.at(b, c, t, h, w) = x.at(b, c, t, h / f, w / f);
    return out;
}

template <class Tensor>
Tensor downsample_area_impl(const Tensor& x, std::int64_t f) {
    if (f < 1) throw DimensionError("downsample factor must be >= 1");
    if (x.dims.h % f != 0 || x.dims.w % f != 0)
        throw DimensionError("spatial dims " + x.dims.str() + " not divisible by factor " + std::to_string(f));
    LatentDims od = x.dims;
    od.h /= f;
    od.w /= f;
    Tensor out(od);
    double inv = 1.0 / static_cast<double>(f * f);
    for (std::int64_t b = 0; b < od.b; b++)
        for (std::int64_t c = 0; c < od.c; c++)
            for (std::int64_t t = 0; t < od.t; t++)
                for (std::int64_t h = 0; h < od.h; h++)
                    for (std::int64_t w = 0; w < od.w; w++) {
                        double acc = 0.0;
                        for (std::int64_t i = 0; i < f; i++)
                            for (std::int64_t j = 0; j < f; j++)
                                acc += static_cast<double>(x.at(b, c, t, h * f + i, w * f + j));
                        using Elem = std::remove_reference_t<decltype(out.at(0, 0, 0, 0, 0))>;
                        out.at(b, c, t, h, w) = static_cast<Elem>(acc * inv);
                    }
    return out;
}

}  // namespace detail

inline Latent upsample_nearest(const Latent& x, std::int64_t factor) { return detail::upsample_nearest_impl(x, factor); }
inline DLatent upsample_nearest(const DLatent& x, std::int64_t factor) { return detail::upsample_nearest_impl(x, factor); }
inline Latent downsample_area(const Latent& x, std::int64_t factor) { return detail::downsample_area_impl(x, factor); }
inline DLatent downsample_area(const DLatent& x, std::int64_t factor) { return detail::downsample_area_impl(x, factor); }

// Box-filter resample to an arbitrary smaller spatial size (fractional overlap
// weights), and nearest-neighbor back up. Together these implement the
// down-up history corruption; new size == old size is the identity.
Latent resample_area_to(const Latent& x, std::int64_t new_h, std::int64_t new_w);
Latent resample_nearest_to(const Latent& x, std::int64_t new_h, std::int64_t new_w);

ChannelStats section_stats(const Latent& x);

// Container format, version 1: magic "HLAT", u32 version, u32 rank (always 5),
// five u64 dims (B,C,T,H,W), then B*C*T*H*W little-endian f32, width fastest.
void write_latent(const std::string& path, const Latent& x);
Latent read_latent(const std::string& path);

// Standard normal fill from the SplitMix64 counter stream; same (dims, seed)
// gives the same tensor within a build.
Latent seeded_gaussian(LatentDims dims, std::uint64_t seed);

// Frame helpers (time-slice utilities used by history assembly and corruption).
void copy_frame(Latent& dst, std::int64_t t_dst, const Latent& src, std::int64_t t_src);
void zero_frame(Latent& x, std::int64_t t);
bool frame_is_zero(const Latent& x, std::int64_t t);
void scale_frame(Latent& x, std::int64_t t, float gain);

bool all_finite(const Latent& x);

}  // namespace latflow
