#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "reco/errors.hpp"

namespace reco {

struct GridDims {
    std::size_t frames = 1, height = 1, width = 1, channels = 1;

    std::size_t cells() const { return frames * height * width; }
    std::size_t size() const { return cells() * channels; }
    bool operator==(const GridDims&) const = default;

    std::string str() const {
        return std::to_string(frames) + "x" + std::to_string(height) + "x" + std::to_string(width) + "x" +
               std::to_string(channels);
    }
};

/// Dense video latent, row-major over (frame, row, column, channel).
/// Viewed as a token matrix it is cells() x channels, one token per cell.
template <class T>
class LatentGrid {
public:
    LatentGrid() = default;

    explicit LatentGrid(GridDims dims, T fill = T(0)) : dims_(dims), values_(dims.size(), fill) { check_dims(); }

    LatentGrid(GridDims dims, std::vector<T> values) : dims_(dims), values_(std::move(values)) {
        check_dims();
        if (values_.size() != dims_.size())
            throw ShapeError("LatentGrid: " + std::to_string(values_.size()) + " values for dims " + dims_.str());
        for (T v : values_)
            if (!std::isfinite(v)) throw NumericError("LatentGrid: non-finite value");
    }

    const GridDims& dims() const { return dims_; }
    std::size_t frames() const { return dims_.frames; }
    std::size_t height() const { return dims_.height; }
    std::size_t width() const { return dims_.width; }
    std::size_t channels() const { return dims_.channels; }
    std::size_t size() const { return values_.size(); }

    std::size_t offset(std::size_t f, std::size_t r, std::size_t c, std::size_t ch) const {
        return ((f * dims_.height + r) * dims_.width + c) * dims_.channels + ch;
    }
    T& at(std::size_t f, std::size_t r, std::size_t c, std::size_t ch) { return values_[offset(f, r, c, ch)]; }
    T at(std::size_t f, std::size_t r, std::size_t c, std::size_t ch) const { return values_[offset(f, r, c, ch)]; }

    std::vector<T>& values() { return values_; }
    const std::vector<T>& values() const { return values_; }

    bool operator==(const LatentGrid&) const = default;

    template <class U>
    LatentGrid<U> cast() const {
        return LatentGrid<U>(dims_, std::vector<U>(values_.begin(), values_.end()));
    }

private:
    void check_dims() const {
        if (dims_.frames == 0 || dims_.height == 0 || dims_.width == 0 || dims_.channels == 0)
            throw ShapeError("LatentGrid: every dimension must be >= 1, got " + dims_.str());
    }

    GridDims dims_{};
    std::vector<T> values_{T(0)};
};

/// Source and target latents side by side along width.
template <class T>
struct InContextLatent {
    LatentGrid<T> grid;
    std::size_t single_width = 0;

    GridDims half_dims() const {
        auto d = grid.dims();
        d.width = single_width;
        return d;
    }
    bool operator==(const InContextLatent&) const = default;
};

/// Binary per-cell map over (frame, row, column); shared by pixel masks and
/// latent edit masks.
struct BinaryGrid {
    std::size_t frames = 0, height = 0, width = 0;
    std::vector<std::uint8_t> values;

    BinaryGrid() = default;
    BinaryGrid(std::size_t f, std::size_t h, std::size_t w, std::uint8_t fill = 0)
        : frames(f), height(h), width(w), values(f * h * w, fill) {}

    std::size_t cells() const { return values.size(); }
    std::size_t index(std::size_t f, std::size_t r, std::size_t c) const { return (f * height + r) * width + c; }
    std::uint8_t& at(std::size_t f, std::size_t r, std::size_t c) { return values[index(f, r, c)]; }
    std::uint8_t at(std::size_t f, std::size_t r, std::size_t c) const { return values[index(f, r, c)]; }
    std::size_t count() const { return static_cast<std::size_t>(std::count(values.begin(), values.end(), 1)); }
    bool operator==(const BinaryGrid&) const = default;

    void validate_binary(const char* what) const {
        if (values.size() != frames * height * width) throw ShapeError(std::string(what) + ": size mismatch");
        for (auto v : values)
            if (v > 1) throw ValidationError(std::string(what) + ": values must be 0 or 1");
    }
};

/// Pixel-resolution editing mask.
struct PixelMask : BinaryGrid {
    using BinaryGrid::BinaryGrid;
};

/// Latent-resolution editing mask M (1 = edit region), broadcast over channels.
struct EditMask : BinaryGrid {
    using BinaryGrid::BinaryGrid;
};

/// RGB video with values in [0,1], row-major over (frame, row, column, rgb).
struct PixelVideo {
    std::size_t frames = 0, height = 0, width = 0;
    std::vector<float> values;

    static constexpr std::size_t channels = 3;

    PixelVideo() = default;
    PixelVideo(std::size_t f, std::size_t h, std::size_t w, float fill = 0.f)
        : frames(f), height(h), width(w), values(f * h * w * 3, fill) {}

    std::size_t offset(std::size_t f, std::size_t r, std::size_t c, std::size_t ch) const {
        return ((f * height + r) * width + c) * 3 + ch;
    }
    float& at(std::size_t f, std::size_t r, std::size_t c, std::size_t ch) { return values[offset(f, r, c, ch)]; }
    float at(std::size_t f, std::size_t r, std::size_t c, std::size_t ch) const { return values[offset(f, r, c, ch)]; }
    bool same_dims(const PixelVideo& o) const {
        return frames == o.frames && height == o.height && width == o.width;
    }
    bool operator==(const PixelVideo&) const = default;
};

/// Token index sets over the joint (source | target) token sequence.
struct RegionPartition {
    std::vector<std::size_t> a1;  // source, edit region
    std::vector<std::size_t> a2;  // source, outside edit region
    std::vector<std::size_t> a3;  // whole target half
    std::vector<std::size_t> q;   // target, edit region
    std::size_t tokens = 0;       // length of the joint sequence

    // a1 followed by a2: every source token
    std::vector<std::size_t> source() const {
        std::vector<std::size_t> s(a1);
        s.insert(s.end(), a2.begin(), a2.end());
        std::sort(s.begin(), s.end());
        return s;
    }
};

template <class T>
InContextLatent<T> concat_widthwise(const LatentGrid<T>& src, const LatentGrid<T>& tgt) {
    if (src.dims() != tgt.dims())
        throw ShapeError("concat_widthwise: source " + src.dims().str() + " vs target " + tgt.dims().str());
    GridDims jd = src.dims();
    jd.width *= 2;
    LatentGrid<T> joint(jd);
    const std::size_t row_len = src.width() * src.channels();
    auto out = joint.values().begin();
    for (std::size_t f = 0; f < src.frames(); ++f) {
        for (std::size_t r = 0; r < src.height(); ++r) {
            auto s = src.values().begin() + static_cast<std::ptrdiff_t>(src.offset(f, r, 0, 0));
            auto t = tgt.values().begin() + static_cast<std::ptrdiff_t>(tgt.offset(f, r, 0, 0));
            out = std::copy(s, s + static_cast<std::ptrdiff_t>(row_len), out);
            out = std::copy(t, t + static_cast<std::ptrdiff_t>(row_len), out);
        }
    }
    return {std::move(joint), src.width()};
}

template <class T>
std::pair<LatentGrid<T>, LatentGrid<T>> split(const InContextLatent<T>& ic) {
    const auto& g = ic.grid;
    if (ic.single_width == 0 || g.width() != 2 * ic.single_width)
        throw ShapeError("split: joint width " + std::to_string(g.width()) + " is not twice " +
                         std::to_string(ic.single_width));
    GridDims hd = ic.half_dims();
    LatentGrid<T> src(hd), tgt(hd);
    const std::size_t row_len = hd.width * hd.channels;
    auto in = g.values().begin();
    auto so = src.values().begin();
    auto to = tgt.values().begin();
    for (std::size_t fr = 0; fr < hd.frames * hd.height; ++fr) {
        so = std::copy(in, in + static_cast<std::ptrdiff_t>(row_len), so);
        in += static_cast<std::ptrdiff_t>(row_len);
        to = std::copy(in, in + static_cast<std::ptrdiff_t>(row_len), to);
        in += static_cast<std::ptrdiff_t>(row_len);
    }
    return {std::move(src), std::move(tgt)};
}

inline float luminance(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

/// Toy codec: channels 0-2 are the block-averaged RGB, channel 3 the block
/// standard deviation of luminance.
template <class T = float>
LatentGrid<T> encode_video(const PixelVideo& v, std::size_t factor) {
    if (factor == 0 || v.height % factor != 0 || v.width % factor != 0 || v.frames == 0 || v.height == 0)
        throw ShapeError("encode_video: " + std::to_string(v.height) + "x" + std::to_string(v.width) +
                         " is not divisible by factor " + std::to_string(factor));
    LatentGrid<T> x(GridDims{v.frames, v.height / factor, v.width / factor, 4});
    const double n = static_cast<double>(factor * factor);
    for (std::size_t f = 0; f < x.frames(); ++f) {
        for (std::size_t r = 0; r < x.height(); ++r) {
            for (std::size_t c = 0; c < x.width(); ++c) {
                double sum[3] = {0, 0, 0};
                double lsum = 0, lsq = 0;
                for (std::size_t dr = 0; dr < factor; ++dr) {
                    for (std::size_t dc = 0; dc < factor; ++dc) {
                        const std::size_t pr = r * factor + dr, pc = c * factor + dc;
                        float px[3];
                        for (std::size_t ch = 0; ch < 3; ++ch) {
                            px[ch] = v.at(f, pr, pc, ch);
                            sum[ch] += px[ch];
                        }
                        double l = luminance(px[0], px[1], px[2]);
                        lsum += l;
                        lsq += l * l;
                    }
                }
                for (std::size_t ch = 0; ch < 3; ++ch) x.at(f, r, c, ch) = static_cast<T>(sum[ch] / n);
                const double mean = lsum / n;
                x.at(f, r, c, 3) = static_cast<T>(std::sqrt(std::max(0.0, lsq / n - mean * mean)));
            }
        }
    }
    return x;
}

/// Nearest-neighbour upsampling of channels 0-2, clamped to [0,1].
template <class T>
PixelVideo decode_video(const LatentGrid<T>& x, std::size_t factor) {
    if (x.channels() != 4) throw ShapeError("decode_video: expected 4 channels, got " + std::to_string(x.channels()));
    if (factor == 0) throw ShapeError("decode_video: factor must be >= 1");
    PixelVideo v(x.frames(), x.height() * factor, x.width() * factor);
    for (std::size_t f = 0; f < v.frames; ++f)
        for (std::size_t r = 0; r < v.height; ++r)
            for (std::size_t c = 0; c < v.width; ++c)
                for (std::size_t ch = 0; ch < 3; ++ch)
                    v.at(f, r, c, ch) =
                        std::clamp(static_cast<float>(x.at(f, r / factor, c / factor, ch)), 0.f, 1.f);
    return v;
}

/// Two-means on scalar values with centers seeded at the minimum and the
/// maximum. Returns 1 for members of the higher-center cluster.
inline std::vector<std::uint8_t> two_means_split(const std::vector<double>& xs) {
    std::vector<std::uint8_t> label(xs.size(), 0);
    if (xs.empty()) return label;
    auto [lo_it, hi_it] = std::minmax_element(xs.begin(), xs.end());
    double lo = *lo_it, hi = *hi_it;
    if (lo == hi) {
        std::fill(label.begin(), label.end(), static_cast<std::uint8_t>(std::round(lo) >= 1.0 ? 1 : 0));
        return label;
    }
    for (int iter = 0; iter < 100; ++iter) {
        double s0 = 0, s1 = 0;
        std::size_t n0 = 0, n1 = 0;
        // ties go to the low cluster; the slack keeps that decision stable
        // when all values are rescaled
        const double slack = 1e-12 * std::max(std::abs(lo), std::abs(hi));
        for (std::size_t i = 0; i < xs.size(); ++i) {
            label[i] = std::abs(xs[i] - lo) - std::abs(xs[i] - hi) > slack ? 1 : 0;
            (label[i] ? s1 : s0) += xs[i];
            (label[i] ? n1 : n0) += 1;
        }
        double nlo = n0 ? s0 / static_cast<double>(n0) : lo;
        double nhi = n1 ? s1 / static_cast<double>(n1) : hi;
        if (nlo == lo && nhi == hi) break;
        lo = nlo;
        hi = nhi;
    }
    return label;
}

/// Downsample a binary pixel mask to latent resolution by block averaging,
/// then binarize the averaged values with two-means clustering.
inline EditMask binarize_mask(const PixelMask& pixel_mask, std::size_t factor) {
    pixel_mask.validate_binary("binarize_mask");
    if (factor == 0 || pixel_mask.height % factor != 0 || pixel_mask.width % factor != 0)
        throw ShapeError("binarize_mask: mask dims not divisible by factor " + std::to_string(factor));
    EditMask out(pixel_mask.frames, pixel_mask.height / factor, pixel_mask.width / factor);
    std::vector<double> avg(out.cells());
    const double n = static_cast<double>(factor * factor);
    for (std::size_t f = 0; f < out.frames; ++f)
        for (std::size_t r = 0; r < out.height; ++r)
            for (std::size_t c = 0; c < out.width; ++c) {
                unsigned s = 0;
                for (std::size_t dr = 0; dr < factor; ++dr)
                    for (std::size_t dc = 0; dc < factor; ++dc)
                        s += pixel_mask.at(f, r * factor + dr, c * factor + dc);
                avg[out.index(f, r, c)] = s / n;
            }
    out.values = two_means_split(avg);
    return out;
}

/// Static mask: a cell is set in every frame if it is set in any frame.
inline EditMask union_over_time(const EditMask& m) {
    EditMask out(m.frames, m.height, m.width);
    for (std::size_t r = 0; r < m.height; ++r)
        for (std::size_t c = 0; c < m.width; ++c) {
            std::uint8_t any = 0;
            for (std::size_t f = 0; f < m.frames; ++f) any |= m.at(f, r, c);
            for (std::size_t f = 0; f < m.frames; ++f) out.at(f, r, c) = any;
        }
    return out;
}

/// Tokens are enumerated in (frame, row, joint column) order over the
/// in-context grid, so token id = (f * height + r) * 2 * single_width + c.
inline RegionPartition build_partition(const EditMask& mask, std::size_t single_width) {
    if (mask.width != single_width)
        throw ShapeError("build_partition: mask width " + std::to_string(mask.width) + " vs single width " +
                         std::to_string(single_width));
    mask.validate_binary("build_partition");
    RegionPartition p;
    const std::size_t jw = 2 * single_width;
    p.tokens = mask.frames * mask.height * jw;
    for (std::size_t f = 0; f < mask.frames; ++f)
        for (std::size_t r = 0; r < mask.height; ++r)
            for (std::size_t c = 0; c < jw; ++c) {
                const std::size_t tok = (f * mask.height + r) * jw + c;
                if (c < single_width) {
                    (mask.at(f, r, c) ? p.a1 : p.a2).push_back(tok);
                } else {
                    p.a3.push_back(tok);
                    if (mask.at(f, r, c - single_width)) p.q.push_back(tok);
                }
            }
    return p;
}

}  // namespace reco
