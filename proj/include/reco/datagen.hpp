#pragma once

// Procedural paired videos for the four editing tasks. A scene is a static
// textured background plus shapes moving on straight lines; every pair is a
// deterministic function of (task, seed, dims).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "reco/array_io.hpp"
#include "reco/instruction.hpp"
#include "reco/latents.hpp"

namespace reco {

struct VideoDims {
    std::size_t frames = 4, height = 32, width = 32;
    bool operator==(const VideoDims&) const = default;
};

struct Rgb {
    float r, g, b;
};

inline constexpr std::array<Rgb, kNumColors> kPalette = {{{0.90f, 0.10f, 0.10f},
                                                          {0.10f, 0.80f, 0.20f},
                                                          {0.15f, 0.25f, 0.95f},
                                                          {0.95f, 0.90f, 0.10f},
                                                          {0.60f, 0.10f, 0.80f},
                                                          {1.00f, 0.55f, 0.00f},
                                                          {0.97f, 0.97f, 0.97f},
                                                          {0.10f, 0.90f, 0.90f}}};

struct ShapeSpec {
    ObjectRef object;
    float size = 3;       // half extent in pixels
    float x0 = 0, y0 = 0;  // center at frame 0
    float vx = 0, vy = 0;  // pixels per frame

    float cx(std::size_t f) const { return x0 + vx * static_cast<float>(f); }
    float cy(std::size_t f) const { return y0 + vy * static_cast<float>(f); }

    bool covers(std::size_t f, std::size_t row, std::size_t col) const {
        const float dx = static_cast<float>(col) + 0.5f - cx(f);
        const float dy = static_cast<float>(row) + 0.5f - cy(f);
        switch (object.shape) {
            case ShapeKind::square: return std::abs(dx) <= size && std::abs(dy) <= size;
            case ShapeKind::circle: return dx * dx + dy * dy <= size * size;
            case ShapeKind::triangle: return dy >= -size && dy <= size && std::abs(dx) <= 0.5f * (dy + size);
        }
        return false;
    }

    // 16 classes: start quadrant x motion quadrant
    std::uint8_t trajectory_id(const VideoDims& d) const {
        unsigned q = (x0 >= static_cast<float>(d.width) / 2 ? 1u : 0u) + (y0 >= static_cast<float>(d.height) / 2 ? 2u : 0u);
        unsigned m = (vx >= 0 ? 1u : 0u) + (vy >= 0 ? 2u : 0u);
        return static_cast<std::uint8_t>(q * 4 + m);
    }
};

struct SceneSpec {
    VideoDims dims;
    std::uint8_t background = 0;
    std::vector<ShapeSpec> shapes;  // drawn in order
};

struct SamplePair {
    PixelVideo source;
    PixelVideo target;
    PixelMask pixel_mask;
    Instruction instruction;
    Task task = Task::add;
    std::uint64_t seed = 0;

    bool operator==(const SamplePair&) const = default;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Per-sample seed for shard position i.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t i) {
    return splitmix64(master + 0x9e3779b97f4a7c15ULL * (i + 1));
}

inline constexpr std::size_t kCodecFactor = 4;

inline void validate_dims(const VideoDims& d) {
    if (d.frames == 0 || d.height < 16 || d.width < 16 || d.height % kCodecFactor || d.width % kCodecFactor)
        throw ShapeError("datagen: dims must be >= 16 pixels and divisible by " + std::to_string(kCodecFactor));
}

inline Rgb background_color(std::uint8_t bg, std::size_t row, std::size_t col, const VideoDims& d) {
    const float u = static_cast<float>(row) / static_cast<float>(d.height);
    switch (bg % 4) {
        case 0: return {0.20f + 0.25f * u, 0.25f, 0.35f - 0.15f * u};
        case 1: return (row / 4) % 2 ? Rgb{0.35f, 0.30f, 0.25f} : Rgb{0.25f, 0.30f, 0.35f};
        case 2: return ((row / 8) + (col / 8)) % 2 ? Rgb{0.30f, 0.35f, 0.30f} : Rgb{0.40f, 0.35f, 0.30f};
        default: return {0.30f, 0.30f, 0.30f};
    }
}

inline PixelVideo render(const SceneSpec& s, const std::vector<ShapeSpec>& shapes) {
    const auto& d = s.dims;
    PixelVideo v(d.frames, d.height, d.width);
    for (std::size_t f = 0; f < d.frames; ++f)
        for (std::size_t r = 0; r < d.height; ++r)
            for (std::size_t c = 0; c < d.width; ++c) {
                Rgb px = background_color(s.background, r, c, d);
                for (const auto& sh : shapes)
                    if (sh.covers(f, r, c)) px = kPalette[sh.object.color];
                v.at(f, r, c, 0) = px.r;
                v.at(f, r, c, 1) = px.g;
                v.at(f, r, c, 2) = px.b;
            }
    return v;
}

/// Footprint of the given shapes, dilated by one pixel (3x3) in every frame.
inline PixelMask dilated_footprint(const VideoDims& d, const std::vector<ShapeSpec>& shapes) {
    PixelMask fp(d.frames, d.height, d.width), out(d.frames, d.height, d.width);
    for (std::size_t f = 0; f < d.frames; ++f)
        for (std::size_t r = 0; r < d.height; ++r)
            for (std::size_t c = 0; c < d.width; ++c)
                for (const auto& sh : shapes)
                    if (sh.covers(f, r, c)) fp.at(f, r, c) = 1;
    for (std::size_t f = 0; f < d.frames; ++f)
        for (std::size_t r = 0; r < d.height; ++r)
            for (std::size_t c = 0; c < d.width; ++c) {
                if (!fp.at(f, r, c)) continue;
                for (std::size_t rr = r ? r - 1 : 0; rr <= std::min(r + 1, d.height - 1); ++rr)
                    for (std::size_t cc = c ? c - 1 : 0; cc <= std::min(c + 1, d.width - 1); ++cc) out.at(f, rr, cc) = 1;
            }
    return out;
}

namespace detail {

inline ShapeSpec random_shape(std::mt19937_64& g, const VideoDims& d) {
    std::uniform_int_distribution<int> kind(0, static_cast<int>(kNumShapes) - 1);
    std::uniform_int_distribution<int> color(0, static_cast<int>(kNumColors) - 1);
    const float lo = 3.f, hi = std::max(lo, static_cast<float>(std::min(d.height, d.width)) / 6.f);
    ShapeSpec s;
    s.object.shape = static_cast<ShapeKind>(kind(g));
    s.object.color = static_cast<std::uint8_t>(color(g));
    s.size = std::uniform_real_distribution<float>(lo, hi)(g);
    // keep the bounding box inside the frame at the first and last frame
    const float xmin = s.size, xmax = static_cast<float>(d.width) - s.size;
    const float ymin = s.size, ymax = static_cast<float>(d.height) - s.size;
    std::uniform_real_distribution<float> ux(xmin, xmax), uy(ymin, ymax);
    const float xs = ux(g), ys = uy(g), xe = ux(g), ye = uy(g);
    const float span = d.frames > 1 ? static_cast<float>(d.frames - 1) : 1.f;
    s.x0 = xs;
    s.y0 = ys;
    s.vx = d.frames > 1 ? (xe - xs) / span : 0.f;
    s.vy = d.frames > 1 ? (ye - ys) / span : 0.f;
    return s;
}

}  // namespace detail

/// Scene with base shapes plus a designated subject (shapes.back()), the
/// subject's replacement, and a style choice, all derived from the seed.
struct SceneFamily {
    SceneSpec scene;        // background + base shapes
    ShapeSpec subject;      // added / removed / replaced object
    ShapeSpec replacement;  // same trajectory, different object
    StyleKind style = StyleKind::grayscale;
};

inline SceneFamily make_scene_family(std::uint64_t seed, const VideoDims& d) {
    validate_dims(d);
    std::mt19937_64 g(seed);
    SceneFamily fam;
    fam.scene.dims = d;
    fam.scene.background = static_cast<std::uint8_t>(std::uniform_int_distribution<int>(0, 3)(g));
    const int base = std::uniform_int_distribution<int>(1, 2)(g);
    for (int i = 0; i < base; ++i) fam.scene.shapes.push_back(detail::random_shape(g, d));
    fam.subject = detail::random_shape(g, d);
    fam.replacement = fam.subject;
    do {
        fam.replacement.object.shape = static_cast<ShapeKind>(std::uniform_int_distribution<int>(0, kNumShapes - 1)(g));
        fam.replacement.object.color = static_cast<std::uint8_t>(std::uniform_int_distribution<int>(0, kNumColors - 1)(g));
    } while (fam.replacement.object == fam.subject.object);
    fam.style = static_cast<StyleKind>(std::uniform_int_distribution<int>(0, kNumStyles - 1)(g));
    return fam;
}

inline Rgb apply_style(StyleKind s, Rgb p) {
    switch (s) {
        case StyleKind::grayscale: {
            const float l = luminance(p.r, p.g, p.b);
            return {l, l, l};
        }
        case StyleKind::hue_rotate: return {p.b, p.r, p.g};
        case StyleKind::sepia:
            return {std::min(1.f, 0.393f * p.r + 0.769f * p.g + 0.189f * p.b),
                    std::min(1.f, 0.349f * p.r + 0.686f * p.g + 0.168f * p.b),
                    std::min(1.f, 0.272f * p.r + 0.534f * p.g + 0.131f * p.b)};
        case StyleKind::invert: return {1.f - p.r, 1.f - p.g, 1.f - p.b};
    }
    return p;
}

inline PixelVideo stylize(const PixelVideo& v, StyleKind s) {
    PixelVideo out = v;
    for (std::size_t i = 0; i < v.values.size(); i += 3) {
        Rgb p = apply_style(s, {v.values[i], v.values[i + 1], v.values[i + 2]});
        out.values[i] = p.r;
        out.values[i + 1] = p.g;
        out.values[i + 2] = p.b;
    }
    return out;
}

inline SamplePair generate_pair(Task task, std::uint64_t seed, const VideoDims& d) {
    const SceneFamily fam = make_scene_family(seed, d);
    auto with = [&](const ShapeSpec& s) {
        auto v = fam.scene.shapes;
        v.push_back(s);
        return v;
    };
    SamplePair p;
    p.task = task;
    p.seed = seed;
    p.instruction.task = task;
    const auto traj = fam.subject.trajectory_id(d);
    switch (task) {
        case Task::add:
        case Task::remove: {
            p.source = render(fam.scene, fam.scene.shapes);
            p.target = render(fam.scene, with(fam.subject));
            p.pixel_mask = dilated_footprint(d, {fam.subject});
            p.instruction.subject = fam.subject.object;
            p.instruction.trajectory = traj;
            if (task == Task::remove) std::swap(p.source, p.target);
            break;
        }
        case Task::replace:
            p.source = render(fam.scene, with(fam.subject));
            p.target = render(fam.scene, with(fam.replacement));
            p.pixel_mask = dilated_footprint(d, {fam.subject, fam.replacement});
            p.instruction.subject = fam.subject.object;
            p.instruction.object2 = fam.replacement.object;
            p.instruction.trajectory = traj;
            break;
        case Task::style:
            p.source = render(fam.scene, with(fam.subject));
            p.target = stylize(p.source, fam.style);
            p.pixel_mask = PixelMask(d.frames, d.height, d.width, 1);
            p.instruction.style = fam.style;
            break;
    }
    p.instruction.validate();
    return p;
}

/// Swaps source and target: replace(A->B) becomes replace(B->A), add and
/// remove trade places. The mask is unchanged.
inline SamplePair augment_reversible(const SamplePair& in) {
    if (in.task == Task::style) throw ValidationError("augment_reversible: style pairs are not reversible");
    SamplePair out = in;
    std::swap(out.source, out.target);
    switch (in.task) {
        case Task::add: out.task = Task::remove; break;
        case Task::remove: out.task = Task::add; break;
        case Task::replace: std::swap(out.instruction.subject, out.instruction.object2); break;
        case Task::style: break;
    }
    out.instruction.task = out.task;
    return out;
}

/// From replace (bg+A -> bg+B) and remove (bg+A -> bg) of one scene, builds
/// add (bg -> bg+B) and remove (bg+B -> bg).
inline std::pair<SamplePair, SamplePair> augment_cross_task(const SamplePair& replace_pair, const SamplePair& remove_pair) {
    if (replace_pair.task != Task::replace || remove_pair.task != Task::remove)
        throw ValidationError("augment_cross_task: expected a replace pair and a remove pair");
    if (replace_pair.seed != remove_pair.seed || !(replace_pair.source == remove_pair.source) ||
        replace_pair.instruction.subject != remove_pair.instruction.subject)
        throw ValidationError("augment_cross_task: pairs do not share a scene and removed subject");
    const VideoDims d{replace_pair.source.frames, replace_pair.source.height, replace_pair.source.width};
    const SceneFamily fam = make_scene_family(replace_pair.seed, d);
    SamplePair add;
    add.task = Task::add;
    add.seed = replace_pair.seed;
    add.source = remove_pair.target;
    add.target = replace_pair.target;
    add.pixel_mask = dilated_footprint(d, {fam.replacement});
    add.instruction.task = Task::add;
    add.instruction.subject = replace_pair.instruction.object2;
    add.instruction.trajectory = replace_pair.instruction.trajectory;
    return {add, augment_reversible(add)};
}

// ---- shard container ----------------------------------------------------
//
// "RCVD", u16 version, u32 count, samples..., index block, u64 index offset.
// Sample: u8 task, u64 seed, instruction record (u8 flags + 6 bytes),
// source / target arrays (f32, F x H x W x 3), mask array (u8, F x H x W).
// Index block: "RIDX", u64 master seed, u32 count, u64 offsets[count],
// u32 histogram[4].

inline constexpr std::uint16_t kShardVersion = 1;

struct ShardIndex {
    std::uint32_t count = 0;
    std::vector<std::uint64_t> offsets;
    std::array<std::uint32_t, kNumTasks> histogram{};
    std::uint64_t master_seed = 0;
    bool operator==(const ShardIndex&) const = default;
};

struct Shard {
    std::vector<SamplePair> pairs;
    ShardIndex index;
};

namespace detail {

inline void write_instruction(io::ByteWriter& w, const Instruction& in) {
    std::uint8_t flags = (in.subject ? 1 : 0) | (in.object2 ? 2 : 0) | (in.style ? 4 : 0) | (in.trajectory ? 8 : 0);
    w.u8(flags);
    w.u8(in.subject ? static_cast<std::uint8_t>(in.subject->shape) : 0);
    w.u8(in.subject ? in.subject->color : 0);
    w.u8(in.object2 ? static_cast<std::uint8_t>(in.object2->shape) : 0);
    w.u8(in.object2 ? in.object2->color : 0);
    w.u8(in.style ? static_cast<std::uint8_t>(*in.style) : 0);
    w.u8(in.trajectory ? *in.trajectory : 0);
}

inline Instruction read_instruction(io::ByteReader& r, Task task) {
    Instruction in;
    in.task = task;
    const auto flags = r.u8();
    const auto s_shape = r.u8(), s_color = r.u8(), o_shape = r.u8(), o_color = r.u8(), style = r.u8(), traj = r.u8();
    if (flags & 1) in.subject = ObjectRef{static_cast<ShapeKind>(s_shape), s_color};
    if (flags & 2) in.object2 = ObjectRef{static_cast<ShapeKind>(o_shape), o_color};
    if (flags & 4) in.style = static_cast<StyleKind>(style);
    if (flags & 8) in.trajectory = traj;
    try {
        in.validate();
    } catch (const ValidationError& e) {
        throw FormatError::malformed(std::string("shard instruction record: ") + e.what());
    }
    return in;
}

inline void write_video(io::ByteWriter& w, const PixelVideo& v) {
    const std::uint32_t dims[] = {static_cast<std::uint32_t>(v.frames), static_cast<std::uint32_t>(v.height),
                                  static_cast<std::uint32_t>(v.width), 3};
    io::write_array(w, dims, std::span<const float>(v.values));
}

inline PixelVideo read_video(io::ByteReader& r) {
    auto a = io::read_array(r);
    if (a.dtype != io::DType::f32 || a.dims.size() != 4 || a.dims[3] != 3)
        throw FormatError::malformed("video block must be f32 F x H x W x 3");
    PixelVideo v;
    v.frames = a.dims[0];
    v.height = a.dims[1];
    v.width = a.dims[2];
    v.values = std::move(a.f32);
    return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_shard(const std::vector<SamplePair>& pairs, std::uint64_t master_seed,
                                              ShardIndex* index_out = nullptr) {
    if (pairs.empty()) throw ValidationError("write_shard: no pairs");
    io::ByteWriter w;
    w.tag("RCVD");
    w.u16(kShardVersion);
    w.u32(static_cast<std::uint32_t>(pairs.size()));
    ShardIndex idx;
    idx.count = static_cast<std::uint32_t>(pairs.size());
    idx.master_seed = master_seed;
    for (const auto& p : pairs) {
        idx.offsets.push_back(w.size());
        idx.histogram[static_cast<std::size_t>(p.task)] += 1;
        w.u8(static_cast<std::uint8_t>(p.task));
        w.u64(p.seed);
        detail::write_instruction(w, p.instruction);
        detail::write_video(w, p.source);
        detail::write_video(w, p.target);
        const std::uint32_t md[] = {static_cast<std::uint32_t>(p.pixel_mask.frames),
                                    static_cast<std::uint32_t>(p.pixel_mask.height),
                                    static_cast<std::uint32_t>(p.pixel_mask.width)};
        io::write_array(w, md, std::span<const std::uint8_t>(p.pixel_mask.values));
    }
    const std::uint64_t index_at = w.size();
    w.tag("RIDX");
    w.u64(master_seed);
    w.u32(idx.count);
    for (auto o : idx.offsets) w.u64(o);
    for (auto h : idx.histogram) w.u32(h);
    w.u64(index_at);
    if (index_out) *index_out = idx;
    return w.data();
}

inline Shard decode_shard(std::span<const std::uint8_t> data) {
    io::ByteReader r(data);
    if (data.size() < 4) throw FormatError::truncated("shard: shorter than its magic");
    if (!r.tag("RCVD")) throw FormatError::magic("shard: bad magic (expected RCVD)");
    const auto version = r.u16();
    if (version != kShardVersion)
        throw FormatError::version("shard: version " + std::to_string(version) + ", expected " +
                                   std::to_string(kShardVersion));
    const auto count = r.u32();
    Shard s;
    s.pairs.reserve(count);
    std::vector<std::uint64_t> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        seen.push_back(r.pos());
        SamplePair p;
        const auto task = r.u8();
        if (task >= kNumTasks) throw FormatError::malformed("shard: task byte " + std::to_string(task));
        p.task = static_cast<Task>(task);
        p.seed = r.u64();
        p.instruction = detail::read_instruction(r, p.task);
        p.source = detail::read_video(r);
        p.target = detail::read_video(r);
        auto m = io::read_array(r);
        if (m.dtype != io::DType::u8 || m.dims.size() != 3) throw FormatError::malformed("shard: mask block must be u8 rank 3");
        p.pixel_mask = PixelMask(m.dims[0], m.dims[1], m.dims[2]);
        p.pixel_mask.values = std::move(m.u8);
        s.pairs.push_back(std::move(p));
    }
    if (!r.tag("RIDX")) throw FormatError::malformed("shard: missing index block");
    s.index.master_seed = r.u64();
    s.index.count = r.u32();
    if (s.index.count != count) throw FormatError::malformed("shard: index count disagrees with header");
    for (std::uint32_t i = 0; i < count; ++i) s.index.offsets.push_back(r.u64());
    for (auto& h : s.index.histogram) h = r.u32();
    r.u64();
    if (s.index.offsets != seen) throw FormatError::malformed("shard: index offsets disagree with sample layout");
    return s;
}

inline ShardIndex write_shard(const std::vector<SamplePair>& pairs, const std::string& path, std::uint64_t master_seed = 0) {
    ShardIndex idx;
    io::write_file(path, encode_shard(pairs, master_seed, &idx));
    return idx;
}

inline Shard read_shard(const std::string& path) {
    const auto bytes = io::read_file(path);
    return decode_shard(bytes);
}

/// Balanced shard: task of sample i is i mod 4, seed derived from the
/// master seed.
inline std::vector<SamplePair> generate_shard(std::uint64_t master_seed, std::size_t size, const VideoDims& d) {
    std::vector<SamplePair> pairs;
    pairs.reserve(size);
    for (std::size_t i = 0; i < size; ++i)
        pairs.push_back(generate_pair(static_cast<Task>(i % kNumTasks), derive_seed(master_seed, i), d));
    return pairs;
}

}  // namespace reco
