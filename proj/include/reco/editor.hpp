#pragma once

// Inference: joint source/target denoising of an in-context latent with the
// clean source latent as condition, then decoding of the target half.

#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>

#include <png.h>

#include "reco/array_io.hpp"
#include "reco/datagen.hpp"
#include "reco/flow.hpp"
#include "reco/model.hpp"
#include "reco/trainer.hpp"

namespace reco {

struct EditRequest {
    PixelVideo source;
    Instruction instruction;
    SamplerConfig sampler;
    std::string checkpoint_path;
};

struct EditResult {
    PixelVideo edited;
    InContextLatent<float> joint;  // final joint latent
    LatentGrid<float> source_latent;
};

inline void check_model_fits(const ModelConfig& cfg, const GridDims& half) {
    if (half.channels != cfg.latent_channels)
        throw ShapeError("edit: latent has " + std::to_string(half.channels) + " channels, model expects " +
                         std::to_string(cfg.latent_channels));
    if (half.frames > cfg.max_frames || half.height > cfg.max_height || half.width > cfg.max_width)
        throw ShapeError("edit: latent " + half.str() + " exceeds model positional range " +
                         std::to_string(cfg.max_frames) + "x" + std::to_string(cfg.max_height) + "x" +
                         std::to_string(cfg.max_width));
}

inline EditResult edit_video_full(const ModelParams<float>& params, const PixelVideo& source, const Instruction& instr,
                                  const SamplerConfig& sampler) {
    if (source.height % kCodecFactor || source.width % kCodecFactor)
        throw ShapeError("edit: video " + std::to_string(source.height) + "x" + std::to_string(source.width) +
                         " not divisible by codec factor " + std::to_string(kCodecFactor));
    instr.validate();
    EditResult r;
    r.source_latent = encode_video<float>(source, kCodecFactor);
    check_model_fits(params.cfg, r.source_latent.dims());
    const auto noise = make_initial_noise<float>(r.source_latent.dims(), sampler.seed);
    auto velocity = [&](const InContextLatent<float>& x, double t) {
        return forward(params, x, r.source_latent, instr, t, false).velocity;
    };
    r.joint = euler_sample(velocity, r.source_latent, noise, sampler);
    r.edited = decode_video(split(r.joint).second, kCodecFactor);
    return r;
}

inline PixelVideo edit_video(const ModelParams<float>& params, const PixelVideo& source, const Instruction& instr,
                             const SamplerConfig& sampler) {
    return edit_video_full(params, source, instr, sampler).edited;
}

inline PixelVideo edit_video(const EditRequest& req) {
    const Checkpoint ck = load_checkpoint(req.checkpoint_path);
    return edit_video(ck.params, req.source, req.instruction, req.sampler);
}

// ---- video files --------------------------------------------------------

/// Raw video file: one array block, dims (frames, height, width, 3), f32.
inline void write_video_file(const PixelVideo& v, const std::string& path) {
    io::ByteWriter w;
    const std::uint32_t dims[] = {static_cast<std::uint32_t>(v.frames), static_cast<std::uint32_t>(v.height),
                                  static_cast<std::uint32_t>(v.width), 3};
    io::write_array(w, dims, std::span<const float>(v.values));
    io::write_file(path, w.data());
}

inline PixelVideo read_video_file(const std::string& path) {
    const auto bytes = io::read_file(path);
    io::ByteReader r(bytes);
    auto a = io::read_array(r);
    if (a.dtype != io::DType::f32 || a.dims.size() != 4 || a.dims[3] != 3)
        throw FormatError::malformed(path + ": expected an f32 array of shape (frames, height, width, 3)");
    PixelVideo v(a.dims[0], a.dims[1], a.dims[2]);
    v.values = std::move(a.f32);
    for (float x : v.values)
        if (!(x >= 0.f && x <= 1.f)) throw ValidationError(path + ": pixel values must lie in [0,1]");
    return v;
}

/// Writes one 8-bit RGB PNG per frame as <dir>/<stem>_NNN.png.
inline void export_png_frames(const PixelVideo& v, const std::string& dir, const std::string& stem = "frame") {
    std::filesystem::create_directories(dir);
    std::vector<png_byte> row(v.width * 3);
    for (std::size_t f = 0; f < v.frames; ++f) {
        char name[32];
        std::snprintf(name, sizeof name, "_%03zu.png", f);
        const auto path = (std::filesystem::path(dir) / (stem + name)).string();
        std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
        if (!fp) throw IoError("cannot open " + path + " for writing");
        png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        png_infop info = png ? png_create_info_struct(png) : nullptr;
        if (!info) {
            png_destroy_write_struct(&png, nullptr);
            throw IoError("libpng initialization failed for " + path);
        }
        if (setjmp(png_jmpbuf(png))) {
            png_destroy_write_struct(&png, &info);
            throw IoError("libpng failed writing " + path);
        }
        png_init_io(png, fp.get());
        png_set_IHDR(png, info, static_cast<png_uint_32>(v.width), static_cast<png_uint_32>(v.height), 8,
                     PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        for (std::size_t r = 0; r < v.height; ++r) {
            for (std::size_t c = 0; c < v.width; ++c)
                for (std::size_t ch = 0; ch < 3; ++ch)
                    row[c * 3 + ch] = static_cast<png_byte>(std::lround(std::clamp(v.at(f, r, c, ch), 0.f, 1.f) * 255.f));
            png_write_row(png, row.data());
        }
        png_write_end(png, nullptr);
        png_destroy_write_struct(&png, &info);
    }
}

}  // namespace reco
