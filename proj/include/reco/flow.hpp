#pragma once

// Rectified-flow primitives: x_t = t*x1 + (1-t)*x0 with constant velocity
// x1 - x0, plus the one-step estimate of x1 and a uniform-grid Euler sampler.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <string>

#include "reco/latents.hpp"

namespace reco {

/// Seeded generator with a cached normal distribution; both halves of the
/// state round-trip through state()/restore() so a resumed run draws the
/// same numbers.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double gaussian() { return normal_(engine_); }
    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    std::uint64_t next() { return engine_(); }
    std::size_t below(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }

    std::string state() const {
        std::ostringstream os;
        os << engine_ << ' ' << normal_;
        return os.str();
    }
    void restore(const std::string& s) {
        std::istringstream is(s);
        is >> engine_ >> normal_;
        if (!is) throw ValidationError("Rng: unreadable state");
    }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

struct TimestepDistribution {
    double mu = 0.0;
    double sigma = 1.0;
};

struct SamplerConfig {
    std::size_t steps = 20;
    bool source_rectify = true;
    std::uint64_t seed = 0;
};

/// Logit-normal draw, kept strictly inside (0,1).
inline double sample_timestep(Rng& rng, const TimestepDistribution& dist) {
    if (!(dist.sigma >= 0.0)) throw ValidationError("sample_timestep: sigma must be >= 0");
    const double z = dist.sigma == 0.0 ? 0.0 : rng.gaussian();
    const double t = 1.0 / (1.0 + std::exp(-(dist.mu + dist.sigma * z)));
    return std::clamp(t, std::nextafter(0.0, 1.0), std::nextafter(1.0, 0.0));
}

namespace detail {
template <class T>
void require_same(const LatentGrid<T>& a, const LatentGrid<T>& b, const char* op) {
    if (a.dims() != b.dims()) throw ShapeError(std::string(op) + ": " + a.dims().str() + " vs " + b.dims().str());
}
}  // namespace detail

template <class T>
LatentGrid<T> noisy_interpolate(const LatentGrid<T>& x1, const LatentGrid<T>& x0, double t) {
    detail::require_same(x1, x0, "noisy_interpolate");
    LatentGrid<T> out(x1.dims());
    const T tt = static_cast<T>(t), s = static_cast<T>(1.0 - t);
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = tt * x1.values()[i] + s * x0.values()[i];
    return out;
}

template <class T>
LatentGrid<T> velocity_target(const LatentGrid<T>& x1, const LatentGrid<T>& x0) {
    detail::require_same(x1, x0, "velocity_target");
    LatentGrid<T> out(x1.dims());
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = x1.values()[i] - x0.values()[i];
    return out;
}

template <class T>
LatentGrid<T> one_step_denoise(const LatentGrid<T>& xt, const LatentGrid<T>& u, double t) {
    detail::require_same(xt, u, "one_step_denoise");
    LatentGrid<T> out(xt.dims());
    const T s = static_cast<T>(1.0 - t);
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = xt.values()[i] + s * u.values()[i];
    return out;
}

template <class T>
InContextLatent<T> noisy_interpolate(const InContextLatent<T>& x1, const InContextLatent<T>& x0, double t) {
    return {noisy_interpolate(x1.grid, x0.grid, t), x1.single_width};
}

/// Standard-normal in-context noise for a pair of single-video latents.
template <class T>
InContextLatent<T> make_initial_noise(const GridDims& single, std::uint64_t seed) {
    Rng rng(seed);
    GridDims jd = single;
    jd.width *= 2;
    LatentGrid<T> g(jd);
    for (auto& v : g.values()) v = static_cast<T>(rng.gaussian());
    return {std::move(g), single.width};
}

/// Integrates dx/dt = u(x, t) from t=0 to t=1 on the grid t_k = k/steps.
/// `velocity` is any callable (const InContextLatent<T>&, double t) ->
/// LatentGrid<T>. With source rectification the source half is reset to its
/// known noising-path value t_{k+1}*x1_src + (1-t_{k+1})*x0_src after every
/// step.
template <class T, class VelocityFn>
InContextLatent<T> euler_sample(VelocityFn&& velocity, const LatentGrid<T>& source_latent,
                                const InContextLatent<T>& init_noise, const SamplerConfig& cfg) {
    if (cfg.steps == 0) throw ValidationError("euler_sample: steps must be >= 1");
    if (init_noise.half_dims() != source_latent.dims())
        throw ShapeError("euler_sample: condition " + source_latent.dims().str() + " vs half " +
                         init_noise.half_dims().str());
    const auto x0_src = split(init_noise).first;
    InContextLatent<T> x = init_noise;
    const double dt = 1.0 / static_cast<double>(cfg.steps);
    const T dtt = static_cast<T>(dt);
    for (std::size_t k = 0; k < cfg.steps; ++k) {
        const double t = static_cast<double>(k) / static_cast<double>(cfg.steps);
        LatentGrid<T> u = velocity(std::as_const(x), t);
        detail::require_same(u, x.grid, "euler_sample");
        for (std::size_t i = 0; i < u.size(); ++i) x.grid.values()[i] += dtt * u.values()[i];
        if (cfg.source_rectify) {
            const double tn = static_cast<double>(k + 1) / static_cast<double>(cfg.steps);
            auto tgt = split(x).second;
            x = concat_widthwise(noisy_interpolate(source_latent, x0_src, tn), tgt);
        }
    }
    return x;
}

}  // namespace reco
