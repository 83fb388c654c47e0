#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "reco/latents.hpp"
#include "reco/model.hpp"
#include "reco/tensor.hpp"

namespace reco {

enum class RegionMeanMode { masked, global };

struct LossConfig {
    double lambda1 = 1e-3;
    double lambda2 = 1e-3;
    RegionMeanMode region_mean_mode = RegionMeanMode::masked;
    std::vector<std::size_t> attn_layers;  // empty: every layer
    bool enable_latent = true;
    bool enable_attn = true;

    void validate() const {
        if (!std::isfinite(lambda1) || lambda1 < 0 || !std::isfinite(lambda2) || lambda2 < 0)
            throw ValidationError("LossConfig: lambdas must be finite and >= 0");
    }
};

struct LossBreakdown {
    double l_ic = 0, l_latent = 0, l_edit = 0, l_global = 0, l_attn = 0, total = 0;

    nlohmann::json to_json() const {
        return {{"l_ic", l_ic},     {"l_latent", l_latent}, {"l_edit", l_edit},
                {"l_global", l_global}, {"l_attn", l_attn},     {"total", total}};
    }
    bool operator==(const LossBreakdown&) const = default;
};

/// L_attn = L_edit + L_global and total = L_ic + l1*L_latent + l2*L_attn,
/// with disabled terms left out of the total.
inline LossBreakdown total_loss(double l_ic, double l_latent, double l_edit, double l_global, const LossConfig& cfg) {
    LossBreakdown b;
    b.l_ic = l_ic;
    b.l_latent = l_latent;
    b.l_edit = l_edit;
    b.l_global = l_global;
    b.l_attn = l_edit + l_global;
    b.total = l_ic;
    if (cfg.enable_latent) b.total += cfg.lambda1 * b.l_latent;
    if (cfg.enable_attn) b.total += cfg.lambda2 * b.l_attn;
    return b;
}

// ---- graph-level losses -------------------------------------------------

template <class T>
Var<T> flow_matching_loss(Var<T> u, Var<T> v) {
    if (u.rows() != v.rows() || u.cols() != v.cols()) throw ShapeError("flow_matching_loss: shape mismatch");
    return ad::mean_square(ad::sub(u, v));
}

template <class T>
Var<T> latent_diff(Var<T> src_hat, Var<T> tgt_hat) {
    if (src_hat.rows() != tgt_hat.rows() || src_hat.cols() != tgt_hat.cols())
        throw ShapeError("latent_diff: shape mismatch");
    return ad::abs(ad::sub(tgt_hat, src_hat));
}

/// Weights w such that sum(diff .* w) is the latent regional loss; diff is
/// (cells x channels) with cells in (frame, row, column) order.
template <class T>
Mat<T> latent_region_weights(const EditMask& mask, std::size_t channels, RegionMeanMode mode) {
    mask.validate_binary("latent_region_loss");
    const auto cells = static_cast<Eigen::Index>(mask.cells());
    const std::size_t n1 = mask.count(), n0 = mask.cells() - n1;
    T w_out = 0, w_in = 0;
    if (mode == RegionMeanMode::masked) {
        if (n0) w_out = T(1) / static_cast<T>(n0 * channels);
        if (n1) w_in = -T(1) / static_cast<T>(n1 * channels);
    } else {
        const T all = static_cast<T>(mask.cells() * channels);
        w_out = T(1) / all;
        w_in = -T(1) / all;
    }
    Mat<T> w(cells, static_cast<Eigen::Index>(channels));
    for (Eigen::Index i = 0; i < cells; ++i) w.row(i).setConstant(mask.values[static_cast<std::size_t>(i)] ? w_in : w_out);
    return w;
}

template <class T>
Var<T> latent_region_loss(Var<T> diff, const EditMask& mask, RegionMeanMode mode) {
    if (static_cast<std::size_t>(diff.rows()) != mask.cells())
        throw ShapeError("latent_region_loss: mask cells " + std::to_string(mask.cells()) + " vs diff rows " +
                         std::to_string(diff.rows()));
    return ad::weighted_sum(diff, latent_region_weights<T>(mask, static_cast<std::size_t>(diff.cols()), mode));
}

namespace detail {

inline std::vector<std::size_t> selected_layers(const std::vector<std::size_t>& wanted, std::size_t layers) {
    if (wanted.empty()) {
        std::vector<std::size_t> all(layers);
        for (std::size_t i = 0; i < layers; ++i) all[i] = i;
        return all;
    }
    for (auto l : wanted)
        if (l >= layers) throw ValidationError("attention loss: layer " + std::to_string(l) + " not in trace");
    return wanted;
}

template <class T, class Term>
Var<T> mean_over_maps(const std::vector<Var<T>>& maps, std::size_t heads, const RegionPartition& part,
                      const std::vector<std::size_t>& layers, Term&& term) {
    if (maps.empty() || heads == 0) throw ShapeError("attention loss: empty trace");
    const std::size_t nl = maps.size() / heads;
    auto sel = selected_layers(layers, nl);
    Var<T> acc{};
    std::size_t count = 0;
    for (auto l : sel)
        for (std::size_t h = 0; h < heads; ++h) {
            const auto& m = maps[l * heads + h];
            if (static_cast<std::size_t>(m.rows()) != part.tokens || static_cast<std::size_t>(m.cols()) != part.tokens)
                throw ShapeError("attention loss: trace covers " + std::to_string(m.rows()) + " tokens, partition " +
                                 std::to_string(part.tokens));
            Var<T> v = term(m);
            acc = acc.valid() ? ad::add(acc, v) : v;
            ++count;
        }
    return ad::scale(acc, T(1) / static_cast<T>(count));
}

}  // namespace detail

/// mean(Attn[q, a1]) - mean(Attn[q, a2]), averaged over selected layers and
/// heads. Empty index sets contribute 0; when a1 or a2 is empty (a mask
/// covering every cell, or none) there is nothing to contrast and the term
/// is 0, which keeps it exactly 0 under uniform attention.
template <class T>
Var<T> attention_edit_loss(const std::vector<Var<T>>& maps, std::size_t heads, const RegionPartition& part,
                           const std::vector<std::size_t>& layers = {}) {
    const bool contrast = !part.a1.empty() && !part.a2.empty();
    static const std::vector<std::size_t> none;
    const auto& a1 = contrast ? part.a1 : none;
    const auto& a2 = contrast ? part.a2 : none;
    return detail::mean_over_maps<T>(maps, heads, part, layers, [&](Var<T> m) {
        return ad::sub(ad::block_mean<T>(m, part.q, a1), ad::block_mean<T>(m, part.q, a2));
    });
}

/// mean(Attn[q, a1 u a2]) - mean(Attn[q, a3]).
template <class T>
Var<T> attention_global_loss(const std::vector<Var<T>>& maps, std::size_t heads, const RegionPartition& part,
                             const std::vector<std::size_t>& layers = {}) {
    const auto src = part.source();
    return detail::mean_over_maps<T>(maps, heads, part, layers, [&](Var<T> m) {
        return ad::sub(ad::block_mean<T>(m, part.q, src), ad::block_mean<T>(m, part.q, part.a3));
    });
}

// ---- value-level wrappers ----------------------------------------------

template <class T>
double flow_matching_loss(const LatentGrid<T>& u, const LatentGrid<T>& v) {
    if (u.dims() != v.dims()) throw ShapeError("flow_matching_loss: " + u.dims().str() + " vs " + v.dims().str());
    double s = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double d = static_cast<double>(u.values()[i]) - static_cast<double>(v.values()[i]);
        s += d * d;
    }
    return s / static_cast<double>(u.size());
}

/// |tgt_hat - src_hat| elementwise; every entry is >= 0.
template <class T>
LatentGrid<T> latent_diff(const LatentGrid<T>& src_hat, const LatentGrid<T>& tgt_hat) {
    if (src_hat.dims() != tgt_hat.dims()) throw ShapeError("latent_diff: shape mismatch");
    LatentGrid<T> out(src_hat.dims());
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = std::abs(tgt_hat.values()[i] - src_hat.values()[i]);
    return out;
}

template <class T>
double latent_region_loss(const LatentGrid<T>& diff, const EditMask& mask, RegionMeanMode mode) {
    if (mask.frames != diff.frames() || mask.height != diff.height() || mask.width != diff.width())
        throw ShapeError("latent_region_loss: mask dims do not match diff");
    for (T v : diff.values())
        if (v < 0) throw ValidationError("latent_region_loss: diff map must be nonnegative");
    Tape<double> tape(false);
    Mat<double> m = Eigen::Map<const Mat<T>>(diff.values().data(), static_cast<Eigen::Index>(diff.frames() * diff.height() * diff.width()),
                                             static_cast<Eigen::Index>(diff.channels()))
                        .template cast<double>();
    return latent_region_loss<double>(tape.constant(std::move(m)), mask, mode).item();
}

template <class T>
double attention_edit_loss(const AttentionTrace<T>& trace, const RegionPartition& part,
                           const std::vector<std::size_t>& layers = {}) {
    Tape<T> tape(false);
    std::vector<Var<T>> maps;
    for (const auto& m : trace.maps) maps.push_back(tape.constant(m));
    return static_cast<double>(attention_edit_loss<T>(maps, trace.heads, part, layers).item());
}

template <class T>
double attention_global_loss(const AttentionTrace<T>& trace, const RegionPartition& part,
                             const std::vector<std::size_t>& layers = {}) {
    Tape<T> tape(false);
    std::vector<Var<T>> maps;
    for (const auto& m : trace.maps) maps.push_back(tape.constant(m));
    return static_cast<double>(attention_global_loss<T>(maps, trace.heads, part, layers).item());
}

}  // namespace reco
