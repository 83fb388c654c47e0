#pragma once

// Tiny video diffusion transformer over in-context latents. One token per
// latent cell; each block runs joint self-attention over both halves,
// cross-attention to the instruction tokens and a feed-forward layer, with
// timestep-conditioned shift/scale around the self-attention and
// feed-forward inputs. The clean source latent enters through a
// zero-initialized per-block projection added to source-half tokens.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "reco/flow.hpp"
#include "reco/instruction.hpp"
#include "reco/latents.hpp"
#include "reco/tensor.hpp"

namespace reco {

using ad::Mat;
using ad::Tape;
using ad::Var;

struct ModelConfig {
    std::size_t token_dim = 64;
    std::size_t heads = 4;
    std::size_t depth = 4;
    std::size_t instruction_vocab = vocab::size;
    std::size_t instruction_len = kInstructionLength;
    std::size_t lora_rank = 4;
    std::size_t latent_channels = 4;
    std::size_t ffn_mult = 4;
    // positional table extents; the column table covers one half
    std::size_t max_frames = 16;
    std::size_t max_height = 32;
    std::size_t max_width = 32;
    bool cond_both_halves = false;

    std::size_t max_tokens() const { return max_frames * max_height * 2 * max_width; }

    void validate() const {
        if (token_dim == 0 || heads == 0 || depth == 0) throw ValidationError("ModelConfig: zero dimension");
        if (token_dim % heads != 0) throw ValidationError("ModelConfig: token_dim must be divisible by heads");
        if (lora_rank > token_dim) throw ValidationError("ModelConfig: lora_rank exceeds token_dim");
        if (instruction_vocab < vocab::size) throw ValidationError("ModelConfig: instruction_vocab too small");
        if (instruction_len != kInstructionLength) throw ValidationError("ModelConfig: instruction_len must be 6");
        if (latent_channels != 4) throw ValidationError("ModelConfig: latent_channels must be 4");
        if (ffn_mult == 0 || max_frames == 0 || max_height == 0 || max_width == 0)
            throw ValidationError("ModelConfig: zero extent");
    }
    bool operator==(const ModelConfig&) const = default;
};

inline constexpr const char* kAdaptedProjections[] = {"attn.q",  "attn.k",  "attn.v",  "attn.o",
                                                      "xattn.q", "xattn.k", "xattn.v", "xattn.o"};

inline std::string block_name(std::size_t l, const std::string& leaf) { return "blk" + std::to_string(l) + "." + leaf; }

/// Named parameter collection in a fixed order.
template <class T>
class ModelParams {
public:
    ModelConfig cfg;

    void add(const std::string& name, Mat<T> m) {
        if (index_.count(name)) throw ValidationError("ModelParams: duplicate parameter " + name);
        index_[name] = names_.size();
        names_.push_back(name);
        tensors_.push_back(std::move(m));
    }
    void remove(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) return;
        names_.erase(names_.begin() + static_cast<std::ptrdiff_t>(it->second));
        tensors_.erase(tensors_.begin() + static_cast<std::ptrdiff_t>(it->second));
        reindex();
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValidationError("ModelParams: no parameter " + name);
        return it->second;
    }
    Mat<T>& operator[](const std::string& name) { return tensors_[index_of(name)]; }
    const Mat<T>& operator[](const std::string& name) const { return tensors_[index_of(name)]; }

    std::size_t count() const { return names_.size(); }
    const std::string& name(std::size_t i) const { return names_[i]; }
    Mat<T>& tensor(std::size_t i) { return tensors_[i]; }
    const Mat<T>& tensor(std::size_t i) const { return tensors_[i]; }
    const std::vector<std::string>& names() const { return names_; }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) n += static_cast<std::size_t>(t.size());
        return n;
    }

    bool all_finite() const {
        for (const auto& t : tensors_)
            if (!t.allFinite()) return false;
        return true;
    }

    template <class U>
    ModelParams<U> cast() const {
        ModelParams<U> out;
        out.cfg = cfg;
        for (std::size_t i = 0; i < count(); ++i) out.add(names_[i], tensors_[i].template cast<U>());
        return out;
    }

    bool operator==(const ModelParams& o) const {
        if (!(cfg == o.cfg) || names_ != o.names_) return false;
        for (std::size_t i = 0; i < count(); ++i)
            if (tensors_[i].rows() != o.tensors_[i].rows() || tensors_[i].cols() != o.tensors_[i].cols() ||
                tensors_[i] != o.tensors_[i])
                return false;
        return true;
    }

private:
    void reindex() {
        index_.clear();
        for (std::size_t i = 0; i < names_.size(); ++i) index_[names_[i]] = i;
    }

    std::vector<std::string> names_;
    std::vector<Mat<T>> tensors_;
    std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {
template <class T>
Mat<T> normal_matrix(std::mt19937_64& gen, std::size_t r, std::size_t c, double stddev) {
    std::normal_distribution<double> nd(0.0, stddev);
    Mat<T> m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(nd(gen));
    return m;
}
template <class T>
Mat<T> zeros(std::size_t r, std::size_t c) {
    return Mat<T>::Zero(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
}  // namespace detail

/// Adds rank-r factor pairs (A: d x r random, B: r x d zero) to every
/// attention projection so the adapters start as a no-op.
template <class T>
void add_lora_adapters(ModelParams<T>& p, std::size_t rank, std::uint64_t seed) {
    p.cfg.lora_rank = rank;
    if (rank == 0) return;
    std::mt19937_64 gen(seed ^ 0x9e3779b97f4a7c15ULL);
    const std::size_t d = p.cfg.token_dim;
    for (std::size_t l = 0; l < p.cfg.depth; ++l)
        for (const char* proj : kAdaptedProjections) {
            p.add(block_name(l, proj) + ".lora_a", detail::normal_matrix<T>(gen, d, rank, 1.0 / std::sqrt(double(d))));
            p.add(block_name(l, proj) + ".lora_b", detail::zeros<T>(rank, d));
        }
}

template <class T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 gen(seed);
    const std::size_t d = cfg.token_dim, c = cfg.latent_channels, fd = cfg.ffn_mult * cfg.token_dim;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    ModelParams<T> p;
    p.cfg = cfg;
    p.cfg.lora_rank = 0;
    p.add("in.w", detail::normal_matrix<T>(gen, c, d, 1.0 / std::sqrt(static_cast<double>(c))));
    p.add("in.b", detail::zeros<T>(1, d));
    p.add("pos.frame", detail::normal_matrix<T>(gen, cfg.max_frames, d, 0.3));
    p.add("pos.row", detail::normal_matrix<T>(gen, cfg.max_height, d, 0.3));
    p.add("pos.col", detail::normal_matrix<T>(gen, cfg.max_width, d, 0.3));
    p.add("pos.half", detail::normal_matrix<T>(gen, 2, d, 0.3));
    p.add("time.w1", detail::normal_matrix<T>(gen, d, d, sd));
    p.add("time.b1", detail::zeros<T>(1, d));
    p.add("time.w2", detail::normal_matrix<T>(gen, d, d, sd));
    p.add("time.b2", detail::zeros<T>(1, d));
    p.add("instr.embed", detail::normal_matrix<T>(gen, cfg.instruction_vocab, d, 1.0));
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        p.add(block_name(l, "cond"), detail::zeros<T>(c, d));
        p.add(block_name(l, "mod.w"), detail::normal_matrix<T>(gen, d, 4 * d, 0.1 * sd));
        p.add(block_name(l, "mod.b"), detail::zeros<T>(1, 4 * d));
        for (const char* proj : kAdaptedProjections) p.add(block_name(l, proj), detail::normal_matrix<T>(gen, d, d, sd));
        p.add(block_name(l, "ffn.w1"), detail::normal_matrix<T>(gen, d, fd, sd));
        p.add(block_name(l, "ffn.b1"), detail::zeros<T>(1, fd));
        p.add(block_name(l, "ffn.w2"), detail::normal_matrix<T>(gen, fd, d, 1.0 / std::sqrt(static_cast<double>(fd))));
        p.add(block_name(l, "ffn.b2"), detail::zeros<T>(1, d));
    }
    p.add("out.mod.w", detail::normal_matrix<T>(gen, d, 2 * d, 0.1 * sd));
    p.add("out.mod.b", detail::zeros<T>(1, 2 * d));
    p.add("out.w", detail::normal_matrix<T>(gen, d, c, 0.1 * sd));
    p.add("out.b", detail::zeros<T>(1, c));
    add_lora_adapters(p, cfg.lora_rank, seed);
    return p;
}

/// Installs externally trained adapters onto base parameters.
template <class T>
ModelParams<T> apply_lora(const ModelParams<T>& base, const ModelParams<T>& adapters) {
    ModelParams<T> out = base;
    const std::size_t rank = adapters.cfg.lora_rank;
    if (base.cfg.lora_rank != 0 && base.cfg.lora_rank != rank)
        throw ValidationError("apply_lora: adapter rank " + std::to_string(rank) + " does not match configured rank " +
                              std::to_string(base.cfg.lora_rank));
    for (std::size_t i = 0; i < adapters.count(); ++i) {
        const auto& n = adapters.name(i);
        const auto& m = adapters.tensor(i);
        const bool is_a = n.ends_with(".lora_a"), is_b = n.ends_with(".lora_b");
        if (!is_a && !is_b) continue;
        const auto expect_rank = static_cast<Eigen::Index>(rank);
        if ((is_a && m.cols() != expect_rank) || (is_b && m.rows() != expect_rank))
            throw ValidationError("apply_lora: rank mismatch in " + n);
        if (out.has(n))
            out[n] = m;
        else
            out.add(n, m);
    }
    out.cfg.lora_rank = rank;
    return out;
}

/// Folds every adapter into its base projection: W += (1/r) A B.
template <class T>
ModelParams<T> merge_lora(const ModelParams<T>& p) {
    ModelParams<T> out = p;
    const std::size_t r = p.cfg.lora_rank;
    if (r == 0) return out;
    for (std::size_t l = 0; l < p.cfg.depth; ++l)
        for (const char* proj : kAdaptedProjections) {
            const auto base = block_name(l, proj);
            const auto& a = p[base + ".lora_a"];
            const auto& b = p[base + ".lora_b"];
            if (a.cols() != static_cast<Eigen::Index>(r) || b.rows() != static_cast<Eigen::Index>(r))
                throw ValidationError("merge_lora: rank mismatch in " + base);
            out[base] += (a * b) / static_cast<T>(r);
            out.remove(base + ".lora_a");
            out.remove(base + ".lora_b");
        }
    out.cfg.lora_rank = 0;
    return out;
}

/// Post-softmax attention maps, indexed [layer * heads + head]; each map is
/// queries x keys over the joint token sequence.
template <class T>
struct AttentionTrace {
    std::size_t layers = 0, heads = 0;
    std::vector<Mat<T>> maps;

    const Mat<T>& at(std::size_t layer, std::size_t head) const { return maps[layer * heads + head]; }
};

template <class T>
struct ForwardOutput {
    LatentGrid<T> velocity;
    std::optional<AttentionTrace<T>> trace;
};

/// Parameters bound as leaves on one tape.
template <class T>
struct BoundParams {
    const ModelParams<T>* params = nullptr;
    std::vector<Var<T>> vars;

    Var<T> operator[](const std::string& name) const { return vars[params->index_of(name)]; }
};

template <class T>
BoundParams<T> bind(Tape<T>& tape, const ModelParams<T>& p) {
    BoundParams<T> b{&p, {}};
    b.vars.reserve(p.count());
    for (std::size_t i = 0; i < p.count(); ++i) b.vars.push_back(tape.parameter(p.tensor(i)));
    return b;
}

/// Graph-level forward result: velocity as a tokens x channels matrix, and
/// every self-attention probability map (layer-major).
template <class T>
struct GraphOutput {
    Var<T> velocity;
    std::vector<Var<T>> attention;
    std::size_t layers = 0, heads = 0;
};

namespace detail {

template <class T>
Var<T> project(const BoundParams<T>& p, Var<T> x, const std::string& name) {
    Var<T> y = ad::matmul(x, p[name]);
    const std::size_t r = p.params->cfg.lora_rank;
    if (r > 0) {
        Var<T> low = ad::matmul(ad::matmul(x, p[name + ".lora_a"]), p[name + ".lora_b"]);
        y = ad::add(y, ad::scale(low, T(1) / static_cast<T>(r)));
    }
    return y;
}

template <class T>
Var<T> multi_head(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, std::vector<Var<T>>* keep) {
    const auto dh = static_cast<Eigen::Index>(q.cols()) / static_cast<Eigen::Index>(heads);
    const T inv = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Var<T>> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const auto off = static_cast<Eigen::Index>(h) * dh;
        Var<T> qh = heads == 1 ? q : ad::slice_cols(q, off, dh);
        Var<T> kh = heads == 1 ? k : ad::slice_cols(k, off, dh);
        Var<T> vh = heads == 1 ? v : ad::slice_cols(v, off, dh);
        Var<T> prob = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv));
        if (keep) keep->push_back(prob);
        outs.push_back(ad::matmul(prob, vh));
    }
    return heads == 1 ? outs[0] : ad::concat_cols(outs);
}

template <class T>
Mat<T> timestep_features(double t, std::size_t d) {
    Mat<T> e(1, static_cast<Eigen::Index>(d));
    const std::size_t half = d / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        e(0, static_cast<Eigen::Index>(i)) = static_cast<T>(std::sin(1000.0 * t * freq));
        e(0, static_cast<Eigen::Index>(half + i)) = static_cast<T>(std::cos(1000.0 * t * freq));
    }
    if (d % 2) e(0, static_cast<Eigen::Index>(d - 1)) = static_cast<T>(t);
    return e;
}

}  // namespace detail

template <class T>
GraphOutput<T> forward_graph(Tape<T>& tape, const BoundParams<T>& p, const InContextLatent<T>& xt,
                             const LatentGrid<T>& src_cond, const Instruction& instr, double t) {
    const ModelConfig& cfg = p.params->cfg;
    const GridDims half = xt.half_dims();
    if (xt.grid.width() != 2 * xt.single_width) throw ShapeError("forward: malformed in-context latent");
    if (src_cond.dims() != half)
        throw ShapeError("forward: condition " + src_cond.dims().str() + " vs half " + half.str());
    if (half.channels != cfg.latent_channels) throw ShapeError("forward: channel count mismatch");
    if (half.frames > cfg.max_frames || half.height > cfg.max_height || half.width > cfg.max_width)
        throw ShapeError("forward: latent " + half.str() + " exceeds positional tables");

    const std::size_t jw = 2 * half.width;
    const auto n = static_cast<Eigen::Index>(half.frames * half.height * jw);
    const auto c = static_cast<Eigen::Index>(half.channels);
    const std::size_t d = cfg.token_dim;

    Mat<T> x = Eigen::Map<const Mat<T>>(xt.grid.values().data(), n, c);
    Mat<T> cond = Mat<T>::Zero(n, c);
    std::vector<Eigen::Index> fid, rid, cid, hid;
    fid.reserve(n); rid.reserve(n); cid.reserve(n); hid.reserve(n);
    for (std::size_t f = 0; f < half.frames; ++f)
        for (std::size_t r = 0; r < half.height; ++r)
            for (std::size_t col = 0; col < jw; ++col) {
                const auto tok = static_cast<Eigen::Index>((f * half.height + r) * jw + col);
                const std::size_t sc = col % half.width;
                fid.push_back(static_cast<Eigen::Index>(f));
                rid.push_back(static_cast<Eigen::Index>(r));
                cid.push_back(static_cast<Eigen::Index>(sc));
                hid.push_back(col < half.width ? 0 : 1);
                if (col < half.width || cfg.cond_both_halves)
                    for (Eigen::Index ch = 0; ch < c; ++ch) cond(tok, ch) = src_cond.at(f, r, sc, static_cast<std::size_t>(ch));
            }

    Var<T> h = ad::add_row(ad::matmul(tape.constant(std::move(x)), p["in.w"]), p["in.b"]);
    Var<T> pos = ad::add(ad::add(ad::gather_rows(p["pos.frame"], std::move(fid)), ad::gather_rows(p["pos.row"], std::move(rid))),
                         ad::add(ad::gather_rows(p["pos.col"], std::move(cid)), ad::gather_rows(p["pos.half"], std::move(hid))));
    h = ad::add(h, pos);
    Var<T> cond_tokens = tape.constant(std::move(cond));

    Var<T> temb = ad::add_row(ad::matmul(tape.constant(detail::timestep_features<T>(t, d)), p["time.w1"]), p["time.b1"]);
    temb = ad::add_row(ad::matmul(ad::silu(temb), p["time.w2"]), p["time.b2"]);
    Var<T> temb_act = ad::silu(temb);

    const auto ids = encode_instruction(instr);
    std::vector<Eigen::Index> iid(ids.begin(), ids.end());
    Var<T> instr_tokens = ad::gather_rows(p["instr.embed"], std::move(iid));

    GraphOutput<T> out;
    out.layers = cfg.depth;
    out.heads = cfg.heads;
    out.attention.reserve(cfg.depth * cfg.heads);
    const auto di = static_cast<Eigen::Index>(d);
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        auto name = [l](const char* leaf) { return block_name(l, leaf); };
        h = ad::add(h, ad::matmul(cond_tokens, p[name("cond")]));

        Var<T> mod = ad::add_row(ad::matmul(temb_act, p[name("mod.w")]), p[name("mod.b")]);
        Var<T> shift1 = ad::slice_cols(mod, 0, di), scale1 = ad::slice_cols(mod, di, di);
        Var<T> shift2 = ad::slice_cols(mod, 2 * di, di), scale2 = ad::slice_cols(mod, 3 * di, di);

        Var<T> a = ad::add_row(ad::mul_row(ad::layer_norm(h), ad::add_scalar(scale1, T(1))), shift1);
        Var<T> attn = detail::multi_head(detail::project(p, a, name("attn.q")), detail::project(p, a, name("attn.k")),
                                         detail::project(p, a, name("attn.v")), cfg.heads, &out.attention);
        h = ad::add(h, detail::project(p, attn, name("attn.o")));

        Var<T> cq = detail::project(p, ad::layer_norm(h), name("xattn.q"));
        Var<T> cross = detail::multi_head(cq, detail::project(p, instr_tokens, name("xattn.k")),
                                          detail::project(p, instr_tokens, name("xattn.v")), cfg.heads,
                                          static_cast<std::vector<Var<T>>*>(nullptr));
        h = ad::add(h, detail::project(p, cross, name("xattn.o")));

        Var<T> f = ad::add_row(ad::mul_row(ad::layer_norm(h), ad::add_scalar(scale2, T(1))), shift2);
        Var<T> ff = ad::gelu(ad::add_row(ad::matmul(f, p[name("ffn.w1")]), p[name("ffn.b1")]));
        h = ad::add(h, ad::add_row(ad::matmul(ff, p[name("ffn.w2")]), p[name("ffn.b2")]));

        if (!h.value().allFinite())
            throw NumericError("forward: non-finite activation after block " + std::to_string(l), static_cast<int>(l));
    }
    Var<T> fmod = ad::add_row(ad::matmul(temb_act, p["out.mod.w"]), p["out.mod.b"]);
    Var<T> fin = ad::add_row(ad::mul_row(ad::layer_norm(h), ad::add_scalar(ad::slice_cols(fmod, di, di), T(1))),
                             ad::slice_cols(fmod, 0, di));
    out.velocity = ad::add_row(ad::matmul(fin, p["out.w"]), p["out.b"]);
    if (!out.velocity.value().allFinite()) throw NumericError("forward: non-finite velocity", static_cast<int>(cfg.depth));
    return out;
}

template <class T>
LatentGrid<T> to_grid(const Mat<T>& tokens, const GridDims& dims) {
    if (static_cast<std::size_t>(tokens.size()) != dims.size()) throw ShapeError("to_grid: size mismatch");
    return LatentGrid<T>(dims, std::vector<T>(tokens.data(), tokens.data() + tokens.size()));
}

/// Value-level forward pass (no gradient recording).
template <class T>
ForwardOutput<T> forward(const ModelParams<T>& params, const InContextLatent<T>& xt, const LatentGrid<T>& src_cond,
                         const Instruction& instr, double t, bool capture) {
    Tape<T> tape(false);
    auto bound = bind(tape, params);
    auto g = forward_graph(tape, bound, xt, src_cond, instr, t);
    ForwardOutput<T> out{to_grid(g.velocity.value(), xt.grid.dims()), std::nullopt};
    if (capture) {
        AttentionTrace<T> tr{g.layers, g.heads, {}};
        tr.maps.reserve(g.attention.size());
        for (auto& v : g.attention) tr.maps.push_back(v.value());
        out.trace = std::move(tr);
    }
    return out;
}

/// Gradients of a scalar on `tape` with respect to every bound parameter,
/// in parameter order. Parameters off the loss path get zeros.
template <class T>
std::vector<Mat<T>> backward(Tape<T>& tape, Var<T> loss, const BoundParams<T>& bound) {
    tape.backward(loss);
    std::vector<Mat<T>> grads;
    grads.reserve(bound.vars.size());
    for (auto v : bound.vars) grads.push_back(tape.grad_or_zero(v));
    return grads;
}

}  // namespace reco
