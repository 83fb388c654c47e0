#pragma once

// Small tape-based reverse-mode differentiation over dense row-major
// matrices. One Tape records one computation (one training sample); nodes
// are appended in evaluation order so the reverse sweep is a plain
// backwards walk over the node list.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "reco/errors.hpp"

namespace reco::ad {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
class Tape;

template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    bool valid() const { return tape != nullptr; }
    const Mat<T>& value() const { return tape->value(id); }
    const Mat<T>& grad() const { return tape->grad(id); }
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    T item() const { return value()(0, 0); }
};

template <class T>
class Tape {
public:
    using Backward = std::function<void(Tape&, std::size_t)>;

    // A non-recording tape evaluates values only; no closures are kept and
    // nothing on it can be differentiated.
    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return record_; }
    std::size_t size() const { return nodes_.size(); }

    Var<T> constant(Mat<T> v) { return push(std::move(v), false, nullptr); }

    Var<T> parameter(Mat<T> v) { return push(std::move(v), record_, nullptr); }

    Var<T> push(Mat<T> value, bool requires_grad, Backward back) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad && record_;
        if (n.requires_grad) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var<T>{this, nodes_.size() - 1};
    }

    const Mat<T>& value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    // Empty until something flows into the node; callers should treat an
    // empty gradient as zero.
    const Mat<T>& grad(std::size_t id) const { return nodes_[id].grad; }

    Mat<T> grad_or_zero(Var<T> v) const {
        const auto& n = nodes_[v.id];
        if (n.grad.size() == 0) return Mat<T>::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    template <class Expr>
    void accumulate(std::size_t id, const Expr& g) {
        auto& n = nodes_[id];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0)
            n.grad = g;
        else
            n.grad += g;
    }

    void backward(Var<T> loss) {
        if (loss.tape != this) throw UsageError("backward: loss belongs to a different tape");
        auto& root = nodes_[loss.id];
        if (!root.requires_grad)
            throw UsageError("backward: loss is detached from every parameter");
        if (root.value.size() != 1) throw UsageError("backward: loss must be a scalar");
        root.grad = Mat<T>::Ones(1, 1);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (n.back && n.grad.size() != 0) n.back(*this, i);
        }
    }

private:
    struct Node {
        Mat<T> value;
        Mat<T> grad;
        bool requires_grad = false;
        Backward back;
    };

    std::deque<Node> nodes_;
    bool record_;
};

namespace detail {

template <class T>
bool any_grad(std::initializer_list<Var<T>> vs) {
    for (const auto& v : vs)
        if (v.tape->requires_grad(v.id)) return true;
    return false;
}

template <class T>
void same_tape(Var<T> a, Var<T> b) {
    if (a.tape != b.tape) throw UsageError("operands recorded on different tapes");
}

template <class T>
void same_shape(Var<T> a, Var<T> b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError(std::string(op) + ": operand shapes differ");
}

}  // namespace detail

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    detail::same_tape(a, b);
    if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
    Mat<T> out = a.value() * b.value();
    auto& tape = *a.tape;
    return tape.push(std::move(out), detail::any_grad({a, b}), [a, b](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        if (tp.requires_grad(a.id)) tp.accumulate(a.id, g * b.value().transpose());
        if (tp.requires_grad(b.id)) tp.accumulate(b.id, a.value().transpose() * g);
    });
}

// a * b^T
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
    detail::same_tape(a, b);
    if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimensions differ");
    Mat<T> out = a.value() * b.value().transpose();
    auto& tape = *a.tape;
    return tape.push(std::move(out), detail::any_grad({a, b}), [a, b](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        if (tp.requires_grad(a.id)) tp.accumulate(a.id, g * b.value());
        if (tp.requires_grad(b.id)) tp.accumulate(b.id, g.transpose() * a.value());
    });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::same_tape(a, b);
    detail::same_shape(a, b, "add");
    Mat<T> out = a.value() + b.value();
    return a.tape->push(std::move(out), detail::any_grad({a, b}), [a, b](Tape<T>& tp, std::size_t self) {
        tp.accumulate(a.id, tp.grad(self));
        tp.accumulate(b.id, tp.grad(self));
    });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
    detail::same_tape(a, b);
    detail::same_shape(a, b, "sub");
    Mat<T> out = a.value() - b.value();
    return a.tape->push(std::move(out), detail::any_grad({a, b}), [a, b](Tape<T>& tp, std::size_t self) {
        tp.accumulate(a.id, tp.grad(self));
        tp.accumulate(b.id, -tp.grad(self));
    });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::same_tape(a, b);
    detail::same_shape(a, b, "mul");
    Mat<T> out = a.value().cwiseProduct(b.value());
    return a.tape->push(std::move(out), detail::any_grad({a, b}), [a, b](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        if (tp.requires_grad(a.id)) tp.accumulate(a.id, g.cwiseProduct(b.value()));
        if (tp.requires_grad(b.id)) tp.accumulate(b.id, g.cwiseProduct(a.value()));
    });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
    Mat<T> out = a.value() * s;
    return a.tape->push(std::move(out), detail::any_grad({a}), [a, s](Tape<T>& tp, std::size_t self) {
        tp.accumulate(a.id, tp.grad(self) * s);
    });
}

template <class T>
Var<T> add_scalar(Var<T> a, T s) {
    Mat<T> out = a.value().array() + s;
    return a.tape->push(std::move(out), detail::any_grad({a}), [a](Tape<T>& tp, std::size_t self) {
        tp.accumulate(a.id, tp.grad(self));
    });
}

// a + row, with row (1 x cols) broadcast down every row of a.
template <class T>
Var<T> add_row(Var<T> a, Var<T> row) {
    detail::same_tape(a, row);
    if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: row shape");
    Mat<T> out = a.value().rowwise() + row.value().row(0);
    return a.tape->push(std::move(out), detail::any_grad({a, row}), [a, row](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        tp.accumulate(a.id, g);
        if (tp.requires_grad(row.id)) tp.accumulate(row.id, g.colwise().sum());
    });
}

template <class T>
Var<T> mul_row(Var<T> a, Var<T> row) {
    detail::same_tape(a, row);
    if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("mul_row: row shape");
    Mat<T> out = a.value().array().rowwise() * row.value().row(0).array();
    return a.tape->push(std::move(out), detail::any_grad({a, row}), [a, row](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        if (tp.requires_grad(a.id))
            tp.accumulate(a.id, (g.array().rowwise() * row.value().row(0).array()).matrix());
        if (tp.requires_grad(row.id))
            tp.accumulate(row.id, g.cwiseProduct(a.value()).colwise().sum());
    });
}

// Per-row standardization without affine parameters.
template <class T>
Var<T> layer_norm(Var<T> a, T eps = T(1e-5)) {
    const auto& x = a.value();
    const Eigen::Index n = x.rows(), d = x.cols();
    Mat<T> y(n, d);
    Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        T mu = x.row(i).mean();
        auto centered = (x.row(i).array() - mu).eval();
        T var = centered.square().mean();
        inv_std(i) = T(1) / std::sqrt(var + eps);
        y.row(i) = centered * inv_std(i);
    }
    Mat<T> yv = y;
    return a.tape->push(std::move(y), detail::any_grad({a}),
                        [a, yv = std::move(yv), inv_std](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        Mat<T> dx(g.rows(), g.cols());
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
            T gm = g.row(i).mean();
            T gy = g.row(i).cwiseProduct(yv.row(i)).mean();
            dx.row(i) = (g.row(i).array() - gm - yv.row(i).array() * gy) * inv_std(i);
        }
        tp.accumulate(a.id, dx);
    });
}

// tanh approximation of GELU
template <class T>
Var<T> gelu(Var<T> a) {
    const T c = T(0.7978845608028654);  // sqrt(2/pi)
    const T k = T(0.044715);
    const auto& x = a.value().array();
    auto inner = (c * (x + k * x.cube())).tanh().eval();
    Mat<T> out = (T(0.5) * x * (T(1) + inner)).matrix();
    return a.tape->push(std::move(out), detail::any_grad({a}), [a, c, k](Tape<T>& tp, std::size_t self) {
        const auto& x = a.value().array();
        auto th = (c * (x + k * x.cube())).tanh().eval();
        auto d = (T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th.square()) * c * (T(1) + T(3) * k * x.square()))
                     .eval();
        tp.accumulate(a.id, (tp.grad(self).array() * d).matrix());
    });
}

template <class T>
Var<T> silu(Var<T> a) {
    const auto& x = a.value().array();
    auto sig = (T(1) / (T(1) + (-x).exp())).eval();
    Mat<T> out = (x * sig).matrix();
    return a.tape->push(std::move(out), detail::any_grad({a}), [a](Tape<T>& tp, std::size_t self) {
        const auto& x = a.value().array();
        auto s = (T(1) / (T(1) + (-x).exp())).eval();
        auto d = (s * (T(1) + x * (T(1) - s))).eval();
        tp.accumulate(a.id, (tp.grad(self).array() * d).matrix());
    });
}

template <class T>
Var<T> abs(Var<T> a) {
    Mat<T> out = a.value().cwiseAbs();
    return a.tape->push(std::move(out), detail::any_grad({a}), [a](Tape<T>& tp, std::size_t self) {
        auto sign = a.value().array().sign();
        tp.accumulate(a.id, (tp.grad(self).array() * sign).matrix());
    });
}

template <class T>
Var<T> softmax_rows(Var<T> a) {
    const auto& x = a.value();
    Mat<T> y(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        T m = x.row(i).maxCoeff();
        y.row(i) = (x.row(i).array() - m).exp();
        y.row(i) /= y.row(i).sum();
    }
    return a.tape->push(std::move(y), detail::any_grad({a}), [a](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        const auto& y = tp.value(self);
        Eigen::Matrix<T, Eigen::Dynamic, 1> dot = g.cwiseProduct(y).rowwise().sum();
        Mat<T> dx = y.cwiseProduct(g.colwise() - dot);
        tp.accumulate(a.id, dx);
    });
}

template <class T>
Var<T> slice_cols(Var<T> a, Eigen::Index start, Eigen::Index n) {
    if (start < 0 || start + n > a.cols()) throw ShapeError("slice_cols: out of range");
    Mat<T> out = a.value().middleCols(start, n);
    return a.tape->push(std::move(out), detail::any_grad({a}), [a, start, n](Tape<T>& tp, std::size_t self) {
        Mat<T> g = Mat<T>::Zero(a.rows(), a.cols());
        g.middleCols(start, n) = tp.grad(self);
        tp.accumulate(a.id, g);
    });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    Eigen::Index rows = parts[0].rows(), cols = 0;
    bool grad = false;
    for (const auto& p : parts) {
        if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
        cols += p.cols();
        grad = grad || p.tape->requires_grad(p.id);
    }
    Mat<T> out(rows, cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    return parts[0].tape->push(std::move(out), grad, [parts](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        Eigen::Index at = 0;
        for (const auto& p : parts) {
            if (tp.requires_grad(p.id)) tp.accumulate(p.id, g.middleCols(at, p.cols()).eval());
            at += p.cols();
        }
    });
}

// Row lookup into an embedding table; gradients scatter-add back.
template <class T>
Var<T> gather_rows(Var<T> table, std::vector<Eigen::Index> ids) {
    Mat<T> out(static_cast<Eigen::Index>(ids.size()), table.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= table.rows()) throw ShapeError("gather_rows: index out of range");
        out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
    }
    return table.tape->push(std::move(out), detail::any_grad({table}),
                            [table, ids = std::move(ids)](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        Mat<T> gt = Mat<T>::Zero(table.rows(), table.cols());
        for (std::size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
        tp.accumulate(table.id, gt);
    });
}

template <class T>
Var<T> sum_all(Var<T> a) {
    Mat<T> out(1, 1);
    out(0, 0) = a.value().sum();
    return a.tape->push(std::move(out), detail::any_grad({a}), [a](Tape<T>& tp, std::size_t self) {
        T g = tp.grad(self)(0, 0);
        tp.accumulate(a.id, Mat<T>::Constant(a.rows(), a.cols(), g));
    });
}

template <class T>
Var<T> mean_all(Var<T> a) {
    return scale(sum_all(a), T(1) / static_cast<T>(a.value().size()));
}

// mean of squares over all entries
template <class T>
Var<T> mean_square(Var<T> a) {
    const T n = static_cast<T>(a.value().size());
    Mat<T> out(1, 1);
    out(0, 0) = a.value().squaredNorm() / n;
    return a.tape->push(std::move(out), detail::any_grad({a}), [a, n](Tape<T>& tp, std::size_t self) {
        T g = tp.grad(self)(0, 0);
        tp.accumulate(a.id, a.value() * (T(2) * g / n));
    });
}

// sum(a .* weights) with constant weights of a's shape.
template <class T>
Var<T> weighted_sum(Var<T> a, Mat<T> weights) {
    if (weights.rows() != a.rows() || weights.cols() != a.cols())
        throw ShapeError("weighted_sum: weight shape");
    Mat<T> out(1, 1);
    out(0, 0) = a.value().cwiseProduct(weights).sum();
    return a.tape->push(std::move(out), detail::any_grad({a}),
                        [a, w = std::move(weights)](Tape<T>& tp, std::size_t self) {
        tp.accumulate(a.id, w * tp.grad(self)(0, 0));
    });
}

// Mean of a over the (rows x cols) sub-block selected by two index lists.
// An empty selection is a constant 0.
template <class T>
Var<T> block_mean(Var<T> a, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
    Mat<T> out = Mat<T>::Zero(1, 1);
    if (rows.empty() || cols.empty()) return a.tape->constant(std::move(out));
    const auto& x = a.value();
    const T n = static_cast<T>(rows.size() * cols.size());
    // Accumulate deviations from the first entry so a constant block yields
    // that constant exactly, independent of the block size.
    if (rows[0] >= static_cast<std::size_t>(x.rows()) || cols[0] >= static_cast<std::size_t>(x.cols()))
        throw ShapeError("block_mean: index out of range");
    const T pivot = x(static_cast<Eigen::Index>(rows[0]), static_cast<Eigen::Index>(cols[0]));
    T dev = 0;
    for (auto r : rows) {
        if (r >= static_cast<std::size_t>(x.rows())) throw ShapeError("block_mean: row index out of range");
        T acc = 0;
        for (auto c : cols) {
            if (c >= static_cast<std::size_t>(x.cols())) throw ShapeError("block_mean: column index out of range");
            acc += x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) - pivot;
        }
        dev += acc;
    }
    out(0, 0) = pivot + dev / n;
    std::vector<std::size_t> rv(rows.begin(), rows.end()), cv(cols.begin(), cols.end());
    return a.tape->push(std::move(out), detail::any_grad({a}),
                        [a, rv = std::move(rv), cv = std::move(cv), n](Tape<T>& tp, std::size_t self) {
        T g = tp.grad(self)(0, 0) / n;
        Mat<T> ga = Mat<T>::Zero(a.rows(), a.cols());
        for (auto r : rv)
            for (auto c : cv) ga(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) += g;
        tp.accumulate(a.id, ga);
    });
}

}  // namespace reco::ad
