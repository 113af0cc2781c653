#include "idgenrec/autodiff.hpp"

#include <cmath>
#include <numbers>

#include "idgenrec/error.hpp"

namespace idgenrec::ad {

namespace {

void check(bool ok, const char* what) {
    if (!ok) throw Error(ErrorKind::ShapeMismatch, what);
}

} // namespace

std::size_t Tape::idx(Var v) const {
    if (v.index < 0 || static_cast<std::size_t>(v.index) >= nodes_.size())
        throw Error(ErrorKind::InvalidInput, "variable does not belong to this tape");
    return static_cast<std::size_t>(v.index);
}

Var Tape::push(Mat value, bool requires_grad, std::function<void(Tape&)> backprop) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
}

const Mat& Tape::value(Var v) const {
    const auto& n = nodes_[idx(v)];
    return n.external ? *n.external : n.value;
}

const Mat& Tape::grad(Var v) const { return nodes_[idx(v)].grad; }

Mat& Tape::grad_mut(Var v) { return nodes_[idx(v)].grad; }

Var Tape::constant(Mat value) { return push(std::move(value), false, nullptr); }

Var Tape::input(Mat value) { return push(std::move(value), true, [](Tape&) {}); }

Var Tape::ref(const Mat& value, bool track) {
    Var v = push(Mat(), track, [](Tape&) {});
    nodes_.back().external = &value;
    return v;
}

Var Tape::gather_rows(Var table, std::span<const TokenId> ids) {
    const Mat& t = value(table);
    Mat out(static_cast<Eigen::Index>(ids.size()), t.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        check(ids[i] >= 0 && ids[i] < t.rows(), "gather_rows: id out of range");
        out.row(static_cast<Eigen::Index>(i)) = t.row(ids[i]);
    }
    std::vector<TokenId> keep(ids.begin(), ids.end());
    Var out_v{static_cast<int>(nodes_.size())};
    return push(std::move(out), tracks(table), [=, keep = std::move(keep)](Tape& tp) {
        const Mat& g = tp.grad(out_v);
        Mat& gt = tp.grad_mut(table);
        for (std::size_t i = 0; i < keep.size(); ++i) gt.row(keep[i]) += g.row(static_cast<Eigen::Index>(i));
    });
}

Var Tape::rows(Var a, Eigen::Index start, Eigen::Index count) {
    const Mat& m = value(a);
    check(start >= 0 && count >= 0 && start + count <= m.rows(), "rows: range out of bounds");
    Mat out = m.middleRows(start, count);
    Var out_v{static_cast<int>(nodes_.size())};
    return push(std::move(out), tracks(a), [=](Tape& tp) {
        tp.grad_mut(a).middleRows(start, count) += tp.grad(out_v);
    });
}

Var Tape::cols(Var a, Eigen::Index start, Eigen::Index count) {
    const Mat& m = value(a);
    check(start >= 0 && count >= 0 && start + count <= m.cols(), "cols: range out of bounds");
    Mat out = m.middleCols(start, count);
    Var out_v{static_cast<int>(nodes_.size())};
    return push(std::move(out), tracks(a), [=](Tape& tp) {
        tp.grad_mut(a).middleCols(start, count) += tp.grad(out_v);
    });
}

Var Tape::concat_cols(std::span<const Var> parts) {
    check(!parts.empty(), "concat_cols: no inputs");
    Eigen::Index rows_n = value(parts[0]).rows();
    Eigen::Index total = 0;
    bool rg = false;
    for (Var p : parts) {
        check(value(p).rows() == rows_n, "concat_cols: row mismatch");
        total += value(p).cols();
        rg = rg || tracks(p);
    }
    Mat out(rows_n, total);
    std::vector<std::pair<Var, Eigen::Index>> offsets;
    Eigen::Index off = 0;
    for (Var p : parts) {
        out.middleCols(off, value(p).cols()) = value(p);
        offsets.emplace_back(p, off);
        off += value(p).cols();
    }
    Var out_v{static_cast<int>(nodes_.size())};
    return push(std::move(out), rg, [=, offsets = std::move(offsets)](Tape& tp) {
        const Mat& g = tp.grad(out_v);
        for (auto [p, o] : offsets)
            if (tp.tracks(p)) tp.grad_mut(p) += g.middleCols(o, tp.value(p).cols());
    });
}

Var Tape::splice_rows(Var base, Var insert, Eigen::Index start) {
    const Mat& b = value(base);
    const Mat& ins = value(insert);
    check(b.cols() == ins.cols(), "splice_rows: width mismatch");
    check(start >= 0 && start + ins.rows() <= b.rows(), "splice_rows: range out of bounds");
    Mat out = b;
    out.middleRows(start, ins.rows()) = ins;
    const Eigen::Index n = ins.rows();
    Var out_v{static_cast<int>(nodes_.size())};
    return push(std::move(out), tracks(base) || tracks(insert), [=](Tape& tp) {
        const Mat& g = tp.grad(out_v);
        if (tp.tracks(base)) {
            Mat gb = g;
            gb.middleRows(start, n).setZero();
            tp.grad_mut(base) += gb;
        }
        if (tp.tracks(insert)) tp.grad_mut(insert) += g.middleRows(start, n);
    });
}

Var Tape::add(Var a, Var b) {
    check(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(), "add: shape mismatch");
    Mat out = value(a) + value(b);
    Var out_v{static_cast<int>(nodes_.size())};
    return push(std::move(out), tracks(a) || tracks(b), [=](Tape& tp) {
        const Mat& g = tp.grad(out_v);
        if (tp.tracks(a)) tp.grad_mut(a) += g;
        if (tp.tracks(b)) tp.grad_mut(b) += g;
    });
}

Var Tape::add_row(Var a, Var row) {
    check(value(row).rows() == 1 && value(row).cols() == value(a).cols(), "add_row: shape mismatch");
    Mat out = value(a).rowwise() + value(row).row(0);
    Var out_v{static_cast<int>(nodes_.size())};
    return push(std::move(out), tracks(a) || tracks(row), [=](Tape& tp) {
        const Mat& g = tp.grad(out_v);
        if (tp.tracks(a)) tp.grad_mut(a) += g;
        if (tp.tracks(row)) tp.grad_mut(row) += g.colwise().sum();
    });
}

Var Tape::scale(Var a, double s) {
    Mat out = value(a) * s;
    Var out_v{static_cast<int>(nodes_.size())};
    return push(std::move(out), tracks(a), [=](Tape& tp) { tp.grad_mut(a) += tp.grad(out_v) * s; });
}

Var Tape::matmul(Var a, Var b) {
    check(value(a).cols() == value(b).rows(), "matmul: inner dimension mismatch");
    Mat out = value(a) * value(b);
    Var out_v{static_cast<int>(nodes_.size())};
    return push(std::move(out), tracks(a) || tracks(b), [=](Tape& tp) {
        const Mat& g = tp.grad(out_v);
        if (tp.tracks(a)) tp.grad_mut(a).noalias() += g * tp.value(b).transpose();
        if (tp.tracks(b)) tp.grad_mut(b).noalias() += tp.value(a).transpose() * g;
    });
}

Var Tape::matmul_nt(Var a, Var b) {
    check(value(a).cols() == value(b).cols(), "matmul_nt: inner dimension mismatch");
    Mat out = value(a) * value(b).transpose();
    Var out_v{static_cast<int>(nodes_.size())};
    return push(std::move(out), tracks(a) || tracks(b), [=](Tape& tp) {
        const Mat& g = tp.grad(out_v);
        if (tp.tracks(a)) tp.grad_mut(a).noalias() += g * tp.value(b);
        if (tp.tracks(b)) tp.grad_mut(b).noalias() += g.transpose() * tp.value(a);
    });
}

Var Tape::layer_norm(Var a, double eps) {
    const Mat& x = value(a);
    const auto d = static_cast<double>(x.cols());
    Mat y(x.rows(), x.cols());
    Eigen::VectorXd inv_sigma(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double mu = x.row(i).sum() / d;
        const double var = (x.row(i).array() - mu).square().sum() / d;
        inv_sigma[i] = 1.0 / std::sqrt(var + eps);
        y.row(i) = (x.row(i).array() - mu) * inv_sigma[i];
    }
    Var out_v{static_cast<int>(nodes_.size())};
    return push(y, tracks(a), [=](Tape& tp) {
        const Mat& g = tp.grad(out_v);
        const Mat& yv = tp.value(out_v);
        Mat& ga = tp.grad_mut(a);
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
            const double mean_g = g.row(i).sum() / d;
            const double mean_gy = g.row(i).dot(yv.row(i)) / d;
            ga.row(i).array() += inv_sigma[i] * (g.row(i).array() - mean_g - yv.row(i).array() * mean_gy);
        }
    });
}

Var Tape::gelu(Var a) {
    constexpr double c = 0.7978845608028654; // sqrt(2 / pi)
    constexpr double k = 0.044715;
    const Mat& x = value(a);
    Mat out = x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v))); });
    Var out_v{static_cast<int>(nodes_.size())};
    return push(std::move(out), tracks(a), [=](Tape& tp) {
        const Mat& xv = tp.value(a);
        Mat deriv = xv.unaryExpr([](double v) {
            const double t = std::tanh(c * (v + k * v * v * v));
            return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * k * v * v);
        });
        tp.grad_mut(a).array() += tp.grad(out_v).array() * deriv.array();
    });
}

Var Tape::softmax_rows(Var a, bool causal) {
    const Mat& x = value(a);
    if (causal) check(x.rows() <= x.cols(), "softmax_rows: causal mask needs rows <= cols");
    Mat y = Mat::Zero(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const Eigen::Index n = causal ? i + 1 : x.cols();
        if (n == 0) continue;
        auto row = x.row(i).head(n);
        const double mx = row.maxCoeff();
        auto e = (row.array() - mx).exp();
        y.row(i).head(n) = e / e.sum();
    }
    Var out_v{static_cast<int>(nodes_.size())};
    return push(std::move(y), tracks(a), [=](Tape& tp) {
        const Mat& g = tp.grad(out_v);
        const Mat& yv = tp.value(out_v);
        Mat& ga = tp.grad_mut(a);
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
            const double dot = g.row(i).dot(yv.row(i));
            ga.row(i).array() += yv.row(i).array() * (g.row(i).array() - dot);
        }
    });
}

Var Tape::nll(Var logits, std::span<const TokenId> targets) {
    const Mat& z = value(logits);
    check(static_cast<std::size_t>(z.rows()) == targets.size(), "nll: one target per row required");
    Mat probs(z.rows(), z.cols());
    double total = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const auto t = targets[static_cast<std::size_t>(i)];
        check(t >= 0 && t < z.cols(), "nll: target out of range");
        const double mx = z.row(i).maxCoeff();
        auto e = (z.row(i).array() - mx).exp();
        const double s = e.sum();
        probs.row(i) = e / s;
        total += -(z(i, t) - mx - std::log(s));
    }
    Mat out(1, 1);
    out(0, 0) = total;
    std::vector<TokenId> keep(targets.begin(), targets.end());
    Var out_v{static_cast<int>(nodes_.size())};
    return push(std::move(out), tracks(logits), [=, probs = std::move(probs), keep = std::move(keep)](Tape& tp) {
        const double g = tp.grad(out_v)(0, 0);
        Mat d = probs;
        for (std::size_t i = 0; i < keep.size(); ++i) d(static_cast<Eigen::Index>(i), keep[i]) -= 1.0;
        tp.grad_mut(logits) += g * d;
    });
}

Var Tape::sum(Var a) {
    Mat out(1, 1);
    out(0, 0) = value(a).sum();
    Var out_v{static_cast<int>(nodes_.size())};
    return push(std::move(out), tracks(a), [=](Tape& tp) {
        tp.grad_mut(a).array() += tp.grad(out_v)(0, 0);
    });
}

void Tape::backward(Var loss) {
    const auto last = idx(loss);
    check(value(loss).size() == 1, "backward: loss must be a scalar");
    for (std::size_t i = 0; i <= last; ++i) {
        auto& n = nodes_[i];
        if (!n.requires_grad) continue;
        const Mat& v = n.external ? *n.external : n.value;
        n.grad = Mat::Zero(v.rows(), v.cols());
    }
    if (!nodes_[last].requires_grad) return;
    nodes_[last].grad(0, 0) = 1.0;
    for (std::size_t i = last + 1; i-- > 0;) {
        auto& n = nodes_[i];
        if (n.requires_grad && n.backprop) n.backprop(*this);
    }
}

} // namespace idgenrec::ad
