#pragma once

#include <functional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "idgenrec/tokenizer.hpp"

namespace idgenrec::ad {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Var {
    int index = -1;
    bool valid() const noexcept { return index >= 0; }
};

/// Reverse-mode tape over row-major double matrices. Rows are sequence
/// positions, columns are features. A tape records one forward pass;
/// backward() may be called any number of times and always recomputes
/// gradients from scratch.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Constant input, no gradient.
    Var constant(Mat value);
    /// Constant input whose gradient is still tracked (inputs to probe).
    Var input(Mat value);
    /// Leaf referencing external storage; `track` decides whether gradients flow into it.
    Var ref(const Mat& value, bool track);

    const Mat& value(Var v) const;
    const Mat& grad(Var v) const;
    bool tracks(Var v) const { return nodes_[idx(v)].requires_grad; }

    Var gather_rows(Var table, std::span<const TokenId> ids);
    Var rows(Var a, Eigen::Index start, Eigen::Index count);
    Var cols(Var a, Eigen::Index start, Eigen::Index count);
    Var concat_cols(std::span<const Var> parts);
    /// Copy of `base` with rows [start, start + insert.rows()) replaced by `insert`.
    Var splice_rows(Var base, Var insert, Eigen::Index start);

    Var add(Var a, Var b);
    Var add_row(Var a, Var row);
    Var scale(Var a, double s);
    Var matmul(Var a, Var b);
    /// a * b^T
    Var matmul_nt(Var a, Var b);

    Var layer_norm(Var a, double eps = 1e-5);
    Var gelu(Var a);
    /// Row softmax. With `causal`, entry (i, j) is masked when j > i.
    Var softmax_rows(Var a, bool causal = false);

    /// Sum over rows i of -log softmax(logits.row(i))[targets[i]]; a 1x1 result.
    Var nll(Var logits, std::span<const TokenId> targets);
    Var sum(Var a);

    void backward(Var loss);

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Mat value;
        const Mat* external = nullptr;
        Mat grad;
        bool requires_grad = false;
        std::function<void(Tape&)> backprop;
    };

    std::size_t idx(Var v) const;
    Var push(Mat value, bool requires_grad, std::function<void(Tape&)> backprop);
    Mat& grad_mut(Var v);

    std::vector<Node> nodes_;
};

} // namespace idgenrec::ad
