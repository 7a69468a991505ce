#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// double matrices. Every value is a 2-D matrix; scalars are 1x1.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace mmga::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Matrix value;
    Matrix grad;  // empty until something flows into it
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    // Receives this node (value + accumulated grad) and pushes into parents.
    std::function<void(const Node&)> backward_fn;

    void accumulate(const Matrix& g);
    template <typename Expr>
    void accumulate_expr(const Expr& g) {
        if (grad.size() == 0) {
            grad = g;
        } else {
            grad += g;
        }
    }
};

class Var {
public:
    Var() = default;
    explicit Var(NodePtr node) : node_(std::move(node)) {}

    static Var constant(Matrix m);
    static Var leaf(Matrix m);  // requires grad
    static Var scalar(double v);

    const Matrix& value() const { return node_->value; }
    Matrix& mutable_value() { return node_->value; }
    const Matrix& grad() const { return node_->grad; }
    Matrix& mutable_grad() { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    Index rows() const { return node_->value.rows(); }
    Index cols() const { return node_->value.cols(); }
    double item() const;
    bool defined() const { return static_cast<bool>(node_); }
    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

/// Runs backpropagation from a scalar root, seeding d(root)/d(root) = seed.
void backward(const Var& root, double seed = 1.0);

bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// --- elementwise / linear algebra ---
Var matmul(const Var& a, const Var& b);
// Same product with a fixed per-row summation order: row i of the result
// depends only on row i of a, bit for bit.
Var rowwise_matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var add_row(const Var& a, const Var& row);  // broadcast 1xC over rows
Var mul_row(const Var& a, const Var& row);  // broadcast 1xC over rows
Var add_tiled_rows(const Var& a, const Var& block);  // a is (B*S)xC, block is SxC
Var relu(const Var& a);
Var gelu(const Var& a);
Var sigmoid(const Var& a);
Var log(const Var& a);
Var softplus(const Var& a);
Var square(const Var& a);
Var clamp(const Var& a, double lo, double hi);
Var detach(const Var& a);
Var dropout(const Var& a, double rate, std::uint64_t seed);

// --- reductions ---
Var sum(const Var& a);
Var mean(const Var& a);
Var row_sum(const Var& a);

// --- row-wise normalizations ---
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
Var l2_normalize_rows(const Var& a, double eps);

// --- structural ---
Var transpose(const Var& a);
Var gather_rows(const Var& a, std::span<const Index> idx);
Var overwrite_rows(const Var& base, std::span<const Index> idx, const Var& rows);
Var broadcast_rows(const Var& row, Index n);  // 1xC -> nxC
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(const Var& a, Index start, Index count);
// out(r, c) = a.flat[index[r*cols + c]] with scatter-add backward.
Var gather_elements(const Var& a, std::span<const Index> index, Index rows, Index cols);

// Mean over contiguous row segments [offsets[i], offsets[i+1]); empty segment -> zeros.
Var segment_mean(const Var& a, std::span<const Index> offsets);
// Softmax of a column vector z (Ex1) within each segment of offsets.
Var segment_softmax(const Var& z, std::span<const Index> offsets);
// out[u] = sum_{e in segment u} weight[e] * h[target[e]].
Var segment_weighted_sum(const Var& weight, const Var& h, std::span<const Index> offsets,
                         std::span<const Index> target);

// Multi-head scaled dot-product attention over `batch` independent sequences
// of `seq_len` rows each. Keys at positions >= lengths[b] are masked out.
Var attention(const Var& q, const Var& k, const Var& v, Index batch, Index seq_len, int n_heads,
              std::span<const Index> lengths);

}  // namespace mmga::ag
