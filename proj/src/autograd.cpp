#include "mmga/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace mmga::ag {

namespace {

thread_local bool g_grad_enabled = true;

Var make_result(Matrix value, std::initializer_list<const Var*> inputs,
                std::function<void(const Node&)> fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (g_grad_enabled) {
        bool any = false;
        for (const Var* in : inputs) {
            any = any || in->requires_grad();
        }
        if (any) {
            node->requires_grad = true;
            for (const Var* in : inputs) {
                node->parents.push_back(in->node());
            }
            node->backward_fn = std::move(fn);
        }
    }
    return Var(std::move(node));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                    " vs " + std::to_string(b.rows()) + "x" +
                                    std::to_string(b.cols()));
    }
}

bool wants(const NodePtr& p) { return p && p->requires_grad; }

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double ordered_sum(std::vector<double>& terms) {
    std::sort(terms.begin(), terms.end());
    double total = 0.0;
    for (double t : terms) total += t;
    return total;
}

}  // namespace

void Node::accumulate(const Matrix& g) {
    if (grad.size() == 0) {
        grad = g;
    } else {
        grad += g;
    }
}

Var Var::constant(Matrix m) {
    auto node = std::make_shared<Node>();
    node->value = std::move(m);
    return Var(std::move(node));
}

Var Var::leaf(Matrix m) {
    auto node = std::make_shared<Node>();
    node->value = std::move(m);
    node->requires_grad = true;
    return Var(std::move(node));
}

Var Var::scalar(double v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
}

double Var::item() const {
    if (node_->value.size() != 1) {
        throw std::logic_error("item() on non-scalar value");
    }
    return node_->value(0, 0);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root, double seed) {
    if (!root.requires_grad()) {
        return;
    }
    if (root.value().size() != 1) {
        throw std::logic_error("backward() requires a scalar root");
    }
    // Iterative post-order DFS for a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    Matrix seed_grad(1, 1);
    seed_grad(0, 0) = seed;
    root.node()->accumulate(seed_grad);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (!node->backward_fn) {
            continue;  // leaf: keep grad
        }
        if (node->grad.size() != 0) {
            node->backward_fn(*node);
        }
        node->grad.resize(0, 0);
    }
}

Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner dimension mismatch " + std::to_string(a.cols()) +
                                    " vs " + std::to_string(b.rows()));
    }
    Matrix out = a.value() * b.value();
    auto pa = a.node();
    auto pb = b.node();
    return make_result(std::move(out), {&a, &b}, [pa, pb](const Node& self) {
        if (wants(pa)) {
            pa->accumulate_expr(self.grad * pb->value.transpose());
        }
        if (wants(pb)) {
            pb->accumulate_expr(pa->value.transpose() * self.grad);
        }
    });
}

Var rowwise_matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("rowwise_matmul: inner dimension mismatch " + std::to_string(a.cols()) +
                                    " vs " + std::to_string(b.rows()));
    }
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    Matrix out = Matrix::Zero(av.rows(), bv.cols());
    for (Index i = 0; i < av.rows(); ++i) {
        for (Index k = 0; k < av.cols(); ++k) {
            const double s = av(i, k);
            for (Index j = 0; j < bv.cols(); ++j) out(i, j) += s * bv(k, j);
        }
    }
    auto pa = a.node();
    auto pb = b.node();
    return make_result(std::move(out), {&a, &b}, [pa, pb](const Node& self) {
        if (wants(pa)) {
            pa->accumulate_expr(self.grad * pb->value.transpose());
        }
        if (wants(pb)) {
            pb->accumulate_expr(pa->value.transpose() * self.grad);
        }
    });
}

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    auto pa = a.node();
    auto pb = b.node();
    return make_result(a.value() + b.value(), {&a, &b}, [pa, pb](const Node& self) {
        if (wants(pa)) pa->accumulate(self.grad);
        if (wants(pb)) pb->accumulate(self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    auto pa = a.node();
    auto pb = b.node();
    return make_result(a.value() - b.value(), {&a, &b}, [pa, pb](const Node& self) {
        if (wants(pa)) pa->accumulate(self.grad);
        if (wants(pb)) pb->accumulate_expr(-self.grad);
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    auto pa = a.node();
    auto pb = b.node();
    return make_result(a.value().cwiseProduct(b.value()), {&a, &b}, [pa, pb](const Node& self) {
        if (wants(pa)) pa->accumulate_expr(self.grad.cwiseProduct(pb->value));
        if (wants(pb)) pb->accumulate_expr(self.grad.cwiseProduct(pa->value));
    });
}

Var scale(const Var& a, double s) {
    auto pa = a.node();
    return make_result(a.value() * s, {&a}, [pa, s](const Node& self) {
        pa->accumulate_expr(self.grad * s);
    });
}

Var add_scalar(const Var& a, double s) {
    auto pa = a.node();
    return make_result(a.value().array() + s, {&a},
                       [pa](const Node& self) { pa->accumulate(self.grad); });
}

Var add_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw std::invalid_argument("add_row: expected 1x" + std::to_string(a.cols()) + " row");
    }
    Matrix out = a.value().rowwise() + row.value().row(0);
    auto pa = a.node();
    auto pr = row.node();
    return make_result(std::move(out), {&a, &row}, [pa, pr](const Node& self) {
        if (wants(pa)) pa->accumulate(self.grad);
        if (wants(pr)) pr->accumulate_expr(self.grad.colwise().sum());
    });
}

Var mul_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw std::invalid_argument("mul_row: expected 1x" + std::to_string(a.cols()) + " row");
    }
    Matrix out = a.value().array().rowwise() * row.value().row(0).array();
    auto pa = a.node();
    auto pr = row.node();
    return make_result(std::move(out), {&a, &row}, [pa, pr](const Node& self) {
        if (wants(pa)) {
            Matrix g = self.grad.array().rowwise() * pr->value.row(0).array();
            pa->accumulate(g);
        }
        if (wants(pr)) pr->accumulate_expr(self.grad.cwiseProduct(pa->value).colwise().sum());
    });
}

Var add_tiled_rows(const Var& a, const Var& block) {
    const Index s = block.rows();
    if (s == 0 || a.rows() % s != 0 || a.cols() != block.cols()) {
        throw std::invalid_argument("add_tiled_rows: incompatible shapes");
    }
    Matrix out = a.value();
    const Index reps = a.rows() / s;
    for (Index r = 0; r < reps; ++r) {
        out.middleRows(r * s, s) += block.value();
    }
    auto pa = a.node();
    auto pb = block.node();
    return make_result(std::move(out), {&a, &block}, [pa, pb, s, reps](const Node& self) {
        if (wants(pa)) pa->accumulate(self.grad);
        if (wants(pb)) {
            Matrix g = Matrix::Zero(s, self.grad.cols());
            for (Index r = 0; r < reps; ++r) {
                g += self.grad.middleRows(r * s, s);
            }
            pb->accumulate(g);
        }
    });
}

Var relu(const Var& a) {
    auto pa = a.node();
    return make_result(a.value().cwiseMax(0.0), {&a}, [pa](const Node& self) {
        pa->accumulate_expr((pa->value.array() > 0.0).select(self.grad, 0.0));
    });
}

Var gelu(const Var& a) {
    const auto& x = a.value().array();
    Matrix out = 0.5 * x * (1.0 + (kGeluC * (x + kGeluA * x.cube())).tanh());
    auto pa = a.node();
    return make_result(std::move(out), {&a}, [pa](const Node& self) {
        const auto& x = pa->value.array();
        auto t = (kGeluC * (x + kGeluA * x.cube())).tanh().eval();
        auto d = (0.5 * (1.0 + t) +
                  0.5 * x * (1.0 - t.square()) * kGeluC * (1.0 + 3.0 * kGeluA * x.square()))
                     .eval();
        pa->accumulate_expr((self.grad.array() * d).matrix());
    });
}

Var sigmoid(const Var& a) {
    Matrix out = a.value().unaryExpr([](double v) {
        return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    });
    auto pa = a.node();
    Matrix y = out;
    return make_result(std::move(out), {&a}, [pa, y = std::move(y)](const Node& self) {
        pa->accumulate_expr((self.grad.array() * y.array() * (1.0 - y.array())).matrix());
    });
}

Var log(const Var& a) {
    auto pa = a.node();
    return make_result(a.value().array().log().matrix(), {&a}, [pa](const Node& self) {
        pa->accumulate_expr((self.grad.array() / pa->value.array()).matrix());
    });
}

Var softplus(const Var& a) {
    Matrix out = a.value().unaryExpr(
        [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); });
    auto pa = a.node();
    return make_result(std::move(out), {&a}, [pa](const Node& self) {
        Matrix s = pa->value.unaryExpr([](double v) {
            return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        });
        pa->accumulate_expr(self.grad.cwiseProduct(s));
    });
}

Var square(const Var& a) {
    auto pa = a.node();
    return make_result(a.value().array().square().matrix(), {&a}, [pa](const Node& self) {
        pa->accumulate_expr(2.0 * self.grad.cwiseProduct(pa->value));
    });
}

Var clamp(const Var& a, double lo, double hi) {
    auto pa = a.node();
    return make_result(a.value().cwiseMax(lo).cwiseMin(hi), {&a}, [pa, lo, hi](const Node& self) {
        auto inside = (pa->value.array() > lo) && (pa->value.array() < hi);
        pa->accumulate_expr(inside.select(self.grad, 0.0));
    });
}

Var detach(const Var& a) { return Var::constant(a.value()); }

Var dropout(const Var& a, double rate, std::uint64_t seed) {
    if (rate <= 0.0) {
        return a;
    }
    if (rate >= 1.0) {
        throw std::invalid_argument("dropout: rate must be < 1");
    }
    std::mt19937_64 rng(seed);
    Matrix mask(a.rows(), a.cols());
    const double keep = 1.0 / (1.0 - rate);
    for (Index i = 0; i < mask.size(); ++i) {
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        mask.data()[i] = u < rate ? 0.0 : keep;
    }
    auto pa = a.node();
    Matrix out = a.value().cwiseProduct(mask);
    return make_result(std::move(out), {&a}, [pa, mask = std::move(mask)](const Node& self) {
        pa->accumulate_expr(self.grad.cwiseProduct(mask));
    });
}

Var sum(const Var& a) {
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    auto pa = a.node();
    return make_result(std::move(out), {&a}, [pa](const Node& self) {
        pa->accumulate_expr(Matrix::Constant(pa->value.rows(), pa->value.cols(), self.grad(0, 0)));
    });
}

Var mean(const Var& a) {
    const auto n = static_cast<double>(a.value().size());
    if (n == 0) {
        throw std::invalid_argument("mean: empty input");
    }
    return scale(sum(a), 1.0 / n);
}

Var row_sum(const Var& a) {
    Matrix out = a.value().rowwise().sum();
    auto pa = a.node();
    return make_result(std::move(out), {&a}, [pa](const Node& self) {
        Matrix g = self.grad.col(0).replicate(1, pa->value.cols());
        pa->accumulate(g);
    });
}

Var softmax_rows(const Var& a) {
    Matrix y = a.value();
    for (Index r = 0; r < y.rows(); ++r) {
        auto row = y.row(r);
        row.array() -= row.maxCoeff();
        row = row.array().exp().matrix();
        row /= row.sum();
    }
    auto pa = a.node();
    Matrix saved = y;
    return make_result(std::move(y), {&a}, [pa, y = std::move(saved)](const Node& self) {
        Matrix dot = self.grad.cwiseProduct(y).rowwise().sum();
        Matrix g = y.array() * (self.grad.colwise() - dot.col(0)).array();
        pa->accumulate(g);
    });
}

Var log_softmax_rows(const Var& a) {
    Matrix y = a.value();
    for (Index r = 0; r < y.rows(); ++r) {
        auto row = y.row(r);
        const double m = row.maxCoeff();
        const double lse = m + std::log((row.array() - m).exp().sum());
        row.array() -= lse;
    }
    auto pa = a.node();
    Matrix probs = y.array().exp();
    return make_result(std::move(y), {&a}, [pa, probs = std::move(probs)](const Node& self) {
        Matrix total = self.grad.rowwise().sum();
        Matrix g = self.grad - (probs.array().colwise() * total.col(0).array()).matrix();
        pa->accumulate(g);
    });
}

Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps) {
    const Index n = x.rows();
    const Index c = x.cols();
    if (gain.rows() != 1 || gain.cols() != c || bias.rows() != 1 || bias.cols() != c) {
        throw std::invalid_argument("layer_norm_rows: gain/bias must be 1x" + std::to_string(c));
    }
    Matrix xhat(n, c);
    Eigen::VectorXd rstd(n);
    for (Index r = 0; r < n; ++r) {
        const double mu = x.value().row(r).mean();
        const double var = (x.value().row(r).array() - mu).square().mean();
        rstd(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (x.value().row(r).array() - mu) * rstd(r);
    }
    Matrix out = xhat.array().rowwise() * gain.value().row(0).array();
    out.rowwise() += bias.value().row(0);
    auto px = x.node();
    auto pg = gain.node();
    auto pb = bias.node();
    return make_result(
        std::move(out), {&x, &gain, &bias},
        [px, pg, pb, xhat = std::move(xhat), rstd = std::move(rstd)](const Node& self) {
            const Matrix& dy = self.grad;
            if (wants(pg)) pg->accumulate_expr(dy.cwiseProduct(xhat).colwise().sum());
            if (wants(pb)) pb->accumulate_expr(dy.colwise().sum());
            if (wants(px)) {
                Matrix dxhat = dy.array().rowwise() * pg->value.row(0).array();
                Matrix dx(dxhat.rows(), dxhat.cols());
                for (Index r = 0; r < dxhat.rows(); ++r) {
                    const double m1 = dxhat.row(r).mean();
                    const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                    dx.row(r) = rstd(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                }
                px->accumulate(dx);
            }
        });
}

Var l2_normalize_rows(const Var& a, double eps) {
    const Index n = a.rows();
    Eigen::VectorXd norms(n);
    Matrix out(n, a.cols());
    for (Index r = 0; r < n; ++r) {
        norms(r) = a.value().row(r).norm();
        out.row(r) = a.value().row(r) / (norms(r) + eps);
    }
    auto pa = a.node();
    return make_result(std::move(out), {&a}, [pa, norms, eps](const Node& self) {
        const Matrix& x = pa->value;
        Matrix g(x.rows(), x.cols());
        for (Index r = 0; r < x.rows(); ++r) {
            const double denom = norms(r) + eps;
            g.row(r) = self.grad.row(r) / denom;
            if (norms(r) > 0.0) {
                const double proj = self.grad.row(r).dot(x.row(r));
                g.row(r) -= x.row(r) * (proj / (denom * denom * norms(r)));
            }
        }
        pa->accumulate(g);
    });
}

Var transpose(const Var& a) {
    auto pa = a.node();
    return make_result(a.value().transpose(), {&a}, [pa](const Node& self) {
        pa->accumulate_expr(self.grad.transpose());
    });
}

Var gather_rows(const Var& a, std::span<const Index> idx) {
    Matrix out(static_cast<Index>(idx.size()), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= a.rows()) {
            throw std::out_of_range("gather_rows: index " + std::to_string(idx[i]) +
                                    " out of range for " + std::to_string(a.rows()) + " rows");
        }
        out.row(static_cast<Index>(i)) = a.value().row(idx[i]);
    }
    auto pa = a.node();
    std::vector<Index> saved(idx.begin(), idx.end());
    return make_result(std::move(out), {&a}, [pa, saved = std::move(saved)](const Node& self) {
        Matrix g = Matrix::Zero(pa->value.rows(), pa->value.cols());
        for (std::size_t i = 0; i < saved.size(); ++i) {
            g.row(saved[i]) += self.grad.row(static_cast<Index>(i));
        }
        pa->accumulate(g);
    });
}

Var overwrite_rows(const Var& base, std::span<const Index> idx, const Var& rows) {
    if (rows.rows() != static_cast<Index>(idx.size()) || rows.cols() != base.cols()) {
        throw std::invalid_argument("overwrite_rows: shape mismatch");
    }
    Matrix out = base.value();
    std::vector<char> seen(static_cast<std::size_t>(base.rows()), 0);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= base.rows()) {
            throw std::out_of_range("overwrite_rows: index out of range");
        }
        if (seen[static_cast<std::size_t>(idx[i])]++) {
            throw std::invalid_argument("overwrite_rows: duplicate index");
        }
        out.row(idx[i]) = rows.value().row(static_cast<Index>(i));
    }
    auto pbase = base.node();
    auto prows = rows.node();
    std::vector<Index> saved(idx.begin(), idx.end());
    return make_result(std::move(out), {&base, &rows},
                       [pbase, prows, saved = std::move(saved)](const Node& self) {
                           if (wants(pbase)) {
                               Matrix g = self.grad;
                               for (Index i : saved) g.row(i).setZero();
                               pbase->accumulate(g);
                           }
                           if (wants(prows)) {
                               Matrix g(static_cast<Index>(saved.size()), self.grad.cols());
                               for (std::size_t i = 0; i < saved.size(); ++i) {
                                   g.row(static_cast<Index>(i)) = self.grad.row(saved[i]);
                               }
                               prows->accumulate(g);
                           }
                       });
}

Var broadcast_rows(const Var& row, Index n) {
    if (row.rows() != 1) {
        throw std::invalid_argument("broadcast_rows: expected a single row");
    }
    auto pr = row.node();
    return make_result(row.value().replicate(n, 1), {&row}, [pr](const Node& self) {
        pr->accumulate_expr(self.grad.colwise().sum());
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) {
        throw std::invalid_argument("concat_cols: no inputs");
    }
    const Index n = parts.front().rows();
    Index total = 0;
    for (const auto& p : parts) {
        if (p.rows() != n) {
            throw std::invalid_argument("concat_cols: row count mismatch");
        }
        total += p.cols();
    }
    Matrix out(n, total);
    Index at = 0;
    for (const auto& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    auto node = std::make_shared<Node>();
    node->value = std::move(out);
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (g_grad_enabled && any) {
        node->requires_grad = true;
        std::vector<NodePtr> ps;
        for (const auto& p : parts) ps.push_back(p.node());
        node->parents = ps;
        node->backward_fn = [ps](const Node& self) {
            Index at = 0;
            for (const auto& p : ps) {
                const Index w = p->value.cols();
                if (wants(p)) p->accumulate(self.grad.middleCols(at, w));
                at += w;
            }
        };
    }
    return Var(std::move(node));
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) {
        throw std::invalid_argument("concat_rows: no inputs");
    }
    const Index c = parts.front().cols();
    Index total = 0;
    for (const auto& p : parts) {
        if (p.cols() != c) {
            throw std::invalid_argument("concat_rows: column count mismatch");
        }
        total += p.rows();
    }
    Matrix out(total, c);
    Index at = 0;
    for (const auto& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    auto node = std::make_shared<Node>();
    node->value = std::move(out);
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (g_grad_enabled && any) {
        node->requires_grad = true;
        std::vector<NodePtr> ps;
        for (const auto& p : parts) ps.push_back(p.node());
        node->parents = ps;
        node->backward_fn = [ps](const Node& self) {
            Index at = 0;
            for (const auto& p : ps) {
                const Index h = p->value.rows();
                if (wants(p)) p->accumulate(self.grad.middleRows(at, h));
                at += h;
            }
        };
    }
    return Var(std::move(node));
}

Var slice_cols(const Var& a, Index start, Index count) {
    if (start < 0 || count < 0 || start + count > a.cols()) {
        throw std::out_of_range("slice_cols: range out of bounds");
    }
    auto pa = a.node();
    return make_result(a.value().middleCols(start, count), {&a}, [pa, start, count](const Node& self) {
        Matrix g = Matrix::Zero(pa->value.rows(), pa->value.cols());
        g.middleCols(start, count) = self.grad;
        pa->accumulate(g);
    });
}

Var gather_elements(const Var& a, std::span<const Index> index, Index rows, Index cols) {
    if (static_cast<Index>(index.size()) != rows * cols) {
        throw std::invalid_argument("gather_elements: index size does not match output shape");
    }
    Matrix out(rows, cols);
    const double* src = a.value().data();
    const Index n = a.value().size();
    for (Index i = 0; i < rows * cols; ++i) {
        if (index[i] < 0 || index[i] >= n) {
            throw std::out_of_range("gather_elements: index out of range");
        }
        out.data()[i] = src[index[i]];
    }
    auto pa = a.node();
    std::vector<Index> saved(index.begin(), index.end());
    return make_result(std::move(out), {&a}, [pa, saved = std::move(saved)](const Node& self) {
        Matrix g = Matrix::Zero(pa->value.rows(), pa->value.cols());
        for (std::size_t i = 0; i < saved.size(); ++i) {
            g.data()[saved[i]] += self.grad.data()[i];
        }
        pa->accumulate(g);
    });
}

Var segment_mean(const Var& a, std::span<const Index> offsets) {
    if (offsets.empty() || offsets.back() != a.rows()) {
        throw std::invalid_argument("segment_mean: offsets must end at the row count");
    }
    const Index n_seg = static_cast<Index>(offsets.size()) - 1;
    Matrix out = Matrix::Zero(n_seg, a.cols());
    for (Index s = 0; s < n_seg; ++s) {
        const Index lo = offsets[s];
        const Index hi = offsets[s + 1];
        if (hi > lo) {
            out.row(s) = a.value().middleRows(lo, hi - lo).colwise().sum() / static_cast<double>(hi - lo);
        }
    }
    auto pa = a.node();
    std::vector<Index> saved(offsets.begin(), offsets.end());
    return make_result(std::move(out), {&a}, [pa, saved = std::move(saved)](const Node& self) {
        Matrix g(pa->value.rows(), pa->value.cols());
        for (std::size_t s = 0; s + 1 < saved.size(); ++s) {
            const Index lo = saved[s];
            const Index hi = saved[s + 1];
            for (Index r = lo; r < hi; ++r) {
                g.row(r) = self.grad.row(static_cast<Index>(s)) / static_cast<double>(hi - lo);
            }
        }
        pa->accumulate(g);
    });
}

Var segment_softmax(const Var& z, std::span<const Index> offsets) {
    if (z.cols() != 1 || offsets.empty() || offsets.back() != z.rows()) {
        throw std::invalid_argument("segment_softmax: expects an Ex1 column and matching offsets");
    }
    Matrix y(z.rows(), 1);
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
        const Index lo = offsets[s];
        const Index hi = offsets[s + 1];
        if (hi == lo) continue;
        const double m = z.value().middleRows(lo, hi - lo).maxCoeff();
        std::vector<double> terms;
        for (Index e = lo; e < hi; ++e) {
            y(e, 0) = std::exp(z.value()(e, 0) - m);
            terms.push_back(y(e, 0));
        }
        const double total = ordered_sum(terms);
        for (Index e = lo; e < hi; ++e) y(e, 0) /= total;
    }
    auto pz = z.node();
    std::vector<Index> saved(offsets.begin(), offsets.end());
    Matrix ysaved = y;
    return make_result(std::move(y), {&z},
                       [pz, saved = std::move(saved), y = std::move(ysaved)](const Node& self) {
                           Matrix g(y.rows(), 1);
                           for (std::size_t s = 0; s + 1 < saved.size(); ++s) {
                               const Index lo = saved[s];
                               const Index hi = saved[s + 1];
                               double dot = 0.0;
                               for (Index e = lo; e < hi; ++e) dot += self.grad(e, 0) * y(e, 0);
                               for (Index e = lo; e < hi; ++e) g(e, 0) = y(e, 0) * (self.grad(e, 0) - dot);
                           }
                           pz->accumulate(g);
                       });
}

Var segment_weighted_sum(const Var& weight, const Var& h, std::span<const Index> offsets,
                         std::span<const Index> target) {
    const Index n_edges = weight.rows();
    if (weight.cols() != 1 || static_cast<Index>(target.size()) != n_edges || offsets.empty() ||
        offsets.back() != n_edges) {
        throw std::invalid_argument("segment_weighted_sum: weight/offsets/target mismatch");
    }
    const Index n_seg = static_cast<Index>(offsets.size()) - 1;
    for (Index e = 0; e < n_edges; ++e) {
        if (target[e] < 0 || target[e] >= h.rows()) {
            throw std::out_of_range("segment_weighted_sum: target out of range");
        }
    }
    // Neighbor terms are summed in sorted order so the result does not depend
    // on how node ids order the adjacency rows.
    Matrix out = Matrix::Zero(n_seg, h.cols());
    std::vector<double> terms;
    for (Index s = 0; s < n_seg; ++s) {
        for (Index c = 0; c < h.cols(); ++c) {
            terms.clear();
            for (Index e = offsets[s]; e < offsets[s + 1]; ++e) {
                terms.push_back(weight.value()(e, 0) * h.value()(target[e], c));
            }
            out(s, c) = ordered_sum(terms);
        }
    }
    auto pw = weight.node();
    auto ph = h.node();
    std::vector<Index> off(offsets.begin(), offsets.end());
    std::vector<Index> tgt(target.begin(), target.end());
    return make_result(std::move(out), {&weight, &h},
                       [pw, ph, off = std::move(off), tgt = std::move(tgt)](const Node& self) {
                           Matrix gw;
                           Matrix gh;
                           if (wants(pw)) gw = Matrix::Zero(pw->value.rows(), 1);
                           if (wants(ph)) gh = Matrix::Zero(ph->value.rows(), ph->value.cols());
                           for (std::size_t s = 0; s + 1 < off.size(); ++s) {
                               const auto row = self.grad.row(static_cast<Index>(s));
                               for (Index e = off[s]; e < off[s + 1]; ++e) {
                                   if (gw.size()) gw(e, 0) = row.dot(ph->value.row(tgt[e]));
                                   if (gh.size()) gh.row(tgt[e]) += pw->value(e, 0) * row;
                               }
                           }
                           if (gw.size()) pw->accumulate(gw);
                           if (gh.size()) ph->accumulate(gh);
                       });
}

Var attention(const Var& q, const Var& k, const Var& v, Index batch, Index seq_len, int n_heads,
              std::span<const Index> lengths) {
    require_same_shape(q, k, "attention");
    require_same_shape(q, v, "attention");
    const Index d = q.cols();
    if (q.rows() != batch * seq_len || n_heads <= 0 || d % n_heads != 0 ||
        static_cast<Index>(lengths.size()) != batch) {
        throw std::invalid_argument("attention: inconsistent batch/sequence/head configuration");
    }
    const Index dh = d / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    // probs[(b * n_heads + h)] is seq_len x seq_len
    auto probs = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(batch * n_heads));
    Matrix out(q.rows(), d);
    std::vector<Index> lens(lengths.begin(), lengths.end());
    for (Index b = 0; b < batch; ++b) {
        if (lens[b] < 1 || lens[b] > seq_len) {
            throw std::invalid_argument("attention: sequence length out of range");
        }
    }
    const Matrix& Q = q.value();
    const Matrix& K = k.value();
    const Matrix& V = v.value();
#pragma omp parallel for schedule(static)
    for (Index b = 0; b < batch; ++b) {
        const Index len = lens[b];
        for (int h = 0; h < n_heads; ++h) {
            auto qb = Q.block(b * seq_len, h * dh, seq_len, dh);
            auto kb = K.block(b * seq_len, h * dh, len, dh);
            auto vb = V.block(b * seq_len, h * dh, len, dh);
            Matrix p = (qb * kb.transpose()) * inv_sqrt;
            for (Index r = 0; r < seq_len; ++r) {
                auto row = p.row(r);
                row.array() -= row.maxCoeff();
                row = row.array().exp().matrix();
                row /= row.sum();
            }
            out.block(b * seq_len, h * dh, seq_len, dh) = p * vb;
            (*probs)[static_cast<std::size_t>(b * n_heads + h)] = std::move(p);
        }
    }
    auto pq = q.node();
    auto pk = k.node();
    auto pv = v.node();
    return make_result(
        std::move(out), {&q, &k, &v},
        [pq, pk, pv, probs, batch, seq_len, n_heads, dh, inv_sqrt, lens](const Node& self) {
            const Index d = self.grad.cols();
            Matrix dq = Matrix::Zero(batch * seq_len, d);
            Matrix dk = Matrix::Zero(batch * seq_len, d);
            Matrix dv = Matrix::Zero(batch * seq_len, d);
            const Matrix& Q = pq->value;
            const Matrix& K = pk->value;
            const Matrix& V = pv->value;
#pragma omp parallel for schedule(static)
            for (Index b = 0; b < batch; ++b) {
                const Index len = lens[b];
                for (int h = 0; h < n_heads; ++h) {
                    const Matrix& p = (*probs)[static_cast<std::size_t>(b * n_heads + h)];
                    auto go = self.grad.block(b * seq_len, h * dh, seq_len, dh);
                    auto qb = Q.block(b * seq_len, h * dh, seq_len, dh);
                    auto kb = K.block(b * seq_len, h * dh, len, dh);
                    auto vb = V.block(b * seq_len, h * dh, len, dh);
                    dv.block(b * seq_len, h * dh, len, dh) = p.transpose() * go;
                    Matrix dp = go * vb.transpose();
                    Matrix ds(seq_len, len);
                    for (Index r = 0; r < seq_len; ++r) {
                        const double dot = dp.row(r).dot(p.row(r));
                        ds.row(r) = p.row(r).array() * (dp.row(r).array() - dot);
                    }
                    ds *= inv_sqrt;
                    dq.block(b * seq_len, h * dh, seq_len, dh) = ds * kb;
                    dk.block(b * seq_len, h * dh, len, dh) = ds.transpose() * qb;
                }
            }
            if (wants(pq)) pq->accumulate(dq);
            if (wants(pk)) pk->accumulate(dk);
            if (wants(pv)) pv->accumulate(dv);
        });
}

}  // namespace mmga::ag
