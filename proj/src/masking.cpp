#include <algorithm>
#include <cmath>
#include <numeric>

#include "mmga/error.hpp"
#include "mmga/harness.hpp"
#include "mmga/rng.hpp"

namespace mmga::train {

namespace {

void check_rate(double rate, const char* op, bool allow_one = true) {
    const bool ok = rate >= 0.0 && (allow_one ? rate <= 1.0 : rate < 1.0);
    if (!ok) {
        fail(ErrorCode::InvalidArgument, std::string(op) + ": rate " + std::to_string(rate) + " must lie in [0," +
                                             (allow_one ? "1]" : "1)"));
    }
}

}  // namespace

TokenMask mask_tokens(std::span<const std::int32_t> tokens, std::int32_t mask_id, double rate, std::uint64_t seed) {
    check_rate(rate, "mask_tokens");
    TokenMask out{{tokens.begin(), tokens.end()}, {}};
    Rng rng(seed);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (rng.bernoulli(rate)) out.positions.push_back(static_cast<ag::Index>(i));
    }
    if (rate > 0.0 && out.positions.empty() && !tokens.empty()) {
        out.positions.push_back(static_cast<ag::Index>(rng.below(tokens.size())));
    }
    for (auto p : out.positions) out.tokens[static_cast<std::size_t>(p)] = mask_id;
    return out;
}

NodeMask mask_node_features(const ag::Var& x, const ag::Var& mask_vector, double rate, std::uint64_t seed) {
    check_rate(rate, "mask_node_features");
    if (mask_vector.rows() != 1 || mask_vector.cols() != x.cols()) {
        fail(ErrorCode::ShapeMismatch, "mask_node_features: mask vector width differs from the feature width");
    }
    NodeMask out{x, {}};
    Rng rng(seed);
    for (ag::Index u = 0; u < x.rows(); ++u) {
        if (rng.bernoulli(rate)) out.nodes.push_back(u);
    }
    if (!out.nodes.empty()) {
        out.x = ag::overwrite_rows(x, out.nodes,
                                   ag::broadcast_rows(mask_vector, static_cast<ag::Index>(out.nodes.size())));
    }
    return out;
}

EdgeMask mask_edges(const data::SocialGraph& graph, double rate, std::uint64_t seed) {
    check_rate(rate, "mask_edges", false);
    const std::size_t m = graph.edges.size();
    const auto count = static_cast<std::size_t>(std::llround(rate * static_cast<double>(m)));
    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    rng.shuffle(idx);
    std::vector<bool> removed(m, false);
    for (std::size_t i = 0; i < count; ++i) removed[idx[i]] = true;
    EdgeMask out;
    std::vector<data::NodePair> kept;
    kept.reserve(m - count);
    for (std::size_t e = 0; e < m; ++e) {
        (removed[e] ? out.masked : kept).push_back(graph.edges[e]);
    }
    out.graph = data::SocialGraph::from_edges(graph.n_nodes, std::move(kept));
    return out;
}

void Optimizer::step(ParamStore& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& e : params.entries()) {
        const ag::Matrix& g = e.var.grad();
        if (g.size() == 0) continue;
        ag::Matrix& w = e.var.mutable_value();
        if (kind_ == OptimizerKind::Sgd) {
            w -= lr_ * g;
            continue;
        }
        auto [mit, m_new] = m_.try_emplace(e.name, ag::Matrix::Zero(w.rows(), w.cols()));
        auto [vit, v_new] = v_.try_emplace(e.name, ag::Matrix::Zero(w.rows(), w.cols()));
        ag::Matrix& m = mit->second;
        ag::Matrix& v = vit->second;
        m = beta1_ * m + (1.0 - beta1_) * g;
        v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
        w.array() -= lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
    }
}

}  // namespace mmga::train
