#include "mmga/objectives.hpp"

#include <cmath>

#include "mmga/error.hpp"

namespace mmga::obj {

namespace {

LossTerm empty_term() { return {ag::Var::scalar(0.0), true}; }

void require_finite(const ag::Var& v, const char* what) {
    if (!v.value().allFinite()) fail(ErrorCode::NonFinite, std::string(what) + ": non-finite input");
}

std::vector<ag::Index> endpoints(std::span<const data::NodePair> pairs, bool first, ag::Index n) {
    std::vector<ag::Index> out;
    out.reserve(pairs.size());
    for (const auto& pr : pairs) {
        const ag::Index x = first ? pr.u : pr.v;
        if (x < 0 || x >= n) {
            fail(ErrorCode::InvalidArgument, "pair (" + std::to_string(pr.u) + "," + std::to_string(pr.v) +
                                                 ") out of range for " + std::to_string(n) + " nodes");
        }
        out.push_back(x);
    }
    return out;
}

}  // namespace

LossTerm lm_loss(const ag::Var& logits, std::span<const ag::Index> targets, double smoothing) {
    if (!(smoothing >= 0.0 && smoothing < 1.0)) {
        fail(ErrorCode::InvalidArgument, "lm_loss: smoothing must lie in [0,1)");
    }
    if (logits.rows() != static_cast<ag::Index>(targets.size())) {
        fail(ErrorCode::ShapeMismatch, "lm_loss: " + std::to_string(logits.rows()) + " logit rows for " +
                                           std::to_string(targets.size()) + " targets");
    }
    if (targets.empty()) return empty_term();
    require_finite(logits, "lm_loss");
    const ag::Index v = logits.cols();
    ag::Matrix q = ag::Matrix::Constant(logits.rows(), v, smoothing / static_cast<double>(v));
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] < 0 || targets[i] >= v) {
            fail(ErrorCode::InvalidArgument, "lm_loss: target " + std::to_string(targets[i]) + " out of range");
        }
        q(static_cast<ag::Index>(i), targets[i]) += 1.0 - smoothing;
    }
    ag::Var ce = ag::sum(ag::mul(ag::log_softmax_rows(logits), ag::Var::constant(std::move(q))));
    return {ag::scale(ce, -1.0 / static_cast<double>(targets.size())), false};
}

LossTerm ita_loss(const ag::Var& image, const ag::Var& text, double temperature) {
    if (image.rows() != text.rows() || image.cols() != text.cols()) {
        fail(ErrorCode::ShapeMismatch, "ita_loss: image and text batches differ in shape");
    }
    if (image.rows() < 2) fail(ErrorCode::InvalidArgument, "ita_loss: needs at least 2 pairs");
    if (!(temperature > 0.0)) fail(ErrorCode::InvalidArgument, "ita_loss: temperature must be positive");
    require_finite(image, "ita_loss");
    require_finite(text, "ita_loss");
    const ag::Index b = image.rows();
    ag::Var zi = ag::l2_normalize_rows(image, 1e-8);
    ag::Var zt = ag::l2_normalize_rows(text, 1e-8);
    ag::Var s = ag::scale(ag::matmul(zi, ag::transpose(zt)), 1.0 / temperature);
    const ag::Var eye = ag::Var::constant(ag::Matrix::Identity(b, b));
    ag::Var i2t = ag::sum(ag::mul(ag::log_softmax_rows(s), eye));
    ag::Var t2i = ag::sum(ag::mul(ag::log_softmax_rows(ag::transpose(s)), eye));
    return {ag::scale(ag::add(i2t, t2i), -0.5 / static_cast<double>(b)), false};
}

LossTerm nfm_loss(const ag::Var& predicted, const ag::Var& truth) {
    if (predicted.rows() != truth.rows() || predicted.cols() != truth.cols()) {
        fail(ErrorCode::ShapeMismatch, "nfm_loss: prediction and truth differ in shape");
    }
    if (predicted.rows() == 0) return empty_term();
    return {ag::mean(ag::square(ag::sub(predicted, truth))), false};
}

ag::Var nfm_predict(const ParamStore& p, const ag::Var& r_g_rows) {
    return ag::add_row(ag::matmul(r_g_rows, p.get("nfm.w")), p.get("nfm.b"));
}

LossTerm gsm_loss(const ag::Var& r_g, std::span<const data::NodePair> pos, std::span<const data::NodePair> neg) {
    if (pos.empty() && neg.empty()) return empty_term();
    const ag::Index n = r_g.rows();
    auto scores = [&](std::span<const data::NodePair> pairs) {
        return ag::row_sum(ag::mul(ag::gather_rows(r_g, endpoints(pairs, true, n)),
                                   ag::gather_rows(r_g, endpoints(pairs, false, n))));
    };
    // -log sigmoid(s) = softplus(-s); -log(1 - sigmoid(s)) = softplus(s)
    ag::Var total = ag::Var::scalar(0.0);
    if (!pos.empty()) total = ag::add(total, ag::sum(ag::softplus(ag::scale(scores(pos), -1.0))));
    if (!neg.empty()) total = ag::add(total, ag::sum(ag::softplus(scores(neg))));
    return {ag::scale(total, 1.0 / static_cast<double>(pos.size() + neg.size())), false};
}

ag::Var pair_probability(const ParamStore& p, const std::string& head, const ag::Var& e_u, const ag::Var& e_v) {
    if (e_u.rows() != e_v.rows() || e_u.cols() != e_v.cols() ||
        2 * e_u.cols() != p.get(head + ".w1").rows()) {
        fail(ErrorCode::ShapeMismatch, "pair_probability: embedding widths do not match head " + head);
    }
    ag::Var h = ag::relu(ag::add_row(ag::matmul(ag::concat_cols({e_u, e_v}), p.get(head + ".w1")), p.get(head + ".b1")));
    ag::Var logits = ag::relu(ag::add_row(ag::matmul(h, p.get(head + ".w2")), p.get(head + ".b2")));
    return ag::slice_cols(ag::softmax_rows(logits), 1, 1);
}

LossTerm graph_contrastive_loss(const ParamStore& p, const std::string& head, const ag::Var& embeds,
                                std::span<const data::NodePair> pos, std::span<const data::NodePair> neg) {
    if (pos.empty() && neg.empty()) return empty_term();
    const ag::Index n = embeds.rows();
    constexpr double lo = 1e-7;
    constexpr double hi = 1.0 - 1e-7;
    auto prob = [&](std::span<const data::NodePair> pairs) {
        return ag::clamp(pair_probability(p, head, ag::gather_rows(embeds, endpoints(pairs, true, n)),
                                          ag::gather_rows(embeds, endpoints(pairs, false, n))),
                         lo, hi);
    };
    ag::Var total = ag::Var::scalar(0.0);
    if (!pos.empty()) total = ag::add(total, ag::sum(ag::log(prob(pos))));
    if (!neg.empty()) total = ag::add(total, ag::sum(ag::log(ag::add_scalar(ag::scale(prob(neg), -1.0), 1.0))));
    return {ag::scale(total, -1.0 / static_cast<double>(pos.size() + neg.size())), false};
}

std::array<double, kComponents> weight_array(const LossWeights& w) {
    return {w.lm, w.ita, w.nfm, w.gsm, w.gc_image, w.gc_text};
}

std::array<double, kComponents> LossBundle::values() const {
    std::array<double, kComponents> out{};
    for (std::size_t i = 0; i < kComponents; ++i) out[i] = terms[i].item();
    return out;
}

LossBundle total_loss(std::array<LossTerm, kComponents> terms, const LossWeights& weights) {
    LossBundle b;
    b.weights = weight_array(weights);
    for (std::size_t i = 0; i < kComponents; ++i) {
        if (!(b.weights[i] >= 0.0) || !std::isfinite(b.weights[i])) {
            fail(ErrorCode::InvalidArgument, "total_loss: weight for " + std::string(kComponentNames[i]) +
                                                 " must be a non-negative number");
        }
        if (!terms[i].value.defined()) terms[i] = empty_term();
    }
    b.terms = std::move(terms);
    ag::Var total = ag::Var::scalar(0.0);
    for (std::size_t i = 0; i < kComponents; ++i) {
        if (b.weights[i] == 0.0 || b.terms[i].empty) continue;
        total = ag::add(total, ag::scale(b.terms[i].value, b.weights[i]));
    }
    b.total = total;
    return b;
}

}  // namespace mmga::obj
