#pragma once

// Pre-training losses and the pair head used by the graph contrastive loss.

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmga/autograd.hpp"
#include "mmga/config.hpp"
#include "mmga/dataset.hpp"
#include "mmga/params.hpp"

namespace mmga::obj {

/// Scalar loss; `empty` marks a term with nothing to average (value 0).
struct LossTerm {
    ag::Var value;
    bool empty = false;

    double item() const { return value.item(); }
};

/// Mean smoothed cross-entropy; targets get 1-eps+eps/V, other classes eps/V.
LossTerm lm_loss(const ag::Var& logits, std::span<const ag::Index> targets, double smoothing);

/// Symmetric InfoNCE over cosine similarities (norms padded by 1e-8).
LossTerm ita_loss(const ag::Var& image, const ag::Var& text, double temperature);

/// Mean squared error over rows and columns.
LossTerm nfm_loss(const ag::Var& predicted, const ag::Var& truth);
/// Linear reconstruction head applied to R_G rows.
ag::Var nfm_predict(const ParamStore& p, const ag::Var& r_g_rows);

/// BCE of logistic(<R_G[u], R_G[v]>) with labels 1 for `pos`, 0 for `neg`.
LossTerm gsm_loss(const ag::Var& r_g, std::span<const data::NodePair> pos, std::span<const data::NodePair> neg);

/// Pair head "gc_image" / "gc_text": softmax(relu(relu([e_u|e_v] W1 + b1) W2 + b2)),
/// returning the probability of class 1 ("connected") for each row pair.
ag::Var pair_probability(const ParamStore& p, const std::string& head, const ag::Var& e_u, const ag::Var& e_v);

/// Mean BCE of the pair head over positives (label 1) and negatives (label 0);
/// probabilities clamped to [1e-7, 1-1e-7].
LossTerm graph_contrastive_loss(const ParamStore& p, const std::string& head, const ag::Var& embeds,
                                std::span<const data::NodePair> pos, std::span<const data::NodePair> neg);

inline constexpr std::size_t kComponents = 6;
inline constexpr std::array<std::string_view, kComponents> kComponentNames = {"lm",  "ita",      "nfm",
                                                                               "gsm", "gc_image", "gc_text"};

std::array<double, kComponents> weight_array(const LossWeights& w);

struct LossBundle {
    std::array<LossTerm, kComponents> terms;
    std::array<double, kComponents> weights{};
    ag::Var total;

    std::array<double, kComponents> values() const;
    double total_value() const { return total.item(); }
};

/// total = sum_i w_i * loss_i. Throws on a negative weight.
LossBundle total_loss(std::array<LossTerm, kComponents> terms, const LossWeights& weights);

}  // namespace mmga::obj
