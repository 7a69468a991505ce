#pragma once

// Multimodal-mixture graph encoder: per-edge gate logits from node statistics
// and image/text user embeddings, neighborhood softmax, gated residual
// propagation.

#include <span>
#include <vector>

#include "mmga/autograd.hpp"
#include "mmga/config.hpp"
#include "mmga/dataset.hpp"
#include "mmga/params.hpp"

namespace mmga::gnn {

/// Directed CSR view of an undirected graph: each edge appears once per
/// endpoint. Directed edge e goes source[e] -> target[e]; rows sorted.
struct Csr {
    ag::Index n_nodes = 0;
    std::vector<ag::Index> offsets;
    std::vector<ag::Index> source;
    std::vector<ag::Index> target;

    static Csr from_graph(const data::SocialGraph& g);
    ag::Index edge_count() const { return static_cast<ag::Index>(target.size()); }
};

/// Column-standardized statistic features (zero-variance columns keep scale 1).
ag::Matrix node_features(const data::Dataset& ds);

struct GateLayer {
    ag::Var logits;   // E x 1, CSR order
    ag::Var weights;  // E x 1, softmax within each source row
};

struct GateField {
    std::vector<GateLayer> layers;
};

/// Gate logits of layer k for every directed edge. Equivalent to applying
/// gate_w to X_u || X_v || RI_u || RT_u || RI_v || RT_v, evaluated without
/// materializing the concatenation.
ag::Var gate_logits(const ParamStore& p, const ModelConfig& cfg, int layer, const Csr& csr,
                    const ag::Var& x, const ag::Var& r_image, const ag::Var& r_text);

/// Straight evaluation for one node: explicit concatenation per neighbor,
/// linear map, softmax. Throws on an isolated node or mismatched dimensions.
std::vector<double> gate_weights(const ParamStore& p, const ModelConfig& cfg, int layer, ag::Index u,
                                 std::span<const ag::Index> neighbors, const ag::Matrix& x,
                                 const ag::Matrix& r_image, const ag::Matrix& r_text);

/// h'_u = h_u + sum_{v in N(u)} a_{u,v} h_v (no nonlinearity).
ag::Var propagate_layer(const ag::Var& h, const Csr& csr, const ag::Var& weights);

struct GraphEncoding {
    ag::Var r_g;
    GateField gates;
};

/// R^G = h^K. With cfg.gnn_norm each layer output passes through GELU and a
/// layer norm. `stop_gradient` detaches R_I/R_T inside the gates.
GraphEncoding encode_graph(const ParamStore& p, const ModelConfig& cfg, const ag::Var& x, const Csr& csr,
                           const ag::Var& r_image, const ag::Var& r_text, bool stop_gradient = false);

}  // namespace mmga::gnn
