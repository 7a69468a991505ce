#include "mmga/graph_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mmga/error.hpp"

namespace mmga::gnn {

Csr Csr::from_graph(const data::SocialGraph& g) {
    Csr c;
    c.n_nodes = g.n_nodes;
    c.offsets.assign(g.offsets.begin(), g.offsets.end());
    c.target.assign(g.neighbors.begin(), g.neighbors.end());
    c.source.resize(c.target.size());
    for (ag::Index u = 0; u < c.n_nodes; ++u) {
        std::fill(c.source.begin() + c.offsets[u], c.source.begin() + c.offsets[u + 1], u);
    }
    return c;
}

ag::Matrix node_features(const data::Dataset& ds) {
    const auto n = static_cast<ag::Index>(ds.users.size());
    const auto dx = static_cast<ag::Index>(ds.meta.config.stat_dim);
    ag::Matrix x(n, dx);
    for (ag::Index u = 0; u < n; ++u) {
        for (ag::Index j = 0; j < dx; ++j) x(u, j) = ds.users[u].stat_features.at(j);
    }
    if (n == 0) return x;
    for (ag::Index j = 0; j < dx; ++j) {
        const double mu = x.col(j).mean();
        const double var = (x.col(j).array() - mu).square().mean();
        const double sd = var > 1e-24 ? std::sqrt(var) : 1.0;
        x.col(j) = (x.col(j).array() - mu) / sd;
    }
    return x;
}

namespace {

void check_inputs(const ModelConfig& cfg, ag::Index n, const ag::Var& x, const ag::Var& ri, const ag::Var& rt) {
    auto bad = [](const char* what, ag::Index r, ag::Index c, ag::Index er, ag::Index ec) {
        fail(ErrorCode::ShapeMismatch, std::string("encode_graph: ") + what + " is " + std::to_string(r) + "x" +
                                           std::to_string(c) + ", expected " + std::to_string(er) + "x" +
                                           std::to_string(ec));
    };
    if (x.rows() != n || x.cols() != cfg.stat_dim) bad("X", x.rows(), x.cols(), n, cfg.stat_dim);
    if (ri.rows() != n || ri.cols() != cfg.embed_dim) bad("R_I", ri.rows(), ri.cols(), n, cfg.embed_dim);
    if (rt.rows() != n || rt.cols() != cfg.embed_dim) bad("R_T", rt.rows(), rt.cols(), n, cfg.embed_dim);
}

std::vector<ag::Index> range(ag::Index start, ag::Index count) {
    std::vector<ag::Index> out(static_cast<std::size_t>(count));
    std::iota(out.begin(), out.end(), start);
    return out;
}

std::string layer_prefix(int k) { return "graph.layer" + std::to_string(k) + "."; }

}  // namespace

ag::Var gate_logits(const ParamStore& p, const ModelConfig& cfg, int layer, const Csr& csr,
                    const ag::Var& x, const ag::Var& r_image, const ag::Var& r_text) {
    check_inputs(cfg, csr.n_nodes, x, r_image, r_text);
    const ag::Var& w = p.get(layer_prefix(layer) + "gate_w");
    const ag::Index dx = cfg.stat_dim;
    const ag::Index d = cfg.embed_dim;
    auto block = [&](ag::Index start, ag::Index count) { return ag::gather_rows(w, range(start, count)); };
    // w rows: [X_u | X_v | RI_u | RT_u | RI_v | RT_v]
    ag::Var s_src = ag::add(ag::add(ag::rowwise_matmul(x, block(0, dx)), ag::rowwise_matmul(r_image, block(2 * dx, d))),
                            ag::rowwise_matmul(r_text, block(2 * dx + d, d)));
    ag::Var s_dst = ag::add(ag::add(ag::rowwise_matmul(x, block(dx, dx)), ag::rowwise_matmul(r_image, block(2 * dx + 2 * d, d))),
                            ag::rowwise_matmul(r_text, block(2 * dx + 3 * d, d)));
    ag::Var z = ag::add(ag::gather_rows(s_src, csr.source), ag::gather_rows(s_dst, csr.target));
    return ag::add_row(z, p.get(layer_prefix(layer) + "gate_b"));
}

std::vector<double> gate_weights(const ParamStore& p, const ModelConfig& cfg, int layer, ag::Index u,
                                 std::span<const ag::Index> neighbors, const ag::Matrix& x,
                                 const ag::Matrix& r_image, const ag::Matrix& r_text) {
    if (neighbors.empty()) {
        fail(ErrorCode::InvalidArgument, "gate_weights: node " + std::to_string(u) + " is isolated");
    }
    const ag::Matrix& w = p.get(layer_prefix(layer) + "gate_w").value();
    const double b = p.get(layer_prefix(layer) + "gate_b").value()(0, 0);
    if (x.cols() != cfg.stat_dim || r_image.cols() != cfg.embed_dim || r_text.cols() != cfg.embed_dim ||
        w.rows() != gate_input_dim(cfg)) {
        fail(ErrorCode::ShapeMismatch, "gate_weights: feature widths do not match the gate matrix");
    }
    std::vector<double> logits;
    for (auto v : neighbors) {
        if (v < 0 || v >= x.rows() || v >= r_image.rows() || v >= r_text.rows()) {
            fail(ErrorCode::InvalidArgument, "gate_weights: neighbor " + std::to_string(v) + " out of range");
        }
        Eigen::RowVectorXd cat(gate_input_dim(cfg));
        cat << x.row(u), x.row(v), r_image.row(u), r_text.row(u), r_image.row(v), r_text.row(v);
        logits.push_back(cat.dot(w.col(0)) + b);
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (auto& l : logits) z += (l = std::exp(l - mx));
    for (auto& l : logits) l /= z;
    return logits;
}

ag::Var propagate_layer(const ag::Var& h, const Csr& csr, const ag::Var& weights) {
    if (h.rows() != csr.n_nodes) {
        fail(ErrorCode::ShapeMismatch, "propagate_layer: h has " + std::to_string(h.rows()) +
                                           " rows for a graph of " + std::to_string(csr.n_nodes) + " nodes");
    }
    if (weights.rows() != csr.edge_count() || weights.cols() != 1) {
        fail(ErrorCode::ShapeMismatch, "propagate_layer: gate field has " + std::to_string(weights.rows()) +
                                           " entries for " + std::to_string(csr.edge_count()) + " directed edges");
    }
    return ag::add(h, ag::segment_weighted_sum(weights, h, csr.offsets, csr.target));
}

GraphEncoding encode_graph(const ParamStore& p, const ModelConfig& cfg, const ag::Var& x, const Csr& csr,
                           const ag::Var& r_image, const ag::Var& r_text, bool stop_gradient) {
    check_inputs(cfg, csr.n_nodes, x, r_image, r_text);
    const ag::Var ri = stop_gradient ? ag::detach(r_image) : r_image;
    const ag::Var rt = stop_gradient ? ag::detach(r_text) : r_text;
    GraphEncoding out;
    ag::Var h = ag::add_row(ag::rowwise_matmul(x, p.get("graph.in_w")), p.get("graph.in_b"));
    for (int k = 0; k < cfg.gnn_layers; ++k) {
        GateLayer gate;
        gate.logits = gate_logits(p, cfg, k, csr, x, ri, rt);
        gate.weights = ag::segment_softmax(gate.logits, csr.offsets);
        h = propagate_layer(h, csr, gate.weights);
        if (cfg.gnn_norm) {
            h = ag::layer_norm_rows(ag::gelu(h), p.get(layer_prefix(k) + "ln_g"), p.get(layer_prefix(k) + "ln_b"));
        }
        out.gates.layers.push_back(std::move(gate));
    }
    out.r_g = h;
    return out;
}

}  // namespace mmga::gnn
