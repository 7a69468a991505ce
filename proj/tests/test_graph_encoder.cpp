#include <numeric>

#include "doctest.h"
#include "fixtures.hpp"
#include "mmga/encoders.hpp"
#include "mmga/error.hpp"
#include "mmga/graph_encoder.hpp"
#include "mmga/harness.hpp"
#include "mmga/rng.hpp"
#include "oracles.hpp"

using namespace mmga;

namespace {

ag::Matrix random_matrix(ag::Index r, ag::Index c, std::uint64_t seed, double sd = 1.0) {
    Rng rng(seed);
    ag::Matrix m(r, c);
    for (ag::Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
    return m;
}

ModelConfig small_model(int stat_dim = 4, int d = 8) {
    ModelConfig mc;
    mc.embed_dim = d;
    mc.n_heads = 2;
    mc.mlp_dim = 16;
    mc.head_hidden = 8;
    mc.stat_dim = stat_dim;
    mc.vocab_size = 16;
    mc.max_tokens = 8;
    mc.image = {1, 16, 16};
    return mc;
}

// Random params with non-trivial gates.
ParamStore random_params(const ModelConfig& mc, std::uint64_t seed) {
    auto p = init_params(mc, seed);
    for (int k = 0; k < mc.gnn_layers; ++k) {
        auto& w = p.get("graph.layer" + std::to_string(k) + ".gate_w").mutable_value();
        w = random_matrix(w.rows(), w.cols(), seed + 10 + k, 0.3);
    }
    return p;
}

data::SocialGraph random_graph(std::int64_t n, double prob, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<data::NodePair> e;
    for (std::int64_t u = 0; u < n; ++u)
        for (std::int64_t v = u + 1; v < n; ++v)
            if (rng.uniform() < prob) e.push_back({u, v});
    return data::SocialGraph::from_edges(n, e);
}

struct Inputs {
    ag::Matrix x, ri, rt;
};

Inputs random_inputs(const ModelConfig& mc, ag::Index n, std::uint64_t seed) {
    return {random_matrix(n, mc.stat_dim, seed), random_matrix(n, mc.embed_dim, seed + 1),
            random_matrix(n, mc.embed_dim, seed + 2)};
}

ag::Matrix encode(const ParamStore& p, const ModelConfig& mc, const data::SocialGraph& g, const Inputs& in) {
    return gnn::encode_graph(p, mc, ag::Var::constant(in.x), gnn::Csr::from_graph(g), ag::Var::constant(in.ri),
                             ag::Var::constant(in.rt))
        .r_g.value();
}

}  // namespace

TEST_CASE("zero gate matrix gives uniform weights") {
    const auto mc = small_model();
    auto p = init_params(mc, 1);
    p.get("graph.layer0.gate_w").mutable_value().setZero();
    const auto in = random_inputs(mc, 6, 3);
    const std::vector<ag::Index> nb = {1, 2, 4, 5};
    for (double w : gnn::gate_weights(p, mc, 0, 0, nb, in.x, in.ri, in.rt)) CHECK(w == doctest::Approx(0.25));
}

TEST_CASE("identical neighbors share weight equally") {
    const auto mc = small_model();
    const auto p = random_params(mc, 2);
    auto in = random_inputs(mc, 4, 5);
    for (int v = 2; v <= 3; ++v) {
        in.x.row(v) = in.x.row(1);
        in.ri.row(v) = in.ri.row(1);
        in.rt.row(v) = in.rt.row(1);
    }
    const std::vector<ag::Index> nb = {1, 2, 3};
    for (double w : gnn::gate_weights(p, mc, 1, 0, nb, in.x, in.ri, in.rt)) CHECK(w == doctest::Approx(1.0 / 3));
}

TEST_CASE("gate weights match a direct softmax") {
    const auto mc = small_model();
    for (std::uint64_t trial = 0; trial < 20; ++trial) {
        const auto p = random_params(mc, 100 + trial);
        const auto in = random_inputs(mc, 6, 200 + trial);
        const std::vector<ag::Index> nb = {1, 2, 3, 4, 5};
        const auto got = gnn::gate_weights(p, mc, 0, 0, nb, in.x, in.ri, in.rt);

        const auto w = oracle::rows_of(p.get("graph.layer0.gate_w").value());
        std::vector<double> wv;
        for (const auto& r : w) wv.push_back(r[0]);
        std::vector<std::vector<double>> concat;
        for (auto v : nb) {
            std::vector<double> c;
            auto push = [&](const ag::Matrix& m, ag::Index row) {
                for (ag::Index j = 0; j < m.cols(); ++j) c.push_back(m(row, j));
            };
            push(in.x, 0);
            push(in.x, v);
            push(in.ri, 0);
            push(in.rt, 0);
            push(in.ri, v);
            push(in.rt, v);
            concat.push_back(c);
        }
        const auto want = oracle::gate_softmax(wv, p.get("graph.layer0.gate_b").value()(0, 0), concat);
        for (std::size_t i = 0; i < nb.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-6);
    }
}

TEST_CASE("gate field agrees with the per-node form and is normalized") {
    const auto mc = small_model();
    const auto p = random_params(mc, 7);
    const auto g = random_graph(15, 0.3, 8);
    const auto in = random_inputs(mc, 15, 9);
    const auto csr = gnn::Csr::from_graph(g);
    const auto enc = gnn::encode_graph(p, mc, ag::Var::constant(in.x), csr, ag::Var::constant(in.ri),
                                       ag::Var::constant(in.rt));
    REQUIRE(enc.gates.layers.size() == 2);
    for (int k = 0; k < 2; ++k) {
        const auto& w = enc.gates.layers[k].weights.value();
        for (ag::Index u = 0; u < csr.n_nodes; ++u) {
            const auto b = csr.offsets[u], e = csr.offsets[u + 1];
            if (b == e) continue;
            double s = 0;
            for (auto i = b; i < e; ++i) {
                CHECK(w(i, 0) >= 0.0);
                s += w(i, 0);
            }
            CHECK(std::abs(s - 1.0) < 1e-6);
            const std::vector<ag::Index> nb(csr.target.begin() + b, csr.target.begin() + e);
            const auto direct = gnn::gate_weights(p, mc, k, u, nb, in.x, in.ri, in.rt);
            for (auto i = b; i < e; ++i) CHECK(std::abs(direct[i - b] - w(i, 0)) < 1e-12);
        }
    }
}

TEST_CASE("gate errors") {
    const auto mc = small_model();
    const auto p = init_params(mc, 1);
    const auto in = random_inputs(mc, 4, 1);
    const std::vector<ag::Index> none;
    CHECK_THROWS_AS(gnn::gate_weights(p, mc, 0, 0, none, in.x, in.ri, in.rt), Error);
    const ag::Matrix narrow = random_matrix(4, 3, 2);
    const std::vector<ag::Index> nb = {1};
    CHECK_THROWS_AS(gnn::gate_weights(p, mc, 0, 0, nb, narrow, in.ri, in.rt), Error);
}

TEST_CASE("literal propagation hand cases") {
    const auto g = data::SocialGraph::from_edges(3, {{0, 1}});
    const auto csr = gnn::Csr::from_graph(g);
    ag::Matrix h(3, 2);
    h << 1, 0, 0, 1, 3, 4;
    const ag::Var w = ag::Var::constant(ag::Matrix::Ones(csr.edge_count(), 1));
    const auto out = gnn::propagate_layer(ag::Var::constant(h), csr, w).value();
    CHECK(out(0, 0) == 1.0);
    CHECK(out(0, 1) == 1.0);
    CHECK(out(1, 0) == 1.0);
    CHECK(out(1, 1) == 1.0);
    // Node 2 is isolated.
    CHECK(out(2, 0) == 3.0);
    CHECK(out(2, 1) == 4.0);
    CHECK_THROWS_AS(gnn::propagate_layer(ag::Var::constant(h), csr, ag::Var::constant(ag::Matrix::Ones(5, 1))),
                    Error);
}

TEST_CASE("encode_graph is permutation equivariant") {
    for (bool norm : {true, false}) {
        auto mc = small_model();
        mc.gnn_norm = norm;
        const auto p = random_params(mc, 21);
        const std::int64_t n = 20;
        const auto g = random_graph(n, 0.25, 22);
        const auto in = random_inputs(mc, n, 23);
        std::vector<std::int64_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        Rng rng(24);
        rng.shuffle(perm);

        std::vector<data::NodePair> pe;
        for (const auto& e : g.edges) pe.push_back(data::NodePair::canonical(perm[e.u], perm[e.v]));
        const auto pg = data::SocialGraph::from_edges(n, pe);
        Inputs pin{ag::Matrix(n, mc.stat_dim), ag::Matrix(n, mc.embed_dim), ag::Matrix(n, mc.embed_dim)};
        for (std::int64_t u = 0; u < n; ++u) {
            pin.x.row(perm[u]) = in.x.row(u);
            pin.ri.row(perm[u]) = in.ri.row(u);
            pin.rt.row(perm[u]) = in.rt.row(u);
        }
        const auto a = encode(p, mc, g, in);
        const auto b = encode(p, mc, pg, pin);
        bool exact = true;
        for (std::int64_t u = 0; u < n; ++u) exact &= (b.row(perm[u]) == a.row(u));
        CHECK(exact);
    }
}

TEST_CASE("receptive field is K hops on a path") {
    auto mc = small_model();
    mc.gnn_layers = 2;
    const auto p = random_params(mc, 31);
    const std::int64_t n = 8;
    std::vector<data::NodePair> e;
    for (std::int64_t u = 0; u + 1 < n; ++u) e.push_back({u, u + 1});
    const auto g = data::SocialGraph::from_edges(n, e);
    const auto in = random_inputs(mc, n, 32);
    const auto base = encode(p, mc, g, in);
    for (std::int64_t far = 0; far < n; ++far) {
        for (int which = 0; which < 3; ++which) {
            Inputs mod = in;
            ag::Matrix& m = which == 0 ? mod.x : (which == 1 ? mod.ri : mod.rt);
            m.row(far).array() += 0.7;
            const auto out = encode(p, mc, g, mod);
            const std::int64_t u = 0;
            const auto dist = far - u;
            if (dist > 2) {
                CHECK(out.row(u) == base.row(u));
            } else if (which == 0) {
                CHECK(out.row(u) != base.row(u));
            }
        }
    }
}

TEST_CASE("without edges nodes with equal features are encoded equally") {
    const auto mc = small_model();
    const auto p = random_params(mc, 41);
    const auto g = data::SocialGraph::from_edges(5, {});
    auto in = random_inputs(mc, 5, 42);
    in.x.row(3) = in.x.row(1);
    const auto r = encode(p, mc, g, in);
    CHECK(r.rows() == 5);
    CHECK(r.cols() == mc.embed_dim);
    CHECK(r.row(3) == r.row(1));
    CHECK(r.row(0) != r.row(1));
}

TEST_CASE("graph encoder gradients") {
    const auto mc = small_model();
    auto p = random_params(mc, 51);
    const auto g = random_graph(10, 0.4, 52);
    const auto in = random_inputs(mc, 10, 53);
    const auto csr = gnn::Csr::from_graph(g);
    const ag::Var probe_w = ag::Var::constant(random_matrix(10, mc.embed_dim, 54));
    ParamStore inputs;
    inputs.add("ri", in.ri);
    inputs.add("rt", in.rt);
    auto probe = [&] {
        return ag::sum(ag::mul(gnn::encode_graph(p, mc, ag::Var::constant(in.x), csr, inputs.get("ri"),
                                                 inputs.get("rt"))
                                   .r_g,
                               probe_w));
    };
    const auto rp = train::grad_check(p, {"graph.layer0.gate_w", "graph.layer1.gate_w", "graph.in_w",
                                          "graph.layer0.ln_g"},
                                      probe, {});
    CHECK(rp.max_rel_error < 1e-3);
    const auto ri = train::grad_check(inputs, {"ri", "rt"}, probe, {});
    CHECK(ri.max_rel_error < 1e-3);
}

TEST_CASE("graph loss reaches the image encoder through the gates") {
    const auto gen = data::generate_dataset(fx::tiny_data(), 3);
    const auto mc = fx::tiny_model(gen.dataset.meta);
    auto p = init_params(mc, 5);
    for (int k = 0; k < mc.gnn_layers; ++k) {
        auto& w = p.get("graph.layer" + std::to_string(k) + ".gate_w").mutable_value();
        w = random_matrix(w.rows(), w.cols(), 60 + k, 0.3);
    }
    const auto index = data::user_post_index(gen.dataset);
    const ag::Var images = enc::image_batch(gen.dataset, index.order);
    const auto texts = enc::text_batch(gen.dataset, index.order, mc);
    const std::vector<ag::Index> offsets(index.offsets.begin(), index.offsets.end());
    const ag::Var x = ag::Var::constant(gnn::node_features(gen.dataset));
    const auto csr = gnn::Csr::from_graph(gen.graph);
    const ag::Var probe_w = ag::Var::constant(random_matrix(x.rows(), mc.embed_dim, 61));

    for (bool stop : {false, true}) {
        p.zero_grad();
        const ag::Var ri = enc::aggregate_user_modality(enc::image_embeddings(p, mc, images), offsets);
        const ag::Var rt = enc::aggregate_user_modality(enc::text_embeddings(p, mc, texts), offsets);
        ag::backward(ag::sum(ag::mul(gnn::encode_graph(p, mc, x, csr, ri, rt, stop).r_g, probe_w)));
        const auto& gr = p.get("image.patch_w").grad();
        const double mag = gr.size() ? gr.cwiseAbs().maxCoeff() : 0.0;
        if (stop) {
            CHECK(mag == 0.0);
        } else {
            CHECK(mag > 0.0);
        }
    }
}
