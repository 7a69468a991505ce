#include <cmath>
#include <fstream>
#include <set>

#include "doctest.h"
#include "fixtures.hpp"
#include "mmga/dataset.hpp"
#include "mmga/error.hpp"
#include "mmga/rng.hpp"

using namespace mmga;
using namespace mmga::data;

namespace {

struct EdgeCounts {
    double intra = 0, inter = 0;
};

EdgeCounts count_edges(const GeneratedData& g) {
    EdgeCounts c;
    for (const auto& e : g.graph.edges) {
        if (g.dataset.users[e.u].topic_label == g.dataset.users[e.v].topic_label) {
            c.intra += 1;
        } else {
            c.inter += 1;
        }
    }
    return c;
}

bool has_issue(const std::vector<std::string>& issues, const std::string& needle) {
    for (const auto& s : issues)
        if (s.find(needle) != std::string::npos) return true;
    return false;
}

DatasetConfig small_sbm() {
    DatasetConfig c;
    c.n_users = 200;
    c.k_topics = 2;
    c.p_in = 0.1;
    c.p_out = 0.01;
    c.posts_per_user = 1;
    return c;
}

}  // namespace

TEST_CASE("sbm edge counts near binomial expectation") {
    const auto g = generate_dataset(small_sbm(), 11);
    const auto c = count_edges(g);
    // 2 * C(100,2) * 0.1 and 100*100*0.01
    const double m_in = 990.0, m_out = 100.0;
    CHECK(std::abs(c.intra - m_in) <= 3.0 * std::sqrt(m_in * 0.9));
    CHECK(std::abs(c.inter - m_out) <= 3.0 * std::sqrt(m_out * 0.99));
}

TEST_CASE("sbm counts within 4 sigma over random configs") {
    Rng rng(2024);
    for (int trial = 0; trial < 12; ++trial) {
        DatasetConfig c;
        c.k_topics = 2 + static_cast<int>(rng.below(3));
        c.n_users = c.k_topics * (40 + static_cast<std::int64_t>(rng.below(60)));
        c.p_in = 0.03 + 0.12 * rng.uniform();
        c.p_out = c.p_in * 0.2 * rng.uniform();
        c.posts_per_user = 1;
        const auto g = generate_dataset(c, 100 + trial);
        const auto counts = count_edges(g);
        const double nb = static_cast<double>(c.n_users / c.k_topics);
        const double pairs_in = c.k_topics * nb * (nb - 1) / 2;
        const double pairs_out = c.k_topics * (c.k_topics - 1) / 2.0 * nb * nb;
        const double m_in = pairs_in * c.p_in, m_out = pairs_out * c.p_out;
        INFO("trial " << trial << " K=" << c.k_topics << " n=" << c.n_users);
        CHECK(std::abs(counts.intra - m_in) <= 4.0 * std::sqrt(m_in * (1 - c.p_in)) + 1e-9);
        CHECK(std::abs(counts.inter - m_out) <= 4.0 * std::sqrt(m_out * (1 - c.p_out)) + 1e-9);
    }
}

TEST_CASE("zero probabilities give an empty graph") {
    auto c = small_sbm();
    c.p_in = c.p_out = 0.0;
    const auto g = generate_dataset(c, 1);
    CHECK(g.graph.edge_count() == 0);
    for (std::int64_t u = 0; u < g.graph.n_nodes; ++u) CHECK(g.graph.degree(u) == 0);
}

TEST_CASE("generator config errors") {
    auto c = small_sbm();
    c.p_in = 1.5;
    CHECK_THROWS_AS(generate_dataset(c, 1), Error);
    c = small_sbm();
    c.p_out = 0.2;  // p_out >= p_in
    CHECK_THROWS_AS(generate_dataset(c, 1), Error);
    c = small_sbm();
    c.n_users = 201;
    CHECK_THROWS_AS(generate_dataset(c, 1), Error);
    c = small_sbm();
    c.posts_per_user = 0;
    CHECK_THROWS_AS(generate_dataset(c, 1), Error);
    c = small_sbm();
    c.k_topics = 1;
    c.n_users = 200;
    CHECK_THROWS_AS(generate_dataset(c, 1), Error);
}

TEST_CASE("generation is deterministic and seed dependent") {
    const auto c = fx::tiny_data();
    const auto a = generate_dataset(c, 5);
    const auto b = generate_dataset(c, 5);
    CHECK(a.dataset == b.dataset);
    CHECK(a.graph == b.graph);
    const auto d = generate_dataset(c, 6);
    CHECK_FALSE(a.dataset == d.dataset);

    fx::TempDir t1("det1"), t2("det2");
    const auto m1 = save_dataset(a.dataset, a.graph, t1.path());
    const auto m2 = save_dataset(b.dataset, b.graph, t2.path());
    REQUIRE(m1.size() == m2.size());
    for (const auto& [name, digest] : m1) CHECK(m2.at(name).sha256 == digest.sha256);
}

TEST_CASE("generated records satisfy their invariants") {
    DatasetConfig c;
    const auto g = generate_dataset(c, c.seed);
    CHECK(validate_dataset(g.dataset, g.graph).empty());
    CHECK(g.dataset.users.size() == 400);
    CHECK(g.dataset.posts.size() == 2000);
    int fans = 0;
    for (const auto& u : g.dataset.users) {
        CHECK(u.stat_features[0] == doctest::Approx(std::log1p(static_cast<double>(g.graph.degree(u.user_id)))));
        CHECK(u.stat_features[1] == 5.0);
        fans += u.fans_label;
    }
    CHECK(fans == 80);
    for (const auto& p : g.dataset.posts) {
        for (float v : p.image) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
}

TEST_CASE("same-topic users have closer token distributions") {
    DatasetConfig c;
    const auto g = generate_dataset(c, c.seed);
    const int V = c.vocab_size;
    std::vector<std::vector<double>> hist(g.dataset.users.size(), std::vector<double>(V, 0.0));
    for (const auto& u : g.dataset.users) {
        double n = 0;
        for (auto pid : u.post_ids)
            for (auto t : g.dataset.posts[pid].tokens) {
                hist[u.user_id][t] += 1;
                n += 1;
            }
        for (auto& h : hist[u.user_id]) h /= n;
    }
    double same = 0, diff = 0;
    int n_same = 0, n_diff = 0;
    for (std::size_t a = 0; a < hist.size(); a += 3)
        for (std::size_t b = a + 1; b < hist.size(); b += 7) {
            double tv = 0;
            for (int k = 0; k < V; ++k) tv += std::abs(hist[a][k] - hist[b][k]);
            tv *= 0.5;
            if (g.dataset.users[a].topic_label == g.dataset.users[b].topic_label) {
                same += tv;
                ++n_same;
            } else {
                diff += tv;
                ++n_diff;
            }
        }
    REQUIRE(n_same > 0);
    REQUIRE(n_diff > 0);
    CHECK(same / n_same < diff / n_diff);
}

TEST_CASE("save and load round trip") {
    const auto g = generate_dataset(fx::tiny_data(), 9);
    fx::TempDir dir("rt");
    save_dataset(g.dataset, g.graph, dir.path());
    const auto back = load_dataset(dir.path());
    CHECK(back.dataset == g.dataset);
    CHECK(back.graph == g.graph);

    std::ifstream edges(dir.path() / "edges.tsv");
    std::size_t lines = 0;
    for (std::string l; std::getline(edges, l);) ++lines;
    CHECK(lines == g.graph.edge_count());
    const auto& cfg = g.dataset.meta.config;
    CHECK(std::filesystem::file_size(dir.path() / "images.bin") ==
          g.dataset.posts.size() * static_cast<std::size_t>(cfg.image.size()) * 4);
}

TEST_CASE("load rejects damaged directories") {
    const auto g = generate_dataset(fx::tiny_data(), 9);

    SUBCASE("self-loop in edges.tsv") {
        fx::TempDir dir("loop");
        save_dataset(g.dataset, g.graph, dir.path());
        {
            std::ofstream out(dir.path() / "edges.tsv", std::ios::app);
            out << "5\t5\n";
        }
        write_dataset_manifest(dir.path());
        try {
            load_dataset(dir.path());
            FAIL("expected rejection");
        } catch (const Error& e) {
            CHECK(std::string(e.what()).find("self-loop") != std::string::npos);
        }
    }
    SUBCASE("missing images.idx") {
        fx::TempDir dir("idx");
        save_dataset(g.dataset, g.graph, dir.path());
        std::filesystem::remove(dir.path() / "images.idx");
        try {
            load_dataset(dir.path());
            FAIL("expected rejection");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::Io);
            CHECK(std::string(e.what()).find("images.idx") != std::string::npos);
        }
    }
    SUBCASE("flipped byte") {
        fx::TempDir dir("flip");
        save_dataset(g.dataset, g.graph, dir.path());
        {
            std::fstream f(dir.path() / "images.bin", std::ios::in | std::ios::out | std::ios::binary);
            f.seekp(17);
            f.put('\x7f');
        }
        try {
            load_dataset(dir.path());
            FAIL("expected rejection");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::DigestMismatch);
        }
    }
    SUBCASE("truncated images.bin") {
        fx::TempDir dir("trunc");
        save_dataset(g.dataset, g.graph, dir.path());
        std::filesystem::resize_file(dir.path() / "images.bin", 100);
        write_dataset_manifest(dir.path());
        CHECK_THROWS_AS(load_dataset(dir.path()), Error);
    }
}

TEST_CASE("graph construction rejects bad edges") {
    CHECK_THROWS_AS(SocialGraph::from_edges(4, {{1, 1}}), Error);
    CHECK_THROWS_AS(SocialGraph::from_edges(4, {{0, 1}, {0, 1}}), Error);
    CHECK_THROWS_AS(SocialGraph::from_edges(4, {{0, 9}}), Error);
    const auto g = SocialGraph::from_edges(4, {{2, 0}, {1, 3}});
    CHECK(g.has_edge(0, 2));
    CHECK(g.has_edge(2, 0));
    CHECK_FALSE(g.has_edge(0, 1));
}

TEST_CASE("validate_dataset names injected violations") {
    auto g = generate_dataset(fx::tiny_data(), 4);
    SUBCASE("out of vocabulary token") {
        g.dataset.posts[3].tokens[0] = g.dataset.meta.config.vocab_size;
        const auto issues = validate_dataset(g.dataset, g.graph);
        CHECK(issues.size() == 1);
        CHECK(has_issue(issues, "post 3"));
    }
    SUBCASE("asymmetric adjacency") {
        // Point one adjacency entry of a node at a non-neighbor.
        std::int64_t u = 0;
        while (g.graph.degree(u) == 0) ++u;
        const auto k = g.graph.offsets[u + 1] - 1;
        std::int64_t w = g.graph.neighbors[k] + 1;
        while (w < g.graph.n_nodes && (w == u || g.graph.has_edge(w, u))) ++w;
        REQUIRE(w < g.graph.n_nodes);
        g.graph.neighbors[k] = w;
        const auto issues = validate_dataset(g.dataset, g.graph);
        CHECK(has_issue(issues, "asymmetric adjacency (" + std::to_string(u) + "," + std::to_string(w) + ")"));
    }
    SUBCASE("dangling post reference") {
        g.dataset.users[1].post_ids.push_back(9999);
        CHECK(has_issue(validate_dataset(g.dataset, g.graph), "user 1: dangling post id 9999"));
    }
}

TEST_CASE("edge split") {
    const auto g = generate_dataset(small_sbm(), 11);
    const auto s = split_edges(g.graph, 0.1, 5);
    const auto E = g.graph.edge_count();
    CHECK(s.heldout_pos.size() == static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(E))));
    CHECK(s.heldout_neg.size() == s.heldout_pos.size());
    CHECK(s.train_graph.edge_count() + s.heldout_pos.size() == E);
    std::set<NodePair> all(s.train_graph.edges.begin(), s.train_graph.edges.end());
    for (const auto& p : s.heldout_pos) {
        CHECK_FALSE(s.train_graph.has_edge(p.u, p.v));
        CHECK(g.graph.has_edge(p.u, p.v));
        all.insert(p);
    }
    CHECK(all.size() == E);
    for (const auto& p : s.heldout_neg) CHECK_FALSE(g.graph.has_edge(p.u, p.v));
    CHECK(validate_dataset(g.dataset, s.train_graph).empty());

    const auto again = split_edges(g.graph, 0.1, 5);
    CHECK(again.heldout_pos == s.heldout_pos);
    const auto other = split_edges(g.graph, 0.1, 6);
    CHECK_FALSE(other.heldout_pos == s.heldout_pos);

    CHECK_THROWS_AS(split_edges(g.graph, 0.0, 1), Error);
    CHECK_THROWS_AS(split_edges(g.graph, 1.0, 1), Error);
    CHECK_THROWS_AS(split_edges(SocialGraph::from_edges(3, {{0, 1}}), 0.5, 1), Error);
}

TEST_CASE("ceil holdout arithmetic on 1090 edges") {
    std::vector<NodePair> edges;
    for (std::int64_t u = 0; u < 200 && edges.size() < 1090; ++u)
        for (std::int64_t v = u + 1; v < 200 && edges.size() < 1090; v += 3) edges.push_back({u, v});
    const auto g = SocialGraph::from_edges(200, edges);
    REQUIRE(g.edge_count() == 1090);
    CHECK(split_edges(g, 0.1, 1).heldout_pos.size() == 109);
}

TEST_CASE("negative sampling") {
    SUBCASE("empty graph") {
        const auto g = SocialGraph::from_edges(4, {});
        const auto neg = sample_negative_pairs(g, 3, 1);
        CHECK(neg.size() == 3);
        CHECK(std::set<NodePair>(neg.begin(), neg.end()).size() == 3);
        for (const auto& p : neg) CHECK(p.u != p.v);
    }
    SUBCASE("complete graph") {
        const auto g = SocialGraph::from_edges(3, {{0, 1}, {0, 2}, {1, 2}});
        CHECK_THROWS_AS(sample_negative_pairs(g, 1, 1), Error);
    }
    SUBCASE("large sample on the sbm graph") {
        const auto g = generate_dataset(small_sbm(), 11);
        const std::set<NodePair> exclude = {{0, 1}, {2, 3}};
        const auto neg = sample_negative_pairs(g.graph, 10000, 3, exclude);
        CHECK(neg.size() == 10000);
        CHECK(std::set<NodePair>(neg.begin(), neg.end()).size() == 10000);
        bool ok = true;
        for (const auto& p : neg) {
            bool adjacent = false;
            for (const auto& e : g.graph.edges) adjacent |= (e == p);
            ok &= !adjacent && p.u < p.v && !exclude.contains(p);
        }
        CHECK(ok);
        CHECK(sample_negative_pairs(g.graph, 50, 3) == sample_negative_pairs(g.graph, 50, 3));
    }
    SUBCASE("exclusion exhausts the non-edges") {
        const auto g = SocialGraph::from_edges(3, {{0, 1}});
        CHECK_THROWS_AS(sample_negative_pairs(g, 1, 1, {{0, 2}, {1, 2}}), Error);
    }
}
