#include "mmga/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mmga/error.hpp"
#include "mmga/rng.hpp"

namespace mmga::data {

SocialGraph SocialGraph::from_edges(std::int64_t n_nodes, std::vector<NodePair> edges) {
    if (n_nodes < 0) {
        fail(ErrorCode::InvalidArgument, "graph: negative node count");
    }
    for (auto& e : edges) {
        if (e.u == e.v) {
            fail(ErrorCode::Validation, "graph: self-loop at node " + std::to_string(e.u));
        }
        e = NodePair::canonical(e.u, e.v);
        if (e.u < 0 || e.v >= n_nodes) {
            fail(ErrorCode::Validation, "graph: edge (" + std::to_string(e.u) + "," +
                                            std::to_string(e.v) + ") out of range");
        }
    }
    std::sort(edges.begin(), edges.end());
    if (auto dup = std::adjacent_find(edges.begin(), edges.end()); dup != edges.end()) {
        fail(ErrorCode::Validation, "graph: duplicate edge (" + std::to_string(dup->u) + "," +
                                        std::to_string(dup->v) + ")");
    }
    SocialGraph g;
    g.n_nodes = n_nodes;
    std::vector<std::int64_t> deg(static_cast<std::size_t>(n_nodes), 0);
    for (const auto& e : edges) {
        ++deg[e.u];
        ++deg[e.v];
    }
    g.offsets.assign(static_cast<std::size_t>(n_nodes) + 1, 0);
    for (std::int64_t u = 0; u < n_nodes; ++u) g.offsets[u + 1] = g.offsets[u] + deg[u];
    g.neighbors.assign(static_cast<std::size_t>(g.offsets.back()), 0);
    std::vector<std::int64_t> fill(g.offsets.begin(), g.offsets.end() - 1);
    for (const auto& e : edges) {
        g.neighbors[fill[e.u]++] = e.v;
        g.neighbors[fill[e.v]++] = e.u;
    }
    for (std::int64_t u = 0; u < n_nodes; ++u) {
        std::sort(g.neighbors.begin() + g.offsets[u], g.neighbors.begin() + g.offsets[u + 1]);
    }
    g.edges = std::move(edges);
    return g;
}

bool SocialGraph::has_edge(NodeId a, NodeId b) const {
    if (a < 0 || a >= n_nodes || b < 0 || b >= n_nodes) return false;
    auto first = neighbors.begin() + offsets[a];
    auto last = neighbors.begin() + offsets[a + 1];
    return std::binary_search(first, last, b);
}

void check_config(const DatasetConfig& cfg) {
    auto bad = [](const std::string& msg) { fail(ErrorCode::InvalidConfig, msg); };
    if (cfg.k_topics < 2) bad("k_topics must be >= 2");
    if (cfg.n_users <= 0 || cfg.n_users % cfg.k_topics != 0)
        bad("n_users must be a positive multiple of k_topics");
    if (cfg.posts_per_user <= 0) bad("posts_per_user must be positive");
    if (!(cfg.p_in >= 0.0 && cfg.p_in <= 1.0 && cfg.p_out >= 0.0 && cfg.p_out <= 1.0))
        bad("edge probabilities must lie in [0,1]");
    if (!(cfg.p_out < cfg.p_in) && !(cfg.p_in == 0.0 && cfg.p_out == 0.0))
        bad("p_out must be smaller than p_in");
    if (cfg.vocab_size < cfg.k_topics) bad("vocab_size must be >= k_topics");
    if (cfg.max_tokens < 1) bad("max_tokens must be positive");
    if (cfg.image.channels < 1 || cfg.image.height < 1 || cfg.image.width < 1)
        bad("image dimensions must be positive");
    if (cfg.stat_dim < 3) bad("stat_dim must be >= 3");
    if (!(cfg.topic_vocab_concentration >= 0.0 && cfg.topic_vocab_concentration <= 1.0))
        bad("topic_vocab_concentration must lie in [0,1]");
    if (!(cfg.glyph_noise >= 0.0 && cfg.glyph_noise <= 1.0)) bad("glyph_noise must lie in [0,1]");
    if (!(cfg.popularity_sigma >= 0.0) || !std::isfinite(cfg.popularity_sigma))
        bad("popularity_sigma must be finite and >= 0");
    if (!(cfg.fans_quantile >= 0.0 && cfg.fans_quantile <= 1.0))
        bad("fans_quantile must lie in [0,1]");
}

std::vector<std::vector<float>> topic_glyphs(const DatasetConfig& cfg, std::uint64_t seed) {
    const int h = cfg.image.height;
    const int w = cfg.image.width;
    std::vector<std::vector<float>> glyphs;
    Rng rng(stream_seed(seed, streams::kTopics ^ 0x474C5950ULL));
    for (int k = 0; k < cfg.k_topics; ++k) {
        std::vector<float> plane(static_cast<std::size_t>(h * w), 0.0f);
        // A few random bars per topic.
        for (int stroke = 0; stroke < 4; ++stroke) {
            const bool horizontal = rng.bernoulli(0.5);
            const int thick = 2 + static_cast<int>(rng.below(2));
            const int len_h = horizontal ? std::max(1, w / 3 + static_cast<int>(rng.below(static_cast<std::uint64_t>(w / 2 + 1)))) : thick;
            const int len_v = horizontal ? thick : std::max(1, h / 3 + static_cast<int>(rng.below(static_cast<std::uint64_t>(h / 2 + 1))));
            const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, h - len_v + 1))));
            const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, w - len_h + 1))));
            for (int y = y0; y < std::min(h, y0 + len_v); ++y) {
                for (int x = x0; x < std::min(w, x0 + len_h); ++x) {
                    plane[static_cast<std::size_t>(y * w + x)] = 1.0f;
                }
            }
        }
        std::vector<float> glyph;
        glyph.reserve(cfg.image.size());
        for (int c = 0; c < cfg.image.channels; ++c) {
            glyph.insert(glyph.end(), plane.begin(), plane.end());
        }
        glyphs.push_back(std::move(glyph));
    }
    return glyphs;
}

namespace {

std::vector<int> assign_topics(const DatasetConfig& cfg, std::uint64_t seed) {
    const std::int64_t per = cfg.n_users / cfg.k_topics;
    std::vector<int> topics(static_cast<std::size_t>(cfg.n_users));
    for (std::int64_t u = 0; u < cfg.n_users; ++u) topics[u] = static_cast<int>(u / per);
    Rng rng(stream_seed(seed, streams::kTopics));
    rng.shuffle(topics);
    return topics;
}

// Lognormal popularity, rescaled to mean 1 inside each topic block.
std::vector<double> draw_popularity(const DatasetConfig& cfg, const std::vector<int>& topics,
                                    std::uint64_t seed) {
    const auto n = static_cast<std::size_t>(cfg.n_users);
    std::vector<double> theta(n);
    const std::uint64_t base = stream_seed(seed, streams::kPopularity);
    for (std::size_t u = 0; u < n; ++u) {
        Rng rng(subseed(base, u));
        theta[u] = std::exp(cfg.popularity_sigma * rng.normal());
    }
    std::vector<double> block_sum(static_cast<std::size_t>(cfg.k_topics), 0.0);
    std::vector<double> block_n(static_cast<std::size_t>(cfg.k_topics), 0.0);
    for (std::size_t u = 0; u < n; ++u) {
        block_sum[topics[u]] += theta[u];
        block_n[topics[u]] += 1.0;
    }
    for (std::size_t u = 0; u < n; ++u) {
        theta[u] *= block_n[topics[u]] / block_sum[topics[u]];
    }
    return theta;
}

std::vector<NodePair> draw_edges(const DatasetConfig& cfg, const std::vector<int>& topics,
                                 const std::vector<double>& theta, std::uint64_t seed) {
    const std::int64_t n = cfg.n_users;
    std::vector<std::vector<NodePair>> rows(static_cast<std::size_t>(n));
    const std::uint64_t base = stream_seed(seed, streams::kEdges);
#pragma omp parallel for schedule(dynamic, 16)
    for (std::int64_t u = 0; u < n; ++u) {
        Rng rng(subseed(base, static_cast<std::uint64_t>(u)));
        for (std::int64_t v = u + 1; v < n; ++v) {
            const double block = topics[u] == topics[v] ? cfg.p_in : cfg.p_out;
            const double p = std::min(1.0, block * theta[u] * theta[v]);
            if (rng.uniform() < p) {
                rows[u].push_back({u, v});
            }
        }
    }
    std::vector<NodePair> edges;
    for (auto& r : rows) edges.insert(edges.end(), r.begin(), r.end());
    return edges;
}

std::vector<double> zscores(const std::vector<double>& x) {
    const double n = static_cast<double>(x.size());
    const double mu = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double var = 0.0;
    for (double v : x) var += (v - mu) * (v - mu);
    const double sd = std::sqrt(var / n);
    std::vector<double> z(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) z[i] = sd > 0 ? (x[i] - mu) / sd : 0.0;
    return z;
}

}  // namespace

GeneratedData generate_dataset(const DatasetConfig& cfg_in, std::uint64_t seed) {
    DatasetConfig cfg = cfg_in;
    cfg.seed = seed;
    check_config(cfg);

    const std::int64_t n = cfg.n_users;
    const std::vector<int> topics = assign_topics(cfg, seed);
    const std::vector<double> theta = draw_popularity(cfg, topics, seed);
    SocialGraph graph = SocialGraph::from_edges(n, draw_edges(cfg, topics, theta, seed));
    const auto glyphs = topic_glyphs(cfg, seed);

    GeneratedData out;
    Dataset& ds = out.dataset;
    ds.meta.config = cfg;
    ds.meta.n_posts = n * cfg.posts_per_user;
    ds.users.resize(static_cast<std::size_t>(n));
    ds.posts.resize(static_cast<std::size_t>(ds.meta.n_posts));

    const int vocab = cfg.vocab_size;
    const int words_per_topic = vocab / cfg.k_topics;
    const int min_len = std::max(1, cfg.max_tokens / 4);
    const std::uint64_t post_base = stream_seed(seed, streams::kPosts);
    const std::uint64_t stat_base = stream_seed(seed, streams::kStats);
    const std::size_t pixels = cfg.image.size();

    std::vector<double> likes(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(static)
    for (std::int64_t u = 0; u < n; ++u) {
        const int topic = topics[u];
        UserRecord& user = ds.users[u];
        user.user_id = u;
        user.topic_label = topic;

        Rng post_rng(subseed(post_base, static_cast<std::uint64_t>(u)));
        for (int j = 0; j < cfg.posts_per_user; ++j) {
            const std::int64_t pid = u * cfg.posts_per_user + j;
            Post& post = ds.posts[pid];
            post.post_id = pid;
            post.user_id = u;
            const int len = min_len + static_cast<int>(post_rng.below(
                                          static_cast<std::uint64_t>(cfg.max_tokens - min_len + 1)));
            post.tokens.resize(static_cast<std::size_t>(len));
            for (auto& tok : post.tokens) {
                if (post_rng.uniform() < cfg.topic_vocab_concentration) {
                    tok = topic * words_per_topic +
                          static_cast<int>(post_rng.below(static_cast<std::uint64_t>(words_per_topic)));
                } else {
                    tok = static_cast<int>(post_rng.below(static_cast<std::uint64_t>(vocab)));
                }
            }
            post.image.resize(pixels);
            const auto& glyph = glyphs[topic];
            for (std::size_t p = 0; p < pixels; ++p) {
                const double value = (1.0 - cfg.glyph_noise) * glyph[p] + cfg.glyph_noise * post_rng.uniform();
                post.image[p] = static_cast<float>(std::clamp(value, 0.0, 1.0));
            }
            user.post_ids.push_back(pid);
        }

        Rng stat_rng(subseed(stat_base, static_cast<std::uint64_t>(u)));
        likes[u] = 0.4 * topic + std::log(theta[u]) + 0.5 * stat_rng.normal();
        user.stat_features.assign(static_cast<std::size_t>(cfg.stat_dim), 0.0);
        user.stat_features[0] = std::log1p(static_cast<double>(graph.degree(u)));
        user.stat_features[1] = static_cast<double>(cfg.posts_per_user);
        user.stat_features[2] = likes[u];
        for (int k = 3; k < cfg.stat_dim; ++k) user.stat_features[k] = stat_rng.normal();
    }

    // fans_label: top quantile of z(degree) + z(likes); ties broken by user id.
    std::vector<double> degree(static_cast<std::size_t>(n));
    for (std::int64_t u = 0; u < n; ++u) degree[u] = static_cast<double>(graph.degree(u));
    const auto zd = zscores(degree);
    const auto zl = zscores(likes);
    std::vector<std::int64_t> rank(static_cast<std::size_t>(n));
    std::iota(rank.begin(), rank.end(), 0);
    std::stable_sort(rank.begin(), rank.end(), [&](std::int64_t a, std::int64_t b) {
        return zd[a] + zl[a] > zd[b] + zl[b];
    });
    const auto n_fans = static_cast<std::int64_t>(std::llround(cfg.fans_quantile * static_cast<double>(n)));
    for (std::int64_t i = 0; i < n_fans; ++i) ds.users[rank[i]].fans_label = 1;

    out.graph = std::move(graph);
    return out;
}

UserPostIndex user_post_index(const Dataset& ds) {
    UserPostIndex idx;
    idx.offsets.push_back(0);
    for (const auto& user : ds.users) {
        idx.order.insert(idx.order.end(), user.post_ids.begin(), user.post_ids.end());
        idx.offsets.push_back(static_cast<std::int64_t>(idx.order.size()));
    }
    return idx;
}

std::vector<std::string> validate_dataset(const Dataset& ds, const SocialGraph& graph) {
    std::vector<std::string> issues;
    auto report = [&](std::string s) { issues.push_back(std::move(s)); };
    const DatasetConfig& cfg = ds.meta.config;
    const auto n_users = static_cast<std::int64_t>(ds.users.size());
    const auto n_posts = static_cast<std::int64_t>(ds.posts.size());

    if (cfg.n_users != n_users) {
        report("meta: n_users=" + std::to_string(cfg.n_users) + " but " + std::to_string(n_users) + " user records");
    }
    if (ds.meta.n_posts != n_posts) {
        report("meta: n_posts=" + std::to_string(ds.meta.n_posts) + " but " + std::to_string(n_posts) + " post records");
    }

    for (std::int64_t i = 0; i < n_posts; ++i) {
        const Post& p = ds.posts[i];
        const std::string tag = "post " + std::to_string(p.post_id);
        if (p.post_id != i) report(tag + ": stored at index " + std::to_string(i));
        if (p.tokens.empty()) report(tag + ": empty token sequence");
        if (static_cast<int>(p.tokens.size()) > cfg.max_tokens) report(tag + ": more than max_tokens tokens");
        for (auto t : p.tokens) {
            if (t < 0 || t >= cfg.vocab_size) {
                report(tag + ": token id " + std::to_string(t) + " outside [0," + std::to_string(cfg.vocab_size) + ")");
                break;
            }
        }
        if (p.image.size() != cfg.image.size()) {
            report(tag + ": image has " + std::to_string(p.image.size()) + " values, expected " + std::to_string(cfg.image.size()));
        }
        for (float v : p.image) {
            if (!std::isfinite(v) || v < 0.0f || v > 1.0f) {
                report(tag + ": image value outside [0,1]");
                break;
            }
        }
        if (p.user_id < 0 || p.user_id >= n_users) {
            report(tag + ": dangling user id " + std::to_string(p.user_id));
        }
    }

    for (std::int64_t i = 0; i < n_users; ++i) {
        const UserRecord& u = ds.users[i];
        const std::string tag = "user " + std::to_string(u.user_id);
        if (u.user_id != i) report(tag + ": stored at index " + std::to_string(i));
        if (static_cast<int>(u.stat_features.size()) != cfg.stat_dim) report(tag + ": stat_features length mismatch");
        for (double v : u.stat_features) {
            if (!std::isfinite(v)) {
                report(tag + ": non-finite stat feature");
                break;
            }
        }
        if (u.topic_label < 0 || u.topic_label >= cfg.k_topics) report(tag + ": topic label out of range");
        if (u.fans_label != 0 && u.fans_label != 1) report(tag + ": fans label not binary");
        for (auto pid : u.post_ids) {
            if (pid < 0 || pid >= n_posts) {
                report(tag + ": dangling post id " + std::to_string(pid));
            } else if (ds.posts[pid].user_id != u.user_id) {
                report(tag + ": post " + std::to_string(pid) + " owned by user " + std::to_string(ds.posts[pid].user_id));
            }
        }
    }

    // graph
    if (graph.n_nodes != n_users) {
        report("graph: " + std::to_string(graph.n_nodes) + " nodes for " + std::to_string(n_users) + " users");
    }
    if (static_cast<std::int64_t>(graph.offsets.size()) != graph.n_nodes + 1 ||
        graph.offsets.back() != static_cast<std::int64_t>(graph.neighbors.size())) {
        report("graph: adjacency offsets inconsistent with neighbor list");
        return issues;
    }
    for (std::int64_t u = 0; u < graph.n_nodes; ++u) {
        for (auto k = graph.offsets[u]; k < graph.offsets[u + 1]; ++k) {
            const auto v = graph.neighbors[k];
            const std::string pair = "(" + std::to_string(u) + "," + std::to_string(v) + ")";
            if (v < 0 || v >= graph.n_nodes) {
                report("graph: neighbor out of range in " + pair);
                continue;
            }
            if (v == u) report("graph: self-loop " + pair);
            if (k > graph.offsets[u] && graph.neighbors[k - 1] >= v) report("graph: unsorted or duplicate neighbor " + pair);
            if (!graph.has_edge(v, u)) report("graph: asymmetric adjacency " + pair);
        }
    }
    if (graph.neighbors.size() != 2 * graph.edges.size()) {
        report("graph: edge list size " + std::to_string(graph.edges.size()) + " disagrees with adjacency");
    }
    for (std::size_t i = 0; i < graph.edges.size(); ++i) {
        const auto& e = graph.edges[i];
        const std::string pair = "(" + std::to_string(e.u) + "," + std::to_string(e.v) + ")";
        if (e.u >= e.v) report("graph: edge not canonical " + pair);
        if (i > 0 && !(graph.edges[i - 1] < e)) report("graph: edge list unsorted or duplicated at " + pair);
        if (!graph.has_edge(e.u, e.v)) report("graph: edge " + pair + " missing from adjacency");
    }
    return issues;
}

EdgeSplit split_edges(const SocialGraph& graph, double holdout_frac, std::uint64_t seed) {
    if (!(holdout_frac > 0.0 && holdout_frac < 1.0)) {
        fail(ErrorCode::InvalidArgument, "split_edges: holdout_frac must lie in (0,1)");
    }
    const std::size_t m = graph.edge_count();
    if (m < 2) {
        fail(ErrorCode::InvalidArgument, "split_edges: graph needs at least 2 edges");
    }
    auto n_hold = static_cast<std::size_t>(std::ceil(holdout_frac * static_cast<double>(m) - 1e-9));
    n_hold = std::clamp<std::size_t>(n_hold, 1, m - 1);

    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(stream_seed(seed, streams::kSplit));
    rng.shuffle(order);

    EdgeSplit split;
    std::vector<char> held(m, 0);
    for (std::size_t i = 0; i < n_hold; ++i) held[order[i]] = 1;
    std::vector<NodePair> keep;
    keep.reserve(m - n_hold);
    for (std::size_t i = 0; i < m; ++i) {
        if (held[i]) {
            split.heldout_pos.push_back(graph.edges[i]);
        } else {
            keep.push_back(graph.edges[i]);
        }
    }
    split.train_graph = SocialGraph::from_edges(graph.n_nodes, std::move(keep));
    split.heldout_neg = sample_negative_pairs(graph, n_hold, mix64(seed ^ streams::kSplit));
    return split;
}

std::vector<NodePair> sample_negative_pairs(const SocialGraph& graph, std::size_t n,
                                            std::uint64_t seed, const std::set<NodePair>& exclude) {
    if (n < 1) {
        fail(ErrorCode::InvalidArgument, "sample_negative_pairs: n must be >= 1");
    }
    const auto nodes = static_cast<std::uint64_t>(graph.n_nodes);
    const std::uint64_t all_pairs = nodes < 2 ? 0 : nodes * (nodes - 1) / 2;
    std::uint64_t excluded_non_edges = 0;
    for (const auto& p : exclude) {
        if (p.u != p.v && p.u >= 0 && p.v < graph.n_nodes && !graph.has_edge(p.u, p.v)) ++excluded_non_edges;
    }
    const std::uint64_t available = all_pairs - graph.edge_count() - excluded_non_edges;
    if (n > available) {
        fail(ErrorCode::InvalidArgument, "sample_negative_pairs: requested " + std::to_string(n) +
                                             " pairs but only " + std::to_string(available) +
                                             " non-edges are available");
    }
    Rng rng(seed);
    std::vector<NodePair> out;
    out.reserve(n);
    auto usable = [&](NodePair p) {
        return !graph.has_edge(p.u, p.v) && !exclude.contains(p);
    };
    if (2 * n > available) {
        // Dense request: enumerate and shuffle.
        std::vector<NodePair> pool;
        for (std::int64_t u = 0; u < graph.n_nodes; ++u) {
            for (std::int64_t v = u + 1; v < graph.n_nodes; ++v) {
                if (usable({u, v})) pool.push_back({u, v});
            }
        }
        rng.shuffle(pool);
        out.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n));
        return out;
    }
    std::set<NodePair> chosen;
    while (out.size() < n) {
        const auto a = static_cast<std::int64_t>(rng.below(nodes));
        const auto b = static_cast<std::int64_t>(rng.below(nodes));
        if (a == b) continue;
        const NodePair p = NodePair::canonical(a, b);
        if (!usable(p) || !chosen.insert(p).second) continue;
        out.push_back(p);
    }
    return out;
}

}  // namespace mmga::data
