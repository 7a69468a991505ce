#pragma once

// Synthetic multimodal social-graph data: users with statistic features and
// labels, posts carrying a token sequence and a raster image, and an
// undirected friendship graph.

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace mmga::data {

using NodeId = std::int64_t;

/// Unordered node pair stored canonically with u < v.
struct NodePair {
    NodeId u = 0;
    NodeId v = 0;

    static NodePair canonical(NodeId a, NodeId b) { return a < b ? NodePair{a, b} : NodePair{b, a}; }
    auto operator<=>(const NodePair&) const = default;
};

struct ImageShape {
    int channels = 1;
    int height = 32;
    int width = 32;

    std::size_t size() const {
        return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
               static_cast<std::size_t>(width);
    }
    bool operator==(const ImageShape&) const = default;
};

/// Generator parameters. Field names double as config-file keys.
struct DatasetConfig {
    std::int64_t n_users = 400;
    int k_topics = 4;
    int posts_per_user = 5;
    double p_in = 0.1;
    double p_out = 0.01;
    int vocab_size = 64;
    int max_tokens = 32;
    ImageShape image{};
    int stat_dim = 8;
    double topic_vocab_concentration = 0.15;
    double glyph_noise = 0.85;
    double popularity_sigma = 0.8;
    double fans_quantile = 0.2;
    std::uint64_t seed = 1;

    bool operator==(const DatasetConfig&) const = default;
};

struct DatasetMeta {
    DatasetConfig config;
    std::int64_t n_posts = 0;

    bool operator==(const DatasetMeta&) const = default;
};

struct Post {
    std::int64_t post_id = 0;
    std::int64_t user_id = 0;
    std::vector<std::int32_t> tokens;
    std::vector<float> image;  // channels x height x width, row-major

    bool operator==(const Post&) const = default;
};

struct UserRecord {
    std::int64_t user_id = 0;
    std::vector<double> stat_features;
    int topic_label = 0;
    int fans_label = 0;
    std::vector<std::int64_t> post_ids;

    bool operator==(const UserRecord&) const = default;
};

struct Dataset {
    DatasetMeta meta;
    std::vector<UserRecord> users;
    std::vector<Post> posts;  // indexed by post_id

    bool operator==(const Dataset&) const = default;
};

/// Undirected simple graph. `edges` holds each edge once (u < v, sorted);
/// `offsets`/`neighbors` is the symmetric CSR adjacency with sorted rows.
struct SocialGraph {
    std::int64_t n_nodes = 0;
    std::vector<NodePair> edges;
    std::vector<std::int64_t> offsets;
    std::vector<std::int64_t> neighbors;

    /// Builds a graph from an edge list; rejects self-loops, duplicates and
    /// out-of-range endpoints.
    static SocialGraph from_edges(std::int64_t n_nodes, std::vector<NodePair> edges);

    std::int64_t degree(NodeId u) const { return offsets[u + 1] - offsets[u]; }
    bool has_edge(NodeId a, NodeId b) const;
    std::size_t edge_count() const { return edges.size(); }

    bool operator==(const SocialGraph&) const = default;
};

struct EdgeSplit {
    SocialGraph train_graph;
    std::vector<NodePair> heldout_pos;
    std::vector<NodePair> heldout_neg;
};

struct GeneratedData {
    Dataset dataset;
    SocialGraph graph;
};

/// Throws Error(InvalidConfig) on unusable generator parameters.
void check_config(const DatasetConfig& cfg);

/// Popularity-weighted stochastic block model graph + topic-conditioned posts.
/// Fully determined by (cfg, seed); per-user work uses subseeds derived
/// from the master seed, so the parallel and sequential runs agree.
GeneratedData generate_dataset(const DatasetConfig& cfg, std::uint64_t seed);

/// Per-topic glyph templates (values in {0,1}) used by the image generator.
std::vector<std::vector<float>> topic_glyphs(const DatasetConfig& cfg, std::uint64_t seed);

/// Empty result means the dataset satisfies every record/graph invariant.
std::vector<std::string> validate_dataset(const Dataset& ds, const SocialGraph& graph);

struct FileDigest {
    std::string sha256;
    std::uintmax_t bytes = 0;
};
using Manifest = std::map<std::string, FileDigest>;

/// Writes meta.json, users.jsonl, posts.jsonl, images.bin, images.idx,
/// edges.tsv and manifest.json into `dir`.
Manifest save_dataset(const Dataset& ds, const SocialGraph& graph, const std::filesystem::path& dir);
GeneratedData load_dataset(const std::filesystem::path& dir);

/// Recomputes manifest.json from the files currently in `dir`.
Manifest write_dataset_manifest(const std::filesystem::path& dir);

/// Removes ceil(holdout_frac * |E|) uniformly chosen edges and pairs them
/// with equally many uniform non-edges of the full graph.
EdgeSplit split_edges(const SocialGraph& graph, double holdout_frac, std::uint64_t seed);

/// `n` distinct unordered non-adjacent pairs, none in `exclude`.
std::vector<NodePair> sample_negative_pairs(const SocialGraph& graph, std::size_t n,
                                            std::uint64_t seed,
                                            const std::set<NodePair>& exclude = {});

/// Posts grouped by user: user u owns order[offsets[u] .. offsets[u+1]).
struct UserPostIndex {
    std::vector<std::int64_t> order;
    std::vector<std::int64_t> offsets;
};
UserPostIndex user_post_index(const Dataset& ds);

}  // namespace mmga::data
