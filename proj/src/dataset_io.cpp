#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "mmga/dataset.hpp"
#include "mmga/digest.hpp"
#include "mmga/error.hpp"

namespace mmga::data {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr const char* kDataFiles[] = {"meta.json",  "users.jsonl", "posts.jsonl",
                                      "images.bin", "images.idx",  "edges.tsv"};

std::ofstream open_out(const fs::path& p, bool binary = false) {
    std::ofstream out(p, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot write " + p.string());
    return out;
}

std::ifstream open_in(const fs::path& p, bool binary = false) {
    if (!fs::exists(p)) fail(ErrorCode::Io, "missing dataset file: " + p.filename().string());
    std::ifstream in(p, binary ? std::ios::binary : std::ios::in);
    if (!in) fail(ErrorCode::Io, "cannot read " + p.string());
    return in;
}

void write_f32_le(std::ostream& out, float v) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
    unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                          static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

float read_f32_le(const unsigned char* b) {
    const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                               (static_cast<std::uint32_t>(b[2]) << 16) |
                               (static_cast<std::uint32_t>(b[3]) << 24);
    return std::bit_cast<float>(bits);
}

json meta_to_json(const DatasetMeta& meta) {
    const auto& c = meta.config;
    json j;
    j["format_version"] = 1;
    j["n_users"] = c.n_users;
    j["n_posts"] = meta.n_posts;
    j["k_topics"] = c.k_topics;
    j["vocab_size"] = c.vocab_size;
    j["max_tokens"] = c.max_tokens;
    j["image_shape"] = {c.image.channels, c.image.height, c.image.width};
    j["stat_dim"] = c.stat_dim;
    j["seed"] = c.seed;
    j["generator"] = {{"p_in", c.p_in},
                      {"p_out", c.p_out},
                      {"posts_per_user", c.posts_per_user},
                      {"topic_vocab_concentration", c.topic_vocab_concentration},
                      {"glyph_noise", c.glyph_noise},
                      {"popularity_sigma", c.popularity_sigma},
                      {"fans_quantile", c.fans_quantile}};
    return j;
}

DatasetMeta meta_from_json(const json& j) {
    DatasetMeta meta;
    auto& c = meta.config;
    c.n_users = j.at("n_users").get<std::int64_t>();
    meta.n_posts = j.at("n_posts").get<std::int64_t>();
    c.k_topics = j.at("k_topics").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_tokens = j.at("max_tokens").get<int>();
    const auto& shape = j.at("image_shape");
    c.image = {shape.at(0).get<int>(), shape.at(1).get<int>(), shape.at(2).get<int>()};
    c.stat_dim = j.at("stat_dim").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    const auto& g = j.at("generator");
    c.p_in = g.at("p_in").get<double>();
    c.p_out = g.at("p_out").get<double>();
    c.posts_per_user = g.at("posts_per_user").get<int>();
    c.topic_vocab_concentration = g.at("topic_vocab_concentration").get<double>();
    c.glyph_noise = g.at("glyph_noise").get<double>();
    c.popularity_sigma = g.at("popularity_sigma").get<double>();
    c.fans_quantile = g.at("fans_quantile").get<double>();
    return meta;
}

Manifest read_manifest(const fs::path& dir) {
    auto in = open_in(dir / "manifest.json");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        fail(ErrorCode::Validation, std::string("manifest.json: ") + e.what());
    }
    Manifest m;
    for (const auto& [name, entry] : j.at("files").items()) {
        m[name] = {entry.at("sha256").get<std::string>(), entry.at("bytes").get<std::uintmax_t>()};
    }
    return m;
}

}  // namespace

Manifest write_dataset_manifest(const fs::path& dir) {
    Manifest m;
    json files = json::object();
    for (const char* name : kDataFiles) {
        const fs::path p = dir / name;
        if (!fs::exists(p)) fail(ErrorCode::Io, "missing dataset file: " + std::string(name));
        FileDigest d{sha256_file(p), fs::file_size(p)};
        files[name] = {{"sha256", d.sha256}, {"bytes", d.bytes}};
        m[name] = d;
    }
    json j;
    j["files"] = files;
    auto out = open_out(dir / "manifest.json");
    out << j.dump(2) << '\n';
    return m;
}

Manifest save_dataset(const Dataset& ds, const SocialGraph& graph, const fs::path& dir) {
    if (auto issues = validate_dataset(ds, graph); !issues.empty()) {
        fail(ErrorCode::Validation, "save_dataset: inconsistent dataset: " + issues.front());
    }
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorCode::Io, "cannot create " + dir.string() + ": " + ec.message());

    {
        auto out = open_out(dir / "meta.json");
        out << meta_to_json(ds.meta).dump(2) << '\n';
    }
    {
        auto out = open_out(dir / "users.jsonl");
        for (const auto& u : ds.users) {
            json j;
            j["user_id"] = u.user_id;
            j["stat_features"] = u.stat_features;
            j["topic_label"] = u.topic_label;
            j["fans_label"] = u.fans_label;
            j["post_ids"] = u.post_ids;
            out << j.dump() << '\n';
        }
    }
    {
        auto out = open_out(dir / "posts.jsonl");
        for (const auto& p : ds.posts) {
            json j;
            j["post_id"] = p.post_id;
            j["user_id"] = p.user_id;
            j["tokens"] = p.tokens;
            out << j.dump() << '\n';
        }
    }
    {
        auto bin = open_out(dir / "images.bin", true);
        auto idx = open_out(dir / "images.idx");
        std::uint64_t offset = 0;
        for (const auto& p : ds.posts) {
            for (float v : p.image) write_f32_le(bin, v);
            idx << p.post_id << '\t' << offset << '\t' << p.image.size() << '\n';
            offset += 4 * p.image.size();
        }
        if (!bin) fail(ErrorCode::Io, "write failed: images.bin");
    }
    {
        auto out = open_out(dir / "edges.tsv");
        for (const auto& e : graph.edges) out << e.u << '\t' << e.v << '\n';
        if (!out) fail(ErrorCode::Io, "write failed: edges.tsv");
    }
    return write_dataset_manifest(dir);
}

GeneratedData load_dataset(const fs::path& dir) {
    const Manifest manifest = read_manifest(dir);
    for (const char* name : kDataFiles) {
        if (!fs::exists(dir / name)) fail(ErrorCode::Io, "missing dataset file: " + std::string(name));
        if (!manifest.contains(name)) fail(ErrorCode::Validation, "manifest.json does not list " + std::string(name));
    }

    GeneratedData out;
    Dataset& ds = out.dataset;
    try {
        auto in = open_in(dir / "meta.json");
        ds.meta = meta_from_json(json::parse(in));
    } catch (const json::exception& e) {
        fail(ErrorCode::Validation, std::string("meta.json: ") + e.what());
    }
    const auto& cfg = ds.meta.config;
    const std::uintmax_t expected_image_bytes =
        static_cast<std::uintmax_t>(ds.meta.n_posts) * cfg.image.size() * 4;
    const std::uintmax_t image_bytes = fs::file_size(dir / "images.bin");
    if (image_bytes < expected_image_bytes) {
        fail(ErrorCode::Validation, "images.bin truncated: " + std::to_string(image_bytes) +
                                        " bytes, expected " + std::to_string(expected_image_bytes));
    }
    for (const auto& [name, digest] : manifest) {
        const fs::path p = dir / name;
        if (!fs::exists(p)) fail(ErrorCode::Io, "missing dataset file: " + name);
        if (sha256_file(p) != digest.sha256) fail(ErrorCode::DigestMismatch, "digest mismatch: " + name);
    }

    try {
        auto in = open_in(dir / "users.jsonl");
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const json j = json::parse(line);
            UserRecord u;
            u.user_id = j.at("user_id").get<std::int64_t>();
            u.stat_features = j.at("stat_features").get<std::vector<double>>();
            u.topic_label = j.at("topic_label").get<int>();
            u.fans_label = j.at("fans_label").get<int>();
            u.post_ids = j.at("post_ids").get<std::vector<std::int64_t>>();
            ds.users.push_back(std::move(u));
        }
    } catch (const json::exception& e) {
        fail(ErrorCode::Validation, std::string("users.jsonl: ") + e.what());
    }
    try {
        auto in = open_in(dir / "posts.jsonl");
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const json j = json::parse(line);
            Post p;
            p.post_id = j.at("post_id").get<std::int64_t>();
            p.user_id = j.at("user_id").get<std::int64_t>();
            p.tokens = j.at("tokens").get<std::vector<std::int32_t>>();
            ds.posts.push_back(std::move(p));
        }
    } catch (const json::exception& e) {
        fail(ErrorCode::Validation, std::string("posts.jsonl: ") + e.what());
    }

    {
        auto bin_in = open_in(dir / "images.bin", true);
        std::vector<unsigned char> bytes(image_bytes);
        bin_in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        auto idx = open_in(dir / "images.idx");
        std::string line;
        while (std::getline(idx, line)) {
            if (line.empty()) continue;
            std::istringstream fields(line);
            std::int64_t pid = -1;
            std::uint64_t offset = 0;
            std::uint64_t count = 0;
            if (!(fields >> pid >> offset >> count)) fail(ErrorCode::Validation, "images.idx: malformed line '" + line + "'");
            if (pid < 0 || pid >= static_cast<std::int64_t>(ds.posts.size())) {
                fail(ErrorCode::Validation, "images.idx: dangling post id " + std::to_string(pid));
            }
            if (offset + 4 * count > bytes.size()) {
                fail(ErrorCode::Validation, "images.bin truncated at post " + std::to_string(pid));
            }
            auto& image = ds.posts[pid].image;
            image.resize(count);
            for (std::uint64_t i = 0; i < count; ++i) image[i] = read_f32_le(bytes.data() + offset + 4 * i);
        }
    }

    std::vector<NodePair> edges;
    {
        auto in = open_in(dir / "edges.tsv");
        std::string line;
        std::int64_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            std::istringstream fields(line);
            std::int64_t u = 0;
            std::int64_t v = 0;
            if (!(fields >> u >> v)) {
                fail(ErrorCode::Validation, "edges.tsv:" + std::to_string(lineno) + ": malformed line");
            }
            if (u == v) {
                fail(ErrorCode::Validation, "edges.tsv:" + std::to_string(lineno) + ": self-loop at node " + std::to_string(u));
            }
            edges.push_back(NodePair::canonical(u, v));
        }
    }
    out.graph = SocialGraph::from_edges(static_cast<std::int64_t>(ds.users.size()), std::move(edges));

    if (auto issues = validate_dataset(ds, out.graph); !issues.empty()) {
        fail(ErrorCode::Validation, "load_dataset: " + issues.front());
    }
    return out;
}

}  // namespace mmga::data
