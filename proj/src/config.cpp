#include "mmga/config.hpp"

#include <algorithm>
#include <charconv>
#include <functional>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "mmga/error.hpp"

namespace mmga {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

// Shortest representation that parses back to the same double.
std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

// Field binding: one entry per config key.
struct Field {
    std::string key;
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
};

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const char* first = value.data();
    const char* last = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec != std::errc{} || ptr != last) {
        fail(ErrorCode::InvalidConfig, "config key '" + key + "': cannot parse '" + value + "'");
    }
    return out;
}

template <typename T>
Field bind(const std::string& key, T& ref) {
    Field f;
    f.key = key;
    if constexpr (std::is_same_v<T, bool>) {
        f.set = [key, &ref](const std::string& v) {
            if (v == "true" || v == "1") {
                ref = true;
            } else if (v == "false" || v == "0") {
                ref = false;
            } else {
                fail(ErrorCode::InvalidConfig, "config key '" + key + "': expected true/false, got '" + v + "'");
            }
        };
        f.get = [&ref] { return std::string(ref ? "true" : "false"); };
    } else if constexpr (std::is_same_v<T, double>) {
        f.set = [key, &ref](const std::string& v) { ref = parse_number<double>(key, v); };
        f.get = [&ref] { return format_double(ref); };
    } else if constexpr (std::is_same_v<T, OptimizerKind>) {
        f.set = [key, &ref](const std::string& v) {
            if (v == "adam") {
                ref = OptimizerKind::Adam;
            } else if (v == "sgd") {
                ref = OptimizerKind::Sgd;
            } else {
                fail(ErrorCode::InvalidConfig, "config key '" + key + "': expected adam|sgd, got '" + v + "'");
            }
        };
        f.get = [&ref] { return std::string(ref == OptimizerKind::Adam ? "adam" : "sgd"); };
    } else {
        f.set = [key, &ref](const std::string& v) { ref = parse_number<T>(key, v); };
        f.get = [&ref] { return std::to_string(ref); };
    }
    return f;
}

std::vector<Field> fields(data::DatasetConfig& c) {
    return {bind("n_users", c.n_users),
            bind("k_topics", c.k_topics),
            bind("posts_per_user", c.posts_per_user),
            bind("p_in", c.p_in),
            bind("p_out", c.p_out),
            bind("vocab_size", c.vocab_size),
            bind("max_tokens", c.max_tokens),
            bind("image_channels", c.image.channels),
            bind("image_height", c.image.height),
            bind("image_width", c.image.width),
            bind("stat_dim", c.stat_dim),
            bind("topic_vocab_concentration", c.topic_vocab_concentration),
            bind("glyph_noise", c.glyph_noise),
            bind("popularity_sigma", c.popularity_sigma),
            bind("fans_quantile", c.fans_quantile),
            bind("seed", c.seed)};
}

std::vector<Field> fields(RunConfig& c) {
    auto& m = c.model;
    auto& t = c.train;
    return {bind("embed_dim", m.embed_dim),
            bind("n_layers", m.n_layers),
            bind("n_heads", m.n_heads),
            bind("patch_size", m.patch_size),
            bind("mlp_dim", m.mlp_dim),
            bind("dropout", m.dropout),
            bind("gnn_layers", m.gnn_layers),
            bind("gnn_norm", m.gnn_norm),
            bind("head_hidden", m.head_hidden),
            bind("epochs", t.epochs),
            bind("batch_size", t.batch_size),
            bind("token_mask_rate", t.token_mask_rate),
            bind("node_mask_rate", t.node_mask_rate),
            bind("edge_mask_rate", t.edge_mask_rate),
            bind("gc_pairs", t.gc_pairs),
            bind("learning_rate", t.learning_rate),
            bind("optimizer", t.optimizer),
            bind("seed", t.seed),
            bind("weight_lm", t.weights.lm),
            bind("weight_ita", t.weights.ita),
            bind("weight_nfm", t.weights.nfm),
            bind("weight_gsm", t.weights.gsm),
            bind("weight_gc_image", t.weights.gc_image),
            bind("weight_gc_text", t.weights.gc_text),
            bind("stop_gradient", t.stop_gradient),
            bind("ita_temperature", t.ita_temperature),
            bind("label_smoothing", t.label_smoothing),
            bind("warmup_epochs", t.warmup_epochs),
            bind("checkpoint_every", t.checkpoint_every),
            bind("link_holdout", t.link_holdout)};
}

template <typename Cfg>
Cfg apply(const KeyValueMap& kv, const std::string& source) {
    Cfg cfg{};
    auto fs = fields(cfg);
    for (const auto& [key, value] : kv) {
        auto it = std::find_if(fs.begin(), fs.end(), [&](const Field& f) { return f.key == key; });
        if (it == fs.end()) {
            fail(ErrorCode::InvalidConfig, source + ": unknown key '" + key + "'");
        }
        it->set(value);
    }
    return cfg;
}

template <typename Cfg>
std::vector<std::pair<std::string, std::string>> echo(const Cfg& cfg) {
    Cfg copy = cfg;
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& f : fields(copy)) out.emplace_back(f.key, f.get());
    return out;
}

}  // namespace

KeyValueMap parse_key_values(const std::string& text, const std::string& source) {
    KeyValueMap kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string body = trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            fail(ErrorCode::InvalidConfig, source + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        std::string key = trim(std::string_view(body).substr(0, eq));
        std::string value = trim(std::string_view(body).substr(eq + 1));
        if (key.empty() || value.empty()) {
            fail(ErrorCode::InvalidConfig, source + ":" + std::to_string(lineno) + ": empty key or value");
        }
        if (!kv.emplace(key, value).second) {
            fail(ErrorCode::InvalidConfig, source + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
        }
    }
    return kv;
}

KeyValueMap read_key_value_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::Io, "cannot read config file " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_key_values(buf.str(), path.string());
}

data::DatasetConfig dataset_config_from(const KeyValueMap& kv, const std::string& source) {
    auto cfg = apply<data::DatasetConfig>(kv, source);
    data::check_config(cfg);
    return cfg;
}

RunConfig run_config_from(const KeyValueMap& kv, const std::string& source) {
    auto cfg = apply<RunConfig>(kv, source);
    validate(cfg.model);
    validate(cfg.train);
    return cfg;
}

std::vector<std::pair<std::string, std::string>> to_key_values(const data::DatasetConfig& cfg) {
    return echo(cfg);
}

std::vector<std::pair<std::string, std::string>> to_key_values(const RunConfig& cfg) { return echo(cfg); }

std::string format_key_values(const std::vector<std::pair<std::string, std::string>>& kv) {
    std::string out;
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    return out;
}

void validate(const TrainConfig& c) {
    auto bad = [](const std::string& m) { fail(ErrorCode::InvalidConfig, m); };
    auto rate = [&](double r, const char* name) {
        if (!(r >= 0.0 && r <= 1.0)) bad(std::string(name) + " must lie in [0,1]");
    };
    if (c.epochs < 0) bad("epochs must be >= 0");
    if (c.batch_size < 1) bad("batch_size must be positive");
    rate(c.token_mask_rate, "token_mask_rate");
    rate(c.node_mask_rate, "node_mask_rate");
    rate(c.edge_mask_rate, "edge_mask_rate");
    if (c.edge_mask_rate >= 1.0) bad("edge_mask_rate must be < 1");
    if (c.gc_pairs < 1) bad("gc_pairs must be positive");
    if (!(c.learning_rate > 0.0)) bad("learning_rate must be positive");
    for (double w : {c.weights.lm, c.weights.ita, c.weights.nfm, c.weights.gsm, c.weights.gc_image,
                     c.weights.gc_text}) {
        if (!(w >= 0.0)) bad("loss weights must be >= 0");
    }
    if (!(c.ita_temperature > 0.0)) bad("ita_temperature must be positive");
    if (!(c.label_smoothing >= 0.0 && c.label_smoothing < 1.0)) bad("label_smoothing must lie in [0,1)");
    if (c.warmup_epochs < 0) bad("warmup_epochs must be >= 0");
    if (c.checkpoint_every < 0) bad("checkpoint_every must be >= 0");
    if (!(c.link_holdout > 0.0 && c.link_holdout < 1.0)) bad("link_holdout must lie in (0,1)");
}

void validate(const ModelConfig& c) {
    auto bad = [](const std::string& m) { fail(ErrorCode::InvalidConfig, m); };
    if (c.embed_dim < 1 || c.n_heads < 1 || c.embed_dim % c.n_heads != 0)
        bad("embed_dim must be a positive multiple of n_heads");
    if (c.n_layers < 0 || c.gnn_layers < 0) bad("layer counts must be >= 0");
    if (c.patch_size < 1) bad("patch_size must be positive");
    if (c.mlp_dim < 1 || c.head_hidden < 1) bad("mlp_dim and head_hidden must be positive");
    if (!(c.dropout >= 0.0 && c.dropout < 1.0)) bad("dropout must lie in [0,1)");
    if (c.image.height % c.patch_size != 0 || c.image.width % c.patch_size != 0)
        bad("image height/width must be divisible by patch_size");
}

void bind_to_dataset(ModelConfig& model, const data::DatasetMeta& meta) {
    model.vocab_size = meta.config.vocab_size;
    model.max_tokens = meta.config.max_tokens;
    model.image = meta.config.image;
    model.stat_dim = meta.config.stat_dim;
    validate(model);
}

}  // namespace mmga
