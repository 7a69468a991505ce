#include "mmga/params.hpp"

#include <algorithm>
#include <cmath>

#include "mmga/error.hpp"
#include "mmga/rng.hpp"

namespace mmga {

ag::Var& ParamStore::add(const std::string& name, ag::Matrix init) {
    if (index_.contains(name)) {
        fail(ErrorCode::InvalidArgument, "duplicate parameter " + name);
    }
    index_.emplace(name, entries_.size());
    entries_.push_back({name, ag::Var::leaf(std::move(init))});
    return entries_.back().var;
}

const ag::Var& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorCode::InvalidArgument, "unknown parameter " + name);
    return entries_[it->second].var;
}

ag::Var& ParamStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorCode::InvalidArgument, "unknown parameter " + name);
    return entries_[it->second].var;
}

namespace {
std::string head_of(const std::string& name) { return name.substr(0, name.find('.')); }
}  // namespace

std::vector<std::string> ParamStore::group(const std::string& g) const {
    std::vector<std::string> out;
    for (const auto& e : entries_) {
        if (head_of(e.name) == g) out.push_back(e.name);
    }
    return out;
}

std::vector<std::string> ParamStore::groups() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) {
        const auto h = head_of(e.name);
        if (std::find(out.begin(), out.end(), h) == out.end()) out.push_back(h);
    }
    return out;
}

void ParamStore::zero_grad() {
    for (auto& e : entries_) e.var.mutable_grad().resize(0, 0);
}

void ParamStore::round_to_float32() {
    for (auto& e : entries_) {
        auto& m = e.var.mutable_value();
        m = m.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
    }
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.var.value().size());
    return n;
}

ParamStore ParamStore::clone() const {
    ParamStore out;
    for (const auto& e : entries_) out.add(e.name, e.var.value());
    return out;
}

namespace {

std::uint64_t name_hash(const std::string& s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

class Initializer {
public:
    Initializer(ParamStore& store, std::uint64_t seed) : store_(store), seed_(seed) {}

    void normal(const std::string& name, ag::Index rows, ag::Index cols, double sd) {
        Rng rng(stream_seed(seed_ ^ name_hash(name), streams::kInit));
        ag::Matrix m(rows, cols);
        for (ag::Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
        store_.add(name, std::move(m));
    }
    void linear(const std::string& name, ag::Index fan_in, ag::Index fan_out) {
        normal(name, fan_in, fan_out, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    }
    void zeros(const std::string& name, ag::Index rows, ag::Index cols) {
        store_.add(name, ag::Matrix::Zero(rows, cols));
    }
    void ones(const std::string& name, ag::Index rows, ag::Index cols) {
        store_.add(name, ag::Matrix::Ones(rows, cols));
    }
    void constant(const std::string& name, ag::Index rows, ag::Index cols, double v) {
        store_.add(name, ag::Matrix::Constant(rows, cols, v));
    }

private:
    ParamStore& store_;
    std::uint64_t seed_;
};

void transformer_blocks(Initializer& init, const std::string& prefix, const ModelConfig& cfg) {
    const int d = cfg.embed_dim;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = prefix + ".block" + std::to_string(l) + ".";
        init.ones(p + "ln1_g", 1, d);
        init.zeros(p + "ln1_b", 1, d);
        for (const char* m : {"wq", "wk", "wv", "wo"}) {
            init.linear(p + m, d, d);
            init.zeros(p + "b" + (m + 1), 1, d);
        }
        init.ones(p + "ln2_g", 1, d);
        init.zeros(p + "ln2_b", 1, d);
        init.linear(p + "w1", d, cfg.mlp_dim);
        init.zeros(p + "b1", 1, cfg.mlp_dim);
        init.linear(p + "w2", cfg.mlp_dim, d);
        init.zeros(p + "b2", 1, d);
    }
    init.ones(prefix + ".lnf_g", 1, d);
    init.zeros(prefix + ".lnf_b", 1, d);
}

}  // namespace

ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    ParamStore store;
    Initializer init(store, seed);
    const int d = cfg.embed_dim;
    const int patch_in = cfg.image.channels * cfg.patch_size * cfg.patch_size;
    const int n_patches = (cfg.image.height / cfg.patch_size) * (cfg.image.width / cfg.patch_size);

    init.linear("image.patch_w", patch_in, d);
    init.zeros("image.patch_b", 1, d);
    init.normal("image.cls", 1, d, 0.2);
    init.normal("image.pos", n_patches + 1, d, 0.02);
    transformer_blocks(init, "image", cfg);

    init.normal("text.tok_emb", cfg.vocab_size + 3, d, 1.0);
    init.normal("text.pos", cfg.max_tokens + 1, d, 1.0);
    transformer_blocks(init, "text", cfg);

    init.linear("lm.w", d, cfg.vocab_size);
    init.zeros("lm.b", 1, cfg.vocab_size);

    init.linear("graph.in_w", cfg.stat_dim, d);
    init.zeros("graph.in_b", 1, d);
    init.normal("graph.mask_x", 1, cfg.stat_dim, 1.0);
    for (int k = 0; k < cfg.gnn_layers; ++k) {
        const std::string p = "graph.layer" + std::to_string(k) + ".";
        init.normal(p + "gate_w", gate_input_dim(cfg), 1, 0.01);
        init.zeros(p + "gate_b", 1, 1);
        if (cfg.gnn_norm) {
            // Unit-norm rows: inner products start near zero.
            init.constant(p + "ln_g", 1, d, 1.0 / std::sqrt(static_cast<double>(d)));
            init.zeros(p + "ln_b", 1, d);
        }
    }

    init.linear("nfm.w", d, cfg.stat_dim);
    init.zeros("nfm.b", 1, cfg.stat_dim);

    for (const char* head : {"gc_image", "gc_text"}) {
        const std::string p = std::string(head) + ".";
        init.linear(p + "w1", 2 * d, cfg.head_hidden);
        init.zeros(p + "b1", 1, cfg.head_hidden);
        init.linear(p + "w2", cfg.head_hidden, 2);
        // Positive start keeps the output ReLU off its flat region.
        store.add(p + "b2", ag::Matrix::Ones(1, 2));
    }
    store.round_to_float32();
    return store;
}

}  // namespace mmga
