#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"
#include "mmga/encoders.hpp"
#include "mmga/error.hpp"
#include "mmga/harness.hpp"
#include "mmga/rng.hpp"

namespace mmga::train {

namespace {

namespace tags {
constexpr std::uint64_t kBatches = 0x42415443ULL;
constexpr std::uint64_t kTokenMask = 0x544D534BULL;
constexpr std::uint64_t kNodeMask = 0x4E4D534BULL;
constexpr std::uint64_t kEdgeMask = 0x454D534BULL;
constexpr std::uint64_t kGsmNeg = 0x47534D4EULL;
constexpr std::uint64_t kGcPairs = 0x47435052ULL;
constexpr std::uint64_t kDropout = 0x44524F50ULL;
}  // namespace tags

std::uint64_t tagged(std::uint64_t seed, std::uint64_t tag) { return stream_seed(seed, tag); }

struct GcPairs {
    std::vector<data::NodePair> pos;
    std::vector<data::NodePair> neg;
};

GcPairs sample_gc_pairs(const data::SocialGraph& g, std::span<const std::int64_t> batch, std::size_t n_pairs,
                        std::uint64_t seed) {
    GcPairs out;
    std::set<data::NodePair> seen;
    for (auto u : batch) {
        for (auto i = g.offsets[u]; i < g.offsets[u + 1]; ++i) seen.insert(data::NodePair::canonical(u, g.neighbors[i]));
    }
    std::vector<data::NodePair> candidates(seen.begin(), seen.end());
    Rng rng(seed);
    const std::size_t n_pos = std::min(n_pairs, candidates.size());
    for (std::size_t i = 0; i < n_pos; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(candidates.size() - i));
        std::swap(candidates[i], candidates[j]);
        out.pos.push_back(candidates[i]);
    }
    const auto n = static_cast<std::uint64_t>(g.n_nodes);
    std::size_t attempts = 0;
    while (out.neg.size() < n_pos && attempts < 100 * (n_pos + 1)) {
        ++attempts;
        const auto u = batch[static_cast<std::size_t>(rng.below(batch.size()))];
        const auto v = static_cast<std::int64_t>(rng.below(n));
        if (u == v || g.has_edge(u, v)) continue;
        out.neg.push_back(data::NodePair::canonical(u, v));
    }
    return out;
}

}  // namespace

ModelState init_state(const ModelConfig& model, const TrainConfig& train) {
    validate(train);
    ModelState s{model, init_params(model, train.seed), Optimizer(train.optimizer, train.learning_rate), 0};
    return s;
}

TrainData prepare_data(const data::Dataset& ds, const data::SocialGraph& graph) {
    if (graph.n_nodes != static_cast<std::int64_t>(ds.users.size())) {
        fail(ErrorCode::ShapeMismatch, "graph has " + std::to_string(graph.n_nodes) + " nodes for " +
                                           std::to_string(ds.users.size()) + " users");
    }
    TrainData d;
    d.dataset = &ds;
    d.graph = &graph;
    d.x = gnn::node_features(ds);
    d.posts = data::user_post_index(ds);
    d.post_order = d.posts.order;
    d.post_offsets.assign(d.posts.offsets.begin(), d.posts.offsets.end());
    return d;
}

std::int64_t users_per_step(const TrainConfig& cfg, const data::Dataset& ds) {
    const std::int64_t per_user = std::max(1, ds.meta.config.posts_per_user);
    const std::int64_t n = std::max<std::int64_t>(1, cfg.batch_size / per_user);
    return std::min<std::int64_t>(n, std::max<std::int64_t>(1, static_cast<std::int64_t>(ds.users.size())));
}

std::int64_t steps_per_epoch(const TrainConfig& cfg, const data::Dataset& ds) {
    const auto n = static_cast<std::int64_t>(ds.users.size());
    const auto b = users_per_step(cfg, ds);
    return (n + b - 1) / b;
}

std::vector<std::vector<std::int64_t>> epoch_batches(const TrainConfig& cfg, const data::Dataset& ds, int epoch) {
    std::vector<std::int64_t> users(ds.users.size());
    std::iota(users.begin(), users.end(), 0);
    Rng rng(subseed(tagged(cfg.seed, tags::kBatches), static_cast<std::uint64_t>(epoch)));
    rng.shuffle(users);
    const auto b = static_cast<std::size_t>(users_per_step(cfg, ds));
    std::vector<std::vector<std::int64_t>> out;
    for (std::size_t i = 0; i < users.size(); i += b) {
        std::vector<std::int64_t> batch(users.begin() + static_cast<std::ptrdiff_t>(i),
                                        users.begin() + static_cast<std::ptrdiff_t>(std::min(users.size(), i + b)));
        std::sort(batch.begin(), batch.end());
        out.push_back(std::move(batch));
    }
    return out;
}

std::uint64_t step_seed(const TrainConfig& cfg, std::int64_t step) {
    return subseed(stream_seed(cfg.seed, streams::kSteps), static_cast<std::uint64_t>(step));
}

obj::LossBundle compute_losses(const ModelState& state, const TrainData& data, const TrainConfig& cfg,
                               std::span<const std::int64_t> batch_users, std::uint64_t seed,
                               const LossWeights& weights) {
    const ParamStore& p = state.params;
    const ModelConfig& mc = state.model;
    const data::Dataset& ds = *data.dataset;
    const auto n_users = static_cast<ag::Index>(ds.users.size());
    if (batch_users.empty()) fail(ErrorCode::InvalidArgument, "pretrain_step: empty user batch");
    for (std::size_t i = 0; i < batch_users.size(); ++i) {
        if (batch_users[i] < 0 || batch_users[i] >= n_users || (i > 0 && batch_users[i] <= batch_users[i - 1])) {
            fail(ErrorCode::InvalidArgument, "pretrain_step: batch users must be sorted, distinct and in range");
        }
    }
    const std::optional<std::uint64_t> dropout_seed =
        mc.dropout > 0.0 ? std::optional<std::uint64_t>(tagged(seed, tags::kDropout)) : std::nullopt;

    // (a) post batch: ITA on clean pairs, LM on a masked copy of the text.
    std::vector<std::int64_t> batch_posts;
    std::vector<ag::Index> batch_offsets{0};
    for (auto u : batch_users) {
        for (auto i = data.post_offsets[u]; i < data.post_offsets[u + 1]; ++i) batch_posts.push_back(data.post_order[i]);
        batch_offsets.push_back(static_cast<ag::Index>(batch_posts.size()));
    }
    std::array<obj::LossTerm, obj::kComponents> terms;
    ag::Var post_image;
    ag::Var post_text;
    if (!batch_posts.empty()) {
        post_image = enc::image_embeddings(p, mc, enc::image_batch(ds, batch_posts), dropout_seed);
        post_text = enc::text_embeddings(p, mc, enc::text_batch(ds, batch_posts, mc), dropout_seed);
        if (batch_posts.size() >= 2) terms[1] = obj::ita_loss(post_image, post_text, cfg.ita_temperature);

        enc::TextBatch masked = enc::text_batch(ds, batch_posts, mc);
        std::vector<ag::Index> flat;
        std::vector<ag::Index> targets;
        const auto mask_seed = tagged(seed, tags::kTokenMask);
        for (std::size_t r = 0; r < batch_posts.size(); ++r) {
            const auto& tokens = ds.posts[static_cast<std::size_t>(batch_posts[r])].tokens;
            const auto m = mask_tokens(tokens, special_tokens(mc).mask, cfg.token_mask_rate,
                                       subseed(mask_seed, static_cast<std::uint64_t>(batch_posts[r])));
            enc::apply_token_mask(masked, static_cast<ag::Index>(r), m.positions, mc);
            for (auto pos : m.positions) {
                flat.push_back(static_cast<ag::Index>(r) * masked.seq_len + 1 + pos);
                targets.push_back(tokens[static_cast<std::size_t>(pos)]);
            }
        }
        terms[0] = obj::lm_loss(enc::lm_logits(p, mc, masked, flat, dropout_seed), targets, cfg.label_smoothing);
    }

    // (b) user modality tables: gradient rows for the batch, constants elsewhere.
    ag::Var r_image;
    ag::Var r_text;
    {
        ag::Matrix base_i = ag::Matrix::Zero(n_users, mc.embed_dim);
        ag::Matrix base_t = ag::Matrix::Zero(n_users, mc.embed_dim);
        if (static_cast<ag::Index>(batch_users.size()) < n_users) {
            const auto all = enc::embed_posts(p, mc, ds, data.post_order);
            ag::NoGradGuard guard;
            base_i = ag::segment_mean(ag::Var::constant(all.image), data.post_offsets).value();
            base_t = ag::segment_mean(ag::Var::constant(all.text), data.post_offsets).value();
        }
        std::vector<ag::Index> rows(batch_users.begin(), batch_users.end());
        if (post_image.defined()) {
            r_image = ag::overwrite_rows(ag::Var::constant(std::move(base_i)), rows,
                                         enc::aggregate_user_modality(post_image, batch_offsets));
            r_text = ag::overwrite_rows(ag::Var::constant(std::move(base_t)), rows,
                                        enc::aggregate_user_modality(post_text, batch_offsets));
        } else {
            r_image = ag::Var::constant(std::move(base_i));
            r_text = ag::Var::constant(std::move(base_t));
        }
    }

    // (c) masked node features and edges through the graph encoder.
    const ag::Var x = ag::Var::constant(data.x);
    const NodeMask node_mask = mask_node_features(x, p.get("graph.mask_x"), cfg.node_mask_rate,
                                                  tagged(seed, tags::kNodeMask));
    const EdgeMask edge_mask = mask_edges(*data.graph, cfg.edge_mask_rate, tagged(seed, tags::kEdgeMask));
    const gnn::Csr csr = gnn::Csr::from_graph(edge_mask.graph);
    const ag::Var r_g = gnn::encode_graph(p, mc, node_mask.x, csr, r_image, r_text, cfg.stop_gradient).r_g;
    {
        const ag::Var pred = obj::nfm_predict(p, ag::gather_rows(r_g, node_mask.nodes));
        terms[2] = obj::nfm_loss(pred, ag::gather_rows(x, node_mask.nodes));
    }
    if (!edge_mask.masked.empty()) {
        const auto neg = data::sample_negative_pairs(*data.graph, edge_mask.masked.size(), tagged(seed, tags::kGsmNeg));
        terms[3] = obj::gsm_loss(r_g, edge_mask.masked, neg);
    }

    // (d) graph contrastive pairs anchored at the batch users.
    const GcPairs gc = sample_gc_pairs(*data.graph, batch_users, static_cast<std::size_t>(cfg.gc_pairs),
                                       tagged(seed, tags::kGcPairs));
    if (!gc.pos.empty()) {
        terms[4] = obj::graph_contrastive_loss(p, "gc_image", r_image, gc.pos, gc.neg);
        terms[5] = obj::graph_contrastive_loss(p, "gc_text", r_text, gc.pos, gc.neg);
    }

    obj::LossBundle bundle = obj::total_loss(std::move(terms), weights);
    for (std::size_t i = 0; i < obj::kComponents; ++i) {
        if (!std::isfinite(bundle.terms[i].item())) {
            fail(ErrorCode::NonFinite, "non-finite " + std::string(obj::kComponentNames[i]) + " loss at step " +
                                           std::to_string(state.step));
        }
    }
    return bundle;
}

obj::LossBundle pretrain_step(ModelState& state, const TrainData& data, const TrainConfig& cfg,
                              std::span<const std::int64_t> batch_users, std::uint64_t seed,
                              const LossWeights& weights) {
    state.params.zero_grad();
    obj::LossBundle bundle = compute_losses(state, data, cfg, batch_users, seed, weights);
    if (bundle.total.requires_grad()) ag::backward(bundle.total);
    state.optimizer.step(state.params);
    state.params.round_to_float32();
    state.params.zero_grad();
    ++state.step;
    return bundle;
}

std::string history_line(const HistoryRecord& r) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["epoch"] = r.epoch;
    for (std::size_t i = 0; i < obj::kComponents; ++i) j[std::string(obj::kComponentNames[i])] = r.components[i];
    j["total"] = r.total;
    return j.dump();
}

std::string history_text(std::span<const HistoryRecord> history) {
    std::string out;
    for (const auto& r : history) out += history_line(r) + "\n";
    return out;
}

std::vector<HistoryRecord> read_history(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::Io, "missing loss history: " + path.string());
    std::vector<HistoryRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            HistoryRecord r;
            r.step = j.at("step").get<std::int64_t>();
            r.epoch = j.at("epoch").get<int>();
            for (std::size_t i = 0; i < obj::kComponents; ++i) {
                r.components[i] = j.at(std::string(obj::kComponentNames[i])).get<double>();
            }
            r.total = j.at("total").get<double>();
            out.push_back(r);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::Validation, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
}

}  // namespace

PretrainResult pretrain(const data::Dataset& ds, const data::SocialGraph& graph, const RunConfig& cfg,
                        const PretrainOptions& options) {
    RunConfig run = cfg;
    bind_to_dataset(run.model, ds.meta);
    validate(run.model);
    validate(run.train);
    PretrainResult result{init_state(run.model, run.train), {}};
    const TrainData data = prepare_data(ds, graph);
    if (options.run_dir) std::filesystem::create_directories(*options.run_dir);

    auto persist = [&](bool checkpoint) {
        if (!options.run_dir) return;
        write_text(*options.run_dir / "history.jsonl", history_text(result.history));
        if (checkpoint) save_checkpoint(result.state, run, result.history, *options.run_dir / "checkpoint");
    };

    for (int epoch = 0; epoch < run.train.epochs; ++epoch) {
        LossWeights w = run.train.weights;
        if (epoch < run.train.warmup_epochs) w.nfm = w.gsm = w.gc_image = w.gc_text = 0.0;
        for (const auto& batch : epoch_batches(run.train, ds, epoch)) {
            const std::int64_t step = result.state.step;
            const obj::LossBundle b = pretrain_step(result.state, data, run.train, batch, step_seed(run.train, step), w);
            HistoryRecord rec{step, epoch, b.values(), b.total_value()};
            result.history.push_back(rec);
            if (options.on_step) options.on_step(rec);
        }
        const bool due = run.train.checkpoint_every > 0 && (epoch + 1) % run.train.checkpoint_every == 0;
        persist(due && epoch + 1 < run.train.epochs);
    }
    persist(true);
    return result;
}

}  // namespace mmga::train
