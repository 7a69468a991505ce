#include "mmga/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mmga/error.hpp"
#include "mmga/rng.hpp"

namespace mmga::enc {

namespace {

ag::Var linear(const ParamStore& p, const std::string& w, const std::string& b, const ag::Var& x) {
    return ag::add_row(ag::matmul(x, p.get(w)), p.get(b));
}

ag::Var maybe_dropout(const ag::Var& x, double rate, DropoutSeed seed, std::uint64_t salt) {
    if (!seed || rate <= 0.0) return x;
    return ag::dropout(x, rate, mix64(*seed ^ salt));
}

// Pre-norm blocks; returns the residual stream before the final layer norm.
ag::Var transformer_stack(const ParamStore& p, const std::string& prefix, const ModelConfig& cfg,
                          ag::Var x, ag::Index batch, ag::Index seq_len,
                          std::span<const ag::Index> lengths, DropoutSeed seed) {
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string b = prefix + ".block" + std::to_string(l) + ".";
        ag::Var h = ag::layer_norm_rows(x, p.get(b + "ln1_g"), p.get(b + "ln1_b"));
        ag::Var q = linear(p, b + "wq", b + "bq", h);
        ag::Var k = linear(p, b + "wk", b + "bk", h);
        ag::Var v = linear(p, b + "wv", b + "bv", h);
        ag::Var a = ag::attention(q, k, v, batch, seq_len, cfg.n_heads, lengths);
        ag::Var o = maybe_dropout(linear(p, b + "wo", b + "bo", a), cfg.dropout, seed, 2 * l);
        x = ag::add(x, o);
        h = ag::layer_norm_rows(x, p.get(b + "ln2_g"), p.get(b + "ln2_b"));
        ag::Var m = ag::gelu(linear(p, b + "w1", b + "b1", h));
        m = maybe_dropout(linear(p, b + "w2", b + "b2", m), cfg.dropout, seed, 2 * l + 1);
        x = ag::add(x, m);
    }
    return x;
}

std::vector<ag::Index> iota_index(ag::Index n, ag::Index start = 0, ag::Index stride = 1) {
    std::vector<ag::Index> out(static_cast<std::size_t>(n));
    for (ag::Index i = 0; i < n; ++i) out[i] = start + i * stride;
    return out;
}

}  // namespace

TextBatch make_text_batch(const std::vector<std::span<const std::int32_t>>& sequences,
                          const ModelConfig& cfg, int pad_to, std::optional<ag::Index> pad_fill) {
    const auto special = special_tokens(cfg);
    std::size_t longest = 0;
    for (const auto& s : sequences) {
        if (s.empty()) fail(ErrorCode::InvalidArgument, "encode_text: empty token sequence");
        if (static_cast<int>(s.size()) > cfg.max_tokens) {
            fail(ErrorCode::ShapeMismatch, "encode_text: sequence of " + std::to_string(s.size()) +
                                               " tokens exceeds max_tokens=" + std::to_string(cfg.max_tokens));
        }
        for (auto t : s) {
            if (t < 0 || t >= cfg.vocab_size) {
                fail(ErrorCode::InvalidArgument, "encode_text: token id " + std::to_string(t) +
                                                     " out of vocabulary (size " + std::to_string(cfg.vocab_size) + ")");
            }
        }
        longest = std::max(longest, s.size());
    }
    if (pad_to > 0) {
        if (static_cast<std::size_t>(pad_to) < longest || pad_to > cfg.max_tokens) {
            fail(ErrorCode::ShapeMismatch, "encode_text: invalid pad length " + std::to_string(pad_to));
        }
        longest = static_cast<std::size_t>(pad_to);
    }
    TextBatch batch;
    batch.batch = static_cast<ag::Index>(sequences.size());
    batch.seq_len = static_cast<ag::Index>(longest) + 1;
    batch.ids.assign(static_cast<std::size_t>(batch.batch * batch.seq_len), pad_fill.value_or(special.pad));
    batch.lengths.resize(sequences.size());
    for (std::size_t b = 0; b < sequences.size(); ++b) {
        const auto base = static_cast<std::size_t>(b * batch.seq_len);
        batch.ids[base] = special.cls;
        for (std::size_t i = 0; i < sequences[b].size(); ++i) batch.ids[base + 1 + i] = sequences[b][i];
        batch.lengths[b] = static_cast<ag::Index>(sequences[b].size()) + 1;
    }
    return batch;
}

void apply_token_mask(TextBatch& batch, ag::Index row, std::span<const ag::Index> positions,
                      const ModelConfig& cfg) {
    const auto special = special_tokens(cfg);
    for (auto pos : positions) {
        if (pos < 0 || pos + 1 >= batch.lengths[row]) {
            fail(ErrorCode::InvalidArgument, "mask position " + std::to_string(pos) + " out of range");
        }
        batch.ids[static_cast<std::size_t>(row * batch.seq_len + 1 + pos)] = special.mask;
    }
}

ag::Var text_hidden(const ParamStore& p, const ModelConfig& cfg, const TextBatch& batch, DropoutSeed seed) {
    if (batch.seq_len > cfg.max_tokens + 1) {
        fail(ErrorCode::ShapeMismatch, "text batch longer than max_tokens");
    }
    for (auto id : batch.ids) {
        if (id < 0 || id >= cfg.vocab_size + 3) {
            fail(ErrorCode::InvalidArgument, "text batch holds invalid id " + std::to_string(id));
        }
    }
    ag::Var x = ag::gather_rows(p.get("text.tok_emb"), batch.ids);
    const auto pos_rows = iota_index(batch.seq_len);
    x = ag::add_tiled_rows(x, ag::gather_rows(p.get("text.pos"), pos_rows));
    return transformer_stack(p, "text", cfg, x, batch.batch, batch.seq_len, batch.lengths, seed);
}

ag::Var text_embeddings(const ParamStore& p, const ModelConfig& cfg, const TextBatch& batch, DropoutSeed seed) {
    ag::Var h = text_hidden(p, cfg, batch, seed);
    const auto cls_rows = iota_index(batch.batch, 0, batch.seq_len);
    return ag::layer_norm_rows(ag::gather_rows(h, cls_rows), p.get("text.lnf_g"), p.get("text.lnf_b"));
}

ag::Var lm_logits(const ParamStore& p, const ModelConfig& cfg, const TextBatch& batch,
                  std::span<const ag::Index> flat_positions, DropoutSeed seed) {
    if (flat_positions.empty()) {
        return ag::Var::constant(ag::Matrix(0, cfg.vocab_size));
    }
    for (auto fp : flat_positions) {
        if (fp < 0 || fp >= batch.batch * batch.seq_len) {
            fail(ErrorCode::InvalidArgument, "lm_logits: position " + std::to_string(fp) + " out of range");
        }
        const ag::Index row = fp / batch.seq_len;
        const ag::Index col = fp % batch.seq_len;
        if (col == 0 || col >= batch.lengths[row]) {
            fail(ErrorCode::InvalidArgument, "lm_logits: position " + std::to_string(fp) + " is not a token slot");
        }
    }
    ag::Var h = text_hidden(p, cfg, batch, seed);
    h = ag::layer_norm_rows(ag::gather_rows(h, flat_positions), p.get("text.lnf_g"), p.get("text.lnf_b"));
    return linear(p, "lm.w", "lm.b", h);
}

ag::Index patch_count(const ModelConfig& cfg) {
    return static_cast<ag::Index>(cfg.image.height / cfg.patch_size) * (cfg.image.width / cfg.patch_size);
}

std::vector<ag::Index> patch_indices(const ModelConfig& cfg, ag::Index batch) {
    const int ps = cfg.patch_size;
    const int c = cfg.image.channels;
    const int h = cfg.image.height;
    const int w = cfg.image.width;
    const int gx = w / ps;
    const ag::Index n = patch_count(cfg);
    const ag::Index image_size = static_cast<ag::Index>(c) * h * w;
    std::vector<ag::Index> idx;
    idx.reserve(static_cast<std::size_t>(batch * n * c * ps * ps));
    for (ag::Index b = 0; b < batch; ++b) {
        for (ag::Index pn = 0; pn < n; ++pn) {
            const ag::Index py = pn / gx;
            const ag::Index px = pn % gx;
            for (int ch = 0; ch < c; ++ch) {
                for (int dy = 0; dy < ps; ++dy) {
                    for (int dx = 0; dx < ps; ++dx) {
                        idx.push_back(b * image_size + static_cast<ag::Index>(ch) * h * w +
                                      (py * ps + dy) * w + (px * ps + dx));
                    }
                }
            }
        }
    }
    return idx;
}

ag::Var image_embeddings(const ParamStore& p, const ModelConfig& cfg, const ag::Var& images, DropoutSeed seed) {
    const auto image_size = static_cast<ag::Index>(cfg.image.size());
    if (images.cols() != image_size) {
        fail(ErrorCode::ShapeMismatch, "encode_image: expected " + std::to_string(image_size) +
                                           " values per image, got " + std::to_string(images.cols()));
    }
    const ag::Index batch = images.rows();
    const ag::Index n = patch_count(cfg);
    const ag::Index patch_dim = static_cast<ag::Index>(cfg.image.channels) * cfg.patch_size * cfg.patch_size;
    const auto idx = patch_indices(cfg, batch);
    // Pixels in [0,1] -> [-1,1].
    ag::Var patches = ag::add_scalar(ag::scale(ag::gather_elements(images, idx, batch * n, patch_dim), 2.0), -1.0);
    ag::Var tokens = linear(p, "image.patch_w", "image.patch_b", patches);

    // Sequence layout per image: [cls, patch_0, ..., patch_{n-1}].
    std::vector<ag::Index> seq_rows;
    seq_rows.reserve(static_cast<std::size_t>(batch * (n + 1)));
    for (ag::Index b = 0; b < batch; ++b) {
        seq_rows.push_back(0);
        for (ag::Index i = 0; i < n; ++i) seq_rows.push_back(1 + b * n + i);
    }
    ag::Var x = ag::gather_rows(ag::concat_rows({p.get("image.cls"), tokens}), seq_rows);
    x = ag::add_tiled_rows(x, p.get("image.pos"));
    const std::vector<ag::Index> lengths(static_cast<std::size_t>(batch), n + 1);
    ag::Var h = transformer_stack(p, "image", cfg, x, batch, n + 1, lengths, seed);
    const auto cls_rows = iota_index(batch, 0, n + 1);
    return ag::layer_norm_rows(ag::gather_rows(h, cls_rows), p.get("image.lnf_g"), p.get("image.lnf_b"));
}

ag::Var image_batch(const data::Dataset& ds, std::span<const std::int64_t> post_ids) {
    const auto size = static_cast<ag::Index>(ds.meta.config.image.size());
    ag::Matrix m(static_cast<ag::Index>(post_ids.size()), size);
    for (std::size_t i = 0; i < post_ids.size(); ++i) {
        const auto& img = ds.posts.at(static_cast<std::size_t>(post_ids[i])).image;
        if (static_cast<ag::Index>(img.size()) != size) {
            fail(ErrorCode::ShapeMismatch, "post " + std::to_string(post_ids[i]) + ": image size mismatch");
        }
        for (ag::Index j = 0; j < size; ++j) m(static_cast<ag::Index>(i), j) = img[j];
    }
    return ag::Var::constant(std::move(m));
}

TextBatch text_batch(const data::Dataset& ds, std::span<const std::int64_t> post_ids, const ModelConfig& cfg) {
    std::vector<std::span<const std::int32_t>> seqs;
    seqs.reserve(post_ids.size());
    for (auto pid : post_ids) seqs.emplace_back(ds.posts.at(static_cast<std::size_t>(pid)).tokens);
    return make_text_batch(seqs, cfg);
}

ag::Matrix encode_image(const ParamStore& p, const ModelConfig& cfg, std::span<const float> image) {
    if (image.size() != cfg.image.size()) {
        fail(ErrorCode::ShapeMismatch, "encode_image: expected " + std::to_string(cfg.image.size()) +
                                           " values, got " + std::to_string(image.size()));
    }
    ag::Matrix m(1, static_cast<ag::Index>(image.size()));
    for (std::size_t i = 0; i < image.size(); ++i) m(0, static_cast<ag::Index>(i)) = image[i];
    return image_embeddings(p, cfg, ag::Var::constant(std::move(m))).value();
}

ag::Matrix encode_text(const ParamStore& p, const ModelConfig& cfg, std::span<const std::int32_t> tokens) {
    const TextBatch batch = make_text_batch({tokens}, cfg);
    return text_embeddings(p, cfg, batch).value();
}

ag::Matrix lm_logits(const ParamStore& p, const ModelConfig& cfg, std::span<const std::int32_t> tokens,
                     std::span<const ag::Index> mask_positions) {
    TextBatch batch = make_text_batch({tokens}, cfg);
    apply_token_mask(batch, 0, mask_positions, cfg);
    std::vector<ag::Index> flat(mask_positions.begin(), mask_positions.end());
    for (auto& f : flat) f += 1;
    return lm_logits(p, cfg, batch, flat).value();
}

ag::Var aggregate_user_modality(const ag::Var& post_embeds, std::span<const ag::Index> offsets) {
    return ag::segment_mean(post_embeds, offsets);
}

PostEmbeddings embed_posts(const ParamStore& p, const ModelConfig& cfg, const data::Dataset& ds,
                           std::span<const std::int64_t> post_ids, std::size_t chunk) {
    const auto n = static_cast<ag::Index>(post_ids.size());
    PostEmbeddings out{ag::Matrix(n, cfg.embed_dim), ag::Matrix(n, cfg.embed_dim)};
    const auto n_chunks = static_cast<std::int64_t>((post_ids.size() + chunk - 1) / chunk);
    // Chunks are independent; results do not depend on the thread count.
#pragma omp parallel for schedule(dynamic, 1)
    for (std::int64_t c = 0; c < n_chunks; ++c) {
        ag::NoGradGuard no_grad;
        const std::size_t start = static_cast<std::size_t>(c) * chunk;
        const std::size_t count = std::min(chunk, post_ids.size() - start);
        const auto ids = post_ids.subspan(start, count);
        out.image.middleRows(static_cast<ag::Index>(start), static_cast<ag::Index>(count)) =
            image_embeddings(p, cfg, image_batch(ds, ids)).value();
        out.text.middleRows(static_cast<ag::Index>(start), static_cast<ag::Index>(count)) =
            text_embeddings(p, cfg, text_batch(ds, ids, cfg)).value();
    }
    return out;
}

}  // namespace mmga::enc
