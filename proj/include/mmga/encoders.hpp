#pragma once

// Patch-based image transformer and token transformer, both pooled at a
// prepended classification position, plus the masked-token head and the
// per-user mean aggregation of post embeddings.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mmga/autograd.hpp"
#include "mmga/config.hpp"
#include "mmga/dataset.hpp"
#include "mmga/params.hpp"

namespace mmga::enc {

/// Padded token batch with the classification id at position 0 of each row.
struct TextBatch {
    std::vector<ag::Index> ids;      // batch * seq_len
    std::vector<ag::Index> lengths;  // valid positions per row, classification slot included
    ag::Index batch = 0;
    ag::Index seq_len = 0;
};

/// Validates ids (< vocab, non-empty, <= max_tokens) and pads to `pad_to`
/// tokens (0 = longest in batch). `pad_fill` overrides the pad id (tests).
TextBatch make_text_batch(const std::vector<std::span<const std::int32_t>>& sequences,
                          const ModelConfig& cfg, int pad_to = 0,
                          std::optional<ag::Index> pad_fill = std::nullopt);

/// Replaces the listed token positions of row `row` with the mask id.
void apply_token_mask(TextBatch& batch, ag::Index row, std::span<const ag::Index> positions,
                      const ModelConfig& cfg);

/// Dropout seed; nullopt runs in evaluation mode.
using DropoutSeed = std::optional<std::uint64_t>;

/// Final hidden states before the closing layer norm, (batch*seq_len) x d.
ag::Var text_hidden(const ParamStore& p, const ModelConfig& cfg, const TextBatch& batch,
                    DropoutSeed seed = std::nullopt);
/// Classification-position embeddings, batch x d.
ag::Var text_embeddings(const ParamStore& p, const ModelConfig& cfg, const TextBatch& batch,
                        DropoutSeed seed = std::nullopt);
/// Vocabulary logits at flat positions (row * seq_len + column), |positions| x vocab.
ag::Var lm_logits(const ParamStore& p, const ModelConfig& cfg, const TextBatch& batch,
                  std::span<const ag::Index> flat_positions, DropoutSeed seed = std::nullopt);

/// images: batch x (C*H*W). Returns batch x d.
ag::Var image_embeddings(const ParamStore& p, const ModelConfig& cfg, const ag::Var& images,
                         DropoutSeed seed = std::nullopt);

/// Patch-major gather indices; row b*N+n holds patch n of image b as (c, dy, dx).
std::vector<ag::Index> patch_indices(const ModelConfig& cfg, ag::Index batch);
ag::Index patch_count(const ModelConfig& cfg);

/// Constant batch x (C*H*W) matrix of the given posts' images.
ag::Var image_batch(const data::Dataset& ds, std::span<const std::int64_t> post_ids);
TextBatch text_batch(const data::Dataset& ds, std::span<const std::int64_t> post_ids,
                     const ModelConfig& cfg);

// Single-input forms.
ag::Matrix encode_image(const ParamStore& p, const ModelConfig& cfg, std::span<const float> image);
ag::Matrix encode_text(const ParamStore& p, const ModelConfig& cfg, std::span<const std::int32_t> tokens);
/// Logits for `mask_positions` (token indices) after replacing them by the mask id.
ag::Matrix lm_logits(const ParamStore& p, const ModelConfig& cfg, std::span<const std::int32_t> tokens,
                     std::span<const ag::Index> mask_positions);

/// Row u = mean of rows offsets[u]..offsets[u+1] of post_embeds; zeros when empty.
ag::Var aggregate_user_modality(const ag::Var& post_embeds, std::span<const ag::Index> offsets);

/// Gradient-free embeddings of the listed posts, evaluated in chunks.
struct PostEmbeddings {
    ag::Matrix image;
    ag::Matrix text;
};
PostEmbeddings embed_posts(const ParamStore& p, const ModelConfig& cfg, const data::Dataset& ds,
                           std::span<const std::int64_t> post_ids, std::size_t chunk = 128);

}  // namespace mmga::enc
