#pragma once

// Flat `key = value` configuration files. Keys are the struct field names;
// unknown keys and malformed values are errors.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mmga/dataset.hpp"

namespace mmga {

struct ModelConfig {
    int embed_dim = 64;
    int n_layers = 2;
    int n_heads = 4;
    int patch_size = 8;
    int mlp_dim = 128;
    double dropout = 0.0;
    int gnn_layers = 2;
    bool gnn_norm = true;  // nonlinearity + layer norm after each propagation
    int head_hidden = 64;

    // Copied from the dataset meta at model construction.
    int vocab_size = 64;
    int max_tokens = 32;
    data::ImageShape image{};
    int stat_dim = 8;

    bool operator==(const ModelConfig&) const = default;
};

struct LossWeights {
    double lm = 1.0;
    double ita = 1.0;
    double nfm = 1.0;
    double gsm = 1.0;
    double gc_image = 1.0;
    double gc_text = 1.0;

    bool operator==(const LossWeights&) const = default;
};

enum class OptimizerKind { Adam, Sgd };

struct TrainConfig {
    int epochs = 10;
    int batch_size = 160;  // posts per step for LM/ITA (whole users)
    double token_mask_rate = 0.15;
    double node_mask_rate = 0.15;
    double edge_mask_rate = 0.1;
    int gc_pairs = 256;
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::Adam;
    std::uint64_t seed = 7;
    LossWeights weights{};
    bool stop_gradient = false;
    double ita_temperature = 0.07;
    double label_smoothing = 0.1;
    int warmup_epochs = 0;  // LM+ITA-only epochs before joint training
    int checkpoint_every = 1;  // epochs; 0 disables periodic checkpoints
    double link_holdout = 0.1;

    bool operator==(const TrainConfig&) const = default;
};

/// Training run configuration file = model keys + training keys.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    bool operator==(const RunConfig&) const = default;
};

using KeyValueMap = std::map<std::string, std::string>;

/// Parses `key = value` lines ('#' starts a comment). Duplicate keys are errors.
KeyValueMap parse_key_values(const std::string& text, const std::string& source);
KeyValueMap read_key_value_file(const std::filesystem::path& path);

data::DatasetConfig dataset_config_from(const KeyValueMap& kv, const std::string& source);
RunConfig run_config_from(const KeyValueMap& kv, const std::string& source);

/// Ordered (key, value) echo; re-parsing yields an equal config.
std::vector<std::pair<std::string, std::string>> to_key_values(const data::DatasetConfig& cfg);
std::vector<std::pair<std::string, std::string>> to_key_values(const RunConfig& cfg);
std::string format_key_values(const std::vector<std::pair<std::string, std::string>>& kv);

void validate(const TrainConfig& cfg);
void validate(const ModelConfig& cfg);

/// Copies the data-dependent shape fields from a dataset meta.
void bind_to_dataset(ModelConfig& model, const data::DatasetMeta& meta);

}  // namespace mmga
