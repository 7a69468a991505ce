#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "mmga/autograd.hpp"
#include "mmga/config.hpp"

namespace mmga {

/// Named learnable arrays in a fixed insertion order. Each entry is a
/// persistent autograd leaf; gradients accumulate into it across backward calls.
class ParamStore {
public:
    struct Entry {
        std::string name;
        ag::Var var;
    };

    ag::Var& add(const std::string& name, ag::Matrix init);
    const ag::Var& get(const std::string& name) const;
    ag::Var& get(const std::string& name);
    bool contains(const std::string& name) const { return index_.contains(name); }

    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }

    /// Names whose first dotted component equals `group`.
    std::vector<std::string> group(const std::string& group) const;
    /// Distinct first components, in insertion order.
    std::vector<std::string> groups() const;

    void zero_grad();
    /// Rounds every value to the nearest float32 (checkpoint storage precision).
    void round_to_float32();
    std::size_t scalar_count() const;

    /// Deep copy with fresh autograd leaves.
    ParamStore clone() const;

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Allocates and initializes every parameter for the model configuration.
ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Extra embedding rows appended after the data vocabulary.
struct SpecialTokens {
    int pad;
    int cls;
    int mask;
};
inline SpecialTokens special_tokens(const ModelConfig& cfg) {
    return {cfg.vocab_size, cfg.vocab_size + 1, cfg.vocab_size + 2};
}

/// Width of the gate input X_u || X_v || R^I_u || R^T_u || R^I_v || R^T_v.
inline int gate_input_dim(const ModelConfig& cfg) { return 2 * cfg.stat_dim + 4 * cfg.embed_dim; }

}  // namespace mmga
