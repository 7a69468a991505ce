#pragma once

// Masking procedures, optimizers, the joint pre-training step and loop,
// checkpoints and the finite-difference gradient checker.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmga/autograd.hpp"
#include "mmga/config.hpp"
#include "mmga/dataset.hpp"
#include "mmga/graph_encoder.hpp"
#include "mmga/objectives.hpp"
#include "mmga/params.hpp"

namespace mmga::train {

// --- masking ---

struct TokenMask {
    std::vector<std::int32_t> tokens;  // masked positions hold mask_id
    std::vector<ag::Index> positions;  // ascending
};
/// Independent Bernoulli(rate) per position; at least one position when rate > 0.
TokenMask mask_tokens(std::span<const std::int32_t> tokens, std::int32_t mask_id, double rate, std::uint64_t seed);

struct NodeMask {
    ag::Var x;                     // masked rows replaced by the mask vector
    std::vector<ag::Index> nodes;  // ascending
};
NodeMask mask_node_features(const ag::Var& x, const ag::Var& mask_vector, double rate, std::uint64_t seed);

struct EdgeMask {
    data::SocialGraph graph;
    std::vector<data::NodePair> masked;  // sorted
};
/// Removes round(rate * |E|) uniformly chosen edges.
EdgeMask mask_edges(const data::SocialGraph& graph, double rate, std::uint64_t seed);

// --- optimizer ---

class Optimizer {
public:
    Optimizer() = default;
    Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}

    /// Applies one update to every parameter holding a gradient.
    void step(ParamStore& params);
    long long steps() const { return t_; }

private:
    OptimizerKind kind_ = OptimizerKind::Adam;
    double lr_ = 1e-3;
    double beta1_ = 0.9;
    double beta2_ = 0.999;
    double eps_ = 1e-8;
    long long t_ = 0;
    std::map<std::string, ag::Matrix> m_;
    std::map<std::string, ag::Matrix> v_;
};

struct ModelState {
    ModelConfig model;
    ParamStore params;
    Optimizer optimizer;
    std::int64_t step = 0;
};

ModelState init_state(const ModelConfig& model, const TrainConfig& train);

/// Read-only per-dataset tables used by every step.
struct TrainData {
    const data::Dataset* dataset = nullptr;
    const data::SocialGraph* graph = nullptr;  // graph visible to training
    ag::Matrix x;                              // standardized node features
    data::UserPostIndex posts;
    std::vector<std::int64_t> post_order;      // posts grouped by user
    std::vector<ag::Index> post_offsets;
};
TrainData prepare_data(const data::Dataset& ds, const data::SocialGraph& graph);

/// Users per step: batch_size posts rounded down to whole users (at least 1).
std::int64_t users_per_step(const TrainConfig& cfg, const data::Dataset& ds);
std::int64_t steps_per_epoch(const TrainConfig& cfg, const data::Dataset& ds);
/// Shuffled partition of all users into consecutive step batches.
std::vector<std::vector<std::int64_t>> epoch_batches(const TrainConfig& cfg, const data::Dataset& ds, int epoch);
std::uint64_t step_seed(const TrainConfig& cfg, std::int64_t step);

/// Forward pass of all objectives for one step. `batch_users` carry
/// gradients into the encoders; the remaining users' modality rows are
/// evaluated without gradients.
obj::LossBundle compute_losses(const ModelState& state, const TrainData& data, const TrainConfig& cfg,
                               std::span<const std::int64_t> batch_users, std::uint64_t seed,
                               const LossWeights& weights);

/// One joint update; returns the pre-update losses.
obj::LossBundle pretrain_step(ModelState& state, const TrainData& data, const TrainConfig& cfg,
                              std::span<const std::int64_t> batch_users, std::uint64_t seed,
                              const LossWeights& weights);

struct HistoryRecord {
    std::int64_t step = 0;
    int epoch = 0;
    std::array<double, obj::kComponents> components{};
    double total = 0.0;
};
std::string history_line(const HistoryRecord& r);
std::string history_text(std::span<const HistoryRecord> history);
std::vector<HistoryRecord> read_history(const std::filesystem::path& path);

struct PretrainOptions {
    std::optional<std::filesystem::path> run_dir;  // history + checkpoints
    std::function<void(const HistoryRecord&)> on_step;
};
struct PretrainResult {
    ModelState state;
    std::vector<HistoryRecord> history;
};
PretrainResult pretrain(const data::Dataset& ds, const data::SocialGraph& graph, const RunConfig& cfg,
                        const PretrainOptions& options = {});

// --- checkpoints ---

struct Checkpoint {
    RunConfig config;
    ModelState state;
    std::string history_digest;
};
/// Writes manifest.json + params.bin (little-endian float32) into `dir`.
void save_checkpoint(const ModelState& state, const RunConfig& cfg, std::span<const HistoryRecord> history,
                     const std::filesystem::path& dir);
/// Verifies digests; with `expected` also checks every parameter shape.
Checkpoint load_checkpoint(const std::filesystem::path& dir, const ModelConfig* expected = nullptr);

// --- gradient check ---

struct GradCheckOptions {
    double h = 1e-4;
    std::size_t max_coords_per_param = 0;  // 0 = every coordinate
    std::uint64_t seed = 1;
};
struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    ag::Index worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t coords = 0;
};

/// Central differences of `probe` against backprop for the named parameters.
/// rel = |a - n| / max(|a|, |n|, 1e-6). Throws Nondeterministic if two
/// evaluations at the same point differ.
GradCheckReport grad_check(ParamStore& params, const std::vector<std::string>& names,
                           const std::function<ag::Var()>& probe, const GradCheckOptions& options = {});
/// Same comparison against caller-supplied analytic gradients.
GradCheckReport compare_gradients(ParamStore& params, const std::vector<std::string>& names,
                                  const std::function<double()>& probe,
                                  const std::map<std::string, ag::Matrix>& analytic,
                                  const GradCheckOptions& options = {});

/// The 12-node, 2-topic, d=16 instance: every loss component (and the total)
/// against every parameter group it reaches.
struct GroupCheck {
    std::string probe;  // loss component name or "total"
    std::string group;
    GradCheckReport report;
};
struct TinyGradCheck {
    std::vector<GroupCheck> checks;
    double max_rel_error = 0.0;
};
TinyGradCheck tiny_gradcheck(const GradCheckOptions& options = {});

}  // namespace mmga::train
