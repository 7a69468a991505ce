#pragma once

// Final user representation, linear-probe fine-tuning, classification and
// link-prediction metrics, and run reports.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmga/autograd.hpp"
#include "mmga/config.hpp"
#include "mmga/dataset.hpp"
#include "mmga/params.hpp"

namespace mmga::eval {

struct ModalTables {
    ag::Matrix r_g;
    ag::Matrix r_image;
    ag::Matrix r_text;
};
/// Frozen-parameter R_I, R_T (mean over posts) and R_G (unmasked features).
ModalTables modal_tables(const ParamStore& p, const ModelConfig& cfg, const data::Dataset& ds,
                         const data::SocialGraph& graph);

/// R = [R_G | R_I | R_T], n_users x 3d.
ag::Matrix concat_representation(const ModalTables& t);
ag::Matrix user_representation(const ParamStore& p, const ModelConfig& cfg, const data::Dataset& ds,
                               const data::SocialGraph& graph);

enum class Slice { G, I, T, Full };
const char* slice_name(Slice s);
/// Column block of R for one slice (Full = all columns).
ag::Matrix slice_columns(const ag::Matrix& r, Slice s);

enum class Task { Content, Fans };
const char* task_name(Task t);
Task parse_task(const std::string& s);
std::vector<int> task_labels(const data::Dataset& ds, Task t);

struct Split {
    std::vector<ag::Index> train;
    std::vector<ag::Index> test;
};
/// Per-class shuffle, first round(frac * n_c) of each class go to train.
Split stratified_split(std::span<const int> labels, double train_frac, std::uint64_t seed);

struct ProbeConfig {
    int iterations = 400;
    double learning_rate = 0.05;
    double l2 = 1e-3;
    double train_frac = 0.7;
    std::uint64_t seed = 5;
};

/// Softmax-regression head on column-standardized inputs.
struct LinearHead {
    ag::Matrix w;      // D x C
    ag::Matrix b;      // 1 x C
    ag::Matrix mean;   // 1 x D
    ag::Matrix scale;  // 1 x D
    int classes = 0;
};
LinearHead fit_probe(const ag::Matrix& r, std::span<const int> labels, std::span<const ag::Index> rows, int classes,
                     const ProbeConfig& cfg);
/// Class probabilities, |rows| x C.
ag::Matrix predict_proba(const LinearHead& head, const ag::Matrix& r, std::span<const ag::Index> rows);
nlohmann::ordered_json head_to_json(const LinearHead& head);
LinearHead head_from_json(const nlohmann::json& j);

struct ClassificationMetrics {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::vector<std::vector<std::int64_t>> confusion;  // [truth][predicted]
};
/// Macro-F1 averages over classes that occur in the truth or the predictions.
ClassificationMetrics classification_metrics(std::span<const int> predicted, std::span<const int> truth, int classes);
ClassificationMetrics eval_classification(const LinearHead& head, const ag::Matrix& r, std::span<const int> labels,
                                          std::span<const ag::Index> rows);

/// P(score_pos > score_neg) + 0.5 P(tie), exact via sorting and tie groups.
double auc(std::span<const double> pos, std::span<const double> neg);
/// AUC of inner-product scores.
double eval_link_auc(const ag::Matrix& r_g, std::span<const data::NodePair> pos, std::span<const data::NodePair> neg);

/// Mean cosine similarity of rows of `r` over graph edges minus over
/// uniformly drawn distinct pairs (as many as there are edges).
struct CosineGap {
    double connected = 0.0;
    double random = 0.0;
    double gap() const { return connected - random; }
};
CosineGap cosine_gap(const ag::Matrix& r, const data::SocialGraph& graph, std::uint64_t seed);

struct SliceResult {
    Slice slice;
    LinearHead head;
    nlohmann::ordered_json metrics;
};
struct FinetuneResult {
    Task task;
    std::vector<SliceResult> slices;  // G, I, T, Full
    Split split;
    nlohmann::ordered_json report() const;
};
/// Trains one probe per slice on the stratified train split and scores the
/// test split: accuracy + macro-F1 (content) or AUC + accuracy (fans).
FinetuneResult finetune(const ag::Matrix& r, const std::vector<int>& labels, Task task, const ProbeConfig& cfg);

/// Jointly trains the full-R probe and the graph encoder parameters
/// (image/text tables stay frozen).
FinetuneResult finetune_unfrozen(ParamStore& p, const ModelConfig& cfg, const data::Dataset& ds,
                                 const data::SocialGraph& graph, Task task, const ProbeConfig& probe);

/// Metrics of a stored head on the rows of a split.
nlohmann::ordered_json task_metrics(Task task, const LinearHead& head, const ag::Matrix& r,
                                    std::span<const int> labels, std::span<const ag::Index> rows);

/// Writes report.json and one SVG loss curve per component plus the total.
/// Reads history.jsonl (required) and any finetune/eval outputs present.
std::vector<std::filesystem::path> make_report(const std::filesystem::path& run_dir);

}  // namespace mmga::eval
