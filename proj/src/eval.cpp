#include "mmga/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include "mmga/encoders.hpp"
#include "mmga/error.hpp"
#include "mmga/graph_encoder.hpp"
#include "mmga/harness.hpp"
#include "mmga/rng.hpp"

namespace mmga::eval {

using ordered_json = nlohmann::ordered_json;

ModalTables modal_tables(const ParamStore& p, const ModelConfig& cfg, const data::Dataset& ds,
                         const data::SocialGraph& graph) {
    if (graph.n_nodes != static_cast<std::int64_t>(ds.users.size())) {
        fail(ErrorCode::ShapeMismatch, "graph and dataset disagree on the number of users");
    }
    if (cfg.vocab_size != ds.meta.config.vocab_size || cfg.stat_dim != ds.meta.config.stat_dim ||
        !(cfg.image == ds.meta.config.image) || cfg.max_tokens < ds.meta.config.max_tokens) {
        fail(ErrorCode::ShapeMismatch, "model configuration does not match the dataset meta");
    }
    ag::NoGradGuard guard;
    const auto index = data::user_post_index(ds);
    const std::vector<ag::Index> offsets(index.offsets.begin(), index.offsets.end());
    const auto posts = enc::embed_posts(p, cfg, ds, index.order);
    ModalTables t;
    t.r_image = ag::segment_mean(ag::Var::constant(posts.image), offsets).value();
    t.r_text = ag::segment_mean(ag::Var::constant(posts.text), offsets).value();
    t.r_g = gnn::encode_graph(p, cfg, ag::Var::constant(gnn::node_features(ds)), gnn::Csr::from_graph(graph),
                              ag::Var::constant(t.r_image), ag::Var::constant(t.r_text))
                .r_g.value();
    return t;
}

ag::Matrix concat_representation(const ModalTables& t) {
    ag::Matrix r(t.r_g.rows(), t.r_g.cols() + t.r_image.cols() + t.r_text.cols());
    r << t.r_g, t.r_image, t.r_text;
    return r;
}

ag::Matrix user_representation(const ParamStore& p, const ModelConfig& cfg, const data::Dataset& ds,
                               const data::SocialGraph& graph) {
    return concat_representation(modal_tables(p, cfg, ds, graph));
}

const char* slice_name(Slice s) {
    switch (s) {
        case Slice::G: return "G";
        case Slice::I: return "I";
        case Slice::T: return "T";
        case Slice::Full: return "full";
    }
    return "?";
}

ag::Matrix slice_columns(const ag::Matrix& r, Slice s) {
    if (r.cols() % 3 != 0) fail(ErrorCode::ShapeMismatch, "representation width is not a multiple of 3");
    const ag::Index d = r.cols() / 3;
    switch (s) {
        case Slice::G: return r.middleCols(0, d);
        case Slice::I: return r.middleCols(d, d);
        case Slice::T: return r.middleCols(2 * d, d);
        case Slice::Full: return r;
    }
    return r;
}

const char* task_name(Task t) { return t == Task::Content ? "content" : "fans"; }

Task parse_task(const std::string& s) {
    if (s == "content") return Task::Content;
    if (s == "fans") return Task::Fans;
    fail(ErrorCode::InvalidArgument, "unknown task '" + s + "' (expected content|fans)");
}

std::vector<int> task_labels(const data::Dataset& ds, Task t) {
    std::vector<int> out;
    out.reserve(ds.users.size());
    for (const auto& u : ds.users) out.push_back(t == Task::Content ? u.topic_label : u.fans_label);
    return out;
}

Split stratified_split(std::span<const int> labels, double train_frac, std::uint64_t seed) {
    if (!(train_frac > 0.0 && train_frac < 1.0)) fail(ErrorCode::InvalidArgument, "train fraction must lie in (0,1)");
    if (labels.empty()) fail(ErrorCode::InvalidArgument, "stratified_split: no labels");
    const int classes = *std::max_element(labels.begin(), labels.end()) + 1;
    Split s;
    for (int c = 0; c < classes; ++c) {
        std::vector<ag::Index> members;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] == c) members.push_back(static_cast<ag::Index>(i));
        }
        if (members.empty()) continue;
        Rng rng(subseed(seed, static_cast<std::uint64_t>(c)));
        rng.shuffle(members);
        auto n_train = static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(members.size())));
        if (members.size() >= 2) n_train = std::clamp<std::size_t>(n_train, 1, members.size() - 1);
        s.train.insert(s.train.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_train));
        s.test.insert(s.test.end(), members.begin() + static_cast<std::ptrdiff_t>(n_train), members.end());
    }
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

namespace {

ag::Matrix gather(const ag::Matrix& r, std::span<const ag::Index> rows) {
    ag::Matrix out(static_cast<ag::Index>(rows.size()), r.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<ag::Index>(i)) = r.row(rows[i]);
    return out;
}

ag::Matrix one_hot(std::span<const int> labels, std::span<const ag::Index> rows, int classes) {
    ag::Matrix y = ag::Matrix::Zero(static_cast<ag::Index>(rows.size()), classes);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const int c = labels[static_cast<std::size_t>(rows[i])];
        if (c < 0 || c >= classes) fail(ErrorCode::InvalidArgument, "label " + std::to_string(c) + " out of range");
        y(static_cast<ag::Index>(i), c) = 1.0;
    }
    return y;
}

// Column statistics of the training rows; constant columns keep scale 1.
void fit_standardizer(const ag::Matrix& x, LinearHead& head) {
    head.mean = x.colwise().mean();
    head.scale.resize(1, x.cols());
    for (ag::Index j = 0; j < x.cols(); ++j) {
        const double var = (x.col(j).array() - head.mean(0, j)).square().mean();
        head.scale(0, j) = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
}

ag::Var standardized(const ag::Var& x, const LinearHead& head) {
    const ag::Matrix inv = head.scale.cwiseInverse();
    return ag::mul_row(ag::add_row(x, ag::Var::constant(-head.mean)), ag::Var::constant(inv));
}

ag::Var probe_loss(const ag::Var& logits, const ag::Matrix& y, const ag::Var& w, double l2) {
    ag::Var ce = ag::scale(ag::sum(ag::mul(ag::log_softmax_rows(logits), ag::Var::constant(y))),
                           -1.0 / static_cast<double>(y.rows()));
    return ag::add(ce, ag::scale(ag::sum(ag::square(w)), l2));
}

std::vector<int> argmax_rows(const ag::Matrix& p) {
    std::vector<int> out(static_cast<std::size_t>(p.rows()));
    for (ag::Index i = 0; i < p.rows(); ++i) {
        ag::Index best = 0;
        p.row(i).maxCoeff(&best);
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

int class_count(Task task, std::span<const int> labels) {
    if (task == Task::Fans) return 2;
    return *std::max_element(labels.begin(), labels.end()) + 1;
}

}  // namespace

LinearHead fit_probe(const ag::Matrix& r, std::span<const int> labels, std::span<const ag::Index> rows, int classes,
                     const ProbeConfig& cfg) {
    if (rows.empty()) fail(ErrorCode::InvalidArgument, "fit_probe: empty training split");
    if (classes < 1) fail(ErrorCode::InvalidArgument, "fit_probe: no classes");
    LinearHead head;
    head.classes = classes;
    const ag::Matrix x = gather(r, rows);
    fit_standardizer(x, head);
    const ag::Matrix y = one_hot(labels, rows, classes);
    ParamStore store;
    const ag::Var w = store.add("probe.w", ag::Matrix::Zero(r.cols(), classes));
    const ag::Var b = store.add("probe.b", ag::Matrix::Zero(1, classes));
    train::Optimizer opt(OptimizerKind::Adam, cfg.learning_rate);
    const ag::Var xs = ag::Var::constant(standardized(ag::Var::constant(x), head).value());
    for (int it = 0; it < cfg.iterations; ++it) {
        store.zero_grad();
        ag::backward(probe_loss(ag::add_row(ag::matmul(xs, w), b), y, w, cfg.l2));
        opt.step(store);
    }
    head.w = w.value();
    head.b = b.value();
    return head;
}

ag::Matrix predict_proba(const LinearHead& head, const ag::Matrix& r, std::span<const ag::Index> rows) {
    if (r.cols() != head.w.rows()) {
        fail(ErrorCode::ShapeMismatch, "probe expects " + std::to_string(head.w.rows()) + " columns, got " +
                                           std::to_string(r.cols()));
    }
    ag::NoGradGuard guard;
    const ag::Var xs = standardized(ag::Var::constant(gather(r, rows)), head);
    return ag::softmax_rows(ag::add_row(ag::matmul(xs, ag::Var::constant(head.w)), ag::Var::constant(head.b))).value();
}

namespace {

ordered_json matrix_json(const ag::Matrix& m) {
    ordered_json rows = ordered_json::array();
    for (ag::Index i = 0; i < m.rows(); ++i) {
        ordered_json row = ordered_json::array();
        for (ag::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(row);
    }
    return rows;
}

ag::Matrix matrix_from(const nlohmann::json& j) {
    const auto rows = static_cast<ag::Index>(j.size());
    const auto cols = rows ? static_cast<ag::Index>(j.at(0).size()) : 0;
    ag::Matrix m(rows, cols);
    for (ag::Index i = 0; i < rows; ++i) {
        if (static_cast<ag::Index>(j.at(i).size()) != cols) fail(ErrorCode::Validation, "ragged matrix in head file");
        for (ag::Index c = 0; c < cols; ++c) m(i, c) = j.at(i).at(c).get<double>();
    }
    return m;
}

}  // namespace

ordered_json head_to_json(const LinearHead& head) {
    ordered_json j;
    j["classes"] = head.classes;
    j["w"] = matrix_json(head.w);
    j["b"] = matrix_json(head.b);
    j["mean"] = matrix_json(head.mean);
    j["scale"] = matrix_json(head.scale);
    return j;
}

LinearHead head_from_json(const nlohmann::json& j) {
    try {
        LinearHead h;
        h.classes = j.at("classes").get<int>();
        h.w = matrix_from(j.at("w"));
        h.b = matrix_from(j.at("b"));
        h.mean = matrix_from(j.at("mean"));
        h.scale = matrix_from(j.at("scale"));
        if (h.w.cols() != h.classes || h.b.cols() != h.classes || h.mean.cols() != h.w.rows() ||
            h.scale.cols() != h.w.rows()) {
            fail(ErrorCode::Validation, "inconsistent probe head shapes");
        }
        return h;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::Validation, std::string("malformed probe head: ") + e.what());
    }
}

ClassificationMetrics classification_metrics(std::span<const int> predicted, std::span<const int> truth, int classes) {
    if (predicted.size() != truth.size()) fail(ErrorCode::ShapeMismatch, "prediction and label counts differ");
    if (truth.empty()) fail(ErrorCode::InvalidArgument, "classification metrics on an empty split");
    ClassificationMetrics m;
    m.confusion.assign(static_cast<std::size_t>(classes), std::vector<std::int64_t>(static_cast<std::size_t>(classes), 0));
    std::int64_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0 || truth[i] >= classes || predicted[i] < 0 || predicted[i] >= classes) {
            fail(ErrorCode::InvalidArgument, "class id out of range");
        }
        ++m.confusion[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(predicted[i])];
        correct += truth[i] == predicted[i];
    }
    m.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
    double f1_sum = 0.0;
    int counted = 0;
    for (int c = 0; c < classes; ++c) {
        const auto cc = static_cast<std::size_t>(c);
        const std::int64_t tp = m.confusion[cc][cc];
        std::int64_t fp = 0;
        std::int64_t fn = 0;
        for (std::size_t o = 0; o < static_cast<std::size_t>(classes); ++o) {
            if (o == cc) continue;
            fp += m.confusion[o][cc];
            fn += m.confusion[cc][o];
        }
        const std::int64_t denom = 2 * tp + fp + fn;
        if (denom == 0) continue;
        f1_sum += static_cast<double>(2 * tp) / static_cast<double>(denom);
        ++counted;
    }
    m.macro_f1 = f1_sum / counted;
    return m;
}

ClassificationMetrics eval_classification(const LinearHead& head, const ag::Matrix& r, std::span<const int> labels,
                                          std::span<const ag::Index> rows) {
    if (rows.empty()) fail(ErrorCode::InvalidArgument, "eval_classification: empty split");
    const auto pred = argmax_rows(predict_proba(head, r, rows));
    std::vector<int> truth;
    for (auto i : rows) truth.push_back(labels[static_cast<std::size_t>(i)]);
    return classification_metrics(pred, truth, head.classes);
}

double auc(std::span<const double> pos, std::span<const double> neg) {
    if (pos.empty() || neg.empty()) fail(ErrorCode::InvalidArgument, "auc: empty positive or negative list");
    std::vector<std::pair<double, int>> all;
    all.reserve(pos.size() + neg.size());
    for (double s : pos) all.emplace_back(s, 1);
    for (double s : neg) all.emplace_back(s, 0);
    for (const auto& [s, _] : all) {
        if (std::isnan(s)) fail(ErrorCode::NonFinite, "auc: NaN score");
    }
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    // twice the count of (pos, neg) pairs won by the positive, ties counting one
    std::int64_t twice_wins = 0;
    std::int64_t neg_below = 0;
    for (std::size_t i = 0; i < all.size();) {
        std::size_t j = i;
        std::int64_t p = 0;
        std::int64_t n = 0;
        while (j < all.size() && all[j].first == all[i].first) {
            (all[j].second ? p : n) += 1;
            ++j;
        }
        twice_wins += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    return static_cast<double>(twice_wins) /
           (2.0 * static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

double eval_link_auc(const ag::Matrix& r_g, std::span<const data::NodePair> pos, std::span<const data::NodePair> neg) {
    auto scores = [&](std::span<const data::NodePair> pairs) {
        std::vector<double> s;
        for (const auto& pr : pairs) {
            if (pr.u < 0 || pr.v < 0 || pr.u >= r_g.rows() || pr.v >= r_g.rows()) {
                fail(ErrorCode::InvalidArgument, "eval_link_auc: pair out of range");
            }
            s.push_back(r_g.row(pr.u).dot(r_g.row(pr.v)));
        }
        return s;
    };
    const auto sp = scores(pos);
    const auto sn = scores(neg);
    return auc(sp, sn);
}

CosineGap cosine_gap(const ag::Matrix& r, const data::SocialGraph& graph, std::uint64_t seed) {
    if (graph.edges.empty()) fail(ErrorCode::InvalidArgument, "cosine_gap: graph has no edges");
    if (graph.n_nodes < 2 || graph.n_nodes != r.rows()) fail(ErrorCode::ShapeMismatch, "cosine_gap: size mismatch");
    auto cosine = [&](std::int64_t u, std::int64_t v) {
        const double nu = r.row(u).norm();
        const double nv = r.row(v).norm();
        return r.row(u).dot(r.row(v)) / (nu * nv + 1e-12);
    };
    CosineGap g;
    for (const auto& e : graph.edges) g.connected += cosine(e.u, e.v);
    g.connected /= static_cast<double>(graph.edges.size());
    Rng rng(seed);
    const auto n = static_cast<std::uint64_t>(graph.n_nodes);
    for (std::size_t i = 0; i < graph.edges.size(); ++i) {
        const auto u = static_cast<std::int64_t>(rng.below(n));
        auto v = static_cast<std::int64_t>(rng.below(n - 1));
        if (v >= u) ++v;
        g.random += cosine(u, v);
    }
    g.random /= static_cast<double>(graph.edges.size());
    return g;
}

ordered_json task_metrics(Task task, const LinearHead& head, const ag::Matrix& r, std::span<const int> labels,
                          std::span<const ag::Index> rows) {
    const ClassificationMetrics cm = eval_classification(head, r, labels, rows);
    ordered_json j;
    if (task == Task::Fans) {
        const ag::Matrix p = predict_proba(head, r, rows);
        std::vector<double> pos;
        std::vector<double> neg;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            (labels[static_cast<std::size_t>(rows[i])] == 1 ? pos : neg).push_back(p(static_cast<ag::Index>(i), 1));
        }
        if (pos.empty() || neg.empty()) fail(ErrorCode::Validation, "fans evaluation split holds a single class");
        j["auc"] = auc(pos, neg);
    }
    j["accuracy"] = cm.accuracy;
    j["macro_f1"] = cm.macro_f1;
    j["confusion"] = cm.confusion;
    return j;
}

ordered_json FinetuneResult::report() const {
    ordered_json j;
    j["task"] = task_name(task);
    j["split"] = {{"train", split.train.size()}, {"test", split.test.size()}};
    ordered_json ablation;
    for (const auto& s : slices) {
        ablation[slice_name(s.slice)] = s.metrics;
        if (s.slice == Slice::Full) j["metrics"] = s.metrics;
    }
    j["ablation"] = ablation;
    return j;
}

namespace {

void check_task_labels(Task task, std::span<const int> labels, const Split& split) {
    if (task != Task::Fans) return;
    for (const auto* part : {&split.train, &split.test}) {
        bool has[2] = {false, false};
        for (auto i : *part) has[labels[static_cast<std::size_t>(i)] == 1] = true;
        if (!has[0] || !has[1]) fail(ErrorCode::Validation, "fans task: degenerate single-class split");
    }
}

}  // namespace

FinetuneResult finetune(const ag::Matrix& r, const std::vector<int>& labels, Task task, const ProbeConfig& cfg) {
    if (static_cast<ag::Index>(labels.size()) != r.rows()) fail(ErrorCode::ShapeMismatch, "label count differs from R rows");
    FinetuneResult out{task, {}, stratified_split(labels, cfg.train_frac, cfg.seed)};
    check_task_labels(task, labels, out.split);
    if (out.split.test.empty()) fail(ErrorCode::InvalidArgument, "finetune: empty test split");
    const int classes = class_count(task, labels);
    for (Slice s : {Slice::G, Slice::I, Slice::T, Slice::Full}) {
        const ag::Matrix x = slice_columns(r, s);
        LinearHead head = fit_probe(x, labels, out.split.train, classes, cfg);
        ordered_json metrics = task_metrics(task, head, x, labels, out.split.test);
        out.slices.push_back({s, std::move(head), std::move(metrics)});
    }
    return out;
}

FinetuneResult finetune_unfrozen(ParamStore& p, const ModelConfig& cfg, const data::Dataset& ds,
                                 const data::SocialGraph& graph, Task task, const ProbeConfig& probe) {
    const auto labels = task_labels(ds, task);
    FinetuneResult out{task, {}, stratified_split(labels, probe.train_frac, probe.seed)};
    check_task_labels(task, labels, out.split);
    const int classes = class_count(task, labels);
    const ModalTables base = modal_tables(p, cfg, ds, graph);
    const ag::Matrix r0 = concat_representation(base);

    LinearHead head;
    head.classes = classes;
    fit_standardizer(gather(r0, out.split.train), head);
    ParamStore store;
    const ag::Var w = store.add("probe.w", ag::Matrix::Zero(r0.cols(), classes));
    const ag::Var b = store.add("probe.b", ag::Matrix::Zero(1, classes));
    train::Optimizer head_opt(OptimizerKind::Adam, probe.learning_rate);
    train::Optimizer graph_opt(OptimizerKind::Adam, 1e-3);
    const ag::Var x = ag::Var::constant(gnn::node_features(ds));
    const gnn::Csr csr = gnn::Csr::from_graph(graph);
    const ag::Var ri = ag::Var::constant(base.r_image);
    const ag::Var rt = ag::Var::constant(base.r_text);
    const ag::Matrix y = one_hot(labels, out.split.train, classes);
    for (int it = 0; it < probe.iterations; ++it) {
        store.zero_grad();
        p.zero_grad();
        const ag::Var rg = gnn::encode_graph(p, cfg, x, csr, ri, rt).r_g;
        const ag::Var r = standardized(ag::gather_rows(ag::concat_cols({rg, ri, rt}), out.split.train), head);
        ag::backward(probe_loss(ag::add_row(ag::matmul(r, w), b), y, w, probe.l2));
        head_opt.step(store);
        graph_opt.step(p);
    }
    p.zero_grad();
    head.w = w.value();
    head.b = b.value();
    const ag::Matrix r_final = user_representation(p, cfg, ds, graph);
    ordered_json metrics = task_metrics(task, head, r_final, labels, out.split.test);
    out.slices.push_back({Slice::Full, std::move(head), std::move(metrics)});
    return out;
}

namespace {

std::string fmt(double v, const char* spec = "%.6g") {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

std::string loss_svg(const std::string& title, const std::vector<double>& ys) {
    constexpr double W = 640.0, H = 360.0, L = 70.0, R = 20.0, T = 40.0, B = 50.0;
    double lo = ys.empty() ? 0.0 : *std::min_element(ys.begin(), ys.end());
    double hi = ys.empty() ? 1.0 : *std::max_element(ys.begin(), ys.end());
    if (hi - lo < 1e-12) {
        lo -= 0.5;
        hi += 0.5;
    }
    const double n = std::max<double>(1.0, static_cast<double>(ys.size()) - 1.0);
    std::string pts;
    for (std::size_t i = 0; i < ys.size(); ++i) {
        const double x = L + (W - L - R) * static_cast<double>(i) / n;
        const double y = T + (H - T - B) * (hi - ys[i]) / (hi - lo);
        pts += fmt(x, "%.2f") + "," + fmt(y, "%.2f") + " ";
    }
    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"360\" viewBox=\"0 0 640 360\">\n";
    s += "<rect width=\"640\" height=\"360\" fill=\"white\"/>\n";
    s += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">" + title +
         " loss</text>\n";
    s += "<line x1=\"70\" y1=\"310\" x2=\"620\" y2=\"310\" stroke=\"black\"/>\n";
    s += "<line x1=\"70\" y1=\"40\" x2=\"70\" y2=\"310\" stroke=\"black\"/>\n";
    s += "<text x=\"64\" y=\"44\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" + fmt(hi, "%.4g") +
         "</text>\n";
    s += "<text x=\"64\" y=\"310\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" + fmt(lo, "%.4g") +
         "</text>\n";
    s += "<text x=\"345\" y=\"340\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">step (" +
         std::to_string(ys.size()) + " records)</text>\n";
    if (!ys.empty()) {
        s += "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    }
    s += "</svg>\n";
    return s;
}

nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::Io, "missing report input: " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::Validation, path.string() + ": " + e.what());
    }
}

}  // namespace

namespace {

// Exclusive flock on <run>/.lock for the duration of report writing.
class RunLock {
public:
    explicit RunLock(const std::filesystem::path& run_dir) {
        const auto path = run_dir / ".lock";
        fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
        if (fd_ < 0) fail(ErrorCode::Io, "cannot open " + path.string());
        if (::flock(fd_, LOCK_EX) != 0) {
            ::close(fd_);
            fail(ErrorCode::Io, "cannot lock " + path.string());
        }
    }
    ~RunLock() {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    int fd_ = -1;
};

}  // namespace

std::vector<std::filesystem::path> make_report(const std::filesystem::path& run_dir) {
    const auto history_path = run_dir / "history.jsonl";
    const auto manifest_path = run_dir / "checkpoint" / "manifest.json";
    for (const auto& f : {history_path, manifest_path}) {
        if (!std::filesystem::exists(f)) fail(ErrorCode::Io, "missing report input: " + f.string());
    }
    const RunLock lock(run_dir);
    const auto history = train::read_history(history_path);
    const auto manifest = read_json(manifest_path);

    ordered_json report;
    report["format_version"] = 1;
    report["config"] = manifest.at("config");
    report["seeds"] = {{"train", manifest.at("config").at("seed")}};
    if (std::filesystem::exists(run_dir / "run.json")) {
        const auto run = read_json(run_dir / "run.json");
        if (run.contains("dataset_seed")) report["seeds"]["dataset"] = run.at("dataset_seed");
        if (run.contains("dataset_manifest_sha256")) report["dataset_manifest_sha256"] = run.at("dataset_manifest_sha256");
    }
    report["steps"] = history.size();
    report["history_sha256"] = manifest.at("history_sha256");

    std::vector<std::string> names(obj::kComponentNames.begin(), obj::kComponentNames.end());
    names.push_back("total");
    std::vector<std::vector<double>> series(names.size());
    for (const auto& r : history) {
        for (std::size_t i = 0; i < obj::kComponents; ++i) series[i].push_back(r.components[i]);
        series.back().push_back(r.total);
    }
    ordered_json final_losses;
    ordered_json epoch_means = ordered_json::array();
    if (!history.empty()) {
        for (std::size_t i = 0; i < names.size(); ++i) final_losses[names[i]] = series[i].back();
        int epoch = history.front().epoch;
        std::vector<double> sums(names.size(), 0.0);
        int count = 0;
        auto flush = [&] {
            ordered_json e;
            e["epoch"] = epoch;
            for (std::size_t i = 0; i < names.size(); ++i) e[names[i]] = sums[i] / count;
            epoch_means.push_back(e);
        };
        for (std::size_t k = 0; k < history.size(); ++k) {
            if (history[k].epoch != epoch) {
                flush();
                epoch = history[k].epoch;
                std::fill(sums.begin(), sums.end(), 0.0);
                count = 0;
            }
            for (std::size_t i = 0; i < names.size(); ++i) sums[i] += series[i][k];
            ++count;
        }
        flush();
    }
    report["final_losses"] = final_losses;
    report["epoch_means"] = epoch_means;

    for (const char* task : {"content", "fans"}) {
        const auto path = run_dir / ("finetune_" + std::string(task) + ".json");
        if (!std::filesystem::exists(path)) continue;
        auto j = read_json(path);
        j.erase("head");
        report["finetune"][task] = j;
    }
    if (std::filesystem::exists(run_dir / "eval.json")) report["eval"] = read_json(run_dir / "eval.json");

    const auto plot_dir = run_dir / "plots";
    std::filesystem::create_directories(plot_dir);
    std::vector<std::filesystem::path> written;
    ordered_json plots = ordered_json::array();
    for (std::size_t i = 0; i < names.size(); ++i) {
        const auto path = plot_dir / ("loss_" + names[i] + ".svg");
        std::ofstream out(path, std::ios::trunc);
        out << loss_svg(names[i], series[i]);
        if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
        plots.push_back("plots/loss_" + names[i] + ".svg");
        written.push_back(path);
    }
    report["plots"] = plots;

    const auto report_path = run_dir / "report.json";
    std::ofstream out(report_path, std::ios::trunc);
    out << report.dump(2) << "\n";
    if (!out) fail(ErrorCode::Io, "cannot write " + report_path.string());
    written.insert(written.begin(), report_path);
    return written;
}

}  // namespace mmga::eval
