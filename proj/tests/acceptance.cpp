// Acceptance suite: one PASS/FAIL line per criterion.

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "fixtures.hpp"
#include "mmga/encoders.hpp"
#include "mmga/error.hpp"
#include "mmga/eval.hpp"
#include "mmga/graph_encoder.hpp"
#include "mmga/harness.hpp"
#include "mmga/objectives.hpp"
#include "mmga/rng.hpp"
#include "oracles.hpp"

using namespace mmga;
using ag::Matrix;
using ag::Var;
using Clock = std::chrono::steady_clock;

namespace {

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Never more threads than processors: oversubscribed OpenMP spins.
void threads(int n) {
    n = std::max(1, std::min(n, omp_get_num_procs()));
    omp_set_num_threads(n);
    Eigen::setNbThreads(n);
}

Matrix random_matrix(ag::Index r, ag::Index c, Rng& rng, double sd = 1.0) {
    Matrix m(r, c);
    for (ag::Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
    return m;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
        }
    }
    void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

// --- 1 ---

Outcome gradients() {
    threads(1);
    Outcome o;
    const auto t0 = Clock::now();
    train::GradCheckOptions opts;
    opts.max_coords_per_param = 20;  // sampled coordinates per array; every array of every group
    const auto r = train::tiny_gradcheck(opts);
    const double t = since(t0);
    std::set<std::string> probes;
    for (const auto& c : r.checks) probes.insert(c.probe);
    o.require(probes.size() == obj::kComponents + 1, "every loss reaches some parameter group");
    o.require(r.max_rel_error < 1e-3, "max relative error < 1e-3");
    o.require(t < 120.0, "runtime < 120 s");
    o.note(std::to_string(r.checks.size()) + " (loss, group) checks, max rel err " + fmt(r.max_rel_error) + ", " +
           fmt(t) + " s");
    threads(4);
    return o;
}

// --- 2 ---

ModelConfig graph_model() {
    ModelConfig mc;
    mc.embed_dim = 8;
    mc.n_heads = 2;
    mc.mlp_dim = 16;
    mc.head_hidden = 8;
    mc.stat_dim = 4;
    mc.vocab_size = 16;
    mc.max_tokens = 8;
    mc.image = {1, 16, 16};
    return mc;
}

ParamStore gated_params(const ModelConfig& mc, std::uint64_t seed) {
    auto p = init_params(mc, seed);
    Rng rng(seed + 1);
    for (int k = 0; k < mc.gnn_layers; ++k) {
        auto& w = p.get("graph.layer" + std::to_string(k) + ".gate_w").mutable_value();
        w = random_matrix(w.rows(), w.cols(), rng, 0.3);
    }
    return p;
}

data::SocialGraph random_graph(std::int64_t n, double prob, Rng& rng) {
    std::vector<data::NodePair> e;
    for (std::int64_t u = 0; u < n; ++u)
        for (std::int64_t v = u + 1; v < n; ++v)
            if (rng.uniform() < prob) e.push_back({u, v});
    return data::SocialGraph::from_edges(n, e);
}

Matrix run_graph(const ParamStore& p, const ModelConfig& mc, const data::SocialGraph& g, const Matrix& x,
                 const Matrix& ri, const Matrix& rt, gnn::GateField* gates = nullptr) {
    auto enc = gnn::encode_graph(p, mc, Var::constant(x), gnn::Csr::from_graph(g), Var::constant(ri),
                                 Var::constant(rt));
    if (gates) *gates = enc.gates;
    return enc.r_g.value();
}

Outcome invariants() {
    Outcome o;
    const auto t0 = Clock::now();
    Rng rng(2024);
    double gate_dev = 0.0;
    bool equivariant = true;
    for (int trial = 0; trial < 20; ++trial) {
        auto mc = graph_model();
        mc.gnn_norm = trial % 2 == 0;
        const auto p = gated_params(mc, 10 + static_cast<std::uint64_t>(trial));
        const std::int64_t n = 25;
        const auto g = random_graph(n, 0.2, rng);
        const Matrix x = random_matrix(n, mc.stat_dim, rng), ri = random_matrix(n, mc.embed_dim, rng),
                     rt = random_matrix(n, mc.embed_dim, rng);
        gnn::GateField gates;
        const Matrix out = run_graph(p, mc, g, x, ri, rt, &gates);

        const auto csr = gnn::Csr::from_graph(g);
        for (const auto& layer : gates.layers) {
            for (ag::Index u = 0; u < n; ++u) {
                const auto b = csr.offsets[static_cast<std::size_t>(u)], e = csr.offsets[static_cast<std::size_t>(u) + 1];
                if (b == e) continue;
                gate_dev = std::max(gate_dev, std::abs(layer.weights.value().middleRows(b, e - b).sum() - 1.0));
            }
        }

        std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm);
        std::vector<data::NodePair> pe;
        for (const auto& e : g.edges) pe.push_back(data::NodePair::canonical(perm[e.u], perm[e.v]));
        std::sort(pe.begin(), pe.end());
        const auto pg = data::SocialGraph::from_edges(n, pe);
        Matrix px(x.rows(), x.cols()), pri(ri.rows(), ri.cols()), prt(rt.rows(), rt.cols());
        for (std::int64_t u = 0; u < n; ++u) {
            const auto v = perm[static_cast<std::size_t>(u)];
            px.row(v) = x.row(u);
            pri.row(v) = ri.row(u);
            prt.row(v) = rt.row(u);
        }
        const Matrix pout = run_graph(p, mc, pg, px, pri, prt);
        for (std::int64_t u = 0; u < n; ++u) equivariant = equivariant && pout.row(perm[static_cast<std::size_t>(u)]) == out.row(u);
    }
    o.require(equivariant, "graph encoder is exactly permutation equivariant");
    o.require(gate_dev <= 1e-6, "gate weights sum to 1");

    // K-hop locality on a path graph.
    bool local = true, reaches = true;
    {
        const auto mc = graph_model();
        const auto p = gated_params(mc, 77);
        const std::int64_t n = 10;
        std::vector<data::NodePair> e;
        for (std::int64_t u = 0; u + 1 < n; ++u) e.push_back({u, u + 1});
        const auto g = data::SocialGraph::from_edges(n, e);
        const Matrix x = random_matrix(n, mc.stat_dim, rng), ri = random_matrix(n, mc.embed_dim, rng),
                     rt = random_matrix(n, mc.embed_dim, rng);
        const Matrix base = run_graph(p, mc, g, x, ri, rt);
        for (std::int64_t src = 0; src < n; ++src) {
            Matrix x2 = x;
            x2.row(src).array() += 1.0;
            const Matrix out = run_graph(p, mc, g, x2, ri, rt);
            for (std::int64_t u = 0; u < n; ++u) {
                const bool same = out.row(u) == base.row(u);
                if (std::abs(u - src) > mc.gnn_layers) local = local && same;
                else reaches = reaches && !same;
            }
        }
    }
    o.require(local, "nodes beyond K hops are unaffected");
    o.require(reaches, "nodes within K hops are affected");

    // Padding invariance of the text encoder.
    double pad_dev = 0.0;
    {
        data::DatasetMeta meta;
        ModelConfig mc;
        bind_to_dataset(mc, meta);
        const auto p = init_params(mc, 1);
        for (int trial = 0; trial < 10; ++trial) {
            std::vector<std::int32_t> seq(1 + rng.below(static_cast<std::uint64_t>(mc.max_tokens) - 1));
            for (auto& t : seq) t = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(mc.vocab_size)));
            std::vector<std::int32_t> longer(static_cast<std::size_t>(mc.max_tokens), 1);
            const Matrix tight = enc::encode_text(p, mc, seq);
            const auto padded = enc::text_embeddings(p, mc, enc::make_text_batch({seq, longer}, mc)).value();
            pad_dev = std::max(pad_dev, (padded.row(0) - tight).cwiseAbs().maxCoeff());
        }
    }
    o.require(pad_dev < 1e-6, "text padding changes embeddings by < 1e-6");
    const double t = since(t0);
    o.require(t < 300.0, "runtime < 5 min");
    o.note("gate dev " + fmt(gate_dev) + ", padding dev " + fmt(pad_dev) + ", " + fmt(t) + " s");
    return o;
}

// --- 3 ---

Outcome closed_forms() {
    Outcome o;
    for (int v : {4, 64}) {
        const std::vector<ag::Index> t = {0, 1, static_cast<ag::Index>(v - 1)};
        const double l = obj::lm_loss(Var::constant(Matrix::Constant(3, v, -0.3)), t, 0.1).item();
        o.require(std::abs(l - std::log(static_cast<double>(v))) <= 1e-6, "uniform LM loss = ln V (V=" + std::to_string(v) + ")");
    }
    Matrix logits(1, 4);
    logits << 2, 0, 0, 0;
    const std::vector<ag::Index> zero = {0};
    const double hand = obj::lm_loss(Var::constant(logits), zero, 0.1).item();
    o.require(std::abs(hand - 0.4908) <= 1e-3, "label smoothing hand case 0.4908");
    for (int b : {2, 8, 32}) {
        const Matrix m = Matrix::Constant(b, 6, 0.4);
        const double l = obj::ita_loss(Var::constant(m), Var::constant(m), 0.07).item();
        o.require(std::abs(l - std::log(static_cast<double>(b))) <= 1e-6, "uniform ITA loss = ln B (B=" + std::to_string(b) + ")");
    }
    data::DatasetMeta meta;
    ModelConfig mc;
    bind_to_dataset(mc, meta);
    auto p = init_params(mc, 3);
    for (const char* h : {"gc_image", "gc_text"}) {
        for (const char* part : {".w1", ".b1", ".w2", ".b2"}) p.get(std::string(h) + part).mutable_value().setZero();
        Rng rng(4);
        const auto y = obj::pair_probability(p, h, Var::constant(random_matrix(10, mc.embed_dim, rng)),
                                             Var::constant(random_matrix(10, mc.embed_dim, rng)))
                           .value();
        o.require((y.array() == 0.5).all(), std::string(h) + " zero-init output is exactly 0.5");
    }
    o.note("smoothing hand case " + fmt(hand));
    return o;
}

// --- 4 ---

Outcome learnability() {
    Outcome o;
    threads(4);
    const auto t0 = Clock::now();
    const data::DatasetConfig dc;
    const auto gen = data::generate_dataset(dc, dc.seed);
    RunConfig rc;
    const auto split = data::split_edges(gen.graph, rc.train.link_holdout, rc.train.seed);

    bind_to_dataset(rc.model, gen.dataset.meta);
    const auto before = eval::modal_tables(init_params(rc.model, rc.train.seed), rc.model, gen.dataset, split.train_graph);
    const double auc0 = eval::eval_link_auc(before.r_g, split.heldout_pos, split.heldout_neg);
    const double gap0 = eval::cosine_gap(before.r_image, split.train_graph, rc.train.seed).gap();

    const auto res = train::pretrain(gen.dataset, split.train_graph, rc);
    const double train_s = since(t0);
    const auto& p = res.state.params;
    const auto t = eval::modal_tables(p, rc.model, gen.dataset, split.train_graph);
    const double link = eval::eval_link_auc(t.r_g, split.heldout_pos, split.heldout_neg);
    const double gap = eval::cosine_gap(t.r_image, split.train_graph, rc.train.seed).gap();
    const Matrix r = eval::concat_representation(t);

    const eval::ProbeConfig pc;
    const auto content = eval::finetune(r, eval::task_labels(gen.dataset, eval::Task::Content), eval::Task::Content, pc).report();
    const double full = content["ablation"]["full"]["accuracy"];
    double best_single = 0.0;
    for (const char* s : {"G", "I", "T"}) best_single = std::max(best_single, content["ablation"][s]["accuracy"].get<double>());
    const auto fans = eval::finetune(r, eval::task_labels(gen.dataset, eval::Task::Fans), eval::Task::Fans, pc).report();
    const double fans_auc = fans["ablation"]["full"]["auc"];
    const double total_s = since(t0);

    o.require(link >= 0.80, "(a) held-out link AUC >= 0.80");
    o.require(gap >= 0.1, "(b) image cosine gap >= 0.1");
    o.require(full - best_single >= 0.03, "(c) full R beats best slice by >= 3 points");
    o.require(fans_auc >= 0.70, "(d) fans AUC >= 0.70");
    o.require(total_s <= 1200.0, "runtime <= 20 min");
    o.note("(a) link AUC " + fmt(link) + " (untrained " + fmt(auc0) + ")");
    o.note("(b) cosine gap " + fmt(gap) + " (untrained " + fmt(gap0) + ")");
    o.note("(c) full " + fmt(full) + " vs best slice " + fmt(best_single));
    o.note("(d) fans AUC " + fmt(fans_auc));
    o.note("pretrain " + fmt(train_s) + " s, total " + fmt(total_s) + " s");
    return o;
}

// --- 5 ---

Outcome determinism(int epochs) {
    Outcome o;
    threads(4);
    const data::DatasetConfig dc;
    fx::TempDir d1("acc_data"), d2("acc_data");
    const auto g1 = data::generate_dataset(dc, dc.seed);
    const auto g2 = data::generate_dataset(dc, dc.seed);
    data::save_dataset(g1.dataset, g1.graph, d1.path());
    data::save_dataset(g2.dataset, g2.graph, d2.path());
    bool same_files = true;
    std::size_t files = 0;
    for (const auto& e : std::filesystem::directory_iterator(d1.path())) {
        ++files;
        const auto other = d2.path() / e.path().filename();
        same_files = same_files && std::filesystem::exists(other) && slurp(e.path()) == slurp(other);
    }
    o.require(same_files && files > 0, "datasets are bit-identical");

    RunConfig rc;
    rc.train.epochs = epochs;
    const auto split = data::split_edges(g1.graph, rc.train.link_holdout, rc.train.seed);
    fx::TempDir r1("acc_run"), r2("acc_run");
    std::vector<std::vector<train::HistoryRecord>> hist;
    for (const auto* dir : {&r1, &r2}) {
        train::PretrainOptions opts;
        opts.run_dir = dir->path();
        hist.push_back(train::pretrain(g1.dataset, split.train_graph, rc, opts).history);
        eval::make_report(dir->path());
    }
    double dev = 0.0;
    bool same_len = hist[0].size() == hist[1].size() && !hist[0].empty();
    if (same_len) {
        for (std::size_t k = 0; k < hist[0].size(); ++k) {
            dev = std::max(dev, std::abs(hist[0][k].total - hist[1][k].total));
            for (std::size_t c = 0; c < obj::kComponents; ++c)
                dev = std::max(dev, std::abs(hist[0][k].components[c] - hist[1][k].components[c]));
        }
    }
    o.require(same_len, "histories have equal length");
    o.require(dev <= 1e-6, "per-step losses agree within 1e-6");
    o.require(slurp(r1.path() / "report.json") == slurp(r2.path() / "report.json"), "reports are bit-identical");
    o.require(slurp(r1.path() / "checkpoint" / "params.bin") == slurp(r2.path() / "checkpoint" / "params.bin"),
              "checkpoints are bit-identical");
    o.note(std::to_string(files) + " dataset files, " + std::to_string(hist[0].size()) + " steps x 2, max dev " + fmt(dev));
    return o;
}

// --- 6 ---

std::vector<std::pair<long, long>> as_pairs(const std::vector<data::NodePair>& p) {
    std::vector<std::pair<long, long>> out;
    for (const auto& e : p) out.emplace_back(e.u, e.v);
    return out;
}

Outcome oracles(int instances) {
    Outcome o;
    Rng rng(99);
    double worst = 0.0;
    bool auc_exact = true;
    auto track = [&](double a, double b) { worst = std::max(worst, std::abs(a - b)); };
    const auto mc = graph_model();
    for (int trial = 0; trial < instances; ++trial) {
        // AUC with ties.
        std::vector<double> pos(1 + rng.below(40)), neg(1 + rng.below(40));
        for (auto& s : pos) s = static_cast<double>(rng.below(8));
        for (auto& s : neg) s = static_cast<double>(rng.below(8)) - 1.0;
        auc_exact = auc_exact && eval::auc(pos, neg) == oracle::auc(pos, neg);

        // LM.
        const auto n = static_cast<ag::Index>(1 + rng.below(6)), v = static_cast<ag::Index>(2 + rng.below(20));
        const Matrix logits = random_matrix(n, v, rng, 2.0);
        std::vector<ag::Index> t;
        std::vector<long> tl;
        for (ag::Index i = 0; i < n; ++i) {
            t.push_back(static_cast<ag::Index>(rng.below(static_cast<std::uint64_t>(v))));
            tl.push_back(t.back());
        }
        const double eps = rng.uniform(0.0, 0.3);
        track(obj::lm_loss(Var::constant(logits), t, eps).item(), oracle::smoothed_ce(oracle::rows_of(logits), tl, eps));

        // ITA.
        const auto b = static_cast<ag::Index>(2 + rng.below(8)), d = static_cast<ag::Index>(2 + rng.below(8));
        const Matrix im = random_matrix(b, d, rng), tx = random_matrix(b, d, rng);
        const double tau = rng.uniform(0.05, 1.0);
        track(obj::ita_loss(Var::constant(im), Var::constant(tx), tau).item(),
              oracle::infonce(oracle::rows_of(im), oracle::rows_of(tx), tau));

        // NFM.
        const Matrix pr = random_matrix(b, d, rng), tr = random_matrix(b, d, rng);
        track(obj::nfm_loss(Var::constant(pr), Var::constant(tr)).item(),
              oracle::mse(oracle::rows_of(pr), oracle::rows_of(tr)));

        // GSM and GC on random pairs.
        const std::int64_t nodes = 12;
        std::vector<data::NodePair> pp, nn;
        for (int k = 0; k < 6; ++k) {
            pp.push_back({static_cast<std::int64_t>(rng.below(nodes)), static_cast<std::int64_t>(rng.below(nodes))});
            nn.push_back({static_cast<std::int64_t>(rng.below(nodes)), static_cast<std::int64_t>(rng.below(nodes))});
        }
        const Matrix rg = random_matrix(nodes, d, rng, 0.5);
        track(obj::gsm_loss(Var::constant(rg), pp, nn).item(), oracle::gsm(oracle::rows_of(rg), as_pairs(pp), as_pairs(nn)));

        const auto hidden = static_cast<ag::Index>(2 + rng.below(8));
        ParamStore head;
        head.add("gc_image.w1", random_matrix(2 * d, hidden, rng, 0.5));
        head.add("gc_image.b1", random_matrix(1, hidden, rng, 0.2));
        head.add("gc_image.w2", random_matrix(hidden, 2, rng, 0.5));
        head.add("gc_image.b2", random_matrix(1, 2, rng, 0.2));
        const oracle::PairHead oh{oracle::rows_of(head.get("gc_image.w1").value()),
                                  oracle::rows_of(head.get("gc_image.b1").value())[0],
                                  oracle::rows_of(head.get("gc_image.w2").value()),
                                  oracle::rows_of(head.get("gc_image.b2").value())[0]};
        track(obj::graph_contrastive_loss(head, "gc_image", Var::constant(rg), pp, nn).item(),
              oracle::gc(oh, oracle::rows_of(rg), as_pairs(pp), as_pairs(nn)));
        const auto rows = oracle::rows_of(rg);
        const auto prob = obj::pair_probability(head, "gc_image", Var::constant(rg.topRows(1)), Var::constant(rg.bottomRows(1)));
        track(prob.value()(0, 0), oracle::pair_prob(oh, rows.front(), rows.back()));

        // Gate softmax for one node.
        const auto p = gated_params(mc, 500 + static_cast<std::uint64_t>(trial));
        const auto nb_count = static_cast<ag::Index>(1 + rng.below(6));
        const Matrix x = random_matrix(nb_count + 1, mc.stat_dim, rng), ri = random_matrix(nb_count + 1, mc.embed_dim, rng),
                     rt = random_matrix(nb_count + 1, mc.embed_dim, rng);
        std::vector<data::NodePair> star;
        for (ag::Index k = 1; k <= nb_count; ++k) star.push_back({0, k});
        gnn::GateField gates;
        run_graph(p, mc, data::SocialGraph::from_edges(nb_count + 1, star), x, ri, rt, &gates);
        std::vector<double> wv;
        for (const auto& r : oracle::rows_of(p.get("graph.layer0.gate_w").value())) wv.push_back(r[0]);
        std::vector<std::vector<double>> concat;
        for (ag::Index k = 1; k <= nb_count; ++k) {
            std::vector<double> c;
            for (const auto& [m, row] : {std::pair{&x, ag::Index{0}}, {&x, k}, {&ri, ag::Index{0}}, {&rt, ag::Index{0}}, {&ri, k}, {&rt, k}})
                for (ag::Index j = 0; j < m->cols(); ++j) c.push_back((*m)(row, j));
            concat.push_back(c);
        }
        const auto want = oracle::gate_softmax(wv, p.get("graph.layer0.gate_b").value()(0, 0), concat);
        for (ag::Index k = 0; k < nb_count; ++k) track(gates.layers[0].weights.value()(k, 0), want[static_cast<std::size_t>(k)]);
    }
    o.require(auc_exact, "AUC equals brute-force pair counting exactly");
    o.require(worst < 1e-6, "losses, pair head and gates match oracles within 1e-6");
    o.note(std::to_string(instances) + " instances, max abs dev " + fmt(worst));
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mmga acceptance suite"};
    std::vector<int> only;
    int det_epochs = 2;
    app.add_option("--only", only, "criteria to run (default: all)")->check(CLI::Range(1, 6));
    app.add_option("--determinism-epochs", det_epochs, "epochs per determinism run")->check(CLI::PositiveNumber);
    CLI11_PARSE(app, argc, argv);
    auto want = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

    const std::vector<std::pair<int, std::function<Outcome()>>> suite = {
        {1, gradients},
        {2, invariants},
        {3, closed_forms},
        {4, learnability},
        {5, [&] { return determinism(det_epochs); }},
        {6, [] { return oracles(100); }},
    };
    bool all = true;
    for (const auto& [id, fn] : suite) {
        if (!want(id)) continue;
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("exception: ") + e.what();
        }
        all = all && o.pass;
        std::printf("criterion %d: %s  %s\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
        std::fflush(stdout);
    }
    return all ? 0 : 1;
}
