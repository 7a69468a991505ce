// Command-line surface: data generation, pre-training, fine-tuning,
// evaluation, gradient checks and reports.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"
#include "mmga/config.hpp"
#include "mmga/dataset.hpp"
#include "mmga/digest.hpp"
#include "mmga/error.hpp"
#include "mmga/eval.hpp"
#include "mmga/harness.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;
using namespace mmga;

namespace {

void write_json(const fs::path& path, const ordered_json& j) {
    std::ofstream out(path, std::ios::trunc);
    out << j.dump(2) << "\n";
    if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::Io, "missing file: " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::Validation, path.string() + ": " + e.what());
    }
}

ordered_json pairs_json(const std::vector<data::NodePair>& pairs) {
    ordered_json a = ordered_json::array();
    for (const auto& p : pairs) a.push_back({p.u, p.v});
    return a;
}

std::vector<data::NodePair> pairs_from(const nlohmann::json& a) {
    std::vector<data::NodePair> out;
    for (const auto& p : a) out.push_back({p.at(0).get<std::int64_t>(), p.at(1).get<std::int64_t>()});
    return out;
}

void record_timing(const fs::path& run_dir, const std::string& key, double seconds) {
    ordered_json t = ordered_json::object();
    if (fs::exists(run_dir / "timing.json")) t = read_json(run_dir / "timing.json");
    t[key] = seconds;
    write_json(run_dir / "timing.json", t);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Run {
    data::GeneratedData data;
    data::EdgeSplit split;
    train::Checkpoint checkpoint;
};

Run load_run(const fs::path& run_dir, const fs::path& checkpoint_dir) {
    const auto info = read_json(run_dir / "run.json");
    Run r;
    r.data = data::load_dataset(info.at("data").get<std::string>());
    const auto split = read_json(run_dir / "split.json");
    r.split.heldout_pos = pairs_from(split.at("heldout_pos"));
    r.split.heldout_neg = pairs_from(split.at("heldout_neg"));
    const std::set<data::NodePair> held(r.split.heldout_pos.begin(), r.split.heldout_pos.end());
    std::vector<data::NodePair> kept;
    for (const auto& e : r.data.graph.edges) {
        if (!held.contains(e)) kept.push_back(e);
    }
    if (kept.size() + held.size() != r.data.graph.edges.size()) {
        fail(ErrorCode::Validation, "split.json holds pairs that are not edges of the dataset graph");
    }
    r.split.train_graph = data::SocialGraph::from_edges(r.data.graph.n_nodes, std::move(kept));
    r.checkpoint = train::load_checkpoint(checkpoint_dir);
    ModelConfig expected = r.checkpoint.config.model;
    bind_to_dataset(expected, r.data.dataset.meta);
    if (!(expected == r.checkpoint.state.model)) {
        fail(ErrorCode::ShapeMismatch, "checkpoint does not match the dataset meta");
    }
    return r;
}

int cmd_gen_data(const fs::path& config, const fs::path& out) {
    const auto cfg = dataset_config_from(read_key_value_file(config), config.string());
    const auto gen = data::generate_dataset(cfg, cfg.seed);
    const auto manifest = data::save_dataset(gen.dataset, gen.graph, out);
    ordered_json j;
    j["out"] = out.string();
    j["n_users"] = gen.dataset.users.size();
    j["n_posts"] = gen.dataset.posts.size();
    j["n_edges"] = gen.graph.edge_count();
    j["files"] = manifest.size();
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_pretrain(const fs::path& data_dir, const fs::path& config, const fs::path& run_dir, bool quiet) {
    const auto t0 = std::chrono::steady_clock::now();
    const RunConfig cfg = run_config_from(read_key_value_file(config), config.string());
    const auto gen = data::load_dataset(data_dir);
    const auto split = data::split_edges(gen.graph, cfg.train.link_holdout, cfg.train.seed);
    fs::create_directories(run_dir);

    ordered_json info;
    info["data"] = fs::weakly_canonical(fs::absolute(data_dir)).string();
    info["dataset_seed"] = gen.dataset.meta.config.seed;
    info["dataset_manifest_sha256"] = sha256_file(data_dir / "manifest.json");
    write_json(run_dir / "run.json", info);
    {
        std::ofstream out(run_dir / "config.txt", std::ios::trunc);
        out << format_key_values(to_key_values(cfg));
    }
    ordered_json sj;
    sj["holdout_frac"] = cfg.train.link_holdout;
    sj["seed"] = cfg.train.seed;
    sj["heldout_pos"] = pairs_json(split.heldout_pos);
    sj["heldout_neg"] = pairs_json(split.heldout_neg);
    write_json(run_dir / "split.json", sj);

    train::PretrainOptions opts;
    opts.run_dir = run_dir;
    if (!quiet) {
        opts.on_step = [&](const train::HistoryRecord& r) {
            std::fprintf(stderr, "step %lld epoch %d total %.4f (%.1fs)\n", static_cast<long long>(r.step), r.epoch,
                         r.total, seconds_since(t0));
        };
    }
    const auto result = train::pretrain(gen.dataset, split.train_graph, cfg, opts);
    record_timing(run_dir, "pretrain_seconds", seconds_since(t0));
    ordered_json j;
    j["run"] = run_dir.string();
    j["steps"] = result.history.size();
    if (!result.history.empty()) j["final_total"] = result.history.back().total;
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_finetune(const fs::path& run_dir, const std::string& task_name, bool unfreeze, std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    const eval::Task task = eval::parse_task(task_name);
    Run run = load_run(run_dir, run_dir / "checkpoint");
    eval::ProbeConfig pc;
    pc.seed = seed;
    const ModelConfig& mc = run.checkpoint.state.model;
    eval::FinetuneResult result;
    fs::path used_checkpoint = "checkpoint";
    if (unfreeze) {
        result = eval::finetune_unfrozen(run.checkpoint.state.params, mc, run.data.dataset, run.split.train_graph, task, pc);
        used_checkpoint = "finetune_" + task_name + "_checkpoint";
        train::save_checkpoint(run.checkpoint.state, run.checkpoint.config, {}, run_dir / used_checkpoint);
    } else {
        const auto r = eval::user_representation(run.checkpoint.state.params, mc, run.data.dataset, run.split.train_graph);
        result = eval::finetune(r, eval::task_labels(run.data.dataset, task), task, pc);
    }
    ordered_json j = result.report();
    j["seed"] = seed;
    j["train_frac"] = pc.train_frac;
    j["unfrozen"] = unfreeze;
    j["checkpoint"] = used_checkpoint.string();
    for (const auto& s : result.slices) {
        if (s.slice == eval::Slice::Full) j["head"] = eval::head_to_json(s.head);
    }
    write_json(run_dir / ("finetune_" + task_name + ".json"), j);
    record_timing(run_dir, "finetune_" + task_name + "_seconds", seconds_since(t0));
    ordered_json summary;
    summary["task"] = task_name;
    summary["metrics"] = j["metrics"];
    std::cout << summary.dump() << "\n";
    return 0;
}

int cmd_eval(const fs::path& run_dir, bool link_auc) {
    const auto t0 = std::chrono::steady_clock::now();
    ordered_json out;
    bool any = false;
    Run run = load_run(run_dir, run_dir / "checkpoint");
    for (const char* name : {"content", "fans"}) {
        const auto path = run_dir / ("finetune_" + std::string(name) + ".json");
        if (!fs::exists(path)) continue;
        const auto ft = read_json(path);
        const eval::Task task = eval::parse_task(name);
        const auto ck_dir = run_dir / ft.at("checkpoint").get<std::string>();
        const auto ck = train::load_checkpoint(ck_dir, &run.checkpoint.state.model);
        const auto r = eval::user_representation(ck.state.params, ck.state.model, run.data.dataset, run.split.train_graph);
        const auto labels = eval::task_labels(run.data.dataset, task);
        const auto split = eval::stratified_split(labels, ft.at("train_frac").get<double>(), ft.at("seed").get<std::uint64_t>());
        const auto head = eval::head_from_json(ft.at("head"));
        out["tasks"][name] = eval::task_metrics(task, head, r, labels, split.test);
        any = true;
    }
    if (link_auc) {
        const auto t = eval::modal_tables(run.checkpoint.state.params, run.checkpoint.state.model, run.data.dataset,
                                          run.split.train_graph);
        out["link_auc"] = eval::eval_link_auc(t.r_g, run.split.heldout_pos, run.split.heldout_neg);
        out["heldout_pairs"] = run.split.heldout_pos.size();
        const auto gi = eval::cosine_gap(t.r_image, run.split.train_graph, run.checkpoint.config.train.seed);
        const auto gt = eval::cosine_gap(t.r_text, run.split.train_graph, run.checkpoint.config.train.seed);
        out["image_cosine"] = {{"connected", gi.connected}, {"random", gi.random}, {"gap", gi.gap()}};
        out["text_cosine"] = {{"connected", gt.connected}, {"random", gt.random}, {"gap", gt.gap()}};
        any = true;
    }
    if (!any) fail(ErrorCode::InvalidArgument, "nothing to evaluate: run finetune first or pass --link-auc");
    write_json(run_dir / "eval.json", out);
    record_timing(run_dir, "eval_seconds", seconds_since(t0));
    std::cout << out.dump() << "\n";
    return 0;
}

int cmd_gradcheck(const std::string& size, std::size_t max_coords) {
    if (size != "tiny") fail(ErrorCode::InvalidArgument, "unknown gradcheck size '" + size + "' (expected tiny)");
    const auto t0 = std::chrono::steady_clock::now();
    train::GradCheckOptions opts;
    opts.max_coords_per_param = max_coords;
    const auto result = train::tiny_gradcheck(opts);
    ordered_json checks = ordered_json::array();
    for (const auto& c : result.checks) {
        ordered_json j;
        j["loss"] = c.probe;
        j["group"] = c.group;
        j["max_rel_error"] = c.report.max_rel_error;
        j["coords"] = c.report.coords;
        j["worst"] = c.report.worst_param + "[" + std::to_string(c.report.worst_index) + "]";
        checks.push_back(j);
    }
    const bool pass = result.max_rel_error < 1e-3;
    ordered_json out;
    out["size"] = size;
    out["max_rel_error"] = result.max_rel_error;
    out["pass"] = pass;
    out["seconds"] = seconds_since(t0);
    out["checks"] = checks;
    std::cout << out.dump() << "\n";
    return pass ? 0 : 3;
}

int cmd_report(const fs::path& run_dir) {
    const auto files = eval::make_report(run_dir);
    ordered_json out;
    out["report"] = files.front().string();
    out["plots"] = files.size() - 1;
    std::cout << out.dump() << "\n";
    return 0;
}

void print_error(std::string_view code, const std::string& message) {
    nlohmann::json j;
    j["error"] = code;
    j["message"] = message;
    std::cerr << j.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multimodal graph-alignment pre-training toolkit"};
    app.require_subcommand(1);

    fs::path config, out, data_dir, run_dir;
    std::string task;
    std::string size = "tiny";
    bool link_auc = false;
    bool quiet = false;
    bool unfreeze = false;
    std::uint64_t probe_seed = 5;
    std::size_t max_coords = 0;

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
    gen->add_option("--config", config, "key = value generator config")->required();
    gen->add_option("--out", out, "output directory")->required();

    auto* pre = app.add_subcommand("pretrain", "Run joint pre-training");
    pre->add_option("--data", data_dir, "dataset directory")->required();
    pre->add_option("--config", config, "key = value run config")->required();
    pre->add_option("--out", run_dir, "run directory")->required();
    pre->add_flag("--quiet", quiet, "no per-step progress on stderr");

    auto* ft = app.add_subcommand("finetune", "Fit a probe on the user representation");
    ft->add_option("--run", run_dir, "run directory")->required();
    ft->add_option("--task", task, "content|fans")->required()->check(CLI::IsMember({"content", "fans"}));
    ft->add_flag("--unfreeze", unfreeze, "also update the graph encoder");
    ft->add_option("--seed", probe_seed, "split seed");

    auto* ev = app.add_subcommand("eval", "Evaluate stored probes and link prediction");
    ev->add_option("--run", run_dir, "run directory")->required();
    ev->add_flag("--link-auc", link_auc, "held-out link-prediction AUC");

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check");
    gc->add_option("--size", size, "instance size")->required();
    gc->add_option("--max-coords", max_coords, "coordinates per array (0 = all)");

    auto* rep = app.add_subcommand("report", "Write report.json and loss plots");
    rep->add_option("--run", run_dir, "run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("usage", e.what());
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(config, out);
        if (pre->parsed()) return cmd_pretrain(data_dir, config, run_dir, quiet);
        if (ft->parsed()) return cmd_finetune(run_dir, task, unfreeze, probe_seed);
        if (ev->parsed()) return cmd_eval(run_dir, link_auc);
        if (gc->parsed()) return cmd_gradcheck(size, max_coords);
        if (rep->parsed()) return cmd_report(run_dir);
    } catch (const Error& e) {
        print_error(to_string(e.code()), e.what());
        return 1;
    } catch (const std::exception& e) {
        print_error("internal", e.what());
        return 1;
    }
    return 1;
}
