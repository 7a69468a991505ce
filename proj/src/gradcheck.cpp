#include <algorithm>
#include <cmath>
#include <numeric>

#include "mmga/error.hpp"
#include "mmga/harness.hpp"
#include "mmga/rng.hpp"

namespace mmga::train {

namespace {

std::vector<ag::Index> pick_coords(ag::Index size, std::size_t max_coords, std::uint64_t seed) {
    std::vector<ag::Index> all(static_cast<std::size_t>(size));
    std::iota(all.begin(), all.end(), 0);
    if (max_coords == 0 || all.size() <= max_coords) return all;
    Rng rng(seed);
    rng.shuffle(all);
    all.resize(max_coords);
    std::sort(all.begin(), all.end());
    return all;
}

std::uint64_t name_seed(const std::string& name, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (unsigned char c : name) h = mix64(h ^ c);
    return h;
}

}  // namespace

GradCheckReport compare_gradients(ParamStore& params, const std::vector<std::string>& names,
                                  const std::function<double()>& probe,
                                  const std::map<std::string, ag::Matrix>& analytic, const GradCheckOptions& options) {
    if (!(options.h > 0.0)) fail(ErrorCode::InvalidArgument, "grad_check: step must be positive");
    const double f0 = probe();
    const double f1 = probe();
    if (!(f0 == f1)) {
        fail(ErrorCode::Nondeterministic, "grad_check: probe returned " + std::to_string(f0) + " then " +
                                              std::to_string(f1) + " at the same point");
    }
    GradCheckReport report;
    for (const auto& name : names) {
        ag::Matrix& w = params.get(name).mutable_value();
        const auto it = analytic.find(name);
        if (it == analytic.end() || it->second.rows() != w.rows() || it->second.cols() != w.cols()) {
            fail(ErrorCode::ShapeMismatch, "grad_check: no analytic gradient of matching shape for " + name);
        }
        for (ag::Index k : pick_coords(w.size(), options.max_coords_per_param, name_seed(name, options.seed))) {
            const double saved = w.data()[k];
            w.data()[k] = saved + options.h;
            const double fp = probe();
            w.data()[k] = saved - options.h;
            const double fm = probe();
            w.data()[k] = saved;
            const double numeric = (fp - fm) / (2.0 * options.h);
            const double a = it->second.data()[k];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
            ++report.coords;
            if (report.worst_index < 0 || !(rel <= report.max_rel_error)) {
                report.max_rel_error = std::isfinite(rel) ? rel : INFINITY;
                report.worst_param = name;
                report.worst_index = k;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    return report;
}

GradCheckReport grad_check(ParamStore& params, const std::vector<std::string>& names,
                           const std::function<ag::Var()>& probe, const GradCheckOptions& options) {
    params.zero_grad();
    const ag::Var root = probe();
    if (root.rows() != 1 || root.cols() != 1) fail(ErrorCode::ShapeMismatch, "grad_check: probe must be scalar");
    if (root.requires_grad()) ag::backward(root);
    std::map<std::string, ag::Matrix> analytic;
    for (const auto& name : names) {
        const ag::Var& v = params.get(name);
        analytic[name] = v.grad().size() ? v.grad() : ag::Matrix::Zero(v.rows(), v.cols());
    }
    params.zero_grad();
    return compare_gradients(
        params, names,
        [&] {
            ag::NoGradGuard guard;
            return probe().item();
        },
        analytic, options);
}

TinyGradCheck tiny_gradcheck(const GradCheckOptions& options) {
    data::DatasetConfig dc;
    dc.n_users = 12;
    dc.k_topics = 2;
    dc.posts_per_user = 2;
    dc.p_in = 0.6;
    dc.p_out = 0.1;
    dc.vocab_size = 16;
    dc.max_tokens = 8;
    dc.image = {1, 16, 16};
    dc.stat_dim = 4;
    dc.seed = 3;
    const auto gen = data::generate_dataset(dc, dc.seed);

    ModelConfig mc;
    mc.embed_dim = 16;
    mc.n_layers = 2;
    mc.n_heads = 2;
    mc.patch_size = 8;
    mc.mlp_dim = 32;
    mc.gnn_layers = 2;
    mc.head_hidden = 16;
    bind_to_dataset(mc, gen.dataset.meta);

    TrainConfig tc;
    tc.batch_size = static_cast<int>(dc.n_users * dc.posts_per_user);
    tc.token_mask_rate = 0.3;
    tc.node_mask_rate = 0.5;
    tc.edge_mask_rate = 0.3;
    tc.gc_pairs = 8;
    tc.optimizer = OptimizerKind::Sgd;
    tc.seed = 11;

    ModelState state = init_state(mc, tc);
    const TrainData data = prepare_data(gen.dataset, gen.graph);
    std::vector<std::int64_t> users(static_cast<std::size_t>(dc.n_users));
    std::iota(users.begin(), users.end(), 0);
    const std::uint64_t seed = step_seed(tc, 0);

    {
        const auto b = compute_losses(state, data, tc, users, seed, tc.weights);
        for (std::size_t i = 0; i < obj::kComponents; ++i) {
            if (b.terms[i].empty) {
                fail(ErrorCode::Validation, "tiny gradcheck instance leaves the " + std::string(obj::kComponentNames[i]) +
                                                " loss empty");
            }
        }
    }

    TinyGradCheck out;
    for (std::size_t c = 0; c <= obj::kComponents; ++c) {
        LossWeights w{0, 0, 0, 0, 0, 0};
        std::string probe_name = "total";
        if (c < obj::kComponents) {
            probe_name = std::string(obj::kComponentNames[c]);
            std::array<double*, obj::kComponents> slots = {&w.lm, &w.ita, &w.nfm, &w.gsm, &w.gc_image, &w.gc_text};
            *slots[c] = 1.0;
        } else {
            w = tc.weights;
        }
        auto probe = [&] { return compute_losses(state, data, tc, users, seed, w).total; };

        // Groups reached by this loss: any parameter receiving a gradient.
        state.params.zero_grad();
        ag::backward(probe());
        std::vector<std::string> reached;
        for (const auto& g : state.params.groups()) {
            for (const auto& name : state.params.group(g)) {
                const auto& gr = state.params.get(name).grad();
                if (gr.size() && gr.cwiseAbs().maxCoeff() > 0.0) {
                    reached.push_back(g);
                    break;
                }
            }
        }
        state.params.zero_grad();
        for (const auto& g : reached) {
            GroupCheck gc{probe_name, g, grad_check(state.params, state.params.group(g), probe, options)};
            out.max_rel_error = std::max(out.max_rel_error, gc.report.max_rel_error);
            out.checks.push_back(std::move(gc));
        }
    }
    return out;
}

}  // namespace mmga::train
