#include "kvcomm/experiments.hpp"

#include <atomic>
#include <thread>

#include "kvcomm/comm.hpp"

namespace kvcomm {

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  unsigned max_workers) {
    if (n == 0) return;
    unsigned workers = max_workers ? max_workers : std::thread::hardware_concurrency();
    if (workers == 0) workers = 2;
    workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    for (std::thread& t : pool) t.join();
}

namespace {

std::vector<std::uint32_t> kvcomm_tokens(const Model& sender, const Model& receiver,
                                         const std::vector<std::uint32_t>& context,
                                         const std::vector<std::uint32_t>& query,
                                         const std::vector<std::uint32_t>& layers,
                                         std::uint32_t max_new) {
    KvPayload payload = sender_run(sender, context, layers, KvDtype::F32);
    return receiver_run(receiver, query, payload, max_new).tokens;
}

void stamp_models(ExperimentGrid& grid, const Model& sender, const Model& receiver) {
    grid.metadata.emplace_back("sender_model_id", std::to_string(sender.model_id()));
    grid.metadata.emplace_back("receiver_model_id", std::to_string(receiver.model_id()));
}

} // namespace

ExperimentGrid grid_token_importance(const Model& model,
                                     const std::vector<std::uint32_t>& prompt,
                                     TokenAblation mode) {
    const std::uint32_t L = model.config().n_layers;
    ExperimentGrid grid;
    grid.kind = mode == TokenAblation::Remove ? "token-importance-remove"
                                              : "token-importance-retain";
    grid.row_axis = "layer";
    grid.col_axis = "position";
    for (std::uint32_t l = 0; l < L; ++l) grid.row_labels.push_back(l);
    for (std::size_t p = 0; p < prompt.size(); ++p)
        grid.col_labels.push_back(static_cast<double>(p));
    grid.cells.assign(grid.rows() * grid.cols(), 0.0);
    grid.metadata.emplace_back("model_id", std::to_string(model.model_id()));
    grid.metadata.emplace_back("metric", "kl");

    parallel_for(grid.rows() * grid.cols(), [&](std::size_t idx) {
        const std::uint32_t l = static_cast<std::uint32_t>(idx / grid.cols());
        const std::uint32_t p = static_cast<std::uint32_t>(idx % grid.cols());
        grid.cells[idx] = run_token_importance(model, prompt, mode, p, l).kl;
    });
    return grid;
}

ExperimentGrid grid_hs_prepend(const Model& sender, const Model& receiver,
                               const std::vector<std::uint32_t>& context,
                               const std::vector<std::uint32_t>& query, std::uint32_t max_new) {
    const std::uint32_t L = receiver.config().n_layers;
    const std::vector<std::uint32_t> reference =
        run_skyline(receiver, context, query, max_new).tokens;

    ExperimentGrid grid;
    grid.kind = "hs-prepend";
    grid.row_axis = "layer_from";
    grid.col_axis = "layer_to";
    for (std::uint32_t l = 0; l < L; ++l) {
        grid.row_labels.push_back(l);
        grid.col_labels.push_back(l);
    }
    grid.cells.assign(grid.rows() * grid.cols(), 0.0);
    stamp_models(grid, sender, receiver);
    grid.metadata.emplace_back("metric", "skyline_token_agreement");

    parallel_for(grid.rows() * grid.cols(), [&](std::size_t idx) {
        const std::uint32_t from = static_cast<std::uint32_t>(idx / L);
        const std::uint32_t to = static_cast<std::uint32_t>(idx % L);
        const std::vector<std::uint32_t> tokens =
            run_hs_prepend(sender, receiver, context, query, from, to, max_new).tokens;
        grid.cells[idx] = token_agreement(tokens, reference);
    });
    return grid;
}

ExperimentGrid grid_chunk(const Model& sender, const Model& receiver,
                          const std::vector<std::uint32_t>& context,
                          const std::vector<std::uint32_t>& query, std::uint32_t max_new) {
    const std::uint32_t L = receiver.config().n_layers;
    const std::vector<std::uint32_t> reference =
        run_skyline(receiver, context, query, max_new).tokens;

    ExperimentGrid grid;
    grid.kind = "chunk";
    grid.row_axis = "layer_from";
    grid.col_axis = "layer_to";
    for (std::uint32_t l = 0; l < L; ++l) {
        grid.row_labels.push_back(l);
        grid.col_labels.push_back(l);
    }
    grid.cells.assign(grid.rows() * grid.cols(), -1.0);
    stamp_models(grid, sender, receiver);
    grid.metadata.emplace_back("metric", "skyline_token_agreement");
    grid.metadata.emplace_back("invalid_cell", "-1");

    parallel_for(grid.rows() * grid.cols(), [&](std::size_t idx) {
        const std::uint32_t from = static_cast<std::uint32_t>(idx / L);
        const std::uint32_t to = static_cast<std::uint32_t>(idx % L);
        if (from > to) return;
        const std::vector<std::uint32_t> tokens = kvcomm_tokens(
            sender, receiver, context, query, select_chunk(from, to, L), max_new);
        grid.cells[idx] = token_agreement(tokens, reference);
    });
    return grid;
}

ExperimentGrid grid_attention_level(const Model& sender, const Model& receiver,
                                    const std::vector<std::uint32_t>& context,
                                    const std::vector<std::uint32_t>& query, std::uint32_t m,
                                    std::uint32_t n_levels, std::uint32_t max_new) {
    if (n_levels < 2) throw ConfigError("grid_attention_level: need at least 2 levels");
    SelectionConfig cfg = SelectionConfig::defaults(receiver.config().n_layers);
    cfg.alpha = 1.0; // rank purely by attention importance
    cfg.m = m;
    const CalibrationResult cal = calibrate(receiver, context, query, cfg);
    const std::vector<std::uint32_t> reference =
        run_skyline(receiver, context, query, max_new).tokens;

    ExperimentGrid grid;
    grid.kind = "attn-level";
    grid.row_axis = "level";
    grid.col_axis = "metric";
    grid.col_labels.push_back(0);
    for (std::uint32_t i = 0; i < n_levels; ++i)
        grid.row_labels.push_back(static_cast<double>(i) / (n_levels - 1));
    grid.cells.assign(grid.rows(), 0.0);
    stamp_models(grid, sender, receiver);
    grid.metadata.emplace_back("metric", "skyline_token_agreement");
    grid.metadata.emplace_back("m", std::to_string(m));

    parallel_for(grid.rows(), [&](std::size_t idx) {
        const std::vector<std::uint32_t> layers =
            select_by_attention_level(cal.scores.normalized, m, grid.row_labels[idx]);
        grid.cells[idx] =
            token_agreement(kvcomm_tokens(sender, receiver, context, query, layers, max_new),
                            reference);
    });
    return grid;
}

ExperimentGrid grid_random_vs_kvcomm(const Model& sender, const Model& receiver,
                                     const std::vector<std::uint32_t>& context,
                                     const std::vector<std::uint32_t>& query,
                                     const std::vector<double>& ratios, std::uint32_t n_seeds,
                                     std::uint32_t max_new, const SelectionConfig& config) {
    const std::uint32_t L = receiver.config().n_layers;
    const std::vector<std::uint32_t> reference =
        run_skyline(receiver, context, query, max_new).tokens;

    ExperimentGrid grid;
    grid.kind = "random-vs-kvcomm";
    grid.row_axis = "ratio";
    grid.col_axis = "method";
    grid.row_labels = ratios;
    grid.col_labels = {0, 1}; // 0 = score selection, 1 = random mean
    grid.cells.assign(grid.rows() * 2, 0.0);
    stamp_models(grid, sender, receiver);
    grid.metadata.emplace_back("metric", "skyline_token_agreement");
    grid.metadata.emplace_back("columns", "kvcomm,random_mean");
    grid.metadata.emplace_back("random_seeds", std::to_string(n_seeds));

    for (std::size_t r = 0; r < ratios.size(); ++r) {
        SelectionConfig cfg = config;
        cfg.m = 0;
        cfg.ratio = ratios[r];
        const std::uint32_t m = resolve_m(L, ratios[r]);
        const CalibrationResult cal = calibrate(receiver, context, query, cfg);
        grid.at(r, 0) = token_agreement(
            kvcomm_tokens(sender, receiver, context, query, cal.layers, max_new), reference);

        double sum = 0.0;
        for (std::uint32_t s = 0; s < n_seeds; ++s)
            sum += token_agreement(
                kvcomm_tokens(sender, receiver, context, query, select_random(L, m, s), max_new),
                reference);
        grid.at(r, 1) = sum / n_seeds;
    }
    return grid;
}

ExperimentGrid grid_flops_sweep(const Model& sender, const Model& receiver,
                                const std::vector<std::uint32_t>& context,
                                const std::vector<std::uint32_t>& query,
                                const std::vector<double>& ratios, std::uint32_t max_new,
                                const SelectionConfig& config) {
    const std::uint32_t L = receiver.config().n_layers;
    const cost::EngineDims dims = cost::EngineDims::from_config(receiver.config());

    // skyline reference, instrumented
    const std::uint64_t before_sky = matmul_flops();
    run_skyline(receiver, context, query, max_new);
    const std::uint64_t skyline_flops = matmul_flops() - before_sky;

    ExperimentGrid grid;
    grid.kind = "flops-sweep";
    grid.row_axis = "m";
    grid.col_axis = "metric";
    grid.col_labels = {0, 1, 2}; // receiver instrumented, receiver analytic, skyline ratio
    stamp_models(grid, sender, receiver);
    grid.metadata.emplace_back("columns",
                               "receiver_flops_instrumented,receiver_flops_analytic,"
                               "skyline_over_kvcomm_receiver");
    grid.metadata.emplace_back("skyline_receiver_flops", std::to_string(skyline_flops));

    for (double ratio : ratios) {
        SelectionConfig cfg = config;
        cfg.m = 0;
        cfg.ratio = ratio;
        const CalibrationResult cal = calibrate(receiver, context, query, cfg);

        Session session;
        session.sender = &sender;
        session.receiver = &receiver;
        session.layers = cal.layers;
        EndToEndResult run = end_to_end(session, context, query, max_new);

        cost::CostParams p;
        p.n_layers = L;
        p.selected = cal.layers.size();
        p.d = dims.d;
        p.context = context.size();
        p.query = query.size();
        p.generated = run.receiver.tokens.size();
        const std::uint64_t analytic = cost::analytic_kvcomm(dims, p).receiver_total();
        const std::uint64_t instrumented =
            run.cost.receiver_prefill_flops + run.cost.receiver_decode_flops;

        grid.row_labels.push_back(static_cast<double>(cal.layers.size()));
        grid.cells.push_back(static_cast<double>(instrumented));
        grid.cells.push_back(static_cast<double>(analytic));
        grid.cells.push_back(static_cast<double>(skyline_flops) /
                             static_cast<double>(instrumented));
    }
    return grid;
}

} // namespace kvcomm
