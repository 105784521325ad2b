#include <doctest.h>

#include <random>

#include "kvcomm/experiments.hpp"

using namespace kvcomm;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.n_layers = 4;
    c.n_heads = 2;
    c.n_kv_heads = 2;
    c.head_dim = 8;
    c.d_model = 16;
    c.d_ff = 32;
    c.vocab_size = 64;
    return c;
}

std::vector<std::uint32_t> random_tokens(std::size_t n, std::uint32_t vocab, std::mt19937& rng) {
    std::vector<std::uint32_t> out(n);
    for (auto& t : out) t = rng() % vocab;
    return out;
}

} // namespace

TEST_CASE("parallel_for covers every index once") {
    std::vector<std::atomic<int>> hits(64);
    parallel_for(64, [&](std::size_t i) { hits[i].fetch_add(1); });
    for (auto& h : hits) CHECK(h.load() == 1);
    parallel_for(0, [](std::size_t) { FAIL("must not be called"); });
}

TEST_CASE("chunk grid is upper-triangular and rerun-identical") {
    const ModelConfig cfg = tiny_config();
    Model model = Model::build(cfg, 11);
    std::mt19937 rng(1);
    auto context = random_tokens(4, cfg.vocab_size, rng);
    auto query = random_tokens(3, cfg.vocab_size, rng);

    ExperimentGrid grid = grid_chunk(model, model, context, query, 4);
    CHECK(grid.rows() == cfg.n_layers);
    CHECK(grid.cols() == cfg.n_layers);
    for (std::size_t r = 0; r < grid.rows(); ++r)
        for (std::size_t c = 0; c < grid.cols(); ++c) {
            if (r > c)
                CHECK(grid.at(r, c) == -1.0);
            else {
                CHECK(grid.at(r, c) >= 0.0);
                CHECK(grid.at(r, c) <= 1.0);
            }
        }

    ExperimentGrid again = grid_chunk(model, model, context, query, 4);
    CHECK(grid.to_csv() == again.to_csv());
    CHECK(grid.to_json() == again.to_json());
}

TEST_CASE("hs-prepend grid is rectangular with embedding-level row at 1") {
    const ModelConfig cfg = tiny_config();
    Model model = Model::build(cfg, 12);
    std::mt19937 rng(2);
    auto context = random_tokens(4, cfg.vocab_size, rng);
    auto query = random_tokens(3, cfg.vocab_size, rng);

    ExperimentGrid grid = grid_hs_prepend(model, model, context, query, 4);
    CHECK(grid.rows() == cfg.n_layers);
    CHECK(grid.cols() == cfg.n_layers);
    // identical models at (0,0) replay skyline exactly
    CHECK(grid.at(0, 0) == 1.0);
}

TEST_CASE("token-importance grid covers layers x positions") {
    const ModelConfig cfg = tiny_config();
    Model model = Model::build(cfg, 13);
    std::mt19937 rng(3);
    auto prompt = random_tokens(5, cfg.vocab_size, rng);

    ExperimentGrid grid = grid_token_importance(model, prompt, TokenAblation::Remove);
    CHECK(grid.rows() == cfg.n_layers);
    CHECK(grid.cols() == prompt.size());
    for (double v : grid.cells) CHECK(v >= 0.0);

    ExperimentGrid again = grid_token_importance(model, prompt, TokenAblation::Remove);
    CHECK(grid.to_csv() == again.to_csv());
}

TEST_CASE("attention-level grid emits one row per level") {
    const ModelConfig cfg = tiny_config();
    Model model = Model::build(cfg, 14);
    std::mt19937 rng(4);
    auto context = random_tokens(4, cfg.vocab_size, rng);
    auto query = random_tokens(3, cfg.vocab_size, rng);

    ExperimentGrid grid = grid_attention_level(model, model, context, query, 2, 9, 4);
    CHECK(grid.rows() == 9);
    CHECK(grid.cols() == 1);
    CHECK(grid.row_labels.front() == 0.0);
    CHECK(grid.row_labels.back() == 1.0);
}

TEST_CASE("random-vs-kvcomm grid shape") {
    const ModelConfig cfg = tiny_config();
    Model model = Model::build(cfg, 15);
    std::mt19937 rng(5);
    auto context = random_tokens(4, cfg.vocab_size, rng);
    auto query = random_tokens(3, cfg.vocab_size, rng);

    SelectionConfig sel = SelectionConfig::defaults(cfg.n_layers);
    ExperimentGrid grid =
        grid_random_vs_kvcomm(model, model, context, query, {0.3, 0.5, 0.7}, 3, 4, sel);
    CHECK(grid.rows() == 3);
    CHECK(grid.cols() == 2);
}

TEST_CASE("flops sweep: receiver cost grows with M and matches the analytic model") {
    const ModelConfig cfg = tiny_config();
    Model model = Model::build(cfg, 16);
    std::mt19937 rng(6);
    auto context = random_tokens(6, cfg.vocab_size, rng);
    auto query = random_tokens(3, cfg.vocab_size, rng);

    SelectionConfig sel = SelectionConfig::defaults(cfg.n_layers);
    ExperimentGrid grid =
        grid_flops_sweep(model, model, context, query, {0.25, 0.5, 0.75, 1.0}, 4, sel);
    REQUIRE(grid.rows() == 4);
    for (std::size_t r = 1; r < 4; ++r) {
        CHECK(grid.row_labels[r] > grid.row_labels[r - 1]);  // M grows
        CHECK(grid.at(r, 0) > grid.at(r - 1, 0));            // instrumented receiver flops grow
    }
    for (std::size_t r = 0; r < 4; ++r) CHECK(grid.at(r, 0) == grid.at(r, 1)); // analytic exact
}
