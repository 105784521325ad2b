// kvcomm: operator surface for the selective KV-sharing pipeline.
//
// Exit codes: 0 ok, 2 configuration error, 3 protocol/transport error,
// 4 oracle-check failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

#include "kvcomm/baselines.hpp"
#include "kvcomm/comm.hpp"
#include "kvcomm/cost_model.hpp"
#include "kvcomm/experiments.hpp"
#include "kvcomm/selection.hpp"

using json = nlohmann::json;
using namespace kvcomm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitProtocol = 3;
constexpr int kExitOracle = 4;

struct OracleCheckFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::vector<std::uint32_t> read_token_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open token file " + path);
    std::vector<std::uint32_t> tokens;
    long long v;
    while (is >> v) {
        if (v < 0) throw ConfigError("negative token id in " + path);
        tokens.push_back(static_cast<std::uint32_t>(v));
    }
    return tokens;
}

// toy byte-level tokenizer for convenience (vocab 256)
std::vector<std::uint32_t> tokenize_bytes(const std::string& text) {
    std::vector<std::uint32_t> tokens;
    tokens.reserve(text.size());
    for (unsigned char c : text) tokens.push_back(c);
    return tokens;
}

std::vector<std::uint32_t> load_tokens(const std::string& file, const std::string& text,
                                       const char* which) {
    if (!file.empty() && !text.empty())
        throw ConfigError(std::string("give either --") + which + " or --" + which + "-text");
    if (!file.empty()) return read_token_file(file);
    if (!text.empty()) return tokenize_bytes(text);
    throw ConfigError(std::string("missing --") + which + " (or --" + which + "-text)");
}

void write_text_file(const std::string& path, const std::string& body) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << body;
    if (!os) throw IoError("write failed: " + path);
}

// reports stay byte-stable across reruns; wall-clock lives in a sidecar
void write_report_with_sidecar(const std::string& path, const json& report) {
    write_text_file(path, report.dump(2) + "\n");
    const auto now = std::chrono::system_clock::now().time_since_epoch();
    json meta;
    meta["written_unix_ms"] =
        std::chrono::duration_cast<std::chrono::milliseconds>(now).count();
    write_text_file(path + ".meta.json", meta.dump(2) + "\n");
}

json selection_to_json(const SelectionConfig& sel) {
    return json{{"alpha", sel.alpha},
                {"mu", sel.mu},
                {"sigma", sel.sigma},
                {"m", sel.m},
                {"ratio", sel.ratio}};
}

std::vector<std::uint32_t> parse_layer_list(const std::string& csv, std::uint32_t n_layers) {
    std::vector<std::uint32_t> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        const long v = std::stol(item);
        if (v < 0 || static_cast<std::uint32_t>(v) >= n_layers)
            throw ConfigError("layer " + item + " out of range");
        out.push_back(static_cast<std::uint32_t>(v));
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

json tokens_to_json(const std::vector<std::uint32_t>& tokens) {
    json arr = json::array();
    for (std::uint32_t t : tokens) arr.push_back(t);
    return arr;
}

// --- gen-model ---

int cmd_gen_model(CLI::App& app) {
    auto* cmd = app.add_subcommand("gen-model", "build a seeded model file");
    auto cfg = std::make_shared<ModelConfig>();
    auto seed = std::make_shared<std::uint64_t>(0);
    auto out = std::make_shared<std::string>();
    cmd->add_option("--layers", cfg->n_layers, "decoder layers")->required();
    cmd->add_option("--heads", cfg->n_heads, "attention heads")->required();
    cmd->add_option("--kv-heads", cfg->n_kv_heads, "kv heads (GQA)")->required();
    cmd->add_option("--head-dim", cfg->head_dim, "per-head width")->required();
    cmd->add_option("--d-ff", cfg->d_ff, "MLP width")->required();
    cmd->add_option("--vocab", cfg->vocab_size, "vocabulary size")->required();
    cmd->add_option("--rope-theta", cfg->rope_theta, "rotary base");
    cmd->add_option("--eps", cfg->rmsnorm_eps, "rmsnorm epsilon");
    cmd->add_option("--seed", *seed, "weight seed")->required();
    cmd->add_option("--out", *out, "output model path")->required();
    cmd->callback([cfg, seed, out] {
        cfg->d_model = cfg->n_heads * cfg->head_dim;
        Model model = Model::build(*cfg, *seed);
        model.save(*out);
        std::cout << "model_id " << model.model_id() << " -> " << *out << "\n";
    });
    return 0;
}

// --- calibrate ---

struct CalibrateArgs {
    std::string sender_path, receiver_path;
    std::string context_file, context_text, query_file, query_text;
    std::string out;
    std::string score_model = "receiver";
    SelectionConfig sel;
    bool mu_set = false;
    double mu_one_based = 0.0;
};

void add_selection_flags(CLI::App* cmd, CalibrateArgs& args) {
    CalibrateArgs* p = &args;
    cmd->add_option("--alpha", p->sel.alpha, "attention weight in the combined score");
    cmd->add_option("--mu", p->mu_one_based, "prior centre, 1-based layer coordinate")
        ->each([p](const std::string&) { p->mu_set = true; });
    cmd->add_option("--sigma", p->sel.sigma, "prior width in layers");
    cmd->add_option("--ratio", p->sel.ratio, "fraction of layers to select");
    cmd->add_option("-M,--m", p->sel.m, "explicit layer budget (overrides --ratio)");
}

SelectionConfig resolve_selection(const CalibrateArgs& args, std::uint32_t n_layers) {
    SelectionConfig sel = args.sel;
    // a 1-based mu maps onto 0-based indices; the default sits at
    // the geometric middle of 0..L-1
    sel.mu = args.mu_set ? args.mu_one_based - 1.0 : n_layers / 2.0 - 0.5;
    if (sel.m == 0 && sel.ratio == 0.0) sel.ratio = 0.3;
    sel.validate(n_layers);
    return sel;
}

int cmd_calibrate(CLI::App& app) {
    auto* cmd = app.add_subcommand("calibrate", "freeze a layer set from one (C, Q) sample");
    auto args = std::make_shared<CalibrateArgs>();
    cmd->add_option("--sender", args->sender_path, "sender model file")->required();
    cmd->add_option("--receiver", args->receiver_path, "receiver model file")->required();
    cmd->add_option("--context", args->context_file, "context token file");
    cmd->add_option("--context-text", args->context_text, "context as raw bytes");
    cmd->add_option("--query", args->query_file, "query token file");
    cmd->add_option("--query-text", args->query_text, "query as raw bytes");
    cmd->add_option("--score-model", args->score_model,
                    "which side's attention scores drive selection")
        ->check(CLI::IsMember({"receiver", "sender"}));
    cmd->add_option("--out", args->out, "scores JSON path")->required();
    add_selection_flags(cmd, *args);
    cmd->callback([args] {
        const Model sender = Model::load(args->sender_path);
        const Model receiver = Model::load(args->receiver_path);
        const Model& scorer = args->score_model == "sender" ? sender : receiver;
        const auto context = load_tokens(args->context_file, args->context_text, "context");
        const auto query = load_tokens(args->query_file, args->query_text, "query");
        const SelectionConfig sel = resolve_selection(*args, scorer.config().n_layers);

        const CalibrationResult result = calibrate(scorer, context, query, sel);
        json report = json::parse(scores_to_json(result.scores, result.layers));
        report["config"] = selection_to_json(sel);
        report["score_model"] = args->score_model;
        report["scoring_model_id"] = scorer.model_id();
        write_report_with_sidecar(args->out, report);
        std::cout << "selected";
        for (std::uint32_t l : result.layers) std::cout << " " << l;
        std::cout << "\n";
    });
    return 0;
}

// --- run ---

struct RunArgs {
    std::string sender_path, receiver_path;
    std::string context_file, context_text, query_file, query_text;
    std::string layers_csv;
    std::string strategy = "score";
    std::uint32_t chunk_from = 0, chunk_to = 0;
    std::uint64_t random_seed = 0;
    bool baseline = false, skyline = false;
    std::string verify;
    std::uint32_t max_new = 16;
    long long eos = -1;
    std::string transport = "in-process";
    std::string payload_path, payload_out, payload_in;
    std::string dtype = "f32";
    std::string report_path;
    CalibrateArgs sel_args;
};

json run_config_json(const RunArgs& a, const Model& sender, const Model& receiver,
                     const std::vector<std::uint32_t>& layers, std::size_t c_len,
                     std::size_t q_len) {
    json cfg;
    cfg["sender_model_id"] = sender.model_id();
    cfg["receiver_model_id"] = receiver.model_id();
    cfg["strategy"] = a.strategy;
    cfg["layers"] = tokens_to_json(layers);
    cfg["selection"] = selection_to_json(a.sel_args.sel);
    cfg["transport"] = a.transport;
    cfg["dtype"] = a.dtype;
    cfg["max_new"] = a.max_new;
    cfg["context_tokens"] = c_len;
    cfg["query_tokens"] = q_len;
    return cfg;
}

int cmd_run(CLI::App& app) {
    auto* cmd = app.add_subcommand("run", "one end-to-end communication round");
    auto a = std::make_shared<RunArgs>();
    cmd->add_option("--sender", a->sender_path, "sender model file");
    cmd->add_option("--receiver", a->receiver_path, "receiver model file")->required();
    cmd->add_option("--context", a->context_file, "context token file");
    cmd->add_option("--context-text", a->context_text, "context as raw bytes");
    cmd->add_option("--query", a->query_file, "query token file");
    cmd->add_option("--query-text", a->query_text, "query as raw bytes");
    cmd->add_option("--layers", a->layers_csv, "explicit layer list, e.g. 0,3,5");
    cmd->add_option("--strategy", a->strategy, "score|chunk|random|explicit|none|all")
        ->check(CLI::IsMember({"score", "chunk", "random", "explicit", "none", "all"}));
    cmd->add_option("--chunk-from", a->chunk_from, "chunk start layer");
    cmd->add_option("--chunk-to", a->chunk_to, "chunk end layer (inclusive)");
    cmd->add_option("--random-seed", a->random_seed, "seed for --strategy random");
    cmd->add_flag("--baseline", a->baseline, "run the no-communication baseline instead");
    cmd->add_flag("--skyline", a->skyline, "run the concatenation upper bound instead");
    cmd->add_option("--verify-against", a->verify,
                    "compare answer tokens with a reference run; mismatch exits 4")
        ->check(CLI::IsMember({"baseline", "skyline"}));
    cmd->add_option("--max-new", a->max_new, "tokens to generate");
    cmd->add_option("--eos", a->eos, "stop token id (-1: none)");
    cmd->add_option("--transport", a->transport, "in-process|file|tcp")
        ->check(CLI::IsMember({"in-process", "file", "tcp"}));
    cmd->add_option("--payload-path", a->payload_path, "file transport path");
    cmd->add_option("--payload-out", a->payload_out, "sender only: write payload and stop");
    cmd->add_option("--payload-in", a->payload_in, "receiver only: read payload from file");
    cmd->add_option("--dtype", a->dtype, "f32|f16")->check(CLI::IsMember({"f32", "f16"}));
    cmd->add_option("--report", a->report_path, "cost report JSON path");
    add_selection_flags(cmd, a->sel_args);
    cmd->callback([a] {
        const Model receiver = Model::load(a->receiver_path);
        const auto query = load_tokens(a->query_file, a->query_text, "query");
        const std::optional<std::uint32_t> eos =
            a->eos >= 0 ? std::optional<std::uint32_t>(static_cast<std::uint32_t>(a->eos))
                        : std::nullopt;
        const KvDtype dtype = a->dtype == "f16" ? KvDtype::F16 : KvDtype::F32;
        const std::uint32_t L = receiver.config().n_layers;

        std::vector<std::uint32_t> answer;
        json report;

        if (a->baseline) {
            answer = run_baseline(receiver, query, a->max_new, eos).tokens;
            report["mode"] = "baseline";
        } else if (a->skyline) {
            const auto context = load_tokens(a->context_file, a->context_text, "context");
            answer = run_skyline(receiver, context, query, a->max_new, eos).tokens;
            report["mode"] = "skyline";
        } else if (!a->payload_in.empty()) {
            const KvPayload payload = deserialize(read_payload_file(a->payload_in));
            ReceiverResult rr = receiver_run(receiver, query, payload, a->max_new, eos);
            answer = rr.tokens;
            report["mode"] = "receive";
            report["warnings"] = rr.warnings;
        } else {
            if (a->sender_path.empty())
                throw ConfigError("--sender is required unless --baseline/--skyline/--payload-in");
            const Model sender = Model::load(a->sender_path);
            const auto context = load_tokens(a->context_file, a->context_text, "context");

            std::vector<std::uint32_t> layers;
            if (a->strategy == "none") {
                layers = {};
            } else if (a->strategy == "all") {
                for (std::uint32_t l = 0; l < L; ++l) layers.push_back(l);
            } else if (a->strategy == "explicit") {
                layers = parse_layer_list(a->layers_csv, L);
            } else if (a->strategy == "chunk") {
                layers = select_chunk(a->chunk_from, a->chunk_to, L);
            } else if (a->strategy == "random") {
                const SelectionConfig sel = resolve_selection(a->sel_args, L);
                layers = select_random(L, sel.resolve_budget(L), a->random_seed);
            } else { // score
                const SelectionConfig sel = resolve_selection(a->sel_args, L);
                a->sel_args.sel = sel;
                layers = calibrate(receiver, context, query, sel).layers;
            }

            if (!a->payload_out.empty()) {
                KvPayload payload = sender_run(sender, context, layers, dtype);
                write_payload_file(a->payload_out, serialize(payload));
                std::cout << "payload " << serialize(payload).size() << " bytes -> "
                          << a->payload_out << "\n";
                return;
            }

            Session session;
            session.sender = &sender;
            session.receiver = &receiver;
            session.layers = layers;
            session.transport = transport_from_string(a->transport);
            session.dtype = dtype;
            session.options = TransportOptions::from_env();
            if (session.transport == TransportKind::File)
                session.file_path =
                    a->payload_path.empty() ? "/tmp/kvcomm_payload.bin" : a->payload_path;

            EndToEndResult result = end_to_end(session, context, query, a->max_new, eos);
            answer = result.receiver.tokens;
            report["mode"] = "kvcomm";
            report["config"] =
                run_config_json(*a, sender, receiver, layers, context.size(), query.size());
            report["cost"] = {{"sender_prefill_flops", result.cost.sender_prefill_flops},
                              {"receiver_prefill_flops", result.cost.receiver_prefill_flops},
                              {"receiver_decode_flops", result.cost.receiver_decode_flops},
                              {"bytes_on_wire", result.cost.bytes_on_wire}};
            report["warnings"] = result.receiver.warnings;
        }

        report["answer"] = tokens_to_json(answer);
        if (!a->report_path.empty()) write_report_with_sidecar(a->report_path, report);

        for (std::size_t i = 0; i < answer.size(); ++i)
            std::cout << (i ? " " : "") << answer[i];
        std::cout << "\n";

        if (!a->verify.empty()) {
            std::vector<std::uint32_t> reference;
            if (a->verify == "baseline") {
                reference = run_baseline(receiver, query, a->max_new, eos).tokens;
            } else {
                const auto context = load_tokens(a->context_file, a->context_text, "context");
                reference = run_skyline(receiver, context, query, a->max_new, eos).tokens;
            }
            if (reference != answer)
                throw OracleCheckFailure("answer differs from the " + a->verify + " reference");
        }
    });
    return 0;
}

// --- experiment ---

struct ExperimentArgs {
    std::string kind;
    std::string sender_path, receiver_path;
    std::string context_file, context_text, query_file, query_text;
    std::string prompt_file, prompt_text;
    std::string out_prefix;
    std::string ablation = "remove";
    std::uint32_t max_new = 8;
    std::uint32_t m = 0;
    std::uint32_t levels = 9;
    std::uint32_t random_seeds = 5;
    std::vector<double> ratios{0.3, 0.5, 0.7};
    CalibrateArgs sel_args;
};

int cmd_experiment(CLI::App& app) {
    auto* cmd = app.add_subcommand("experiment", "grid sweeps, CSV + JSON out");
    auto a = std::make_shared<ExperimentArgs>();
    cmd->add_option("--kind", a->kind, "sweep kind")
        ->check(CLI::IsMember({"token-importance", "hs-prepend", "chunk", "attn-level",
                               "random-vs-kvcomm", "flops-sweep"}))
        ->required();
    cmd->add_option("--sender", a->sender_path, "sender model file");
    cmd->add_option("--receiver", a->receiver_path, "receiver model file")->required();
    cmd->add_option("--context", a->context_file, "context token file");
    cmd->add_option("--context-text", a->context_text, "context as raw bytes");
    cmd->add_option("--query", a->query_file, "query token file");
    cmd->add_option("--query-text", a->query_text, "query as raw bytes");
    cmd->add_option("--prompt", a->prompt_file, "prompt token file (token-importance)");
    cmd->add_option("--prompt-text", a->prompt_text, "prompt as raw bytes");
    cmd->add_option("--ablation", a->ablation, "remove|retain")
        ->check(CLI::IsMember({"remove", "retain"}));
    cmd->add_option("--max-new", a->max_new, "tokens generated per cell");
    cmd->add_option("--levels", a->levels, "attention levels swept");
    cmd->add_option("--random-seeds", a->random_seeds, "seeds averaged for random selection");
    cmd->add_option("--ratios", a->ratios, "selection ratios swept");
    cmd->add_option("--out", a->out_prefix, "output prefix (.csv/.json appended)")->required();
    add_selection_flags(cmd, a->sel_args);
    cmd->callback([a] {
        const Model receiver = Model::load(a->receiver_path);
        const Model sender =
            a->sender_path.empty() ? Model::load(a->receiver_path) : Model::load(a->sender_path);

        ExperimentGrid grid;
        if (a->kind == "token-importance") {
            const auto prompt = load_tokens(a->prompt_file, a->prompt_text, "prompt");
            grid = grid_token_importance(receiver, prompt,
                                         a->ablation == "remove" ? TokenAblation::Remove
                                                                 : TokenAblation::Retain);
        } else {
            const auto context = load_tokens(a->context_file, a->context_text, "context");
            const auto query = load_tokens(a->query_file, a->query_text, "query");
            const SelectionConfig sel =
                resolve_selection(a->sel_args, receiver.config().n_layers);
            if (a->kind == "hs-prepend") {
                grid = grid_hs_prepend(sender, receiver, context, query, a->max_new);
            } else if (a->kind == "chunk") {
                grid = grid_chunk(sender, receiver, context, query, a->max_new);
            } else if (a->kind == "attn-level") {
                const std::uint32_t m = sel.resolve_budget(receiver.config().n_layers);
                grid = grid_attention_level(sender, receiver, context, query, m, a->levels,
                                            a->max_new);
            } else if (a->kind == "random-vs-kvcomm") {
                grid = grid_random_vs_kvcomm(sender, receiver, context, query, a->ratios,
                                             a->random_seeds, a->max_new, sel);
            } else { // flops-sweep
                std::vector<double> ratios = a->ratios;
                if (ratios == std::vector<double>{0.3, 0.5, 0.7}) ratios.push_back(1.0);
                grid = grid_flops_sweep(sender, receiver, context, query, ratios, a->max_new,
                                        sel);
            }
        }
        write_text_file(a->out_prefix + ".csv", grid.to_csv());
        write_text_file(a->out_prefix + ".json", grid.to_json() + "\n");
        std::cout << grid.kind << ": " << grid.rows() << " x " << grid.cols() << " -> "
                  << a->out_prefix << ".{csv,json}\n";
    });
    return 0;
}

// --- flops ---

struct FlopsArgs {
    cost::CostParams params;
    std::uint64_t kv_dim = 0, d_ff = 0, vocab = 256;
    std::vector<std::uint64_t> m_values;
};

int cmd_flops(CLI::App& app) {
    auto* cmd = app.add_subcommand("flops", "closed-form cost table (CSV on stdout)");
    auto a = std::make_shared<FlopsArgs>();
    cmd->add_option("--layers", a->params.n_layers, "L")->required();
    cmd->add_option("-d,--d-model", a->params.d, "hidden width")->required();
    cmd->add_option("--context", a->params.context, "|C| tokens")->required();
    cmd->add_option("--query", a->params.query, "|Q| tokens")->required();
    cmd->add_option("--generated", a->params.generated, "T tokens")->required();
    cmd->add_option("--t-s", a->params.t_s, "debate tokens of the sender");
    cmd->add_option("--t-r", a->params.t_r, "debate tokens of the receiver");
    cmd->add_option("-M,--m", a->m_values, "selected layer counts (default ratio sweep)");
    cmd->add_option("--kv-dim", a->kv_dim, "kv width for the engine model (default d/2)");
    cmd->add_option("--d-ff", a->d_ff, "MLP width for the engine model (default 2d)");
    cmd->add_option("--vocab", a->vocab, "vocab for the engine model");
    cmd->callback([a] {
        cost::CostParams p = a->params;
        cost::EngineDims dims;
        dims.n_layers = p.n_layers;
        dims.d = p.d;
        dims.kv_dim = a->kv_dim ? a->kv_dim : p.d / 2;
        dims.d_ff = a->d_ff ? a->d_ff : 2 * p.d;
        dims.vocab = a->vocab;

        std::vector<std::uint64_t> ms = a->m_values;
        if (ms.empty())
            for (double r : {0.3, 0.5, 0.7, 1.0})
                ms.push_back(resolve_m(static_cast<std::uint32_t>(p.n_layers), r));

        std::cout << "m,kvcomm_total,skyline_total,margin_closed_form,nld_total,"
                     "skyline_over_kvcomm_total,beyond_context_ratio\n";
        for (std::uint64_t m : ms) {
            p.selected = m;
            const auto kv = cost::flops_kvcomm(p);
            const auto sky = cost::flops_skyline(p);
            const auto nld = cost::flops_nld(p);
            std::cout << m << "," << kv.total() << "," << sky.total() << ","
                      << cost::margin_over_skyline(p) << "," << nld.total() << ","
                      << static_cast<double>(sky.total()) / static_cast<double>(kv.total())
                      << "," << cost::beyond_context_ratio(dims, p) << "\n";
        }
    });
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"selective KV-pair sharing between two seeded decoder models"};
    app.require_subcommand(1);
    cmd_gen_model(app);
    cmd_calibrate(app);
    cmd_run(app);
    cmd_experiment(app);
    cmd_flops(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    } catch (const OracleCheckFailure& e) {
        std::cerr << "oracle check failed: " << e.what() << "\n";
        return kExitOracle;
    } catch (const ProtocolError& e) {
        std::cerr << "protocol error: " << e.what() << "\n";
        return kExitProtocol;
    } catch (const TransportError& e) {
        std::cerr << "transport error: " << e.what() << "\n";
        return kExitProtocol;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    return kExitOk;
}
