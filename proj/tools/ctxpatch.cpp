#include "ctxpatch/harness.hpp"
#include "ctxpatch/model_io.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdlib>
#include <iostream>

using namespace ctxpatch;

namespace {

struct DimFlags {
    std::string variant = "gemma";
    size_t d_model = 32;
    size_t d_ff = 0; // 0 -> 2 * d_model
    size_t head_dim = 16;
    size_t layers = 2;
    size_t vocab = 100;
    size_t n_experts = 4;
    double eps = 1e-6;
    std::string activation; // empty -> variant default
    std::string precision = "f64";
};

void add_dim_flags(CLI::App* cmd, DimFlags& d) {
    cmd->add_option("--variant", d.variant, "block variant: gemma|llama|vanilla|parallel|moe")
        ->capture_default_str();
    cmd->add_option("--d-model", d.d_model, "residual stream width")->capture_default_str();
    cmd->add_option("--d-ff", d.d_ff, "MLP hidden width (default 2*d_model)");
    cmd->add_option("--head-dim", d.head_dim, "attention head width")->capture_default_str();
    cmd->add_option("--layers", d.layers, "number of blocks")->capture_default_str();
    cmd->add_option("--vocab", d.vocab, "vocabulary size")->capture_default_str();
    cmd->add_option("--n-experts", d.n_experts, "experts per moe block")->capture_default_str();
    cmd->add_option("--eps", d.eps, "RMSNorm epsilon")->capture_default_str();
    cmd->add_option("--activation", d.activation, "gelu_tanh|silu|relu (default per variant)");
    cmd->add_option("--precision", d.precision, "f64|f32|bf16")->capture_default_str();
}

ModelConfig to_config(const DimFlags& d) {
    ModelConfig cfg;
    cfg.variant = parse_variant(d.variant);
    cfg.d_model = d.d_model;
    cfg.d_ff = d.d_ff == 0 ? 2 * d.d_model : d.d_ff;
    cfg.head_dim = d.head_dim;
    cfg.layers = d.layers;
    cfg.vocab = d.vocab;
    cfg.n_experts = d.n_experts;
    cfg.eps = d.eps;
    cfg.prec = parse_precision(d.precision);
    cfg.act = d.activation.empty() ? default_activation(cfg.variant) : parse_activation(d.activation);
    validate_config(cfg);
    return cfg;
}

struct PatchFlags {
    std::string mode = "naive";
    double tau = -1.0;            // <0 -> precision default
    double residual_bound = -1.0; // <0 -> precision default
};

void add_patch_flags(CLI::App* cmd, PatchFlags& f) {
    cmd->add_option("--mode", f.mode, "patch mode: naive|stable")->capture_default_str();
    cmd->add_option("--tau", f.tau, "zero-activation threshold (default per precision)");
    cmd->add_option("--residual-bound", f.residual_bound,
                    "per-layer reconstruction bound (default 1e-9 for f64, inf otherwise)");
}

PatchOptions to_patch_options(const PatchFlags& f, Precision p) {
    PatchOptions opt = default_patch_options(p, parse_patch_mode(f.mode));
    if (f.tau >= 0.0) opt.tau = f.tau;
    if (f.residual_bound >= 0.0) opt.residual_bound = f.residual_bound;
    return opt;
}

uint64_t effective_seed(uint64_t flag_seed) {
    // CTXPATCH_SEED always wins over --seed
    if (const char* env = std::getenv("CTXPATCH_SEED")) {
        try {
            return std::stoull(env);
        } catch (const std::exception&) {
            fail(Errc::UsageError, "CTXPATCH_SEED is not a valid unsigned integer");
        }
    }
    return flag_seed;
}

std::vector<size_t> parse_prompt(const std::string& spec, size_t vocab) {
    std::vector<size_t> toks;
    size_t pos = 0;
    while (pos < spec.size()) {
        size_t next = spec.find(',', pos);
        if (next == std::string::npos) next = spec.size();
        const std::string piece = spec.substr(pos, next - pos);
        try {
            toks.push_back(std::stoull(piece));
        } catch (const std::exception&) {
            fail(Errc::UsageError, "bad token id '" + piece + "' in --prompt");
        }
        pos = next + 1;
    }
    if (toks.empty()) fail(Errc::UsageError, "--prompt must contain at least one token id");
    for (size_t t : toks)
        if (t >= vocab) fail(Errc::TokenOutOfRange, "prompt token " + std::to_string(t) + " >= vocab");
    return toks;
}

std::vector<size_t> resolve_prompt(const std::string& prompt_spec, size_t prompt_len, size_t vocab,
                                   uint64_t seed) {
    if (!prompt_spec.empty()) return parse_prompt(prompt_spec, vocab);
    if (prompt_len == 0) fail(Errc::UsageError, "--prompt-len must be positive");
    return random_prompt(vocab, prompt_len, seed + 1);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"rank-1 context-to-weight patch compiler and equivalence harness"};
    app.require_subcommand(1);

    // gen-model
    DimFlags gen_dims;
    uint64_t gen_seed = 0;
    std::string gen_out;
    CLI::App* gen = app.add_subcommand("gen-model", "generate a seeded random model file");
    add_dim_flags(gen, gen_dims);
    gen->add_option("--seed", gen_seed, "PRNG seed (env CTXPATCH_SEED overrides)")
        ->capture_default_str();
    gen->add_option("-o,--out", gen_out, "output model JSON path")->required();

    // patch
    std::string patch_model, patch_prompt, patch_out, patch_patched_out;
    size_t patch_prompt_len = 8;
    uint64_t patch_seed = 0;
    PatchFlags patch_flags;
    CLI::App* patch = app.add_subcommand("patch", "compile a prompt into a weight patch");
    patch->add_option("--model", patch_model, "model JSON path")->required();
    patch->add_option("--prompt", patch_prompt, "comma-separated token ids (last is the query)");
    patch->add_option("--prompt-len", patch_prompt_len, "random prompt length when --prompt absent")
        ->capture_default_str();
    patch->add_option("--seed", patch_seed, "seed for the random prompt")->capture_default_str();
    add_patch_flags(patch, patch_flags);
    patch->add_option("-o,--out", patch_out, "output patch JSON path")->required();
    patch->add_option("--patched-out", patch_patched_out, "also save the patched model here");

    // compare
    std::string cmp_model, cmp_prompt, cmp_out;
    size_t cmp_prompt_len = 8;
    uint64_t cmp_seed = 0;
    PatchFlags cmp_flags;
    CLI::App* cmp = app.add_subcommand("compare", "single-step patched-vs-original report");
    cmp->add_option("--model", cmp_model, "model JSON path")->required();
    cmp->add_option("--prompt", cmp_prompt, "comma-separated token ids (last is the query)");
    cmp->add_option("--prompt-len", cmp_prompt_len, "random prompt length when --prompt absent")
        ->capture_default_str();
    cmp->add_option("--seed", cmp_seed, "seed for the random prompt")->capture_default_str();
    add_patch_flags(cmp, cmp_flags);
    cmp->add_option("-o,--out", cmp_out, "report path (stdout when omitted)");

    // generate
    std::string run_model, run_prompt, run_out;
    size_t run_prompt_len = 8, run_steps = 16;
    uint64_t run_seed = 0;
    PatchFlags run_flags;
    CLI::App* run = app.add_subcommand("generate", "autoregressive per-step comparison experiment");
    run->add_option("--model", run_model, "model JSON path")->required();
    run->add_option("--prompt", run_prompt, "comma-separated token ids");
    run->add_option("--prompt-len", run_prompt_len, "random prompt length when --prompt absent")
        ->capture_default_str();
    run->add_option("--steps", run_steps, "greedy generation steps")->capture_default_str();
    run->add_option("--seed", run_seed, "seed for the random prompt")->capture_default_str();
    add_patch_flags(run, run_flags);
    run->add_option("-o,--out", run_out, "output prefix: writes <prefix>.jsonl/.csv/.summary.json")
        ->required();

    // verify
    std::string ver_model;
    CLI::App* ver = app.add_subcommand("verify", "run the built-in invariant suite on a model file");
    ver->add_option("--model", ver_model, "model JSON path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(Errc::UsageError);
    }

    try {
        if (gen->parsed()) {
            const ModelConfig cfg = to_config(gen_dims);
            save_model(gen_random_model(cfg, effective_seed(gen_seed)), gen_out);
            std::cout << "wrote " << gen_out << "\n";
            return 0;
        }
        if (patch->parsed()) {
            const ModelParams m = load_model(patch_model);
            const uint64_t seed = effective_seed(patch_seed);
            const std::vector<size_t> prompt =
                resolve_prompt(patch_prompt, patch_prompt_len, m.config.vocab, seed);
            const PatchOptions opt = to_patch_options(patch_flags, m.config.prec);
            std::vector<size_t> context(prompt.begin(), prompt.end() - 1);
            MultilayerResult mr = multilayer_patch(m, context, prompt.back(), opt);
            PatchMeta meta{opt.mode, m.config.prec, mr.layer_residual, mr.dm_linf};
            save_patch(mr.patch, meta, patch_out);
            std::cout << "wrote " << patch_out << "\n";
            if (!patch_patched_out.empty()) {
                save_model(mr.patched, patch_patched_out);
                std::cout << "wrote " << patch_patched_out << "\n";
            }
            return 0;
        }
        if (cmp->parsed()) {
            const ModelParams m = load_model(cmp_model);
            const uint64_t seed = effective_seed(cmp_seed);
            const std::vector<size_t> prompt =
                resolve_prompt(cmp_prompt, cmp_prompt_len, m.config.vocab, seed);
            const PatchOptions opt = to_patch_options(cmp_flags, m.config.prec);
            const StepResult sr = compare_step(m, prompt, opt);
            nlohmann::json j{{"linf_logits", sr.rec.linf_logits},
                             {"tvd", sr.rec.tvd},
                             {"token_match", sr.rec.token_match},
                             {"baseline_token", sr.rec.baseline_token},
                             {"patched_token", sr.rec.patched_token},
                             {"dm_linf", sr.dm_linf},
                             {"layer_residual", sr.layer_residual},
                             {"prompt", prompt}};
            const std::string report = j.dump(2) + "\n";
            if (cmp_out.empty())
                std::cout << report;
            else {
                write_text_file(cmp_out, report);
                std::cout << "wrote " << cmp_out << "\n";
            }
            return 0;
        }
        if (run->parsed()) {
            const ModelParams m = load_model(run_model);
            const uint64_t seed = effective_seed(run_seed);
            ExperimentConfig cfg;
            cfg.model = m.config;
            cfg.seed = seed;
            cfg.prompt_len = run_prompt_len;
            if (!run_prompt.empty()) cfg.prompt = parse_prompt(run_prompt, m.config.vocab);
            cfg.n_steps = run_steps;
            cfg.patch = to_patch_options(run_flags, m.config.prec);
            // the experiment runs on the loaded model, not a regenerated one
            ExperimentResult res;
            res.prompt = cfg.prompt.empty()
                             ? random_prompt(m.config.vocab, cfg.prompt_len, seed + 1)
                             : cfg.prompt;
            std::vector<size_t> history = res.prompt;
            for (size_t step = 0; step < cfg.n_steps; ++step) {
                StepResult sr = compare_step(m, history, cfg.patch);
                sr.rec.step = step;
                res.records.push_back(sr.rec);
                res.dm_linf.push_back(sr.dm_linf);
                history.push_back(sr.rec.baseline_token);
            }
            write_text_file(run_out + ".jsonl", metrics_to_jsonl(res.records));
            write_text_file(run_out + ".csv", metrics_to_csv(res.records));
            write_text_file(run_out + ".summary.json", summary_to_json(res, cfg));
            std::cout << "wrote " << run_out << ".jsonl, .csv, .summary.json\n";
            return 0;
        }
        if (ver->parsed()) {
            const ModelParams m = load_model(ver_model);
            const std::vector<VerifyCheck> checks = verify_model(m);
            bool all = true;
            for (const VerifyCheck& c : checks) {
                std::cout << (c.pass ? "[PASS] " : "[FAIL] ") << c.name;
                if (!c.detail.empty()) std::cout << " — " << c.detail;
                std::cout << "\n";
                all = all && c.pass;
            }
            if (!all) fail(Errc::ValidationError, "model verification failed");
            return 0;
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
