#pragma once

#include "ctxpatch/patchkit.hpp"

#include <string>

// Experimental protocol: at every generation step, compile the whole history
// (prompt + tokens generated so far) into a weight patch of the original
// model, then compare "patched model, no context" against "original model,
// full context" on that step's logits.  Decoding is greedy argmax and the
// history always extends with the baseline's token (teacher forcing), so both
// sides see identical prefixes at every step.

namespace ctxpatch {

struct MetricsRecord {
    size_t step = 0;
    double linf_logits = 0.0;
    double tvd = 0.0;
    bool token_match = false;
    size_t baseline_token = 0;
    size_t patched_token = 0;
};

struct ExperimentConfig {
    ModelConfig model;
    uint64_t seed = 0;
    std::vector<size_t> prompt; // explicit prompt; when empty, prompt_len seeded-random tokens
    size_t prompt_len = 8;
    size_t n_steps = 1;
    PatchOptions patch;
};

// ½‖p−q‖₁; NotAProbabilityVector unless both sum to 1 within 1e-9
double tvd(const DenseVector& p, const DenseVector& q);

double linf(const DenseVector& a, const DenseVector& b);

// greedy argmax; ties resolve to the lowest token id
size_t argmax_token(const DenseVector& logits);

struct StepResult {
    MetricsRecord rec;
    double dm_linf = 0.0; // max over layers of ‖Δm‖∞ for this step's patch
    std::vector<double> layer_residual;
};

StepResult compare_step(const ModelParams& model, const std::vector<size_t>& history,
                        const PatchOptions& opt);

struct ExperimentResult {
    std::vector<MetricsRecord> records;
    std::vector<double> dm_linf; // one entry per step
    std::vector<size_t> prompt;
};

ExperimentResult generation_experiment(const ExperimentConfig& cfg);

std::vector<size_t> random_prompt(size_t vocab, size_t len, uint64_t seed);

// report writers; all output is deterministic (sorted keys, no timestamps)
std::string metrics_to_jsonl(const std::vector<MetricsRecord>& recs);
std::string metrics_to_csv(const std::vector<MetricsRecord>& recs);
std::string summary_to_json(const ExperimentResult& res, const ExperimentConfig& cfg);

struct VerifyCheck {
    std::string name;
    bool pass = false;
    std::string detail;
};

// built-in invariant suite for a loaded model (determinism, causality,
// per-variant structural invariants); all checks are deterministic
std::vector<VerifyCheck> verify_model(const ModelParams& m);

} // namespace ctxpatch
