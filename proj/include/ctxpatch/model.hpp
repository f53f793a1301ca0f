#pragma once

#include "ctxpatch/numerics.hpp"

#include <vector>

// Desk-scale decoder-only transformer with five block variants.  Attention is
// single-head, pre-RMSNorm, scaled dot product, no positional encoding, so an
// empty context is well-defined: the query token attends only to itself.

namespace ctxpatch {

enum class Variant { Gemma, Llama, Vanilla, Parallel, Moe };

const char* to_string(Variant v);
Variant parse_variant(const std::string& s);
Activation default_activation(Variant v);

struct ModelConfig {
    size_t d_model = 0;
    size_t d_ff = 0;
    size_t head_dim = 0;
    size_t vocab = 0;
    size_t layers = 0;
    size_t n_experts = 1; // used by the moe variant only
    double eps = 1e-6;
    Activation act = Activation::GeluTanh;
    Precision prec = Precision::Float64;
    Variant variant = Variant::Gemma;
};

struct AttnParams {
    DenseMatrix w_q, w_k, w_v; // head_dim x d_model
    DenseMatrix w_o;           // d_model x head_dim
    DenseVector pre_norm_scale; // d_model
};

struct ExpertParams {
    DenseMatrix w_gate, w_up; // d_ff x d_model
    DenseMatrix w_down;       // d_model x d_ff
};

// One struct covers all variants; only the fields of the tagged variant are
// populated.  gemma/llama/parallel/moe share the gated-MLP field names
// (gemma's norm_scale serializes as "norm1_scale", the others as "norm_scale").
struct BlockParams {
    Variant variant = Variant::Gemma;
    AttnParams attn;
    // gemma / llama / parallel: gated MLP; moe: norm_scale only
    DenseVector norm_scale; // d_model, pre-MLP norm scale
    DenseMatrix w_gate, w_up, w_down;
    DenseVector m; // d_model, gemma's post-norm scale
    // vanilla
    DenseMatrix w_1; // d_ff x d_model
    DenseVector b_1; // d_ff
    DenseMatrix w_2; // d_model x d_ff
    DenseVector b_2; // d_model
    // moe
    DenseMatrix router; // n_experts x d_model
    std::vector<ExpertParams> experts;
};

struct ModelParams {
    DenseMatrix embed; // vocab x d_model, tied unembedding
    std::vector<BlockParams> blocks;
    DenseVector final_norm_scale; // d_model
    ModelConfig config;
};

// Per-layer activations recorded for the last position of a forward pass.
// Variants fill the fields that exist for them; unused fields stay empty.
struct LayerTrace {
    DenseVector v_attn; // post-attention residual (v or v_C)
    DenseVector z_norm; // normalized+scaled MLP input (z or z_C)
    DenseVector h_gated; // pre-W_down gated hidden
    DenseVector h_down; // W_down output (pre-norm2 for gemma)
    DenseVector h_mlp;  // gemma: pre-scale MLP output rmsnorm(h_down)
    DenseVector x_out;  // block output
};

using ForwardTrace = std::vector<LayerTrace>;

// Per-layer pre-attention hidden states of the context tokens (the KV source).
using CtxEntry = std::vector<DenseVector>;
using ContextStates = std::vector<CtxEntry>;

struct ForwardResult {
    DenseVector logits;
    ForwardTrace trace; // last position, one entry per layer
    ContextStates ctx;  // per layer, states of all positions except the last
};

// rmsnorm(v, eps) ⊙ scale
DenseVector scaled_rmsnorm(const DenseVector& v, const DenseVector& scale, double eps, Precision p);

// x + W_o · Σ_i α_i W_v n(c_i), keys/values over ctx entries then x itself
DenseVector attention_sublayer(const AttnParams& p, const CtxEntry& ctx, const DenseVector& x,
                               double eps, Precision prec);

// residual MLP half of the block; `tr` (optional) receives the intermediate
// vectors.  Parallel blocks route their MLP input through block_forward.
DenseVector mlp_sublayer(const BlockParams& p, const DenseVector& v, const ModelConfig& cfg,
                         LayerTrace* tr = nullptr);

DenseVector block_forward(const BlockParams& p, const CtxEntry& ctx, const DenseVector& x,
                          const ModelConfig& cfg, LayerTrace* tr = nullptr);

ForwardResult model_forward(const ModelParams& m, const std::vector<size_t>& tokens);

ModelParams gen_random_model(const ModelConfig& cfg, uint64_t seed);

void validate_config(const ModelConfig& cfg);

} // namespace ctxpatch
