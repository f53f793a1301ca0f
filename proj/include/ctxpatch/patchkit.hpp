#pragma once

#include "ctxpatch/model.hpp"

#include <map>
#include <variant>

// Rank-1 implicit weight patches: additive parameter deltas that make a
// no-context forward pass reproduce a with-context forward pass.
//
//   input_patch          ΔW  = (W(z_new − z)) zᵀ / ‖z‖²      absorbs an input change
//   output_bias_patch    Δb  = δ                              adds δ to the output
//   output_weight_patch  ΔW′ = δ yᵀ / ‖y‖²                    adds δ at fixed input y
//   output_scale_patch   Δm  = δ ⊘ h                          adds δ via elementwise scale
//
// Block patchers compose these per variant; multilayer_patch chains them
// layer by layer, feeding each layer the recorded full-context target input.

namespace ctxpatch {

using ParamDelta = std::variant<DenseMatrix, DenseVector>;

// Parameter names follow the model fields: "W_gate", "W_up", "W_down", "m",
// "W_1", "b_2", "router", "expert[j].W_down", ...  std::map keeps
// serialization order deterministic.
struct LayerPatch {
    std::map<std::string, ParamDelta> deltas;

    bool empty() const { return deltas.empty(); }
};

struct PatchSet {
    std::vector<LayerPatch> layers; // index == layer index
};

enum class PatchMode { Naive, Stable };

const char* to_string(PatchMode m);
PatchMode parse_patch_mode(const std::string& s);

// default zero-activation threshold for Eq.-(4)-style divisions
double default_tau(Precision p);
// default per-layer reconstruction bound for multilayer_patch
double default_residual_bound(Precision p);

struct PatchOptions {
    PatchMode mode = PatchMode::Naive;
    double tau = 0.0;
    double residual_bound = 0.0; // +inf disables the check
};

PatchOptions default_patch_options(Precision p, PatchMode mode = PatchMode::Naive);

// the entire change the context induces on the attention sub-layer's output
struct ContextDelta {
    DenseVector v;     // reduced-context post-attention residual
    DenseVector v_c;   // full-context post-attention residual
    DenseVector delta; // v_c − v

    static ContextDelta make(const DenseVector& v, const DenseVector& v_c, Precision p);
};

// --- controllability primitives -------------------------------------------

DenseMatrix input_patch(const DenseMatrix& w, const DenseVector& z, const DenseVector& z_new,
                        Precision p);
DenseVector output_bias_patch(const DenseVector& delta);
DenseMatrix output_weight_patch(const DenseVector& delta, const DenseVector& y, Precision p);
DenseVector output_scale_patch(const DenseVector& delta, const DenseVector& h, double tau,
                               Precision p);

// --- block patchers ---------------------------------------------------------

LayerPatch gemma_block_patch_naive(const BlockParams& p, const ContextDelta& cd,
                                   const ModelConfig& cfg, double tau);
LayerPatch gemma_block_patch_stable(const BlockParams& p, const ContextDelta& cd,
                                    const ModelConfig& cfg, double tau);

// x is the block input (needed by the Parallel variant, whose MLP sees x)
LayerPatch block_patch(const BlockParams& p, const ContextDelta& cd, const DenseVector& x,
                       const ModelConfig& cfg, const PatchOptions& opt);

// --- application ------------------------------------------------------------

// θ ← θ ± Δ with fp::add/sub at precision p; ValidationError on unknown names
// or shape mismatch
void apply_layer_patch(BlockParams& b, const LayerPatch& lp, Precision p, bool negate = false);
void apply_patch(ModelParams& m, const PatchSet& ps, bool negate = false);

// ‖Δm‖∞ of a layer patch; 0 when it has no "m" delta
double patch_dm_linf(const LayerPatch& lp);

// --- multilayer compiler (two-pass) ----------------------------------------

struct MultilayerResult {
    PatchSet patch;
    ModelParams patched;
    std::vector<double> layer_residual; // ‖patched block(x_l) − x_{l+1} target‖∞
    std::vector<double> dm_linf;        // per-layer ‖Δm‖∞
};

// Pass 1 runs the full context + query and records per-layer targets; pass 2
// patches each layer against its recorded v_C, feeding the next layer the
// recorded target input.  LayerResidualExceeded if a layer's reconstruction
// residual exceeds opt.residual_bound.
MultilayerResult multilayer_patch(const ModelParams& m, const std::vector<size_t>& context,
                                  size_t query, const PatchOptions& opt);

} // namespace ctxpatch
