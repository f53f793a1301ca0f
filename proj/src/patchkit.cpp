#include "ctxpatch/patchkit.hpp"

#include "ctxpatch/kernels.hpp"
#include "ctxpatch/rmsinv.hpp"

#include <cmath>
#include <limits>

namespace ctxpatch {

const char* to_string(PatchMode m) { return m == PatchMode::Naive ? "naive" : "stable"; }

PatchMode parse_patch_mode(const std::string& s) {
    if (s == "naive") return PatchMode::Naive;
    if (s == "stable") return PatchMode::Stable;
    fail(Errc::ValidationError, "unknown patch mode '" + s + "' (expected naive|stable)");
}

double default_tau(Precision p) {
    // Float64/Float32: only exact zeros trigger DegenerateActivation; emulated
    // bf16 treats anything below 1e-20 as a zero activation
    return p == Precision::Bf16Emulated ? 1e-20 : 0.0;
}

double default_residual_bound(Precision p) {
    return p == Precision::Float64 ? 1e-9 : std::numeric_limits<double>::infinity();
}

PatchOptions default_patch_options(Precision p, PatchMode mode) {
    return PatchOptions{mode, default_tau(p), default_residual_bound(p)};
}

ContextDelta ContextDelta::make(const DenseVector& v, const DenseVector& v_c, Precision p) {
    check_same_len(v, v_c, "ContextDelta");
    return ContextDelta{v, v_c, vec_sub(v_c, v, p)};
}

// --- controllability primitives -------------------------------------------

DenseMatrix input_patch(const DenseMatrix& w, const DenseVector& z, const DenseVector& z_new,
                        Precision p) {
    if (w.cols != z.len()) fail(Errc::DimensionMismatch, "input_patch: W cols vs z");
    check_same_len(z, z_new, "input_patch");
    const double nz = kernels::dot(z, z, p);
    if (nz == 0.0) fail(Errc::ZeroInputVector, "input_patch: z == 0 violates the z != 0 hypothesis");
    const DenseVector u = kernels::matvec(w, vec_sub(z_new, z, p), p);
    DenseMatrix dw(w.rows, w.cols);
    for (size_t i = 0; i < w.rows; ++i) {
        double* r = dw.row(i);
        for (size_t j = 0; j < w.cols; ++j) r[j] = fp::div(p, fp::mul(p, u[i], z[j]), nz);
    }
    return dw;
}

DenseVector output_bias_patch(const DenseVector& delta) { return delta; }

DenseMatrix output_weight_patch(const DenseVector& delta, const DenseVector& y, Precision p) {
    const double ny = kernels::dot(y, y, p);
    if (ny == 0.0) fail(Errc::ZeroPreOutputVector, "output_weight_patch: pre-output vector y == 0");
    DenseMatrix dw(delta.len(), y.len());
    for (size_t i = 0; i < delta.len(); ++i) {
        double* r = dw.row(i);
        for (size_t j = 0; j < y.len(); ++j) r[j] = fp::div(p, fp::mul(p, delta[i], y[j]), ny);
    }
    return dw;
}

DenseVector output_scale_patch(const DenseVector& delta, const DenseVector& h, double tau,
                               Precision p) {
    check_same_len(delta, h, "output_scale_patch");
    DenseVector dm(delta.len());
    for (size_t i = 0; i < delta.len(); ++i) {
        if (std::fabs(h[i]) > tau)
            dm[i] = fp::div(p, delta[i], h[i]);
        else if (std::fabs(delta[i]) <= tau)
            dm[i] = 0.0;
        else
            fail(Errc::DegenerateActivation,
                 "output_scale_patch: |h[" + std::to_string(i) + "]| <= tau with nonzero delta; "
                 "f_i != 0 hypothesis violated (consider stable mode)");
    }
    return dm;
}

// --- block patchers ---------------------------------------------------------

namespace {

bool all_zero(const DenseVector& v) {
    for (size_t i = 0; i < v.len(); ++i)
        if (v[i] != 0.0) return false;
    return true;
}

// gated hidden (act(W_gate z) ⊙ W_up z) exactly as the forward computes it
DenseVector gated_hidden(const DenseMatrix& w_gate, const DenseMatrix& w_up, const DenseVector& z,
                         const ModelConfig& cfg) {
    const Precision p = cfg.prec;
    return vec_mul(map_activation(cfg.act, kernels::matvec(w_gate, z, p), p),
                   kernels::matvec(w_up, z, p), p);
}

} // namespace

LayerPatch gemma_block_patch_naive(const BlockParams& p, const ContextDelta& cd,
                                   const ModelConfig& cfg, double tau) {
    const Precision prec = cfg.prec;
    const DenseVector z = scaled_rmsnorm(cd.v, p.norm_scale, cfg.eps, prec);
    const DenseVector z_c = scaled_rmsnorm(cd.v_c, p.norm_scale, cfg.eps, prec);
    LayerPatch lp;
    lp.deltas["W_gate"] = input_patch(p.w_gate, z, z_c, prec);
    lp.deltas["W_up"] = input_patch(p.w_up, z, z_c, prec);
    // Eq. (4): Δm = δ ⊘ h_mlp with h_mlp recomputed at the full-context input
    const DenseVector h_gated_c = gated_hidden(p.w_gate, p.w_up, z_c, cfg);
    const DenseVector h_down_c = kernels::matvec(p.w_down, h_gated_c, prec);
    const DenseVector h_mlp_c = rmsnorm(h_down_c, cfg.eps, prec);
    lp.deltas["m"] = output_scale_patch(cd.delta, h_mlp_c, tau, prec);
    return lp;
}

LayerPatch gemma_block_patch_stable(const BlockParams& p, const ContextDelta& cd,
                                    const ModelConfig& cfg, double tau) {
    const Precision prec = cfg.prec;
    const DenseVector z = scaled_rmsnorm(cd.v, p.norm_scale, cfg.eps, prec);
    const DenseVector z_c = scaled_rmsnorm(cd.v_c, p.norm_scale, cfg.eps, prec);
    LayerPatch lp;
    lp.deltas["W_gate"] = input_patch(p.w_gate, z, z_c, prec);
    lp.deltas["W_up"] = input_patch(p.w_up, z, z_c, prec);

    const DenseVector h_gated_c = gated_hidden(p.w_gate, p.w_up, z_c, cfg);
    if (all_zero(h_gated_c))
        fail(Errc::ZeroGatedVector, "stable patch: gated hidden vector is zero");
    const DenseVector h_down_c = kernels::matvec(p.w_down, h_gated_c, prec);
    const DenseVector h_out_c = vec_mul(p.m, rmsnorm(h_down_c, cfg.eps, prec), prec);

    // required MLP branch output after patching: g = δ + h_out,C
    const DenseVector g = vec_add(cd.delta, h_out_c, prec);

    // Step 1: target pre-norm vector at the original RMS. The forward divides
    // by sqrt(RMS² + eps), not RMS, so scale the target accordingly before
    // inverting the eps-free norm (Float64 internally).
    const double c_rms = rms(h_down_c);
    if (!(c_rms > 0.0))
        fail(Errc::DegenerateProblem, "stable patch: h_down,C has zero RMS");
    const double eps_adjust = std::sqrt(c_rms * c_rms + cfg.eps) / c_rms;
    DenseVector g_solve(g.len());
    for (size_t i = 0; i < g.len(); ++i) g_solve[i] = g[i] * eps_adjust;
    DenseVector h_target = invert_rmsnorm(g_solve, p.m, c_rms);
    for (size_t i = 0; i < h_target.len(); ++i) h_target[i] = fp::round(prec, h_target[i]);

    // Step 2: route the correction through W_down (rank-1)
    lp.deltas["W_down"] = output_weight_patch(vec_sub(h_target, h_down_c, prec), h_gated_c, prec);

    // Step 3: absorb the remainder into m, measured against the actual patched
    // forward values rather than the idealized inversion output
    DenseMatrix w_down_patched = p.w_down;
    {
        const DenseMatrix& dw = std::get<DenseMatrix>(lp.deltas["W_down"]);
        for (size_t i = 0; i < dw.data.size(); ++i)
            w_down_patched.data[i] = fp::add(prec, w_down_patched.data[i], dw.data[i]);
    }
    const DenseVector h_target_fwd = kernels::matvec(w_down_patched, h_gated_c, prec);
    const DenseVector hn = rmsnorm(h_target_fwd, cfg.eps, prec);
    const DenseVector r = vec_sub(g, vec_mul(p.m, hn, prec), prec);
    lp.deltas["m"] = output_scale_patch(r, hn, tau, prec);
    return lp;
}

LayerPatch block_patch(const BlockParams& p, const ContextDelta& cd, const DenseVector& x,
                       const ModelConfig& cfg, const PatchOptions& opt) {
    const Precision prec = cfg.prec;
    if (all_zero(cd.delta) && cd.v == cd.v_c) return LayerPatch{}; // zero context change

    switch (p.variant) {
    case Variant::Gemma:
        return opt.mode == PatchMode::Stable ? gemma_block_patch_stable(p, cd, cfg, opt.tau)
                                             : gemma_block_patch_naive(p, cd, cfg, opt.tau);
    case Variant::Llama: {
        const DenseVector z = scaled_rmsnorm(cd.v, p.norm_scale, cfg.eps, prec);
        const DenseVector z_c = scaled_rmsnorm(cd.v_c, p.norm_scale, cfg.eps, prec);
        LayerPatch lp;
        lp.deltas["W_gate"] = input_patch(p.w_gate, z, z_c, prec);
        lp.deltas["W_up"] = input_patch(p.w_up, z, z_c, prec);
        const DenseVector h_gated_c = gated_hidden(p.w_gate, p.w_up, z_c, cfg);
        lp.deltas["W_down"] = output_weight_patch(cd.delta, h_gated_c, prec);
        return lp;
    }
    case Variant::Vanilla: {
        LayerPatch lp;
        lp.deltas["W_1"] = input_patch(p.w_1, cd.v, cd.v_c, prec);
        lp.deltas["b_2"] = output_bias_patch(cd.delta);
        return lp;
    }
    case Variant::Parallel: {
        // the MLP branch input is the block input x, untouched by context; the
        // whole contextual difference goes through W_down at that fixed input
        const DenseVector z_x = scaled_rmsnorm(x, p.norm_scale, cfg.eps, prec);
        const DenseVector h_gated_x = gated_hidden(p.w_gate, p.w_up, z_x, cfg);
        LayerPatch lp;
        lp.deltas["W_down"] = output_weight_patch(cd.delta, h_gated_x, prec);
        return lp;
    }
    case Variant::Moe: {
        const DenseVector z = scaled_rmsnorm(cd.v, p.norm_scale, cfg.eps, prec);
        const DenseVector z_c = scaled_rmsnorm(cd.v_c, p.norm_scale, cfg.eps, prec);
        const DenseVector gates_c = softmax(kernels::matvec(p.router, z_c, prec), prec);
        double s = 0.0;
        for (size_t j = 0; j < gates_c.len(); ++j) s = fp::add(prec, s, gates_c[j]);
        if (s == 0.0) fail(Errc::DegenerateProblem, "moe patch: gate sum S == 0");
        DenseVector delta_per_expert(cd.delta.len());
        for (size_t i = 0; i < cd.delta.len(); ++i) delta_per_expert[i] = fp::div(prec, cd.delta[i], s);
        LayerPatch lp;
        lp.deltas["router"] = input_patch(p.router, z, z_c, prec);
        for (size_t j = 0; j < p.experts.size(); ++j) {
            const ExpertParams& ex = p.experts[j];
            const std::string key = "expert[" + std::to_string(j) + "].";
            lp.deltas[key + "W_gate"] = input_patch(ex.w_gate, z, z_c, prec);
            lp.deltas[key + "W_up"] = input_patch(ex.w_up, z, z_c, prec);
            const DenseVector h_gated_c = gated_hidden(ex.w_gate, ex.w_up, z_c, cfg);
            lp.deltas[key + "W_down"] = output_weight_patch(delta_per_expert, h_gated_c, prec);
        }
        return lp;
    }
    }
    fail(Errc::InvalidConfig, "block_patch: unknown variant");
}

// --- application ------------------------------------------------------------

namespace {

struct ParamRef {
    DenseMatrix* mat = nullptr;
    DenseVector* vec = nullptr;
};

ParamRef resolve_param(BlockParams& b, const std::string& name) {
    if (name == "W_gate") return {&b.w_gate, nullptr};
    if (name == "W_up") return {&b.w_up, nullptr};
    if (name == "W_down") return {&b.w_down, nullptr};
    if (name == "m") return {nullptr, &b.m};
    if (name == "W_1") return {&b.w_1, nullptr};
    if (name == "b_1") return {nullptr, &b.b_1};
    if (name == "W_2") return {&b.w_2, nullptr};
    if (name == "b_2") return {nullptr, &b.b_2};
    if (name == "router") return {&b.router, nullptr};
    if (name.rfind("expert[", 0) == 0) {
        const size_t close = name.find(']');
        if (close != std::string::npos && close + 1 < name.size() && name[close + 1] == '.') {
            const size_t j = std::stoul(name.substr(7, close - 7));
            if (j >= b.experts.size())
                fail(Errc::ValidationError, "patch names expert " + std::to_string(j) + " beyond model");
            ExpertParams& ex = b.experts[j];
            const std::string field = name.substr(close + 2);
            if (field == "W_gate") return {&ex.w_gate, nullptr};
            if (field == "W_up") return {&ex.w_up, nullptr};
            if (field == "W_down") return {&ex.w_down, nullptr};
        }
    }
    fail(Errc::ValidationError, "unknown patch parameter name '" + name + "'");
}

} // namespace

void apply_layer_patch(BlockParams& b, const LayerPatch& lp, Precision p, bool negate) {
    for (const auto& [name, delta] : lp.deltas) {
        ParamRef ref = resolve_param(b, name);
        if (std::holds_alternative<DenseMatrix>(delta)) {
            const DenseMatrix& d = std::get<DenseMatrix>(delta);
            if (!ref.mat || ref.mat->rows != d.rows || ref.mat->cols != d.cols)
                fail(Errc::ValidationError, "patch shape mismatch for '" + name + "'");
            for (size_t i = 0; i < d.data.size(); ++i)
                ref.mat->data[i] = negate ? fp::sub(p, ref.mat->data[i], d.data[i])
                                          : fp::add(p, ref.mat->data[i], d.data[i]);
        } else {
            const DenseVector& d = std::get<DenseVector>(delta);
            if (!ref.vec || ref.vec->len() != d.len())
                fail(Errc::ValidationError, "patch shape mismatch for '" + name + "'");
            for (size_t i = 0; i < d.len(); ++i)
                ref.vec->data[i] = negate ? fp::sub(p, ref.vec->data[i], d.data[i])
                                          : fp::add(p, ref.vec->data[i], d.data[i]);
        }
    }
}

void apply_patch(ModelParams& m, const PatchSet& ps, bool negate) {
    if (ps.layers.size() > m.blocks.size())
        fail(Errc::ValidationError, "patch has more layers than the model");
    for (size_t l = 0; l < ps.layers.size(); ++l)
        apply_layer_patch(m.blocks[l], ps.layers[l], m.config.prec, negate);
}

double patch_dm_linf(const LayerPatch& lp) {
    auto it = lp.deltas.find("m");
    if (it == lp.deltas.end()) return 0.0;
    const DenseVector& dm = std::get<DenseVector>(it->second);
    double mx = 0.0;
    for (size_t i = 0; i < dm.len(); ++i) mx = std::max(mx, std::fabs(dm[i]));
    return mx;
}

// --- multilayer compiler ----------------------------------------------------

namespace {

double max_abs_diff(const DenseVector& a, const DenseVector& b) {
    check_same_len(a, b, "max_abs_diff");
    double mx = 0.0;
    for (size_t i = 0; i < a.len(); ++i) mx = std::max(mx, std::fabs(a[i] - b[i]));
    return mx;
}

} // namespace

MultilayerResult multilayer_patch(const ModelParams& m, const std::vector<size_t>& context,
                                  size_t query, const PatchOptions& opt) {
    const ModelConfig& cfg = m.config;
    std::vector<size_t> tokens = context;
    tokens.push_back(query);

    // Pass 1: record per-layer target inputs x_l and full-context v_C for the
    // query position
    const ForwardResult full = model_forward(m, tokens);
    const size_t n_layers = m.blocks.size();
    std::vector<DenseVector> x_target(n_layers + 1);
    x_target[0] = DenseVector(cfg.d_model);
    {
        const double* row = m.embed.row(query);
        for (size_t d = 0; d < cfg.d_model; ++d) x_target[0][d] = row[d];
    }
    for (size_t l = 0; l < n_layers; ++l) x_target[l + 1] = full.trace[l].x_out;

    // Pass 2: patch layer by layer; the next layer's input is the target output
    MultilayerResult res;
    res.patched = m;
    res.patch.layers.resize(n_layers);
    res.layer_residual.resize(n_layers);
    res.dm_linf.resize(n_layers);
    const CtxEntry no_ctx;
    for (size_t l = 0; l < n_layers; ++l) {
        const DenseVector v = attention_sublayer(m.blocks[l].attn, no_ctx, x_target[l], cfg.eps, cfg.prec);
        const ContextDelta cd = ContextDelta::make(v, full.trace[l].v_attn, cfg.prec);
        LayerPatch lp = block_patch(m.blocks[l], cd, x_target[l], cfg, opt);
        apply_layer_patch(res.patched.blocks[l], lp, cfg.prec);

        const DenseVector x_hat = block_forward(res.patched.blocks[l], no_ctx, x_target[l], cfg);
        res.layer_residual[l] = max_abs_diff(x_hat, x_target[l + 1]);
        if (res.layer_residual[l] > opt.residual_bound)
            fail(Errc::LayerResidualExceeded,
                 "layer " + std::to_string(l) + " reconstruction residual " +
                     std::to_string(res.layer_residual[l]) + " exceeds bound");
        res.dm_linf[l] = patch_dm_linf(lp);
        res.patch.layers[l] = std::move(lp);
    }
    return res;
}

} // namespace ctxpatch
