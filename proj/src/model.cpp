#include "ctxpatch/model.hpp"

#include "ctxpatch/kernels.hpp"

#include <cmath>

namespace ctxpatch {

const char* to_string(Variant v) {
    switch (v) {
    case Variant::Gemma: return "gemma";
    case Variant::Llama: return "llama";
    case Variant::Vanilla: return "vanilla";
    case Variant::Parallel: return "parallel";
    case Variant::Moe: return "moe";
    }
    return "?";
}

Variant parse_variant(const std::string& s) {
    if (s == "gemma") return Variant::Gemma;
    if (s == "llama") return Variant::Llama;
    if (s == "vanilla") return Variant::Vanilla;
    if (s == "parallel") return Variant::Parallel;
    if (s == "moe") return Variant::Moe;
    fail(Errc::ValidationError, "unknown variant '" + s + "' (expected gemma|llama|vanilla|parallel|moe)");
}

Activation default_activation(Variant v) {
    switch (v) {
    case Variant::Gemma: return Activation::GeluTanh;
    case Variant::Vanilla: return Activation::GeluTanh;
    case Variant::Llama:
    case Variant::Parallel:
    case Variant::Moe: return Activation::Silu;
    }
    return Activation::GeluTanh;
}

DenseVector scaled_rmsnorm(const DenseVector& v, const DenseVector& scale, double eps, Precision p) {
    return vec_mul(rmsnorm(v, eps, p), scale, p);
}

DenseVector attention_sublayer(const AttnParams& p, const CtxEntry& ctx, const DenseVector& x,
                               double eps, Precision prec) {
    if (p.w_q.cols != x.len())
        fail(Errc::DimensionMismatch, "attention_sublayer: W_q cols vs input");
    const size_t n_keys = ctx.size() + 1;
    const DenseVector nx = scaled_rmsnorm(x, p.pre_norm_scale, eps, prec);
    const DenseVector q = kernels::matvec(p.w_q, nx, prec);

    std::vector<DenseVector> vals;
    vals.reserve(n_keys);
    DenseVector scores(n_keys);
    const double scale = fp::sqrt(prec, static_cast<double>(p.w_q.rows));
    for (size_t i = 0; i < n_keys; ++i) {
        const DenseVector& src = (i < ctx.size()) ? ctx[i] : x;
        DenseVector ns = (i < ctx.size()) ? scaled_rmsnorm(src, p.pre_norm_scale, eps, prec) : nx;
        DenseVector k = kernels::matvec(p.w_k, ns, prec);
        vals.push_back(kernels::matvec(p.w_v, ns, prec));
        scores[i] = fp::div(prec, kernels::dot(q, k, prec), scale);
    }
    const DenseVector alpha = softmax(scores, prec);

    DenseVector head_acc(p.w_v.rows);
    for (size_t i = 0; i < n_keys; ++i)
        for (size_t d = 0; d < head_acc.len(); ++d)
            head_acc[d] = fp::add(prec, head_acc[d], fp::mul(prec, alpha[i], vals[i][d]));
    const DenseVector proj = kernels::matvec(p.w_o, head_acc, prec);
    return vec_add(x, proj, prec);
}

namespace {

// z -> W_down(act(W_gate z) ⊙ (W_up z)); fills z_norm/h_gated/h_down of tr
DenseVector gated_branch(const DenseMatrix& w_gate, const DenseMatrix& w_up, const DenseMatrix& w_down,
                         const DenseVector& z, const ModelConfig& cfg, LayerTrace* tr) {
    const Precision p = cfg.prec;
    const DenseVector gate = map_activation(cfg.act, kernels::matvec(w_gate, z, p), p);
    const DenseVector up = kernels::matvec(w_up, z, p);
    const DenseVector h_gated = vec_mul(gate, up, p);
    const DenseVector h_down = kernels::matvec(w_down, h_gated, p);
    if (tr) {
        tr->z_norm = z;
        tr->h_gated = h_gated;
        tr->h_down = h_down;
    }
    return h_down;
}

} // namespace

DenseVector mlp_sublayer(const BlockParams& p, const DenseVector& v, const ModelConfig& cfg,
                         LayerTrace* tr) {
    const Precision prec = cfg.prec;
    switch (p.variant) {
    case Variant::Gemma: {
        const DenseVector z = scaled_rmsnorm(v, p.norm_scale, cfg.eps, prec);
        const DenseVector h_down = gated_branch(p.w_gate, p.w_up, p.w_down, z, cfg, tr);
        const DenseVector h_mlp = rmsnorm(h_down, cfg.eps, prec);
        if (tr) tr->h_mlp = h_mlp;
        return vec_add(v, vec_mul(p.m, h_mlp, prec), prec);
    }
    case Variant::Llama:
    case Variant::Parallel: {
        // for Parallel the caller passes the block input x as v
        const DenseVector z = scaled_rmsnorm(v, p.norm_scale, cfg.eps, prec);
        const DenseVector h_down = gated_branch(p.w_gate, p.w_up, p.w_down, z, cfg, tr);
        return vec_add(v, h_down, prec);
    }
    case Variant::Vanilla: {
        DenseVector pre = kernels::matvec(p.w_1, v, prec);
        pre = vec_add(pre, p.b_1, prec);
        const DenseVector hidden = map_activation(cfg.act, pre, prec);
        DenseVector out = kernels::matvec(p.w_2, hidden, prec);
        out = vec_add(out, p.b_2, prec);
        if (tr) {
            tr->z_norm = v;
            tr->h_gated = hidden;
            tr->h_down = out;
        }
        return vec_add(v, out, prec);
    }
    case Variant::Moe: {
        const DenseVector z = scaled_rmsnorm(v, p.norm_scale, cfg.eps, prec);
        const DenseVector gates = softmax(kernels::matvec(p.router, z, prec), prec);
        DenseVector acc(v.len());
        for (size_t j = 0; j < p.experts.size(); ++j) {
            const ExpertParams& ex = p.experts[j];
            const DenseVector gate = map_activation(cfg.act, kernels::matvec(ex.w_gate, z, prec), prec);
            const DenseVector up = kernels::matvec(ex.w_up, z, prec);
            const DenseVector h_down = kernels::matvec(ex.w_down, vec_mul(gate, up, prec), prec);
            for (size_t d = 0; d < acc.len(); ++d)
                acc[d] = fp::add(prec, acc[d], fp::mul(prec, gates[j], h_down[d]));
        }
        if (tr) tr->z_norm = z;
        return vec_add(v, acc, prec);
    }
    }
    fail(Errc::InvalidConfig, "mlp_sublayer: unknown variant");
}

DenseVector block_forward(const BlockParams& p, const CtxEntry& ctx, const DenseVector& x,
                          const ModelConfig& cfg, LayerTrace* tr) {
    const DenseVector v = attention_sublayer(p.attn, ctx, x, cfg.eps, cfg.prec);
    if (tr) tr->v_attn = v;
    DenseVector out;
    if (p.variant == Variant::Parallel) {
        // T(C,x) = x + A(C,x) + g(f(x)): the MLP branch sees x, not v
        const DenseVector z = scaled_rmsnorm(x, p.norm_scale, cfg.eps, cfg.prec);
        const DenseVector h_down = gated_branch(p.w_gate, p.w_up, p.w_down, z, cfg, tr);
        out = vec_add(v, h_down, cfg.prec);
    } else {
        out = mlp_sublayer(p, v, cfg, tr);
    }
    if (tr) tr->x_out = out;
    return out;
}

ForwardResult model_forward(const ModelParams& m, const std::vector<size_t>& tokens) {
    const ModelConfig& cfg = m.config;
    if (tokens.empty()) fail(Errc::TokenOutOfRange, "model_forward: empty token sequence");
    for (size_t t : tokens)
        if (t >= cfg.vocab)
            fail(Errc::TokenOutOfRange,
                 "token id " + std::to_string(t) + " >= vocab " + std::to_string(cfg.vocab));

    const size_t n = tokens.size();
    std::vector<DenseVector> x(n);
    for (size_t t = 0; t < n; ++t) {
        x[t] = DenseVector(cfg.d_model);
        const double* row = m.embed.row(tokens[t]);
        for (size_t d = 0; d < cfg.d_model; ++d) x[t][d] = row[d];
    }

    ForwardResult res;
    res.trace.resize(m.blocks.size());
    res.ctx.resize(m.blocks.size());
    for (size_t l = 0; l < m.blocks.size(); ++l) {
        const std::vector<DenseVector> states = x; // layer-l inputs of all positions
        res.ctx[l].assign(states.begin(), states.end() - 1);
        CtxEntry seen;
        seen.reserve(n);
        for (size_t t = 0; t < n; ++t) {
            LayerTrace* tr = (t == n - 1) ? &res.trace[l] : nullptr;
            x[t] = block_forward(m.blocks[l], seen, states[t], cfg, tr);
            seen.push_back(states[t]);
        }
    }

    const DenseVector fn = scaled_rmsnorm(x[n - 1], m.final_norm_scale, cfg.eps, cfg.prec);
    res.logits = kernels::matvec(m.embed, fn, cfg.prec);
    return res;
}

void validate_config(const ModelConfig& cfg) {
    if (cfg.d_model < 1 || cfg.d_ff < 1 || cfg.head_dim < 1)
        fail(Errc::InvalidConfig, "d_model, d_ff, head_dim must be positive");
    if (cfg.vocab < 2) fail(Errc::InvalidConfig, "vocab must be >= 2");
    if (!(cfg.eps >= 0.0) || !std::isfinite(cfg.eps)) fail(Errc::InvalidConfig, "eps must be finite and >= 0");
    if (cfg.variant == Variant::Moe && cfg.n_experts < 1)
        fail(Errc::InvalidConfig, "moe requires n_experts >= 1");
}

namespace {

DenseMatrix random_matrix(size_t rows, size_t cols, size_t fan_in, Rng& rng, Precision p) {
    DenseMatrix w(rows, cols);
    const double a = std::sqrt(3.0 / static_cast<double>(fan_in)); // uniform ±a has std 1/sqrt(fan_in)
    for (double& e : w.data) e = fp::round(p, rng.next_symmetric(a));
    return w;
}

DenseVector ones(size_t n) {
    DenseVector v(n);
    for (size_t i = 0; i < n; ++i) v[i] = 1.0;
    return v;
}

} // namespace

ModelParams gen_random_model(const ModelConfig& cfg, uint64_t seed) {
    validate_config(cfg);
    Rng rng(seed);
    ModelParams m;
    m.config = cfg;
    m.embed = random_matrix(cfg.vocab, cfg.d_model, cfg.d_model, rng, cfg.prec);
    m.blocks.resize(cfg.layers);
    for (BlockParams& b : m.blocks) {
        b.variant = cfg.variant;
        b.attn.w_q = random_matrix(cfg.head_dim, cfg.d_model, cfg.d_model, rng, cfg.prec);
        b.attn.w_k = random_matrix(cfg.head_dim, cfg.d_model, cfg.d_model, rng, cfg.prec);
        b.attn.w_v = random_matrix(cfg.head_dim, cfg.d_model, cfg.d_model, rng, cfg.prec);
        b.attn.w_o = random_matrix(cfg.d_model, cfg.head_dim, cfg.head_dim, rng, cfg.prec);
        b.attn.pre_norm_scale = ones(cfg.d_model);
        switch (cfg.variant) {
        case Variant::Gemma:
            b.norm_scale = ones(cfg.d_model);
            b.w_gate = random_matrix(cfg.d_ff, cfg.d_model, cfg.d_model, rng, cfg.prec);
            b.w_up = random_matrix(cfg.d_ff, cfg.d_model, cfg.d_model, rng, cfg.prec);
            b.w_down = random_matrix(cfg.d_model, cfg.d_ff, cfg.d_ff, rng, cfg.prec);
            b.m = ones(cfg.d_model);
            break;
        case Variant::Llama:
        case Variant::Parallel:
            b.norm_scale = ones(cfg.d_model);
            b.w_gate = random_matrix(cfg.d_ff, cfg.d_model, cfg.d_model, rng, cfg.prec);
            b.w_up = random_matrix(cfg.d_ff, cfg.d_model, cfg.d_model, rng, cfg.prec);
            b.w_down = random_matrix(cfg.d_model, cfg.d_ff, cfg.d_ff, rng, cfg.prec);
            break;
        case Variant::Vanilla:
            b.w_1 = random_matrix(cfg.d_ff, cfg.d_model, cfg.d_model, rng, cfg.prec);
            b.b_1 = DenseVector(cfg.d_ff);
            b.w_2 = random_matrix(cfg.d_model, cfg.d_ff, cfg.d_ff, rng, cfg.prec);
            b.b_2 = DenseVector(cfg.d_model);
            break;
        case Variant::Moe:
            b.norm_scale = ones(cfg.d_model);
            b.router = random_matrix(cfg.n_experts, cfg.d_model, cfg.d_model, rng, cfg.prec);
            b.experts.resize(cfg.n_experts);
            for (ExpertParams& ex : b.experts) {
                ex.w_gate = random_matrix(cfg.d_ff, cfg.d_model, cfg.d_model, rng, cfg.prec);
                ex.w_up = random_matrix(cfg.d_ff, cfg.d_model, cfg.d_model, rng, cfg.prec);
                ex.w_down = random_matrix(cfg.d_model, cfg.d_ff, cfg.d_ff, rng, cfg.prec);
            }
            break;
        }
    }
    m.final_norm_scale = ones(cfg.d_model);
    return m;
}

} // namespace ctxpatch
