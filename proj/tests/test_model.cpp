#include "ctxpatch/model.hpp"

#include "ctxpatch/kernels.hpp"
#include "doctest.h"

#include <cmath>
#include <numeric>

using namespace ctxpatch;

// Independent straight-line reimplementation of the forward pass in plain
// double loops (no shared kernels, no precision plumbing).  Used as the
// [DERIVED] oracle for all five variants at Float64.
namespace oracle {

using Vec = std::vector<double>;

Vec norm(const Vec& v, double eps) {
    double ss = 0.0;
    for (double e : v) ss += e * e;
    const double den = std::sqrt(ss / static_cast<double>(v.size()) + eps);
    Vec out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] / den;
    return out;
}

Vec snorm(const Vec& v, const DenseVector& scale, double eps) {
    Vec out = norm(v, eps);
    for (size_t i = 0; i < out.size(); ++i) out[i] *= scale[i];
    return out;
}

Vec mv(const DenseMatrix& w, const Vec& x) {
    Vec y(w.rows, 0.0);
    for (size_t i = 0; i < w.rows; ++i)
        for (size_t j = 0; j < w.cols; ++j) y[i] += w.at(i, j) * x[j];
    return y;
}

double act(Activation a, double x) {
    switch (a) {
    case Activation::GeluTanh:
        return 0.5 * x * (1.0 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)));
    case Activation::Silu: return x / (1.0 + std::exp(-x));
    case Activation::Relu: return x > 0.0 ? x : 0.0;
    }
    return 0.0;
}

Vec softmax(const Vec& s) {
    double mx = s[0];
    for (double e : s) mx = std::max(mx, e);
    Vec p(s.size());
    double sum = 0.0;
    for (size_t i = 0; i < s.size(); ++i) {
        p[i] = std::exp(s[i] - mx);
        sum += p[i];
    }
    for (double& e : p) e /= sum;
    return p;
}

Vec attention(const AttnParams& a, const std::vector<Vec>& keys, const Vec& x, double eps) {
    const Vec nx = snorm(x, a.pre_norm_scale, eps);
    const Vec q = mv(a.w_q, nx);
    std::vector<Vec> normed;
    for (const Vec& c : keys) normed.push_back(snorm(c, a.pre_norm_scale, eps));
    normed.push_back(nx);
    Vec scores;
    std::vector<Vec> vals;
    for (const Vec& ns : normed) {
        const Vec k = mv(a.w_k, ns);
        vals.push_back(mv(a.w_v, ns));
        double d = 0.0;
        for (size_t i = 0; i < q.size(); ++i) d += q[i] * k[i];
        scores.push_back(d / std::sqrt(static_cast<double>(a.w_q.rows)));
    }
    const Vec alpha = softmax(scores);
    Vec head(a.w_v.rows, 0.0);
    for (size_t i = 0; i < alpha.size(); ++i)
        for (size_t d = 0; d < head.size(); ++d) head[d] += alpha[i] * vals[i][d];
    const Vec proj = mv(a.w_o, head);
    Vec out = x;
    for (size_t d = 0; d < out.size(); ++d) out[d] += proj[d];
    return out;
}

Vec gated(const DenseMatrix& wg, const DenseMatrix& wu, const DenseMatrix& wd, const Vec& z,
          Activation a) {
    Vec g = mv(wg, z);
    const Vec u = mv(wu, z);
    for (size_t i = 0; i < g.size(); ++i) g[i] = act(a, g[i]) * u[i];
    return mv(wd, g);
}

Vec block(const BlockParams& b, const std::vector<Vec>& keys, const Vec& x,
          const ModelConfig& cfg) {
    const Vec v = attention(b.attn, keys, x, cfg.eps);
    Vec out = v;
    switch (b.variant) {
    case Variant::Gemma: {
        const Vec hd = gated(b.w_gate, b.w_up, b.w_down, snorm(v, b.norm_scale, cfg.eps), cfg.act);
        const Vec hn = norm(hd, cfg.eps);
        for (size_t i = 0; i < out.size(); ++i) out[i] += b.m[i] * hn[i];
        break;
    }
    case Variant::Llama: {
        const Vec hd = gated(b.w_gate, b.w_up, b.w_down, snorm(v, b.norm_scale, cfg.eps), cfg.act);
        for (size_t i = 0; i < out.size(); ++i) out[i] += hd[i];
        break;
    }
    case Variant::Parallel: {
        const Vec hd = gated(b.w_gate, b.w_up, b.w_down, snorm(x, b.norm_scale, cfg.eps), cfg.act);
        for (size_t i = 0; i < out.size(); ++i) out[i] += hd[i];
        break;
    }
    case Variant::Vanilla: {
        Vec h = mv(b.w_1, v);
        for (size_t i = 0; i < h.size(); ++i) h[i] = act(cfg.act, h[i] + b.b_1[i]);
        const Vec o = mv(b.w_2, h);
        for (size_t i = 0; i < out.size(); ++i) out[i] += o[i] + b.b_2[i];
        break;
    }
    case Variant::Moe: {
        const Vec z = snorm(v, b.norm_scale, cfg.eps);
        const Vec gates = softmax(mv(b.router, z));
        for (size_t j = 0; j < b.experts.size(); ++j) {
            const Vec hd = gated(b.experts[j].w_gate, b.experts[j].w_up, b.experts[j].w_down, z,
                                 cfg.act);
            for (size_t i = 0; i < out.size(); ++i) out[i] += gates[j] * hd[i];
        }
        break;
    }
    }
    return out;
}

Vec forward_logits(const ModelParams& m, const std::vector<size_t>& tokens) {
    const size_t n = tokens.size();
    std::vector<Vec> x(n);
    for (size_t t = 0; t < n; ++t) {
        const double* row = m.embed.row(tokens[t]);
        x[t].assign(row, row + m.config.d_model);
    }
    for (const BlockParams& b : m.blocks) {
        const std::vector<Vec> states = x;
        for (size_t t = 0; t < n; ++t) {
            const std::vector<Vec> keys(states.begin(), states.begin() + t);
            x[t] = block(b, keys, states[t], m.config);
        }
    }
    return mv(m.embed, snorm(x[n - 1], m.final_norm_scale, m.config.eps));
}

} // namespace oracle

namespace {

ModelConfig small_cfg(Variant v, size_t layers = 2) {
    ModelConfig cfg;
    cfg.variant = v;
    cfg.d_model = 16;
    cfg.d_ff = 32;
    cfg.head_dim = 8;
    cfg.vocab = 30;
    cfg.layers = layers;
    cfg.n_experts = 3;
    cfg.act = default_activation(v);
    return cfg;
}

DenseVector random_vec(size_t n, Rng& rng, double a = 1.0) {
    DenseVector v(n);
    for (size_t i = 0; i < n; ++i) v[i] = rng.next_symmetric(a);
    return v;
}

double max_rel_diff(const DenseVector& got, const oracle::Vec& want) {
    double scale = 1e-30, diff = 0.0;
    for (double w : want) scale = std::max(scale, std::fabs(w));
    for (size_t i = 0; i < got.len(); ++i) diff = std::max(diff, std::fabs(got[i] - want[i]));
    return diff / scale;
}

} // namespace

TEST_SUITE("variant enum") {
    TEST_CASE("round-trips and defaults") {
        for (Variant v : {Variant::Gemma, Variant::Llama, Variant::Vanilla, Variant::Parallel,
                          Variant::Moe})
            CHECK(parse_variant(to_string(v)) == v);
        CHECK_THROWS_AS(parse_variant("mamba"), Error);
        CHECK(default_activation(Variant::Gemma) == Activation::GeluTanh);
        CHECK(default_activation(Variant::Vanilla) == Activation::GeluTanh);
        CHECK(default_activation(Variant::Llama) == Activation::Silu);
        CHECK(default_activation(Variant::Parallel) == Activation::Silu);
        CHECK(default_activation(Variant::Moe) == Activation::Silu);
    }
}

TEST_SUITE("attention") {
    TEST_CASE("empty context attends only to itself") {
        // softmax over one score is exactly 1, so the output must be bitwise
        // x + W_o W_v n(x)
        Rng rng(2);
        const ModelConfig cfg = small_cfg(Variant::Gemma);
        const ModelParams m = gen_random_model(cfg, 17);
        const AttnParams& a = m.blocks[0].attn;
        const DenseVector x = random_vec(cfg.d_model, rng);
        const DenseVector got = attention_sublayer(a, {}, x, cfg.eps, cfg.prec);
        const DenseVector nx = scaled_rmsnorm(x, a.pre_norm_scale, cfg.eps, cfg.prec);
        const DenseVector wv = kernels::matvec(a.w_v, nx, cfg.prec);
        const DenseVector proj = kernels::matvec(a.w_o, wv, cfg.prec);
        CHECK(got == vec_add(x, proj));
    }

    TEST_CASE("zero output projection passes the residual through") {
        Rng rng(3);
        const ModelConfig cfg = small_cfg(Variant::Llama);
        ModelParams m = gen_random_model(cfg, 18);
        m.blocks[0].attn.w_o = DenseMatrix(cfg.d_model, cfg.head_dim);
        const DenseVector x = random_vec(cfg.d_model, rng);
        CtxEntry ctx{random_vec(cfg.d_model, rng), random_vec(cfg.d_model, rng)};
        CHECK(attention_sublayer(m.blocks[0].attn, ctx, x, cfg.eps, cfg.prec) == x);
    }

    TEST_CASE("matches the straight-line oracle with a three-token context") {
        Rng rng(4);
        const ModelConfig cfg = small_cfg(Variant::Gemma);
        const ModelParams m = gen_random_model(cfg, 19);
        const DenseVector x = random_vec(cfg.d_model, rng);
        CtxEntry ctx;
        std::vector<oracle::Vec> keys;
        for (int i = 0; i < 3; ++i) {
            ctx.push_back(random_vec(cfg.d_model, rng));
            keys.emplace_back(ctx.back().data);
        }
        const DenseVector got = attention_sublayer(m.blocks[0].attn, ctx, x, cfg.eps, cfg.prec);
        const oracle::Vec want = oracle::attention(m.blocks[0].attn, keys, oracle::Vec(x.data),
                                                   cfg.eps);
        CHECK(max_rel_diff(got, want) < 1e-13);
    }
}

TEST_SUITE("mlp and block") {
    TEST_CASE("gemma with zero post-norm scale is the identity on v") {
        Rng rng(5);
        const ModelConfig cfg = small_cfg(Variant::Gemma);
        ModelParams m = gen_random_model(cfg, 20);
        m.blocks[0].m = DenseVector(cfg.d_model);
        const DenseVector v = random_vec(cfg.d_model, rng);
        CHECK(mlp_sublayer(m.blocks[0], v, cfg) == v);
    }

    TEST_CASE("vanilla with zero W_2 adds only the output bias") {
        Rng rng(6);
        const ModelConfig cfg = small_cfg(Variant::Vanilla);
        ModelParams m = gen_random_model(cfg, 21);
        m.blocks[0].w_2 = DenseMatrix(cfg.d_model, cfg.d_ff);
        m.blocks[0].b_2 = random_vec(cfg.d_model, rng);
        const DenseVector v = random_vec(cfg.d_model, rng);
        CHECK(mlp_sublayer(m.blocks[0], v, cfg) == vec_add(v, m.blocks[0].b_2));
    }

    TEST_CASE("llama with zero W_down reduces the block to its attention half") {
        Rng rng(7);
        const ModelConfig cfg = small_cfg(Variant::Llama);
        ModelParams m = gen_random_model(cfg, 22);
        m.blocks[0].w_down = DenseMatrix(cfg.d_model, cfg.d_ff);
        const DenseVector x = random_vec(cfg.d_model, rng);
        CtxEntry ctx{random_vec(cfg.d_model, rng)};
        CHECK(block_forward(m.blocks[0], ctx, x, cfg) ==
              attention_sublayer(m.blocks[0].attn, ctx, x, cfg.eps, cfg.prec));
    }

    TEST_CASE("parallel block feeds the MLP from x, not from v") {
        Rng rng(8);
        const ModelConfig cfg = small_cfg(Variant::Parallel);
        const ModelParams m = gen_random_model(cfg, 23);
        const DenseVector x = random_vec(cfg.d_model, rng);
        // two different contexts change attention but must not change the
        // recorded MLP branch
        CtxEntry c1{random_vec(cfg.d_model, rng)};
        CtxEntry c2{random_vec(cfg.d_model, rng), random_vec(cfg.d_model, rng)};
        LayerTrace t1, t2;
        block_forward(m.blocks[0], c1, x, cfg, &t1);
        block_forward(m.blocks[0], c2, x, cfg, &t2);
        CHECK(t1.h_down == t2.h_down);
        CHECK(t1.z_norm == t2.z_norm);
        CHECK_FALSE(t1.v_attn == t2.v_attn);
    }

    TEST_CASE("trace fields are the intermediates they claim to be") {
        Rng rng(9);
        const ModelConfig cfg = small_cfg(Variant::Gemma);
        const ModelParams m = gen_random_model(cfg, 24);
        const DenseVector x = random_vec(cfg.d_model, rng);
        CtxEntry ctx{random_vec(cfg.d_model, rng), random_vec(cfg.d_model, rng)};
        LayerTrace tr;
        const DenseVector out = block_forward(m.blocks[0], ctx, x, cfg, &tr);
        CHECK(tr.x_out == out);
        CHECK(tr.v_attn == attention_sublayer(m.blocks[0].attn, ctx, x, cfg.eps, cfg.prec));
        CHECK(tr.z_norm ==
              scaled_rmsnorm(tr.v_attn, m.blocks[0].norm_scale, cfg.eps, cfg.prec));
        CHECK(tr.h_down == kernels::matvec(m.blocks[0].w_down, tr.h_gated, cfg.prec));
        CHECK(tr.h_mlp == rmsnorm(tr.h_down, cfg.eps, cfg.prec));
    }

    TEST_CASE("gemma h_mlp rederives from h_down within 1e-13") {
        const ModelConfig cfg = small_cfg(Variant::Gemma);
        const ModelParams m = gen_random_model(cfg, 25);
        const ForwardResult r = model_forward(m, {1, 5, 9, 2});
        for (const LayerTrace& tr : r.trace) {
            const oracle::Vec hn = oracle::norm(oracle::Vec(tr.h_down.data), cfg.eps);
            CHECK(max_rel_diff(tr.h_mlp, hn) < 1e-13);
        }
    }

    TEST_CASE("moe gate weights sum to one") {
        const ModelConfig cfg = small_cfg(Variant::Moe);
        const ModelParams m = gen_random_model(cfg, 26);
        const ForwardResult r = model_forward(m, {3, 7, 11});
        for (size_t l = 0; l < cfg.layers; ++l) {
            const DenseVector gates =
                softmax(kernels::matvec(m.blocks[l].router, r.trace[l].z_norm, cfg.prec), cfg.prec);
            const double sum = std::accumulate(gates.data.begin(), gates.data.end(), 0.0);
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_SUITE("model_forward") {
    TEST_CASE("matches the independent oracle for every variant") {
        const std::vector<size_t> tokens{4, 12, 7, 0, 21};
        for (Variant v : {Variant::Gemma, Variant::Llama, Variant::Vanilla, Variant::Parallel,
                          Variant::Moe}) {
            CAPTURE(to_string(v));
            const ModelParams m = gen_random_model(small_cfg(v), 31);
            const ForwardResult got = model_forward(m, tokens);
            const oracle::Vec want = oracle::forward_logits(m, tokens);
            CHECK(max_rel_diff(got.logits, want) < 1e-12);
        }
    }

    TEST_CASE("zero-layer model is unembed(norm(embed(token)))") {
        ModelConfig cfg = small_cfg(Variant::Gemma, 0);
        const ModelParams m = gen_random_model(cfg, 32);
        const ForwardResult r = model_forward(m, {13});
        DenseVector x(cfg.d_model);
        for (size_t d = 0; d < cfg.d_model; ++d) x[d] = m.embed.at(13, d);
        const DenseVector fn = scaled_rmsnorm(x, m.final_norm_scale, cfg.eps, cfg.prec);
        CHECK(r.logits == kernels::matvec(m.embed, fn, cfg.prec));
    }

    TEST_CASE("deterministic") {
        const ModelParams m = gen_random_model(small_cfg(Variant::Llama), 33);
        const std::vector<size_t> tokens{1, 2, 3, 4};
        CHECK(model_forward(m, tokens).logits == model_forward(m, tokens).logits);
    }

    TEST_CASE("appending a token never changes earlier positions") {
        // causal mask: position t sees only positions < t, so the layer-(l+1)
        // input of position k recorded in a longer run must equal the block
        // output of position k computed from the prefix alone, bitwise
        const ModelParams m = gen_random_model(small_cfg(Variant::Gemma), 34);
        const std::vector<size_t> full{2, 9, 17, 5, 23, 11};
        const ForwardResult rf = model_forward(m, full);
        const size_t layers = m.config.layers;
        for (size_t k = 1; k < full.size(); ++k) {
            const std::vector<size_t> prefix(full.begin(), full.begin() + k);
            const ForwardResult rp = model_forward(m, prefix);
            for (size_t l = 0; l + 1 < layers; ++l)
                CHECK(rp.trace[l].x_out == rf.ctx[l + 1][k - 1]);
        }
    }

    TEST_CASE("context states are the layer inputs of non-final positions") {
        const ModelParams m = gen_random_model(small_cfg(Variant::Vanilla), 35);
        const std::vector<size_t> tokens{8, 3, 14};
        const ForwardResult r = model_forward(m, tokens);
        REQUIRE(r.ctx.size() == m.config.layers);
        for (size_t l = 0; l < r.ctx.size(); ++l) REQUIRE(r.ctx[l].size() == tokens.size() - 1);
        for (size_t t = 0; t + 1 < tokens.size(); ++t) {
            DenseVector emb(m.config.d_model);
            for (size_t d = 0; d < emb.len(); ++d) emb[d] = m.embed.at(tokens[t], d);
            CHECK(r.ctx[0][t] == emb);
        }
    }

    TEST_CASE("rejects bad tokens") {
        const ModelParams m = gen_random_model(small_cfg(Variant::Gemma), 36);
        CHECK_THROWS_AS(model_forward(m, {}), Error);
        CHECK_THROWS_AS(model_forward(m, {0, 30}), Error);
        try {
            model_forward(m, {0, 99});
        } catch (const Error& e) {
            CHECK(e.code() == Errc::TokenOutOfRange);
        }
    }
}

TEST_SUITE("gen_random_model") {
    TEST_CASE("same seed gives the same model, different seed differs") {
        const ModelConfig cfg = small_cfg(Variant::Moe);
        const ModelParams a = gen_random_model(cfg, 77);
        const ModelParams b = gen_random_model(cfg, 77);
        const ModelParams c = gen_random_model(cfg, 78);
        CHECK(a.embed == b.embed);
        CHECK(a.blocks[1].attn.w_q == b.blocks[1].attn.w_q);
        CHECK(a.blocks[0].experts[2].w_down == b.blocks[0].experts[2].w_down);
        CHECK_FALSE(a.embed == c.embed);
    }

    TEST_CASE("shapes follow the config") {
        ModelConfig cfg = small_cfg(Variant::Gemma);
        cfg.d_model = 12;
        cfg.d_ff = 20;
        cfg.head_dim = 6;
        cfg.vocab = 40;
        const ModelParams m = gen_random_model(cfg, 1);
        CHECK(m.embed.rows == 40);
        CHECK(m.embed.cols == 12);
        CHECK(m.blocks[0].attn.w_q.rows == 6);
        CHECK(m.blocks[0].attn.w_q.cols == 12);
        CHECK(m.blocks[0].attn.w_o.rows == 12);
        CHECK(m.blocks[0].attn.w_o.cols == 6);
        CHECK(m.blocks[0].w_gate.rows == 20);
        CHECK(m.blocks[0].w_gate.cols == 12);
        CHECK(m.blocks[0].w_down.rows == 12);
        CHECK(m.blocks[0].w_down.cols == 20);
        CHECK(m.blocks[0].m.len() == 12);
        CHECK(m.final_norm_scale.len() == 12);
    }

    TEST_CASE("weight statistics match uniform(-sqrt(3/fan_in), +) moments") {
        // [DERIVED: moment bounds] N = 1e5 samples, 5-sigma acceptance bands
        ModelConfig cfg = small_cfg(Variant::Gemma, 0);
        cfg.vocab = 1000;
        cfg.d_model = 100;
        const ModelParams m = gen_random_model(cfg, 123);
        const double a = std::sqrt(3.0 / 100.0);
        const double sigma2 = 1.0 / 100.0;
        const size_t n = m.embed.data.size();
        REQUIRE(n == 100000);
        double sum = 0.0, sum2 = 0.0, mx = 0.0;
        for (double e : m.embed.data) {
            sum += e;
            sum2 += e * e;
            mx = std::max(mx, std::fabs(e));
        }
        const double mean = sum / static_cast<double>(n);
        const double var = sum2 / static_cast<double>(n) - mean * mean;
        const double rootn = std::sqrt(static_cast<double>(n));
        CHECK(mx <= a);
        CHECK(std::fabs(mean) < 5.0 * std::sqrt(sigma2) / rootn);
        // Var(sample var) for uniform = (mu4 - sigma^4)/n with mu4 = 1.8 sigma^4
        CHECK(std::fabs(var - sigma2) < 5.0 * 0.894 * sigma2 / rootn);
    }

    TEST_CASE("norm scales start at one, biases at zero") {
        const ModelParams g = gen_random_model(small_cfg(Variant::Gemma), 2);
        CHECK(g.blocks[0].norm_scale == DenseVector(16, 1.0));
        CHECK(g.blocks[0].m == DenseVector(16, 1.0));
        CHECK(g.final_norm_scale == DenseVector(16, 1.0));
        const ModelParams v = gen_random_model(small_cfg(Variant::Vanilla), 2);
        CHECK(v.blocks[0].b_1 == DenseVector(32, 0.0));
        CHECK(v.blocks[0].b_2 == DenseVector(16, 0.0));
    }

    TEST_CASE("invalid configs are rejected") {
        ModelConfig cfg = small_cfg(Variant::Gemma);
        cfg.vocab = 1;
        CHECK_THROWS_AS(gen_random_model(cfg, 1), Error);
        cfg = small_cfg(Variant::Gemma);
        cfg.d_ff = 0;
        CHECK_THROWS_AS(gen_random_model(cfg, 1), Error);
        cfg = small_cfg(Variant::Moe);
        cfg.n_experts = 0;
        CHECK_THROWS_AS(gen_random_model(cfg, 1), Error);
        cfg = small_cfg(Variant::Gemma);
        cfg.eps = -1.0;
        CHECK_THROWS_AS(gen_random_model(cfg, 1), Error);
    }
}
