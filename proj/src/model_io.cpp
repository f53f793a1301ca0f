#include "ctxpatch/model_io.hpp"

#include "json.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace ctxpatch {

using nlohmann::json;

namespace {

json mat_to_json(const DenseMatrix& w) {
    return json{{"rows", w.rows}, {"cols", w.cols}, {"data", w.data}};
}

json vec_to_json(const DenseVector& v) { return json(v.data); }

void check_finite(const std::vector<double>& xs, const std::string& what) {
    for (double x : xs)
        if (!std::isfinite(x)) fail(Errc::ValidationError, what + " contains a non-finite entry");
}

DenseMatrix mat_from_json(const json& j, const std::string& what, size_t rows, size_t cols) {
    if (!j.is_object() || !j.contains("rows") || !j.contains("cols") || !j.contains("data"))
        fail(Errc::ValidationError, what + ": expected {rows, cols, data}");
    DenseMatrix w;
    w.rows = j.at("rows").get<size_t>();
    w.cols = j.at("cols").get<size_t>();
    w.data = j.at("data").get<std::vector<double>>();
    if (w.data.size() != w.rows * w.cols)
        fail(Errc::ValidationError, what + ": data length != rows*cols");
    if (w.rows != rows || w.cols != cols)
        fail(Errc::ValidationError, what + ": expected " + std::to_string(rows) + "x" +
                                        std::to_string(cols) + ", got " + std::to_string(w.rows) +
                                        "x" + std::to_string(w.cols));
    check_finite(w.data, what);
    return w;
}

DenseVector vec_from_json(const json& j, const std::string& what, size_t len) {
    if (!j.is_array()) fail(Errc::ValidationError, what + ": expected a number array");
    DenseVector v;
    v.data = j.get<std::vector<double>>();
    if (v.len() != len)
        fail(Errc::ValidationError, what + ": expected length " + std::to_string(len) + ", got " +
                                        std::to_string(v.len()));
    check_finite(v.data, what);
    return v;
}

json config_to_json(const ModelConfig& c) {
    return json{{"variant", to_string(c.variant)},
                {"d_model", c.d_model},
                {"d_ff", c.d_ff},
                {"head_dim", c.head_dim},
                {"vocab", c.vocab},
                {"layers", c.layers},
                {"n_experts", c.n_experts},
                {"eps", c.eps},
                {"activation", to_string(c.act)},
                {"precision", to_string(c.prec)}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    try {
        c.variant = parse_variant(j.at("variant").get<std::string>());
        c.d_model = j.at("d_model").get<size_t>();
        c.d_ff = j.at("d_ff").get<size_t>();
        c.head_dim = j.at("head_dim").get<size_t>();
        c.vocab = j.at("vocab").get<size_t>();
        c.layers = j.at("layers").get<size_t>();
        c.n_experts = j.at("n_experts").get<size_t>();
        c.eps = j.at("eps").get<double>();
        c.act = parse_activation(j.at("activation").get<std::string>());
        c.prec = parse_precision(j.at("precision").get<std::string>());
    } catch (const json::exception& e) {
        fail(Errc::ValidationError, std::string("bad config: ") + e.what());
    }
    validate_config(c);
    return c;
}

json block_to_json(const BlockParams& b) {
    json attn{{"W_q", mat_to_json(b.attn.w_q)},
              {"W_k", mat_to_json(b.attn.w_k)},
              {"W_v", mat_to_json(b.attn.w_v)},
              {"W_o", mat_to_json(b.attn.w_o)},
              {"pre_norm_scale", vec_to_json(b.attn.pre_norm_scale)}};
    json mlp;
    switch (b.variant) {
    case Variant::Gemma:
        mlp = json{{"norm1_scale", vec_to_json(b.norm_scale)},
                   {"W_gate", mat_to_json(b.w_gate)},
                   {"W_up", mat_to_json(b.w_up)},
                   {"W_down", mat_to_json(b.w_down)},
                   {"m", vec_to_json(b.m)}};
        break;
    case Variant::Llama:
    case Variant::Parallel:
        mlp = json{{"norm_scale", vec_to_json(b.norm_scale)},
                   {"W_gate", mat_to_json(b.w_gate)},
                   {"W_up", mat_to_json(b.w_up)},
                   {"W_down", mat_to_json(b.w_down)}};
        break;
    case Variant::Vanilla:
        mlp = json{{"W_1", mat_to_json(b.w_1)},
                   {"b_1", vec_to_json(b.b_1)},
                   {"W_2", mat_to_json(b.w_2)},
                   {"b_2", vec_to_json(b.b_2)}};
        break;
    case Variant::Moe: {
        json experts = json::array();
        for (const ExpertParams& ex : b.experts)
            experts.push_back(json{{"W_gate", mat_to_json(ex.w_gate)},
                                   {"W_up", mat_to_json(ex.w_up)},
                                   {"W_down", mat_to_json(ex.w_down)}});
        mlp = json{{"norm_scale", vec_to_json(b.norm_scale)},
                   {"router", mat_to_json(b.router)},
                   {"experts", experts}};
        break;
    }
    }
    return json{{"variant", to_string(b.variant)}, {"attn", attn}, {"mlp", mlp}};
}

BlockParams block_from_json(const json& j, const ModelConfig& c, size_t layer) {
    const std::string where = "blocks[" + std::to_string(layer) + "]";
    BlockParams b;
    b.variant = parse_variant(j.at("variant").get<std::string>());
    const json& attn = j.at("attn");
    b.attn.w_q = mat_from_json(attn.at("W_q"), where + ".attn.W_q", c.head_dim, c.d_model);
    b.attn.w_k = mat_from_json(attn.at("W_k"), where + ".attn.W_k", c.head_dim, c.d_model);
    b.attn.w_v = mat_from_json(attn.at("W_v"), where + ".attn.W_v", c.head_dim, c.d_model);
    b.attn.w_o = mat_from_json(attn.at("W_o"), where + ".attn.W_o", c.d_model, c.head_dim);
    b.attn.pre_norm_scale =
        vec_from_json(attn.at("pre_norm_scale"), where + ".attn.pre_norm_scale", c.d_model);
    const json& mlp = j.at("mlp");
    switch (b.variant) {
    case Variant::Gemma:
        b.norm_scale = vec_from_json(mlp.at("norm1_scale"), where + ".norm1_scale", c.d_model);
        b.w_gate = mat_from_json(mlp.at("W_gate"), where + ".W_gate", c.d_ff, c.d_model);
        b.w_up = mat_from_json(mlp.at("W_up"), where + ".W_up", c.d_ff, c.d_model);
        b.w_down = mat_from_json(mlp.at("W_down"), where + ".W_down", c.d_model, c.d_ff);
        b.m = vec_from_json(mlp.at("m"), where + ".m", c.d_model);
        break;
    case Variant::Llama:
    case Variant::Parallel:
        b.norm_scale = vec_from_json(mlp.at("norm_scale"), where + ".norm_scale", c.d_model);
        b.w_gate = mat_from_json(mlp.at("W_gate"), where + ".W_gate", c.d_ff, c.d_model);
        b.w_up = mat_from_json(mlp.at("W_up"), where + ".W_up", c.d_ff, c.d_model);
        b.w_down = mat_from_json(mlp.at("W_down"), where + ".W_down", c.d_model, c.d_ff);
        break;
    case Variant::Vanilla:
        b.w_1 = mat_from_json(mlp.at("W_1"), where + ".W_1", c.d_ff, c.d_model);
        b.b_1 = vec_from_json(mlp.at("b_1"), where + ".b_1", c.d_ff);
        b.w_2 = mat_from_json(mlp.at("W_2"), where + ".W_2", c.d_model, c.d_ff);
        b.b_2 = vec_from_json(mlp.at("b_2"), where + ".b_2", c.d_model);
        break;
    case Variant::Moe: {
        b.norm_scale = vec_from_json(mlp.at("norm_scale"), where + ".norm_scale", c.d_model);
        const json& experts = mlp.at("experts");
        if (!experts.is_array() || experts.empty())
            fail(Errc::ValidationError, where + ": moe block needs a non-empty experts array");
        b.router = mat_from_json(mlp.at("router"), where + ".router", experts.size(), c.d_model);
        for (size_t e = 0; e < experts.size(); ++e) {
            const std::string ew = where + ".experts[" + std::to_string(e) + "]";
            ExpertParams ex;
            ex.w_gate = mat_from_json(experts[e].at("W_gate"), ew + ".W_gate", c.d_ff, c.d_model);
            ex.w_up = mat_from_json(experts[e].at("W_up"), ew + ".W_up", c.d_ff, c.d_model);
            ex.w_down = mat_from_json(experts[e].at("W_down"), ew + ".W_down", c.d_model, c.d_ff);
            b.experts.push_back(std::move(ex));
        }
        break;
    }
    }
    return b;
}

json parse_text(const std::string& text, const char* what) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) fail(Errc::ValidationError, std::string(what) + ": invalid JSON");
    return j;
}

} // namespace

std::string model_to_json(const ModelParams& m) {
    json j{{"config", config_to_json(m.config)},
           {"embed", mat_to_json(m.embed)},
           {"final_norm_scale", vec_to_json(m.final_norm_scale)}};
    json blocks = json::array();
    for (const BlockParams& b : m.blocks) blocks.push_back(block_to_json(b));
    j["blocks"] = blocks;
    return j.dump(2) + "\n";
}

ModelParams model_from_json(const std::string& text) {
    const json j = parse_text(text, "model");
    ModelParams m;
    try {
        m.config = config_from_json(j.at("config"));
        m.embed = mat_from_json(j.at("embed"), "embed", m.config.vocab, m.config.d_model);
        m.final_norm_scale =
            vec_from_json(j.at("final_norm_scale"), "final_norm_scale", m.config.d_model);
        const json& blocks = j.at("blocks");
        if (!blocks.is_array() || blocks.size() != m.config.layers)
            fail(Errc::ValidationError, "blocks array length != config.layers");
        for (size_t l = 0; l < blocks.size(); ++l)
            m.blocks.push_back(block_from_json(blocks[l], m.config, l));
    } catch (const json::exception& e) {
        fail(Errc::ValidationError, std::string("bad model file: ") + e.what());
    }
    return m;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(Errc::IoError, "cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) fail(Errc::IoError, "read failure on '" + path + "'");
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(Errc::IoError, "cannot open '" + path + "' for writing");
    out << content;
    out.flush();
    if (!out) fail(Errc::IoError, "write failure on '" + path + "'");
}

void save_model(const ModelParams& m, const std::string& path) {
    write_text_file(path, model_to_json(m));
}

ModelParams load_model(const std::string& path) { return model_from_json(read_text_file(path)); }

std::string patch_to_json(const PatchSet& ps, const PatchMeta& meta) {
    json layers = json::array();
    for (size_t l = 0; l < ps.layers.size(); ++l) {
        json deltas = json::object();
        for (const auto& [name, d] : ps.layers[l].deltas) {
            if (std::holds_alternative<DenseMatrix>(d))
                deltas[name] = mat_to_json(std::get<DenseMatrix>(d));
            else
                deltas[name] = vec_to_json(std::get<DenseVector>(d));
        }
        layers.push_back(json{{"layer", l}, {"deltas", deltas}});
    }
    json j{{"role", "+delta"},
           {"mode", to_string(meta.mode)},
           {"precision", to_string(meta.prec)},
           {"layers", layers}};
    if (!meta.layer_residual.empty() || !meta.dm_linf.empty())
        j["diagnostics"] = json{{"layer_residual", meta.layer_residual}, {"dm_linf", meta.dm_linf}};
    return j.dump(2) + "\n";
}

PatchFile patch_from_json(const std::string& text) {
    const json j = parse_text(text, "patch");
    PatchFile pf;
    try {
        if (j.at("role").get<std::string>() != "+delta")
            fail(Errc::ValidationError, "patch file role must be \"+delta\"");
        pf.meta.mode = parse_patch_mode(j.at("mode").get<std::string>());
        pf.meta.prec = parse_precision(j.at("precision").get<std::string>());
        if (j.contains("diagnostics")) {
            const json& d = j.at("diagnostics");
            pf.meta.layer_residual = d.value("layer_residual", std::vector<double>{});
            pf.meta.dm_linf = d.value("dm_linf", std::vector<double>{});
        }
        const json& layers = j.at("layers");
        pf.patch.layers.resize(layers.size());
        for (const json& jl : layers) {
            const size_t l = jl.at("layer").get<size_t>();
            if (l >= pf.patch.layers.size())
                fail(Errc::ValidationError, "patch layer index out of range");
            for (const auto& [name, jd] : jl.at("deltas").items()) {
                if (jd.is_array()) {
                    DenseVector v;
                    v.data = jd.get<std::vector<double>>();
                    check_finite(v.data, "delta '" + name + "'");
                    pf.patch.layers[l].deltas[name] = std::move(v);
                } else {
                    DenseMatrix w;
                    w.rows = jd.at("rows").get<size_t>();
                    w.cols = jd.at("cols").get<size_t>();
                    w.data = jd.at("data").get<std::vector<double>>();
                    if (w.data.size() != w.rows * w.cols)
                        fail(Errc::ValidationError, "delta '" + name + "': data length != rows*cols");
                    check_finite(w.data, "delta '" + name + "'");
                    pf.patch.layers[l].deltas[name] = std::move(w);
                }
            }
        }
    } catch (const json::exception& e) {
        fail(Errc::ValidationError, std::string("bad patch file: ") + e.what());
    }
    return pf;
}

void save_patch(const PatchSet& ps, const PatchMeta& meta, const std::string& path) {
    write_text_file(path, patch_to_json(ps, meta));
}

PatchFile load_patch(const std::string& path) { return patch_from_json(read_text_file(path)); }

} // namespace ctxpatch
