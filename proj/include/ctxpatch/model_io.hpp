#pragma once

#include "ctxpatch/model.hpp"
#include "ctxpatch/patchkit.hpp"

#include <string>

// JSON (de)serialization. Numbers are written with shortest round-trip
// decimal representation, so Float64 values survive save/load bitwise.
// Object keys are emitted sorted, so identical inputs give identical bytes.
//
// Model file:
//   { "config": {...}, "embed": MAT, "blocks": [ {"variant", "attn", "mlp"} ],
//     "final_norm_scale": VEC }
// where MAT = {"rows": r, "cols": c, "data": [..]} and VEC = [..].
//
// Patch file (same weight encoding, flagged as additive deltas):
//   { "role": "+delta", "mode": "naive"|"stable", "precision": "...",
//     "layers": [ {"layer": l, "deltas": { name: MAT|VEC }} ],
//     "diagnostics": {"layer_residual": [..], "dm_linf": [..]} }

namespace ctxpatch {

struct PatchMeta {
    PatchMode mode = PatchMode::Naive;
    Precision prec = Precision::Float64;
    std::vector<double> layer_residual;
    std::vector<double> dm_linf;
};

struct PatchFile {
    PatchSet patch;
    PatchMeta meta;
};

std::string model_to_json(const ModelParams& m);
ModelParams model_from_json(const std::string& text);
void save_model(const ModelParams& m, const std::string& path);
ModelParams load_model(const std::string& path);

std::string patch_to_json(const PatchSet& ps, const PatchMeta& meta);
PatchFile patch_from_json(const std::string& text);
void save_patch(const PatchSet& ps, const PatchMeta& meta, const std::string& path);
PatchFile load_patch(const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

} // namespace ctxpatch
