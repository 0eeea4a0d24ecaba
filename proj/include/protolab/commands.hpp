#pragma once

#include "protolab/metrics.hpp"
#include "protolab/training.hpp"

namespace protolab {

/// Everything a run needs, loaded from one JSON file. `--set a.b.c=value`
/// overrides individual keys; PROTOLAB_SEED in the environment overrides
/// the top-level seed last.
struct RunConfig {
    std::uint64_t seed = 42;
    int image_size = 64;       // working resolution for train/eval/predict
    std::string dataset_dir;   // <dir>/images, <dir>/masks, optional <dir>/split.json
    ModelConfig model;
    TrainConfig train;
    SynthConfig synth;

    void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& cfg);
void from_json(const nlohmann::json& j, RunConfig& cfg);

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides);

/// Creates `out` if needed; refuses a non-empty directory unless force.
/// Every command echoes the resolved config there before computing.
void prepare_out_dir(const std::string& out, bool force);

/// Generates the synthetic corpus under <out>/{images,masks} with a
/// seeded 80/10/10 split manifest at <out>/split.json.
void cmd_synth(const RunConfig& cfg, const std::string& out, bool force);

/// Trains on cfg.dataset_dir; writes checkpoints (best/last), optimizer
/// state, and training_log.csv. `resume_from` is a checkpoint prefix.
FitResult cmd_train(const RunConfig& cfg, const std::string& out, bool force,
                    const std::string& resume_from = "");

/// Evaluates a checkpoint on the dataset's test split (or everything when
/// no manifest exists); writes metrics.csv.
EvalReport cmd_eval(const RunConfig& cfg, const std::string& checkpoint_prefix,
                    const std::string& out, bool force);

/// Runs one PNG through a checkpoint; the probability map is resized back
/// to the input's original resolution. Writes <stem>_mask.png and
/// <stem>_overlay.png.
void cmd_predict(const RunConfig& cfg, const std::string& checkpoint_prefix,
                 const std::string& input_png, const std::string& out, bool force);

struct AblationRow {
    std::string name;
    std::int64_t params = 0;
    double mdsc = 0.0, miou = 0.0, mhd = 0.0;
};

/// Trains and evaluates all six configuration rows from one shared seed and
/// one shared synthetic dataset; writes ablation.csv.
std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, const std::string& out, bool force);

}  // namespace protolab
