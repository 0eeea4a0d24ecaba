#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "protolab/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"prototype-guided segmentation toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_dir, checkpoint, input_png, resume_from;
    std::vector<std::string> overrides;
    bool force = false;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "run configuration JSON")->required();
        sub->add_option("--out", out_dir, "output directory")->required();
        sub->add_option("--set", overrides, "override a config key, e.g. --set train.lr=0.001");
        sub->add_flag("--force", force, "allow writing into a non-empty output directory");
    };

    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    add_common(synth);

    CLI::App* train = app.add_subcommand("train", "train a model on dataset_dir");
    add_common(train);
    train->add_option("--resume", resume_from, "checkpoint prefix to resume from");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    add_common(eval);
    eval->add_option("--checkpoint", checkpoint, "checkpoint prefix (without extension)")->required();

    CLI::App* predict = app.add_subcommand("predict", "segment a single PNG");
    add_common(predict);
    predict->add_option("--checkpoint", checkpoint, "checkpoint prefix (without extension)")->required();
    predict->add_option("--input", input_png, "input PNG image")->required();

    CLI::App* ablate = app.add_subcommand("ablate", "train and score all six configuration rows");
    add_common(ablate);

    CLI11_PARSE(app, argc, argv);

    try {
        const protolab::RunConfig cfg = protolab::load_run_config(config_path, overrides);
        if (synth->parsed()) protolab::cmd_synth(cfg, out_dir, force);
        else if (train->parsed()) protolab::cmd_train(cfg, out_dir, force, resume_from);
        else if (eval->parsed()) protolab::cmd_eval(cfg, checkpoint, out_dir, force);
        else if (predict->parsed()) protolab::cmd_predict(cfg, checkpoint, input_png, out_dir, force);
        else if (ablate->parsed()) protolab::cmd_ablate(cfg, out_dir, force);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
