#include "protolab/commands.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "protolab/png_io.hpp"

namespace fs = std::filesystem;

namespace protolab {

void RunConfig::validate() const {
    if (image_size <= 0 || image_size % 32 != 0)
        throw std::invalid_argument("image_size must be a positive multiple of 32, got " +
                                    std::to_string(image_size));
    model.validate();
    train.validate();
    synth.validate();
}

void to_json(nlohmann::json& j, const RunConfig& cfg) {
    j = nlohmann::json{{"seed", cfg.seed},
                       {"image_size", cfg.image_size},
                       {"dataset_dir", cfg.dataset_dir},
                       {"model", cfg.model},
                       {"train", cfg.train},
                       {"synth", cfg.synth}};
}

void from_json(const nlohmann::json& j, RunConfig& cfg) {
    if (j.contains("seed")) j.at("seed").get_to(cfg.seed);
    if (j.contains("image_size")) j.at("image_size").get_to(cfg.image_size);
    if (j.contains("dataset_dir")) j.at("dataset_dir").get_to(cfg.dataset_dir);
    if (j.contains("model")) j.at("model").get_to(cfg.model);
    if (j.contains("train")) j.at("train").get_to(cfg.train);
    if (j.contains("synth")) j.at("synth").get_to(cfg.synth);
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
    for (const std::string& ov : overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos || eq == 0)
            throw std::invalid_argument("--set expects key.path=value, got '" + ov + "'");
        std::string key = "/" + ov.substr(0, eq);
        for (char& c : key)
            if (c == '.') c = '/';
        const std::string raw = ov.substr(eq + 1);
        nlohmann::json value = nlohmann::json::parse(raw, nullptr, /*allow_exceptions=*/false);
        if (value.is_discarded()) value = raw;  // bare strings need no quoting
        j[nlohmann::json::json_pointer(key)] = value;
    }
    RunConfig cfg = j.get<RunConfig>();
    if (const char* env = std::getenv("PROTOLAB_SEED")) cfg.seed = std::strtoull(env, nullptr, 10);
    cfg.validate();
    return cfg;
}

void prepare_out_dir(const std::string& out, bool force) {
    if (out.empty()) throw std::invalid_argument("output directory is required");
    const fs::path p(out);
    if (fs::exists(p)) {
        if (!fs::is_directory(p)) throw std::runtime_error(out + " exists and is not a directory");
        if (!fs::is_empty(p) && !force)
            throw std::runtime_error(out + " is not empty (pass --force to reuse it)");
    } else {
        fs::create_directories(p);
    }
}

namespace {

void echo_config(const RunConfig& cfg, const std::string& out) {
    std::ofstream f(out + "/config.resolved.json");
    if (!f) throw std::runtime_error("cannot write " + out + "/config.resolved.json");
    f << nlohmann::json(cfg).dump(2) << "\n";
}

struct LoadedDataset {
    std::vector<Sample> all, train, val, test;
};

LoadedDataset load_dataset(const RunConfig& cfg) {
    if (cfg.dataset_dir.empty())
        throw std::invalid_argument("dataset_dir is required for this command");
    LoadedDataset ds;
    ds.all = load_folder(cfg.dataset_dir + "/images", cfg.dataset_dir + "/masks", cfg.image_size);
    const std::string manifest = cfg.dataset_dir + "/split.json";
    SplitManifest m = fs::exists(manifest) ? load_manifest(manifest)
                                           : split_dataset(ds.all, cfg.seed);
    ds.train = select_split(ds.all, m.train);
    ds.val = select_split(ds.all, m.val);
    ds.test = select_split(ds.all, m.test);
    return ds;
}

Tensor png_to_tensor(const PngImage& img) {
    Tensor t({3, img.height, img.width});
    const std::int64_t plane = static_cast<std::int64_t>(img.height) * img.width;
    for (std::int64_t p = 0; p < plane; ++p)
        for (int c = 0; c < 3; ++c)
            t.data()[c * plane + p] =
                img.pixels[static_cast<std::size_t>(p) * img.channels +
                           (img.channels == 3 ? static_cast<std::size_t>(c) : 0)] / 255.0f;
    return t;
}

}  // namespace

void cmd_synth(const RunConfig& cfg, const std::string& out, bool force) {
    prepare_out_dir(out, force);
    echo_config(cfg, out);
    const std::vector<Sample> samples = synth_generate(cfg.synth);
    write_dataset(out, samples);
    save_manifest(split_dataset(samples, cfg.seed), out + "/split.json");
    std::printf("synth: wrote %zu image/mask pairs to %s\n", samples.size(), out.c_str());
}

FitResult cmd_train(const RunConfig& cfg, const std::string& out, bool force,
                    const std::string& resume_from) {
    prepare_out_dir(out, force);
    echo_config(cfg, out);
    const LoadedDataset ds = load_dataset(cfg);
    PrototypeLab model(cfg.model, cfg.seed);
    FitOptions opts;
    opts.out_dir = out;
    opts.resume_from = resume_from;
    FitResult result = fit(model, ds.train, ds.val, cfg.train, opts);
    write_training_log(out + "/training_log.csv", result.log);
    std::printf("train: %d epochs, best val loss %.6f, checkpoints under %s\n",
                result.epochs_run, result.best_val_loss, out.c_str());
    return result;
}

EvalReport cmd_eval(const RunConfig& cfg, const std::string& checkpoint_prefix,
                    const std::string& out, bool force) {
    prepare_out_dir(out, force);
    echo_config(cfg, out);
    PrototypeLab model = PrototypeLab::load_checkpoint(checkpoint_prefix);
    const LoadedDataset ds = load_dataset(cfg);
    const std::vector<Sample>& eval_set = ds.test.empty() ? ds.all : ds.test;
    EvalReport report = evaluate(model, eval_set);
    report.write_csv(out + "/metrics.csv");
    std::printf("eval: %zu images, mDSC %.4f, mIoU %.4f, mHD95 %.2f -> %s/metrics.csv\n",
                report.rows.size(), report.mean_overlap.dsc, report.mean_overlap.iou,
                report.mean_distance.hd95, out.c_str());
    return report;
}

void cmd_predict(const RunConfig& cfg, const std::string& checkpoint_prefix,
                 const std::string& input_png, const std::string& out, bool force) {
    prepare_out_dir(out, force);
    echo_config(cfg, out);
    PrototypeLab model = PrototypeLab::load_checkpoint(checkpoint_prefix);
    const PngImage img = read_png(input_png);
    const Tensor original = png_to_tensor(img);

    GradMode::NoGradGuard ng;
    Tensor batch({1, 3, img.height, img.width},
                 {original.values().begin(), original.values().end()});
    const Tensor resized = resize_bilinear(batch, cfg.image_size, cfg.image_size);
    const ForwardOutput fwd = model.forward(resized, Mode::Eval);
    const Tensor prob = resize_bilinear(fwd.final_mask, img.height, img.width);

    const std::string stem = fs::path(input_png).stem().string();
    save_mask(prob, out + "/" + stem + "_mask.png");
    save_overlay(original, prob, out + "/" + stem + "_overlay.png");
    std::printf("predict: wrote %s/%s_{mask,overlay}.png\n", out.c_str(), stem.c_str());
}

std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, const std::string& out, bool force) {
    prepare_out_dir(out, force);
    echo_config(cfg, out);
    SynthConfig synth = cfg.synth;
    synth.size = cfg.image_size;
    const std::vector<Sample> samples = synth_generate(synth);
    const SplitManifest m = split_dataset(samples, cfg.seed);
    const std::vector<Sample> train_set = select_split(samples, m.train);
    const std::vector<Sample> val_set = select_split(samples, m.val);
    const std::vector<Sample> test_set = select_split(samples, m.test);

    std::vector<AblationRow> rows;
    for (int r = 1; r <= 6; ++r) {
        const ModelConfig mc = ModelConfig::ablation_row(r, cfg.model);
        PrototypeLab model(mc, cfg.seed);
        AblationRow row;
        row.name = ModelConfig::ablation_row_name(r);
        row.params = model.trainable_param_count();

        FitOptions opts;
        opts.out_dir = out + "/row" + std::to_string(r);
        fs::create_directories(opts.out_dir);
        const FitResult fr = fit(model, train_set, val_set, cfg.train, opts);
        PrototypeLab best = PrototypeLab::load_checkpoint(fr.best_checkpoint_prefix);
        const EvalReport report = evaluate(best, test_set);
        row.mdsc = report.mean_overlap.dsc;
        row.miou = report.mean_overlap.iou;
        row.mhd = report.mean_distance.hd;
        std::printf("ablate row %d (%s): %lld params, mDSC %.4f, mIoU %.4f, mHD %.2f\n", r,
                    row.name.c_str(), static_cast<long long>(row.params), row.mdsc, row.miou,
                    row.mhd);
        rows.push_back(std::move(row));
    }

    std::ofstream csv(out + "/ablation.csv");
    if (!csv) throw std::runtime_error("cannot write " + out + "/ablation.csv");
    csv << "name,params,mdsc,miou,mhd\n";
    char buf[256];
    for (const AblationRow& row : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%lld,%.6f,%.6f,%.4f\n", row.name.c_str(),
                      static_cast<long long>(row.params), row.mdsc, row.miou, row.mhd);
        csv << buf;
    }
    return rows;
}

}  // namespace protolab
