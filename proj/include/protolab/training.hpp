#pragma once

#include <filesystem>

#include "protolab/data.hpp"
#include "protolab/model.hpp"

namespace protolab {

struct TrainConfig {
    float lr = 1e-4f;
    int batch_size = 4;
    int max_epochs = 30;
    int plateau_patience = 3;
    float plateau_factor = 0.5f;
    float min_delta = 1e-4f;
    float lr_floor = 1e-7f;
    int early_stop_patience = 8;
    std::uint64_t seed = 42;
    bool deep_supervision = true;
    bool augment = true;

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

/// 0.5 * BCE + 0.5 * (1 - (2*sum(p*g)+smooth)/(sum(p)+sum(g)+smooth)).
/// gt must be strictly binary; predictions are clamped to [1e-7, 1-1e-7]
/// inside the cross-entropy terms.
Tensor bce_dice_loss(const Tensor& pred, const Tensor& gt, float smooth = 1.0f);

/// Forward-only {bce, dice} components, for recipe checks and logging.
std::pair<double, double> bce_dice_terms(const Tensor& pred, const Tensor& gt, float smooth = 1.0f);

/// Area-average pooling by `factor` followed by thresholding at 0.5.
Tensor downsample_mask(const Tensor& gt, int factor);

class Adam {
public:
    Adam() = default;
    Adam(std::vector<NamedTensor> params, float lr,
         float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f);

    /// Bias-corrected update from the accumulated grads. A trainable
    /// parameter with no grad is an error naming the parameter.
    void step();
    void zero_grads();

    float lr() const { return lr_; }
    void set_lr(float lr) { lr_ = lr; }
    std::int64_t step_count() const { return step_; }

    void save_state(const std::string& path) const;
    void load_state(const std::string& path);

private:
    std::vector<NamedTensor> params_;
    std::vector<std::vector<float>> m_, v_;
    float lr_ = 1e-4f, beta1_ = 0.9f, beta2_ = 0.999f, eps_ = 1e-8f;
    std::int64_t step_ = 0;
};

/// ReduceLROnPlateau on a lower-is-better metric.
class PlateauScheduler {
public:
    PlateauScheduler(int patience, float factor, float min_delta, float floor)
        : patience_(patience), factor_(factor), min_delta_(min_delta), floor_(floor) {}

    float update(float metric, float current_lr);

private:
    int patience_;
    float factor_, min_delta_, floor_;
    bool has_best_ = false;
    float best_ = 0.0f;
    int bad_epochs_ = 0;
};

class EarlyStopper {
public:
    EarlyStopper(int patience, float min_delta) : patience_(patience), min_delta_(min_delta) {}

    /// True once `patience` epochs have passed without improvement.
    bool update(float metric);
    bool improved_last() const { return improved_last_; }

private:
    int patience_;
    float min_delta_;
    bool has_best_ = false;
    float best_ = 0.0f;
    int bad_epochs_ = 0;
    bool improved_last_ = false;
};

struct AugmentConfig {
    double p_rotate = 0.5, p_hflip = 0.5, p_vflip = 0.5, p_dropout = 0.5;
    double max_angle_deg = 30.0;
    int max_dropout_rects = 4;     // 1..max rectangles, each at most ~12% area
    double max_rect_fraction = 0.34;  // per-side fraction cap
};

/// Identical spatial transform for image and mask; bilinear image sampling
/// with reflect padding, nearest for the mask; dropout zeroes the image only.
void augment(Tensor& image, Tensor& mask, const AugmentConfig& cfg, Rng& rng);

struct EpochLog {
    int epoch;
    double train_loss, val_loss, val_dsc;
    float lr;
};

struct FitResult {
    std::vector<EpochLog> log;
    std::string best_checkpoint_prefix;
    double best_val_loss = 0.0;
    int epochs_run = 0;
};

struct FitOptions {
    std::string out_dir;
    AugmentConfig augment;
    std::string resume_from;  // checkpoint prefix; continues the Adam step counter
};

FitResult fit(PrototypeLab& model, const std::vector<Sample>& train_set,
              const std::vector<Sample>& val_set, const TrainConfig& cfg,
              const FitOptions& opts);

void write_training_log(const std::string& path, const std::vector<EpochLog>& log);

/// Stacks samples into (B,3,H,W) / (B,1,H,W) batch tensors.
std::pair<Tensor, Tensor> make_batch(const std::vector<Sample>& ds, const std::vector<int>& idx);

}  // namespace protolab
