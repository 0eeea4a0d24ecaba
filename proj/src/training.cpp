#include "protolab/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "protolab/metrics.hpp"

namespace fs = std::filesystem;

namespace protolab {

void TrainConfig::validate() const {
    if (lr <= 0.0f) throw std::invalid_argument("TrainConfig: lr must be positive");
    if (batch_size < 1 || max_epochs < 1)
        throw std::invalid_argument("TrainConfig: batch_size and max_epochs must be positive");
    if (plateau_factor <= 0.0f || plateau_factor >= 1.0f)
        throw std::invalid_argument("TrainConfig: plateau_factor must be in (0,1)");
    if (plateau_patience < 1 || early_stop_patience < 1)
        throw std::invalid_argument("TrainConfig: patience values must be >= 1");
}

void to_json(nlohmann::json& j, const TrainConfig& cfg) {
    j = nlohmann::json{{"lr", cfg.lr},
                       {"batch_size", cfg.batch_size},
                       {"max_epochs", cfg.max_epochs},
                       {"plateau_patience", cfg.plateau_patience},
                       {"plateau_factor", cfg.plateau_factor},
                       {"min_delta", cfg.min_delta},
                       {"lr_floor", cfg.lr_floor},
                       {"early_stop_patience", cfg.early_stop_patience},
                       {"seed", cfg.seed},
                       {"deep_supervision", cfg.deep_supervision},
                       {"augment", cfg.augment}};
}

void from_json(const nlohmann::json& j, TrainConfig& cfg) {
    if (j.contains("lr")) j.at("lr").get_to(cfg.lr);
    if (j.contains("batch_size")) j.at("batch_size").get_to(cfg.batch_size);
    if (j.contains("max_epochs")) j.at("max_epochs").get_to(cfg.max_epochs);
    if (j.contains("plateau_patience")) j.at("plateau_patience").get_to(cfg.plateau_patience);
    if (j.contains("plateau_factor")) j.at("plateau_factor").get_to(cfg.plateau_factor);
    if (j.contains("min_delta")) j.at("min_delta").get_to(cfg.min_delta);
    if (j.contains("lr_floor")) j.at("lr_floor").get_to(cfg.lr_floor);
    if (j.contains("early_stop_patience")) j.at("early_stop_patience").get_to(cfg.early_stop_patience);
    if (j.contains("seed")) j.at("seed").get_to(cfg.seed);
    if (j.contains("deep_supervision")) j.at("deep_supervision").get_to(cfg.deep_supervision);
    if (j.contains("augment")) j.at("augment").get_to(cfg.augment);
}

namespace {

constexpr float kBceClamp = 1e-7f;

struct LossPieces {
    double bce, dice, sum_p, sum_g, sum_pg;
};

LossPieces loss_forward(const Tensor& pred, const Tensor& gt, float smooth) {
    if (pred.shape() != gt.shape())
        throw ShapeError("bce_dice_loss: prediction " + shape_str(pred.shape()) +
                         " does not match ground truth " + shape_str(gt.shape()));
    const std::int64_t m = pred.numel();
    double bce = 0.0, sp = 0.0, sg = 0.0, spg = 0.0;
    for (std::int64_t i = 0; i < m; ++i) {
        const float g = gt.data()[i];
        if (g != 0.0f && g != 1.0f)
            throw std::invalid_argument("bce_dice_loss: ground truth must be binary, found " +
                                        std::to_string(g));
        const float p = pred.data()[i];
        const float pc = std::clamp(p, kBceClamp, 1.0f - kBceClamp);
        bce -= g * std::log(pc) + (1.0f - g) * std::log(1.0f - pc);
        sp += p;
        sg += g;
        spg += static_cast<double>(p) * g;
    }
    bce /= static_cast<double>(m);
    const double dice = 1.0 - (2.0 * spg + smooth) / (sp + sg + smooth);
    return {bce, dice, sp, sg, spg};
}

}  // namespace

Tensor bce_dice_loss(const Tensor& pred, const Tensor& gt, float smooth) {
    LossPieces lp = loss_forward(pred, gt, smooth);
    const float value = static_cast<float>(0.5 * lp.bce + 0.5 * lp.dice);
    Tensor pc = pred, gc = gt;
    const std::int64_t m = pred.numel();
    return detail::make_op(
        {1}, {value}, {pred, gt},
        [pc, gc, lp, smooth, m](detail::Node& o) {
            if (!pc.requires_grad()) return;
            pc.node()->ensure_grad();
            const float go = o.grad[0];
            const double denom = lp.sum_p + lp.sum_g + smooth;
            const double numer = 2.0 * lp.sum_pg + smooth;
            for (std::int64_t i = 0; i < m; ++i) {
                const float g = gc.data()[i];
                const float p = pc.data()[i];
                double d_bce = 0.0;
                if (p > kBceClamp && p < 1.0f - kBceClamp)
                    d_bce = -(g / p - (1.0f - g) / (1.0f - p)) / static_cast<double>(m);
                const double d_dice = -(2.0 * g * denom - numer) / (denom * denom);
                pc.node()->grad[static_cast<std::size_t>(i)] +=
                    go * static_cast<float>(0.5 * d_bce + 0.5 * d_dice);
            }
        });
}

std::pair<double, double> bce_dice_terms(const Tensor& pred, const Tensor& gt, float smooth) {
    LossPieces lp = loss_forward(pred, gt, smooth);
    return {lp.bce, lp.dice};
}

Tensor downsample_mask(const Tensor& gt, int factor) {
    if (gt.ndim() != 4 || gt.dim(1) != 1)
        throw ShapeError("downsample_mask: expected (N,1,H,W), got " + shape_str(gt.shape()));
    if (factor < 1 || gt.dim(2) % factor != 0 || gt.dim(3) % factor != 0)
        throw std::invalid_argument("downsample_mask: size not divisible by factor");
    const int N = gt.dim(0), H = gt.dim(2), W = gt.dim(3);
    const int oh = H / factor, ow = W / factor;
    Tensor out({N, 1, oh, ow});
    for (int n = 0; n < N; ++n)
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                double acc = 0.0;
                for (int dy = 0; dy < factor; ++dy)
                    for (int dx = 0; dx < factor; ++dx)
                        acc += gt.data()[((static_cast<std::size_t>(n) * H) + y * factor + dy) * W +
                                         x * factor + dx];
                out.data()[(static_cast<std::size_t>(n) * oh + y) * ow + x] =
                    acc / (static_cast<double>(factor) * factor) >= 0.5 ? 1.0f : 0.0f;
            }
    return out;
}

Adam::Adam(std::vector<NamedTensor> params, float lr, float beta1, float beta2, float eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const NamedTensor& p : params_) {
        m_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0f);
        v_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0f);
    }
}

void Adam::step() {
    ++step_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        NamedTensor& p = params_[i];
        if (!p.tensor.has_grad())
            throw std::runtime_error("Adam: missing gradient for parameter '" + p.name + "'");
        auto g = p.tensor.grad();
        float* w = p.tensor.data();
        for (std::size_t k = 0; k < g.size(); ++k) {
            m_[i][k] = beta1_ * m_[i][k] + (1.0f - beta1_) * g[k];
            v_[i][k] = beta2_ * v_[i][k] + (1.0f - beta2_) * g[k] * g[k];
            const double mhat = m_[i][k] / bc1;
            const double vhat = v_[i][k] / bc2;
            w[k] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + eps_));
        }
    }
}

void Adam::zero_grads() {
    for (NamedTensor& p : params_) p.tensor.zero_grad();
}

void Adam::save_state(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("Adam: cannot open " + path);
    out.write(reinterpret_cast<const char*>(&step_), sizeof(step_));
    out.write(reinterpret_cast<const char*>(&lr_), sizeof(lr_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        out.write(reinterpret_cast<const char*>(m_[i].data()),
                  static_cast<std::streamsize>(m_[i].size() * sizeof(float)));
        out.write(reinterpret_cast<const char*>(v_[i].data()),
                  static_cast<std::streamsize>(v_[i].size() * sizeof(float)));
    }
}

void Adam::load_state(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("Adam: cannot open " + path);
    in.read(reinterpret_cast<char*>(&step_), sizeof(step_));
    in.read(reinterpret_cast<char*>(&lr_), sizeof(lr_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        in.read(reinterpret_cast<char*>(m_[i].data()),
                static_cast<std::streamsize>(m_[i].size() * sizeof(float)));
        in.read(reinterpret_cast<char*>(v_[i].data()),
                static_cast<std::streamsize>(v_[i].size() * sizeof(float)));
    }
    if (!in) throw std::runtime_error("Adam: truncated state file " + path);
}

float PlateauScheduler::update(float metric, float current_lr) {
    if (!has_best_ || metric < best_ - min_delta_) {
        has_best_ = true;
        best_ = metric;
        bad_epochs_ = 0;
        return current_lr;
    }
    if (++bad_epochs_ >= patience_) {
        bad_epochs_ = 0;
        return std::max(current_lr * factor_, floor_);
    }
    return current_lr;
}

bool EarlyStopper::update(float metric) {
    if (!has_best_ || metric < best_ - min_delta_) {
        has_best_ = true;
        best_ = metric;
        bad_epochs_ = 0;
        improved_last_ = true;
        return false;
    }
    improved_last_ = false;
    return ++bad_epochs_ >= patience_;
}

namespace {

int reflect_index(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * (n - 1) - i;
    }
    return i;
}

void flip_plane(float* p, int h, int w, bool horizontal) {
    if (horizontal) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w / 2; ++x)
                std::swap(p[y * w + x], p[y * w + (w - 1 - x)]);
    } else {
        for (int y = 0; y < h / 2; ++y)
            for (int x = 0; x < w; ++x)
                std::swap(p[y * w + x], p[(h - 1 - y) * w + x]);
    }
}

}  // namespace

void augment(Tensor& image, Tensor& mask, const AugmentConfig& cfg, Rng& rng) {
    const int h = image.dim(1), w = image.dim(2);
    auto flip_all = [&](bool horizontal) {
        for (int c = 0; c < 3; ++c)
            flip_plane(image.data() + static_cast<std::size_t>(c) * h * w, h, w, horizontal);
        flip_plane(mask.data(), h, w, horizontal);
    };
    if (rng.bernoulli(cfg.p_hflip)) flip_all(true);
    if (rng.bernoulli(cfg.p_vflip)) flip_all(false);

    if (rng.bernoulli(cfg.p_rotate)) {
        const double angle = rng.uniform(-cfg.max_angle_deg, cfg.max_angle_deg) * M_PI / 180.0;
        const double ca = std::cos(angle), sa = std::sin(angle);
        const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
        std::vector<float> img_out(static_cast<std::size_t>(3) * h * w);
        std::vector<float> mask_out(static_cast<std::size_t>(h) * w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                // inverse rotation about the image center
                const double sy = ca * (y - cy) + sa * (x - cx) + cy;
                const double sx = -sa * (y - cy) + ca * (x - cx) + cx;
                const int y0 = static_cast<int>(std::floor(sy));
                const int x0 = static_cast<int>(std::floor(sx));
                const double wy = sy - y0, wx = sx - x0;
                const int ya = reflect_index(y0, h), yb = reflect_index(y0 + 1, h);
                const int xa = reflect_index(x0, w), xb = reflect_index(x0 + 1, w);
                for (int c = 0; c < 3; ++c) {
                    const float* src = image.data() + static_cast<std::size_t>(c) * h * w;
                    const double top = src[ya * w + xa] * (1 - wx) + src[ya * w + xb] * wx;
                    const double bot = src[yb * w + xa] * (1 - wx) + src[yb * w + xb] * wx;
                    img_out[(static_cast<std::size_t>(c) * h + y) * w + x] =
                        static_cast<float>(top * (1 - wy) + bot * wy);
                }
                const int yn = reflect_index(static_cast<int>(std::lround(sy)), h);
                const int xn = reflect_index(static_cast<int>(std::lround(sx)), w);
                mask_out[static_cast<std::size_t>(y) * w + x] = mask.data()[yn * w + xn];
            }
        std::copy(img_out.begin(), img_out.end(), image.data());
        std::copy(mask_out.begin(), mask_out.end(), mask.data());
    }

    if (rng.bernoulli(cfg.p_dropout)) {
        const int rects = rng.uniform_int(1, cfg.max_dropout_rects);
        for (int r = 0; r < rects; ++r) {
            const int rw = std::max(1, static_cast<int>(rng.uniform(0.1, cfg.max_rect_fraction) * w));
            const int rh = std::max(1, static_cast<int>(rng.uniform(0.1, cfg.max_rect_fraction) * h));
            const int x0 = rng.uniform_int(0, w - rw);
            const int y0 = rng.uniform_int(0, h - rh);
            for (int c = 0; c < 3; ++c)
                for (int y = y0; y < y0 + rh; ++y)
                    for (int x = x0; x < x0 + rw; ++x)
                        image.data()[(static_cast<std::size_t>(c) * h + y) * w + x] = 0.0f;
        }
    }
}

std::pair<Tensor, Tensor> make_batch(const std::vector<Sample>& ds, const std::vector<int>& idx) {
    if (idx.empty()) throw std::invalid_argument("make_batch: empty index list");
    const int h = ds[0].image.dim(1), w = ds[0].image.dim(2);
    const int b = static_cast<int>(idx.size());
    Tensor images({b, 3, h, w});
    Tensor masks({b, 1, h, w});
    for (int i = 0; i < b; ++i) {
        const Sample& s = ds[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
        std::copy_n(s.image.data(), 3 * h * w, images.data() + static_cast<std::size_t>(i) * 3 * h * w);
        std::copy_n(s.mask.data(), h * w, masks.data() + static_cast<std::size_t>(i) * h * w);
    }
    return {images, masks};
}

namespace {

// Per-image validation pass; batch-of-one keeps prototype pooling independent
// of the evaluation order.
std::pair<double, double> validate_epoch(PrototypeLab& model, const std::vector<Sample>& val) {
    GradMode::NoGradGuard ng;
    double loss_sum = 0.0, dsc_sum = 0.0;
    for (const Sample& s : val) {
        auto [image, gt] = make_batch({s}, {0});
        ForwardOutput out = model.forward(image, Mode::Eval);
        loss_sum += bce_dice_loss(out.final_mask, gt).item();
        Tensor pred(out.final_mask.shape());
        for (std::int64_t i = 0; i < pred.numel(); ++i)
            pred.data()[i] = out.final_mask.data()[i] >= 0.5f ? 1.0f : 0.0f;
        dsc_sum += overlap_metrics(confusion(pred, gt)).dsc;
    }
    return {loss_sum / static_cast<double>(val.size()), dsc_sum / static_cast<double>(val.size())};
}

}  // namespace

FitResult fit(PrototypeLab& model, const std::vector<Sample>& train_set,
              const std::vector<Sample>& val_set, const TrainConfig& cfg,
              const FitOptions& opts) {
    cfg.validate();
    if (train_set.empty() || val_set.empty())
        throw std::invalid_argument("fit: train and validation sets must be non-empty");
    fs::create_directories(opts.out_dir);

    Adam optimizer(model.parameters(), cfg.lr);
    if (!opts.resume_from.empty()) {
        auto params = model.parameters();
        auto buffers = model.buffers();
        load_params(opts.resume_from + ".params", params, buffers);
        optimizer.load_state(opts.resume_from + ".opt");
    }
    PlateauScheduler scheduler(cfg.plateau_patience, cfg.plateau_factor, cfg.min_delta, cfg.lr_floor);
    EarlyStopper stopper(cfg.early_stop_patience, cfg.min_delta);

    FitResult result;
    result.best_checkpoint_prefix = opts.out_dir + "/best";
    Rng run_rng(cfg.seed);

    const int n = static_cast<int>(train_set.size());
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        Rng epoch_rng = run_rng.fork(static_cast<std::uint64_t>(epoch));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(epoch_rng.uniform_int(0, static_cast<int>(i) - 1))]);

        double train_loss_sum = 0.0;
        int steps = 0;
        for (int start = 0; start < n; start += cfg.batch_size) {
            const int bsz = std::min(cfg.batch_size, n - start);
            std::vector<int> zero_idx;
            std::vector<Sample> batch_samples;
            for (int i = 0; i < bsz; ++i) {
                const int src = order[static_cast<std::size_t>(start + i)];
                Sample s;
                s.id = train_set[static_cast<std::size_t>(src)].id;
                s.image = train_set[static_cast<std::size_t>(src)].image.detach();
                s.mask = train_set[static_cast<std::size_t>(src)].mask.detach();
                if (cfg.augment) {
                    Rng srng = run_rng.fork(splitmix64((static_cast<std::uint64_t>(epoch) << 32) ^
                                                       static_cast<std::uint64_t>(src)));
                    augment(s.image, s.mask, opts.augment, srng);
                }
                batch_samples.push_back(std::move(s));
                zero_idx.push_back(i);
            }
            auto [images, gts] = make_batch(batch_samples, zero_idx);
            ForwardOutput out = model.forward(images, Mode::Train);
            Tensor loss = bce_dice_loss(out.final_mask, gts);
            if (cfg.deep_supervision && out.coarse_mask.defined()) {
                const int factor = gts.dim(2) / out.coarse_mask.dim(2);
                Tensor coarse_gt = downsample_mask(gts, factor);
                Tensor aux = bce_dice_loss(out.coarse_mask, coarse_gt);
                loss = add(loss, aux);
            }
            backward(loss);
            optimizer.step();
            optimizer.zero_grads();
            train_loss_sum += loss.item();
            ++steps;
        }

        auto [val_loss, val_dsc] = validate_epoch(model, val_set);
        const bool stop = stopper.update(static_cast<float>(val_loss));
        if (stopper.improved_last()) {
            model.save_checkpoint(result.best_checkpoint_prefix);
            result.best_val_loss = val_loss;
        }
        result.log.push_back({epoch, train_loss_sum / std::max(1, steps), val_loss, val_dsc,
                              optimizer.lr()});
        result.epochs_run = epoch;

        model.save_checkpoint(opts.out_dir + "/last");
        optimizer.save_state(opts.out_dir + "/last.opt");

        optimizer.set_lr(scheduler.update(static_cast<float>(val_loss), optimizer.lr()));
        if (stop) break;
    }
    write_training_log(opts.out_dir + "/train_log.csv", result.log);
    return result;
}

void write_training_log(const std::string& path, const std::vector<EpochLog>& log) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_training_log: cannot open " + path);
    out << "epoch,train_loss,val_loss,val_dsc,lr\n";
    char buf[160];
    for (const EpochLog& row : log) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g\n", row.epoch, row.train_loss,
                      row.val_loss, row.val_dsc, static_cast<double>(row.lr));
        out << buf;
    }
}

}  // namespace protolab
