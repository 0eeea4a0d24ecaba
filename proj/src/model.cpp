#include "protolab/model.hpp"

#include <fstream>

namespace protolab {

void ModelConfig::validate() const {
    if (proto_dim < 1 || cmgm_width < 1)
        throw std::invalid_argument("ModelConfig: proto_dim and cmgm_width must be positive");
    if (use_pgm_pmgm && !use_cmgm)
        throw std::invalid_argument("ModelConfig: prototypes require a coarse mask (use_pgm_pmgm implies use_cmgm)");
}

ModelConfig ModelConfig::ablation_row(int row) { return ablation_row(row, ModelConfig{}); }

ModelConfig ModelConfig::ablation_row(int row, const ModelConfig& base) {
    ModelConfig cfg = base;
    switch (row) {
        case 1: cfg.use_cmgm = false; cfg.use_lkdc = false; cfg.use_pgm_pmgm = false; cfg.use_effm = false; break;
        case 2: cfg.use_cmgm = true;  cfg.use_lkdc = true;  cfg.use_pgm_pmgm = false; cfg.use_effm = false; break;
        case 3: cfg.use_cmgm = true;  cfg.use_lkdc = false; cfg.use_pgm_pmgm = true;  cfg.use_effm = true;  break;
        case 4: cfg.use_cmgm = true;  cfg.use_lkdc = true;  cfg.use_pgm_pmgm = true;  cfg.use_effm = false; break;
        case 5: cfg.use_cmgm = true;  cfg.use_lkdc = false; cfg.use_pgm_pmgm = true;  cfg.use_effm = false; break;
        case 6: cfg.use_cmgm = true;  cfg.use_lkdc = true;  cfg.use_pgm_pmgm = true;  cfg.use_effm = true;  break;
        default: throw std::invalid_argument("ModelConfig: ablation row must be 1..6, got " + std::to_string(row));
    }
    return cfg;
}

const char* ModelConfig::ablation_row_name(int row) {
    switch (row) {
        case 1: return "baseline";
        case 2: return "baseline+cmgm";
        case 3: return "baseline+cmgm_wo_lkdc+pgm+pmgm";
        case 4: return "baseline+cmgm+pgm_wo_effm+pmgm";
        case 5: return "baseline+cmgm_wo_lkdc+pgm_wo_effm+pmgm";
        case 6: return "full";
        default: throw std::invalid_argument("ablation row must be 1..6");
    }
}

void to_json(nlohmann::json& j, const ModelConfig& cfg) {
    j = nlohmann::json{{"encoder_channels", cfg.encoder.channels},
                       {"encoder_blocks_per_stage", cfg.encoder.blocks_per_stage},
                       {"proto_dim", cfg.proto_dim},
                       {"cmgm_width", cfg.cmgm_width},
                       {"use_cmgm", cfg.use_cmgm},
                       {"use_lkdc", cfg.use_lkdc},
                       {"use_pgm_pmgm", cfg.use_pgm_pmgm},
                       {"use_effm", cfg.use_effm},
                       {"normalized_masked_pool", cfg.normalized_masked_pool}};
}

void from_json(const nlohmann::json& j, ModelConfig& cfg) {
    if (j.contains("encoder_channels")) j.at("encoder_channels").get_to(cfg.encoder.channels);
    if (j.contains("encoder_blocks_per_stage")) j.at("encoder_blocks_per_stage").get_to(cfg.encoder.blocks_per_stage);
    if (j.contains("proto_dim")) j.at("proto_dim").get_to(cfg.proto_dim);
    if (j.contains("cmgm_width")) j.at("cmgm_width").get_to(cfg.cmgm_width);
    if (j.contains("use_cmgm")) j.at("use_cmgm").get_to(cfg.use_cmgm);
    if (j.contains("use_lkdc")) j.at("use_lkdc").get_to(cfg.use_lkdc);
    if (j.contains("use_pgm_pmgm")) j.at("use_pgm_pmgm").get_to(cfg.use_pgm_pmgm);
    if (j.contains("use_effm")) j.at("use_effm").get_to(cfg.use_effm);
    if (j.contains("normalized_masked_pool")) j.at("normalized_masked_pool").get_to(cfg.normalized_masked_pool);
}

LkdcBlock::LkdcBlock(int channels, Rng& rng)
    : branch7(channels, channels, 7, rng), branch13(channels, channels, 13, rng) {
    auto dilated = [&](int rate) {
        Conv2dSpec s;
        s.padding = {rate, rate};
        s.dilation = {rate, rate};
        return Conv2d(2 * channels, channels, 3, 3, s, /*with_bias=*/true, rng);
    };
    dilated1 = dilated(1);
    dilated2 = dilated(2);
    dilated4 = dilated(4);
    fuse = ConvBnRelu(3 * channels, channels, 1, 1, rng);
}

Tensor LkdcBlock::forward(const Tensor& x, Mode mode) {
    Tensor wide = concat_channels({branch7.forward(x), branch13.forward(x)});
    Tensor d = concat_channels({dilated1.forward(wide), dilated2.forward(wide), dilated4.forward(wide)});
    return fuse.forward(d, mode);
}

void LkdcBlock::collect(const std::string& prefix, std::vector<NamedTensor>& params,
                        std::vector<NamedBuffer>& buffers) {
    branch7.collect(prefix + ".fac7", params, buffers);
    branch13.collect(prefix + ".fac13", params, buffers);
    dilated1.collect(prefix + ".dil1", params, buffers);
    dilated2.collect(prefix + ".dil2", params, buffers);
    dilated4.collect(prefix + ".dil4", params, buffers);
    fuse.collect(prefix + ".fuse", params, buffers);
}

CmgmBlock::CmgmBlock(int c3, int c4, int width, bool use_lkdc, Rng& rng)
    : pre(c4 + c3, width, 3, 1, rng),
      post(width, width, 1, 1, rng),
      mask_head(width, 1, 1, 1, Conv2dSpec{}, /*with_bias=*/true, rng) {
    if (use_lkdc)
        lkdc.emplace(width, rng);
    else
        plain = ConvBnRelu(width, width, 3, 1, rng);
}

std::pair<Tensor, Tensor> CmgmBlock::forward(const FeaturePyramid& pyr, Mode mode) {
    Tensor x = concat_channels({upsample_bilinear(pyr.x4, 2), pyr.x3});
    x = pre.forward(x, mode);
    x = lkdc ? lkdc->forward(x, mode) : plain.forward(x, mode);
    x = post.forward(x, mode);
    Tensor feature = upsample_bilinear(x, 2);  // now at H/8
    Tensor coarse = activation(mask_head.forward(feature), Activation::Sigmoid);
    return {coarse, feature};
}

void CmgmBlock::collect(const std::string& prefix, std::vector<NamedTensor>& params,
                        std::vector<NamedBuffer>& buffers) {
    pre.collect(prefix + ".pre", params, buffers);
    if (lkdc)
        lkdc->collect(prefix + ".lkdc", params, buffers);
    else
        plain.collect(prefix + ".plain", params, buffers);
    post.collect(prefix + ".post", params, buffers);
    mask_head.collect(prefix + ".mask_head", params, buffers);
}

EffmBlock::EffmBlock(const std::array<int, 4>& ch, int proto_dim, bool full_branches, Rng& rng)
    : fuse3(ch[3] + ch[2], proto_dim, 3, 1, rng),
      fuse2(proto_dim + ch[1], proto_dim, 3, 1, rng),
      fuse1(proto_dim + ch[0], proto_dim, 3, 1, rng),
      full(full_branches) {
    if (full) {
        branch1x1 = Conv2d(proto_dim, proto_dim, 1, 1, Conv2dSpec{}, true, rng);
        fac3 = FactorizedConv(proto_dim, proto_dim, 3, rng);
        fac5 = FactorizedConv(proto_dim, proto_dim, 5, rng);
        fac7 = FactorizedConv(proto_dim, proto_dim, 7, rng);
        auto dilated = [&](int rate) {
            Conv2dSpec s;
            s.padding = {rate, rate};
            s.dilation = {rate, rate};
            return Conv2d(proto_dim, proto_dim, 3, 3, s, true, rng);
        };
        dil3 = dilated(3);
        dil5 = dilated(5);
        dil7 = dilated(7);
        out_proj = Conv2d(4 * proto_dim, proto_dim, 1, 1, Conv2dSpec{}, true, rng);
    } else {
        plain = ConvBnRelu(proto_dim, proto_dim, 3, 1, rng);
    }
}

Tensor EffmBlock::forward(const FeaturePyramid& pyr, Mode mode) {
    Tensor x = fuse3.forward(concat_channels({upsample_bilinear(pyr.x4, 2), pyr.x3}), mode);
    x = fuse2.forward(concat_channels({upsample_bilinear(x, 2), pyr.x2}), mode);
    x = fuse1.forward(concat_channels({upsample_bilinear(x, 2), pyr.x1}), mode);
    if (!full) return plain.forward(x, mode);
    Tensor b0 = branch1x1.forward(x);
    Tensor b1 = dil3.forward(fac3.forward(x));
    Tensor b2 = dil5.forward(fac5.forward(x));
    Tensor b3 = dil7.forward(fac7.forward(x));
    return out_proj.forward(concat_channels({b0, b1, b2, b3}));
}

void EffmBlock::collect(const std::string& prefix, std::vector<NamedTensor>& params,
                        std::vector<NamedBuffer>& buffers) {
    fuse3.collect(prefix + ".fuse3", params, buffers);
    fuse2.collect(prefix + ".fuse2", params, buffers);
    fuse1.collect(prefix + ".fuse1", params, buffers);
    if (full) {
        branch1x1.collect(prefix + ".b1x1", params, buffers);
        fac3.collect(prefix + ".fac3", params, buffers);
        fac5.collect(prefix + ".fac5", params, buffers);
        fac7.collect(prefix + ".fac7", params, buffers);
        dil3.collect(prefix + ".dil3", params, buffers);
        dil5.collect(prefix + ".dil5", params, buffers);
        dil7.collect(prefix + ".dil7", params, buffers);
        out_proj.collect(prefix + ".out", params, buffers);
    } else {
        plain.collect(prefix + ".plain", params, buffers);
    }
}

PgmBlock::PgmBlock(const std::array<int, 4>& ch, int proto_dim, bool normalized_pool, Rng& rng)
    : normalized(normalized_pool) {
    for (std::size_t i = 0; i < 4; ++i)
        projections[i] = ConvBnRelu(ch[i], proto_dim, 3, 1, rng);
}

std::vector<Tensor> PgmBlock::forward(const FeaturePyramid& pyr, const Tensor& coarse_mask, Mode mode) {
    const std::array<const Tensor*, 4> maps{&pyr.x1, &pyr.x2, &pyr.x3, &pyr.x4};
    std::vector<Tensor> protos;
    protos.reserve(4);
    for (std::size_t i = 0; i < 4; ++i) {
        Tensor f = projections[i].forward(*maps[i], mode);
        Tensor m = resize_bilinear(coarse_mask, f.dim(2), f.dim(3));
        Tensor gated = elementwise(f, m, Binary::Mul);
        protos.push_back(masked_avg_pool(gated, m, eps, normalized));
    }
    return protos;
}

void PgmBlock::collect(const std::string& prefix, std::vector<NamedTensor>& params,
                       std::vector<NamedBuffer>& buffers) {
    for (std::size_t i = 0; i < 4; ++i)
        projections[i].collect(prefix + ".proj" + std::to_string(i + 1), params, buffers);
}

DecoderBlock::DecoderBlock(int feat_channels, const std::array<int, 4>& ch, int width, Rng& rng)
    : res1(feat_channels + ch[1], width, rng),
      res2(width + ch[0], width, rng),
      res3(width + 3, width, rng) {}

Tensor DecoderBlock::forward(const Tensor& image, const FeaturePyramid& pyr,
                             const Tensor& cmgm_feature, Mode mode) {
    Tensor x = res1.forward(concat_channels({cmgm_feature, pyr.x2}), mode);
    x = res2.forward(concat_channels({upsample_bilinear(x, 2), pyr.x1}), mode);
    x = res3.forward(concat_channels({upsample_bilinear(x, 4), image}), mode);
    return x;
}

void DecoderBlock::collect(const std::string& prefix, std::vector<NamedTensor>& params,
                           std::vector<NamedBuffer>& buffers) {
    res1.collect(prefix + ".res1", params, buffers);
    res2.collect(prefix + ".res2", params, buffers);
    res3.collect(prefix + ".res3", params, buffers);
}

Tensor pmgm_forward(const Tensor& dec, const std::vector<Tensor>& prototypes, float eps) {
    if (prototypes.size() != 5)
        throw ShapeError("pmgm_forward: expected 5 prototypes, got " +
                         std::to_string(prototypes.size()));
    std::vector<Tensor> maps;
    maps.reserve(prototypes.size());
    for (const Tensor& p : prototypes) {
        if (p.ndim() != 1 || p.dim(0) != dec.dim(1))
            throw ShapeError("pmgm_forward: prototype " + shape_str(p.shape()) +
                             " does not match decoder width " + std::to_string(dec.dim(1)));
        maps.push_back(cosine_similarity_map(dec, p, eps));
    }
    return concat_channels(maps);
}

FinalHead::FinalHead(int dec_width, int n_proto_masks, Rng& rng)
    : res(dec_width + n_proto_masks, dec_width, rng),
      out_conv(dec_width, 1, 1, 1, Conv2dSpec{}, true, rng) {}

Tensor FinalHead::forward(const Tensor& dec, const Tensor& proto_masks, Mode mode) {
    Tensor x = proto_masks.defined() ? concat_channels({dec, proto_masks}) : dec;
    x = res.forward(x, mode);
    return activation(out_conv.forward(x), Activation::Sigmoid);
}

void FinalHead::collect(const std::string& prefix, std::vector<NamedTensor>& params,
                        std::vector<NamedBuffer>& buffers) {
    res.collect(prefix + ".res", params, buffers);
    out_conv.collect(prefix + ".out", params, buffers);
}

PrototypeLab::PrototypeLab(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(splitmix64(seed));
    const auto& ch = cfg_.encoder.channels;
    encoder_ = Encoder(cfg_.encoder, rng);
    if (cfg_.use_cmgm)
        cmgm_.emplace(ch[2], ch[3], cfg_.cmgm_width, cfg_.use_lkdc, rng);
    else
        baseline_feat_ = ConvBnRelu(ch[2] + ch[3], cfg_.cmgm_width, 3, 1, rng);
    if (cfg_.use_pgm_pmgm) {
        pgm_.emplace(ch, cfg_.proto_dim, cfg_.normalized_masked_pool, rng);
        effm_.emplace(ch, cfg_.proto_dim, cfg_.use_effm, rng);
    }
    decoder_ = DecoderBlock(cfg_.cmgm_width, ch, cfg_.proto_dim, rng);
    head_ = FinalHead(cfg_.proto_dim, cfg_.use_pgm_pmgm ? 5 : 0, rng);
}

ForwardOutput PrototypeLab::forward(const Tensor& image, Mode mode) {
    ForwardOutput out;
    FeaturePyramid pyr = encoder_.forward(image, mode);
    Tensor feature;
    if (cmgm_) {
        auto [coarse, feat] = cmgm_->forward(pyr, mode);
        out.coarse_mask = coarse;
        feature = feat;
    } else {
        // same X3+X4 input as CMGM so the baseline also trains the whole encoder
        feature = baseline_feat_.forward(
            concat_channels({upsample_bilinear(pyr.x3, 2), upsample_bilinear(pyr.x4, 4)}), mode);
    }
    Tensor dec = decoder_.forward(image, pyr, feature, mode);
    if (pgm_) {
        out.prototypes = pgm_->forward(pyr, out.coarse_mask, mode);
        Tensor fused = effm_->forward(pyr, mode);
        out.prototypes.push_back(
            masked_avg_pool(fused, out.coarse_mask, pgm_->eps, pgm_->normalized));
        out.prototype_masks = pmgm_forward(dec, out.prototypes);
    }
    out.final_mask = head_.forward(dec, out.prototype_masks, mode);
    return out;
}

std::vector<NamedTensor> PrototypeLab::parameters() {
    std::vector<NamedTensor> params;
    std::vector<NamedBuffer> buffers;
    encoder_.collect("encoder", params, buffers);
    if (cmgm_) cmgm_->collect("cmgm", params, buffers);
    else baseline_feat_.collect("baseline_feat", params, buffers);
    if (pgm_) pgm_->collect("pgm", params, buffers);
    if (effm_) effm_->collect("effm", params, buffers);
    decoder_.collect("decoder", params, buffers);
    head_.collect("head", params, buffers);
    return params;
}

std::vector<NamedBuffer> PrototypeLab::buffers() {
    std::vector<NamedTensor> params;
    std::vector<NamedBuffer> buffers;
    encoder_.collect("encoder", params, buffers);
    if (cmgm_) cmgm_->collect("cmgm", params, buffers);
    else baseline_feat_.collect("baseline_feat", params, buffers);
    if (pgm_) pgm_->collect("pgm", params, buffers);
    if (effm_) effm_->collect("effm", params, buffers);
    decoder_.collect("decoder", params, buffers);
    head_.collect("head", params, buffers);
    return buffers;
}

std::int64_t PrototypeLab::trainable_param_count() { return param_count(parameters()); }

void PrototypeLab::zero_grads() {
    for (NamedTensor& p : parameters()) p.tensor.zero_grad();
}

void PrototypeLab::save_checkpoint(const std::string& prefix) {
    save_params(prefix + ".params", parameters(), buffers());
    nlohmann::json j = cfg_;
    std::ofstream out(prefix + ".json");
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + prefix + ".json");
    out << j.dump(2) << "\n";
}

PrototypeLab PrototypeLab::load_checkpoint(const std::string& prefix) {
    std::ifstream in(prefix + ".json");
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + prefix + ".json");
    nlohmann::json j;
    in >> j;
    ModelConfig cfg = j.get<ModelConfig>();
    PrototypeLab model(cfg, /*seed=*/0);
    auto params = model.parameters();
    auto buffers = model.buffers();
    load_params(prefix + ".params", params, buffers);
    return model;
}

}  // namespace protolab
