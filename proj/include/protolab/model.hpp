#pragma once

#include <optional>

#include <nlohmann/json.hpp>

#include "protolab/encoder.hpp"

namespace protolab {

struct ModelConfig {
    EncoderConfig encoder;
    int proto_dim = 32;    // prototype length D; also the decoder width
    int cmgm_width = 32;   // channel width inside CMGM (and of its feature output)
    bool use_cmgm = true;
    bool use_lkdc = true;
    bool use_pgm_pmgm = true;
    bool use_effm = true;
    // Masked pooling normalizes by the mask sum; plain averaging of the
    // masked product is available for sensitivity runs.
    bool normalized_masked_pool = true;

    void validate() const;

    /// The six ablation rows: #1 encoder+decoder baseline through #6 full model.
    static ModelConfig ablation_row(int row);
    static ModelConfig ablation_row(int row, const ModelConfig& base);
    static const char* ablation_row_name(int row);
};

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

struct ForwardOutput {
    Tensor coarse_mask;       // (N,1,H/8,W/8) in (0,1); absent without CMGM
    std::vector<Tensor> prototypes;  // p1..p5, each (D); empty without PGM
    Tensor prototype_masks;   // (N,5,H,W) in [-1,1]; absent without PGM/PMGM
    Tensor final_mask;        // (N,1,H,W) in (0,1)
};

/// Parallel factorized 7x7 / 13x13 convolutions, then parallel 3x3 dilated
/// convolutions (rates 1,2,4), fused back to C channels by a 1x1 Conv-BN-ReLU.
struct LkdcBlock {
    FactorizedConv branch7, branch13;
    Conv2d dilated1, dilated2, dilated4;
    ConvBnRelu fuse;

    LkdcBlock() = default;
    LkdcBlock(int channels, Rng& rng);
    Tensor forward(const Tensor& x, Mode mode);
    void collect(const std::string& prefix, std::vector<NamedTensor>& params,
                 std::vector<NamedBuffer>& buffers);
};

struct CmgmBlock {
    ConvBnRelu pre;
    std::optional<LkdcBlock> lkdc;
    ConvBnRelu plain;  // stands in for LKDC when disabled
    ConvBnRelu post;
    Conv2d mask_head;

    CmgmBlock() = default;
    CmgmBlock(int c3, int c4, int width, bool use_lkdc, Rng& rng);
    // Returns {coarse_mask (N,1,H/8,W/8), feature (N,width,H/8,W/8)}.
    std::pair<Tensor, Tensor> forward(const FeaturePyramid& pyr, Mode mode);
    void collect(const std::string& prefix, std::vector<NamedTensor>& params,
                 std::vector<NamedBuffer>& buffers);
};

struct EffmBlock {
    ConvBnRelu fuse3, fuse2, fuse1;
    bool full = true;
    // full branch stack
    Conv2d branch1x1;
    FactorizedConv fac3, fac5, fac7;
    Conv2d dil3, dil5, dil7;
    Conv2d out_proj;
    // reduced form
    ConvBnRelu plain;

    EffmBlock() = default;
    EffmBlock(const std::array<int, 4>& enc_channels, int proto_dim, bool full, Rng& rng);
    Tensor forward(const FeaturePyramid& pyr, Mode mode);
    void collect(const std::string& prefix, std::vector<NamedTensor>& params,
                 std::vector<NamedBuffer>& buffers);
};

struct PgmBlock {
    std::array<ConvBnRelu, 4> projections;
    float eps = 1e-6f;
    bool normalized = true;

    PgmBlock() = default;
    PgmBlock(const std::array<int, 4>& enc_channels, int proto_dim, bool normalized, Rng& rng);
    std::vector<Tensor> forward(const FeaturePyramid& pyr, const Tensor& coarse_mask, Mode mode);
    void collect(const std::string& prefix, std::vector<NamedTensor>& params,
                 std::vector<NamedBuffer>& buffers);
};

struct DecoderBlock {
    ResidualBlock res1, res2, res3;

    DecoderBlock() = default;
    DecoderBlock(int feat_channels, const std::array<int, 4>& enc_channels, int width, Rng& rng);
    Tensor forward(const Tensor& image, const FeaturePyramid& pyr, const Tensor& cmgm_feature, Mode mode);
    void collect(const std::string& prefix, std::vector<NamedTensor>& params,
                 std::vector<NamedBuffer>& buffers);
};

/// Channel j of the output is the per-pixel cosine similarity between the
/// decoder features and prototype j.
Tensor pmgm_forward(const Tensor& decoder_features, const std::vector<Tensor>& prototypes,
                    float eps = 1e-8f);

struct FinalHead {
    ResidualBlock res;
    Conv2d out_conv;

    FinalHead() = default;
    FinalHead(int dec_width, int n_proto_masks, Rng& rng);
    Tensor forward(const Tensor& dec, const Tensor& proto_masks, Mode mode);
    void collect(const std::string& prefix, std::vector<NamedTensor>& params,
                 std::vector<NamedBuffer>& buffers);
};

class PrototypeLab {
public:
    PrototypeLab() = default;
    PrototypeLab(const ModelConfig& cfg, std::uint64_t seed);

    ForwardOutput forward(const Tensor& image, Mode mode);

    const ModelConfig& config() const { return cfg_; }
    std::vector<NamedTensor> parameters();
    std::vector<NamedBuffer> buffers();
    std::int64_t trainable_param_count();
    void zero_grads();

    void save_checkpoint(const std::string& prefix);
    static PrototypeLab load_checkpoint(const std::string& prefix);

private:
    ModelConfig cfg_;
    Encoder encoder_;
    std::optional<CmgmBlock> cmgm_;
    ConvBnRelu baseline_feat_;  // replaces the CMGM feature in row #1
    std::optional<PgmBlock> pgm_;
    std::optional<EffmBlock> effm_;
    DecoderBlock decoder_;
    FinalHead head_;
};

}  // namespace protolab
