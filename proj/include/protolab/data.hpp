#pragma once

#include <nlohmann/json.hpp>

#include "protolab/rng.hpp"
#include "protolab/tensor.hpp"

namespace protolab {

struct Sample {
    Tensor image;  // (3,H,W) in [0,1]
    Tensor mask;   // (1,H,W) strictly binary
    std::string id;
};

struct SynthConfig {
    int count = 200;
    int size = 64;  // H = W, divisible by 32
    int min_blobs = 1;
    int max_blobs = 3;
    double deform_amp = 0.3;
    double contrast = 0.6;
    double noise_std = 0.03;
    std::uint64_t seed = 1;

    void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& cfg);
void from_json(const nlohmann::json& j, SynthConfig& cfg);

/// Blob masks from randomly deformed ellipses; images as low-frequency
/// texture plus mask-correlated shading plus Gaussian noise, clipped to
/// [0,1]. Foreground fraction is kept in [0.02, 0.6] by rejection sampling.
std::vector<Sample> synth_generate(const SynthConfig& cfg);

/// 8-bit PNG pairs with matching stems; image scaled to [0,1], mask
/// binarized at 127.5. Bilinear resize for images, nearest for masks.
std::vector<Sample> load_folder(const std::string& images_dir, const std::string& masks_dir,
                                int target_size);

/// Thresholds a probability map and writes an 8-bit {0,255} PNG.
void save_mask(const Tensor& mask, const std::string& path, float threshold = 0.5f);

/// Mask boundary blended in red onto the image.
void save_overlay(const Tensor& image, const Tensor& mask, const std::string& path,
                  float threshold = 0.5f);

struct SplitManifest {
    std::vector<std::string> train, val, test;
};

/// Seeded 80/10/10 shuffle split of the sample ids.
SplitManifest split_dataset(const std::vector<Sample>& samples, std::uint64_t seed);
void save_manifest(const SplitManifest& m, const std::string& path);
SplitManifest load_manifest(const std::string& path);

std::vector<Sample> select_split(const std::vector<Sample>& samples,
                                 const std::vector<std::string>& stems);

/// <root>/images/*.png and <root>/masks/*.png with matching stems.
void write_dataset(const std::string& root, const std::vector<Sample>& samples);

}  // namespace protolab
