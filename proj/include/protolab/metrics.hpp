#pragma once

#include "protolab/data.hpp"
#include "protolab/model.hpp"

namespace protolab {

struct ConfusionCounts {
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

/// Exact pixel counts for binary pred/gt of the same shape.
ConfusionCounts confusion(const Tensor& pred, const Tensor& gt);

struct OverlapMetrics {
    double dsc, iou, precision, recall, f2;
};

/// Empty-vs-empty yields all ones; empty-vs-nonempty all zeros.
OverlapMetrics overlap_metrics(const ConfusionCounts& c);

struct HausdorffResult {
    double hd, hd95;
};

/// Boundary Hausdorff distance in pixels (4-connectivity interior erosion).
/// Both masks empty -> 0; exactly one empty -> image diagonal.
HausdorffResult hausdorff(const Tensor& pred, const Tensor& gt);

/// Boundary pixels as (y, x) pairs; shared between the distance transform
/// implementation and the brute-force test oracle.
std::vector<std::pair<int, int>> boundary_pixels(const Tensor& mask);

struct EvalRow {
    std::string id;
    OverlapMetrics overlap;
    HausdorffResult distance;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    OverlapMetrics mean_overlap{};
    HausdorffResult mean_distance{};

    void write_csv(const std::string& path) const;
};

EvalReport evaluate(PrototypeLab& model, const std::vector<Sample>& dataset,
                    float threshold = 0.5f);

}  // namespace protolab
