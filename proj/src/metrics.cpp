#include "protolab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace protolab {

namespace {

std::pair<int, int> plane_dims(const Tensor& t) {
    const int h = t.dim(t.ndim() - 2), w = t.dim(t.ndim() - 1);
    if (static_cast<std::int64_t>(h) * w != t.numel())
        throw ShapeError("expected a single-plane mask, got " + shape_str(t.shape()));
    return {h, w};
}

void require_binary(const Tensor& t, const char* what) {
    for (std::int64_t i = 0; i < t.numel(); ++i)
        if (t.data()[i] != 0.0f && t.data()[i] != 1.0f)
            throw std::invalid_argument(std::string(what) + ": non-binary value " +
                                        std::to_string(t.data()[i]));
}

}  // namespace

ConfusionCounts confusion(const Tensor& pred, const Tensor& gt) {
    if (pred.shape() != gt.shape())
        throw ShapeError("confusion: shapes " + shape_str(pred.shape()) + " and " +
                         shape_str(gt.shape()) + " differ");
    require_binary(pred, "confusion pred");
    require_binary(gt, "confusion gt");
    ConfusionCounts c;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        const bool p = pred.data()[i] != 0.0f;
        const bool g = gt.data()[i] != 0.0f;
        if (p && g) ++c.tp;
        else if (p && !g) ++c.fp;
        else if (!p && g) ++c.fn;
        else ++c.tn;
    }
    return c;
}

OverlapMetrics overlap_metrics(const ConfusionCounts& c) {
    const std::int64_t pred_pos = c.tp + c.fp;
    const std::int64_t gt_pos = c.tp + c.fn;
    if (pred_pos == 0 && gt_pos == 0) return {1.0, 1.0, 1.0, 1.0, 1.0};
    if (pred_pos == 0 || gt_pos == 0) return {0.0, 0.0, 0.0, 0.0, 0.0};
    OverlapMetrics m;
    m.dsc = 2.0 * c.tp / static_cast<double>(2 * c.tp + c.fp + c.fn);
    m.iou = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp + c.fn);
    m.precision = static_cast<double>(c.tp) / static_cast<double>(pred_pos);
    m.recall = static_cast<double>(c.tp) / static_cast<double>(gt_pos);
    const double pr = m.precision, rc = m.recall;
    m.f2 = (4.0 * pr + rc) > 0.0 ? 5.0 * pr * rc / (4.0 * pr + rc) : 0.0;
    return m;
}

std::vector<std::pair<int, int>> boundary_pixels(const Tensor& mask) {
    auto [h, w] = plane_dims(mask);
    auto fg = [&](int y, int x) {
        if (y < 0 || y >= h || x < 0 || x >= w) return false;  // outside counts as background
        return mask.data()[static_cast<std::size_t>(y) * w + x] != 0.0f;
    };
    std::vector<std::pair<int, int>> pts;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (fg(y, x) &&
                (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1)))
                pts.emplace_back(y, x);
    return pts;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Felzenszwalb-Huttenlocher 1-D squared distance transform.
void dt1d(const std::vector<double>& f, std::vector<double>& d) {
    const int n = static_cast<int>(f.size());
    std::vector<int> v(static_cast<std::size_t>(n));
    std::vector<double> z(static_cast<std::size_t>(n) + 1);
    int k = 0;
    v[0] = 0;
    z[0] = -kInf;
    z[1] = kInf;
    for (int q = 1; q < n; ++q) {
        if (f[static_cast<std::size_t>(q)] == kInf) continue;
        double s;
        while (true) {
            const int p = v[static_cast<std::size_t>(k)];
            if (f[static_cast<std::size_t>(p)] == kInf) {
                // no finite site yet
                --k;
                if (k < 0) break;
                continue;
            }
            s = ((f[static_cast<std::size_t>(q)] + q * q) - (f[static_cast<std::size_t>(p)] + p * p)) /
                (2.0 * q - 2.0 * p);
            if (s <= z[static_cast<std::size_t>(k)]) --k;
            else break;
        }
        ++k;
        v[static_cast<std::size_t>(k)] = q;
        z[static_cast<std::size_t>(k)] = k > 0 ? s : -kInf;
        z[static_cast<std::size_t>(k) + 1] = kInf;
    }
    int j = 0;
    for (int q = 0; q < n; ++q) {
        while (z[static_cast<std::size_t>(j) + 1] < q) ++j;
        const int p = v[static_cast<std::size_t>(j)];
        d[static_cast<std::size_t>(q)] =
            f[static_cast<std::size_t>(p)] == kInf ? kInf : (q - p) * static_cast<double>(q - p) + f[static_cast<std::size_t>(p)];
    }
}

// Exact squared Euclidean distance to the nearest site on an h x w grid.
std::vector<double> edt_squared(const std::vector<std::pair<int, int>>& sites, int h, int w) {
    std::vector<double> grid(static_cast<std::size_t>(h) * w, kInf);
    for (auto [y, x] : sites) grid[static_cast<std::size_t>(y) * w + x] = 0.0;
    std::vector<double> f(static_cast<std::size_t>(std::max(h, w)));
    std::vector<double> d(static_cast<std::size_t>(std::max(h, w)));
    for (int x = 0; x < w; ++x) {
        for (int y = 0; y < h; ++y) f[static_cast<std::size_t>(y)] = grid[static_cast<std::size_t>(y) * w + x];
        f.resize(static_cast<std::size_t>(h));
        d.resize(static_cast<std::size_t>(h));
        dt1d(f, d);
        for (int y = 0; y < h; ++y) grid[static_cast<std::size_t>(y) * w + x] = d[static_cast<std::size_t>(y)];
    }
    for (int y = 0; y < h; ++y) {
        f.resize(static_cast<std::size_t>(w));
        d.resize(static_cast<std::size_t>(w));
        for (int x = 0; x < w; ++x) f[static_cast<std::size_t>(x)] = grid[static_cast<std::size_t>(y) * w + x];
        dt1d(f, d);
        for (int x = 0; x < w; ++x) grid[static_cast<std::size_t>(y) * w + x] = d[static_cast<std::size_t>(x)];
    }
    return grid;
}

// Directed {max, 95th percentile} of min-distances from each point of `from`
// to the nearest point of `to` (distance field precomputed).
std::pair<double, double> directed(const std::vector<std::pair<int, int>>& from,
                                   const std::vector<double>& dist_sq, int w) {
    std::vector<double> ds;
    ds.reserve(from.size());
    for (auto [y, x] : from)
        ds.push_back(std::sqrt(dist_sq[static_cast<std::size_t>(y) * w + x]));
    std::sort(ds.begin(), ds.end());
    const double max_d = ds.back();
    const std::size_t rank = static_cast<std::size_t>(
        std::ceil(0.95 * static_cast<double>(ds.size())));  // nearest-rank percentile
    const double p95 = ds[std::min(ds.size() - 1, rank == 0 ? 0 : rank - 1)];
    return {max_d, p95};
}

}  // namespace

HausdorffResult hausdorff(const Tensor& pred, const Tensor& gt) {
    auto [hp, wp] = plane_dims(pred);
    auto [hg, wg] = plane_dims(gt);
    if (hp != hg || wp != wg)
        throw ShapeError("hausdorff: shapes " + shape_str(pred.shape()) + " and " +
                         shape_str(gt.shape()) + " differ");
    auto bp = boundary_pixels(pred);
    auto bg = boundary_pixels(gt);
    if (bp.empty() && bg.empty()) return {0.0, 0.0};
    if (bp.empty() || bg.empty()) {
        const double diag = std::hypot(static_cast<double>(hp - 1), static_cast<double>(wp - 1));
        return {diag, diag};
    }
    const auto dist_to_gt = edt_squared(bg, hp, wp);
    const auto dist_to_pred = edt_squared(bp, hp, wp);
    auto [fwd_max, fwd_95] = directed(bp, dist_to_gt, wp);
    auto [bwd_max, bwd_95] = directed(bg, dist_to_pred, wp);
    return {std::max(fwd_max, bwd_max), std::max(fwd_95, bwd_95)};
}

void EvalReport::write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("EvalReport: cannot open " + path);
    out << "id,dsc,iou,precision,recall,f2,hd,hd95\n";
    char buf[256];
    auto emit = [&](const std::string& id, const OverlapMetrics& m, const HausdorffResult& h) {
        std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.4f,%.4f\n", id.c_str(),
                      m.dsc, m.iou, m.precision, m.recall, m.f2, h.hd, h.hd95);
        out << buf;
    };
    for (const EvalRow& row : rows) emit(row.id, row.overlap, row.distance);
    emit("MEAN", mean_overlap, mean_distance);
}

EvalReport evaluate(PrototypeLab& model, const std::vector<Sample>& dataset, float threshold) {
    if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
    GradMode::NoGradGuard ng;
    EvalReport report;
    for (const Sample& s : dataset) {
        const int h = s.image.dim(1), w = s.image.dim(2);
        Tensor image({1, 3, h, w}, {s.image.values().begin(), s.image.values().end()});
        Tensor gt({1, 1, h, w}, {s.mask.values().begin(), s.mask.values().end()});
        ForwardOutput out = model.forward(image, Mode::Eval);
        Tensor pred({1, 1, h, w});
        for (std::int64_t i = 0; i < pred.numel(); ++i)
            pred.data()[i] = out.final_mask.data()[i] >= threshold ? 1.0f : 0.0f;
        EvalRow row;
        row.id = s.id;
        row.overlap = overlap_metrics(confusion(pred, gt));
        row.distance = hausdorff(pred, gt);
        report.rows.push_back(row);
    }
    const double n = static_cast<double>(report.rows.size());
    for (const EvalRow& row : report.rows) {
        report.mean_overlap.dsc += row.overlap.dsc / n;
        report.mean_overlap.iou += row.overlap.iou / n;
        report.mean_overlap.precision += row.overlap.precision / n;
        report.mean_overlap.recall += row.overlap.recall / n;
        report.mean_overlap.f2 += row.overlap.f2 / n;
        report.mean_distance.hd += row.distance.hd / n;
        report.mean_distance.hd95 += row.distance.hd95 / n;
    }
    return report;
}

}  // namespace protolab
