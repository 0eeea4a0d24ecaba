#include "protolab/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "protolab/png_io.hpp"

namespace fs = std::filesystem;

namespace protolab {

void SynthConfig::validate() const {
    if (count < 1) throw std::invalid_argument("SynthConfig: count must be positive");
    if (size < 32 || size % 32 != 0)
        throw std::invalid_argument("SynthConfig: size must be a positive multiple of 32");
    if (min_blobs < 1 || max_blobs < min_blobs)
        throw std::invalid_argument("SynthConfig: need 1 <= min_blobs <= max_blobs");
    if (noise_std < 0.0 || contrast < 0.0 || contrast > 1.0)
        throw std::invalid_argument("SynthConfig: contrast must be in [0,1] and noise_std >= 0");
}

void to_json(nlohmann::json& j, const SynthConfig& cfg) {
    j = nlohmann::json{{"count", cfg.count},       {"size", cfg.size},
                       {"min_blobs", cfg.min_blobs}, {"max_blobs", cfg.max_blobs},
                       {"deform_amp", cfg.deform_amp}, {"contrast", cfg.contrast},
                       {"noise_std", cfg.noise_std},   {"seed", cfg.seed}};
}

void from_json(const nlohmann::json& j, SynthConfig& cfg) {
    if (j.contains("count")) j.at("count").get_to(cfg.count);
    if (j.contains("size")) j.at("size").get_to(cfg.size);
    if (j.contains("min_blobs")) j.at("min_blobs").get_to(cfg.min_blobs);
    if (j.contains("max_blobs")) j.at("max_blobs").get_to(cfg.max_blobs);
    if (j.contains("deform_amp")) j.at("deform_amp").get_to(cfg.deform_amp);
    if (j.contains("contrast")) j.at("contrast").get_to(cfg.contrast);
    if (j.contains("noise_std")) j.at("noise_std").get_to(cfg.noise_std);
    if (j.contains("seed")) j.at("seed").get_to(cfg.seed);
}

namespace {

// Closed star-shaped blob: ellipse with a low-order harmonic radius wobble.
struct Blob {
    double cx, cy, rx, ry, angle;
    std::array<double, 3> amp, phase;  // harmonics k = 2,3,4

    bool contains(double x, double y) const {
        const double dx = x - cx, dy = y - cy;
        const double ca = std::cos(angle), sa = std::sin(angle);
        const double u = (ca * dx + sa * dy) / rx;
        const double v = (-sa * dx + ca * dy) / ry;
        const double rho = std::sqrt(u * u + v * v);
        const double theta = std::atan2(v, u);
        double r = 1.0;
        for (int k = 0; k < 3; ++k) r += amp[static_cast<std::size_t>(k)] * std::cos((k + 2) * theta + phase[static_cast<std::size_t>(k)]);
        return rho <= r;
    }
};

std::vector<float> draw_mask(const SynthConfig& cfg, Rng& rng) {
    const int s = cfg.size;
    std::vector<float> mask(static_cast<std::size_t>(s) * s);
    for (int attempt = 0; attempt < 64; ++attempt) {
        const int n_blobs = rng.uniform_int(cfg.min_blobs, cfg.max_blobs);
        std::vector<Blob> blobs;
        for (int b = 0; b < n_blobs; ++b) {
            Blob blob;
            blob.cx = rng.uniform(0.25, 0.75) * s;
            blob.cy = rng.uniform(0.25, 0.75) * s;
            blob.rx = rng.uniform(0.10, 0.28) * s;
            blob.ry = rng.uniform(0.10, 0.28) * s;
            blob.angle = rng.uniform(0.0, M_PI);
            for (int k = 0; k < 3; ++k) {
                blob.amp[static_cast<std::size_t>(k)] = rng.uniform(-cfg.deform_amp, cfg.deform_amp) / (k + 2);
                blob.phase[static_cast<std::size_t>(k)] = rng.uniform(0.0, 2.0 * M_PI);
            }
            blobs.push_back(blob);
        }
        std::int64_t fg = 0;
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                bool inside = false;
                for (const Blob& b : blobs)
                    if (b.contains(x + 0.5, y + 0.5)) {
                        inside = true;
                        break;
                    }
                mask[static_cast<std::size_t>(y) * s + x] = inside ? 1.0f : 0.0f;
                if (inside) ++fg;
            }
        const double frac = static_cast<double>(fg) / (static_cast<double>(s) * s);
        if (frac >= 0.02 && frac <= 0.6) return mask;
    }
    throw std::runtime_error("synth_generate: could not draw a mask within the foreground bounds");
}

}  // namespace

std::vector<Sample> synth_generate(const SynthConfig& cfg) {
    cfg.validate();
    const int s = cfg.size;
    std::vector<Sample> samples;
    samples.reserve(static_cast<std::size_t>(cfg.count));
    Rng base(cfg.seed);
    for (int i = 0; i < cfg.count; ++i) {
        Rng rng = base.fork(static_cast<std::uint64_t>(i));
        std::vector<float> mask = draw_mask(cfg, rng);

        // low-frequency background texture in [0, 1-contrast]
        std::vector<float> image(static_cast<std::size_t>(3) * s * s);
        for (int c = 0; c < 3; ++c) {
            const double fx = rng.uniform(0.5, 2.0), fy = rng.uniform(0.5, 2.0);
            const double px = rng.uniform(0.0, 2.0 * M_PI), py = rng.uniform(0.0, 2.0 * M_PI);
            for (int y = 0; y < s; ++y)
                for (int x = 0; x < s; ++x) {
                    const double t = 0.5 + 0.25 * std::sin(2.0 * M_PI * fx * x / s + px) +
                                     0.25 * std::sin(2.0 * M_PI * fy * y / s + py);
                    image[(static_cast<std::size_t>(c) * s + y) * s + x] =
                        static_cast<float>((1.0 - cfg.contrast) * t);
                }
        }
        for (int c = 0; c < 3; ++c)
            for (std::int64_t p = 0; p < static_cast<std::int64_t>(s) * s; ++p) {
                double v = image[static_cast<std::size_t>(c) * s * s + p] +
                           cfg.contrast * mask[static_cast<std::size_t>(p)];
                if (cfg.noise_std > 0.0) v += cfg.noise_std * rng.normal();
                image[static_cast<std::size_t>(c) * s * s + p] =
                    static_cast<float>(std::clamp(v, 0.0, 1.0));
            }

        Sample sample;
        char id[16];
        std::snprintf(id, sizeof(id), "%05d", i);
        sample.id = id;
        sample.image = Tensor({3, s, s}, std::move(image));
        sample.mask = Tensor({1, s, s}, std::move(mask));
        samples.push_back(std::move(sample));
    }
    return samples;
}

namespace {

std::vector<float> resize_plane_bilinear(const std::vector<float>& src, int h, int w,
                                         int oh, int ow) {
    std::vector<float> dst(static_cast<std::size_t>(oh) * ow);
    const double sy = static_cast<double>(h) / oh, sx = static_cast<double>(w) / ow;
    for (int y = 0; y < oh; ++y) {
        double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
        int y0 = static_cast<int>(fy);
        int y1 = std::min(y0 + 1, h - 1);
        double wy = fy - y0;
        for (int x = 0; x < ow; ++x) {
            double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
            int x0 = static_cast<int>(fx);
            int x1 = std::min(x0 + 1, w - 1);
            double wx = fx - x0;
            double top = src[static_cast<std::size_t>(y0) * w + x0] * (1 - wx) +
                         src[static_cast<std::size_t>(y0) * w + x1] * wx;
            double bot = src[static_cast<std::size_t>(y1) * w + x0] * (1 - wx) +
                         src[static_cast<std::size_t>(y1) * w + x1] * wx;
            dst[static_cast<std::size_t>(y) * ow + x] = static_cast<float>(top * (1 - wy) + bot * wy);
        }
    }
    return dst;
}

std::vector<float> resize_plane_nearest(const std::vector<float>& src, int h, int w,
                                        int oh, int ow) {
    std::vector<float> dst(static_cast<std::size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y) {
        int yy = std::min(static_cast<int>((y + 0.5) * h / oh), h - 1);
        for (int x = 0; x < ow; ++x) {
            int xx = std::min(static_cast<int>((x + 0.5) * w / ow), w - 1);
            dst[static_cast<std::size_t>(y) * ow + x] = src[static_cast<std::size_t>(yy) * w + xx];
        }
    }
    return dst;
}

}  // namespace

std::vector<Sample> load_folder(const std::string& images_dir, const std::string& masks_dir,
                                int target_size) {
    if (target_size < 32 || target_size % 32 != 0)
        throw std::invalid_argument("load_folder: target size must be a positive multiple of 32");
    std::map<std::string, fs::path> images, masks;
    for (const auto& e : fs::directory_iterator(images_dir))
        if (e.path().extension() == ".png") images[e.path().stem().string()] = e.path();
    for (const auto& e : fs::directory_iterator(masks_dir))
        if (e.path().extension() == ".png") masks[e.path().stem().string()] = e.path();
    for (const auto& [stem, p] : images)
        if (!masks.count(stem))
            throw std::runtime_error("load_folder: no mask for image stem '" + stem + "'");
    for (const auto& [stem, p] : masks)
        if (!images.count(stem))
            throw std::runtime_error("load_folder: no image for mask stem '" + stem + "'");

    std::vector<Sample> samples;
    for (const auto& [stem, ipath] : images) {
        PngImage im = read_png(ipath.string());
        PngImage mk = read_png(masks.at(stem).string());

        std::vector<float> img_planes(static_cast<std::size_t>(3) * target_size * target_size);
        for (int c = 0; c < 3; ++c) {
            std::vector<float> plane(static_cast<std::size_t>(im.width) * im.height);
            for (std::int64_t p = 0; p < static_cast<std::int64_t>(im.width) * im.height; ++p) {
                const int src_c = im.channels == 3 ? c : 0;
                plane[static_cast<std::size_t>(p)] =
                    im.pixels[static_cast<std::size_t>(p) * im.channels + src_c] / 255.0f;
            }
            auto resized = resize_plane_bilinear(plane, im.height, im.width, target_size, target_size);
            std::copy(resized.begin(), resized.end(),
                      img_planes.begin() + static_cast<std::size_t>(c) * target_size * target_size);
        }

        std::vector<float> mask_plane(static_cast<std::size_t>(mk.width) * mk.height);
        for (std::int64_t p = 0; p < static_cast<std::int64_t>(mk.width) * mk.height; ++p)
            mask_plane[static_cast<std::size_t>(p)] =
                mk.pixels[static_cast<std::size_t>(p) * mk.channels] > 127.5f ? 1.0f : 0.0f;
        auto mask_resized = resize_plane_nearest(mask_plane, mk.height, mk.width, target_size, target_size);

        Sample s;
        s.id = stem;
        s.image = Tensor({3, target_size, target_size}, std::move(img_planes));
        s.mask = Tensor({1, target_size, target_size}, std::move(mask_resized));
        samples.push_back(std::move(s));
    }
    return samples;
}

namespace {

std::pair<int, int> mask_plane_dims(const Tensor& mask) {
    if (mask.ndim() < 2) throw ShapeError("expected a (1,H,W) or (H,W) mask, got " + shape_str(mask.shape()));
    const int h = mask.dim(mask.ndim() - 2), w = mask.dim(mask.ndim() - 1);
    if (static_cast<std::int64_t>(h) * w != mask.numel())
        throw ShapeError("expected a single-plane mask, got " + shape_str(mask.shape()));
    return {h, w};
}

}  // namespace

void save_mask(const Tensor& mask, const std::string& path, float threshold) {
    auto [h, w] = mask_plane_dims(mask);
    PngImage img;
    img.width = w;
    img.height = h;
    img.channels = 1;
    img.pixels.resize(static_cast<std::size_t>(h) * w);
    for (std::int64_t p = 0; p < static_cast<std::int64_t>(h) * w; ++p)
        img.pixels[static_cast<std::size_t>(p)] = mask.data()[p] >= threshold ? 255 : 0;
    write_png(path, img);
}

void save_overlay(const Tensor& image, const Tensor& mask, const std::string& path, float threshold) {
    if (image.ndim() != 3 || image.dim(0) != 3)
        throw ShapeError("save_overlay: expected (3,H,W) image, got " + shape_str(image.shape()));
    const int h = image.dim(1), w = image.dim(2);
    auto [mh, mw] = mask_plane_dims(mask);
    if (mh != h || mw != w)
        throw ShapeError("save_overlay: mask " + shape_str(mask.shape()) + " does not match image " +
                         shape_str(image.shape()));
    auto fg = [&](int y, int x) { return mask.data()[static_cast<std::size_t>(y) * w + x] >= threshold; };
    PngImage img;
    img.width = w;
    img.height = h;
    img.channels = 3;
    img.pixels.resize(static_cast<std::size_t>(3) * h * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            bool boundary = false;
            if (fg(y, x)) {
                boundary = y == 0 || y == h - 1 || x == 0 || x == w - 1 || !fg(y - 1, x) ||
                           !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1);
            }
            for (int c = 0; c < 3; ++c) {
                float v = image.data()[(static_cast<std::size_t>(c) * h + y) * w + x];
                if (boundary) v = c == 0 ? 1.0f : 0.0f;
                img.pixels[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
                    static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
            }
        }
    write_png(path, img);
}

SplitManifest split_dataset(const std::vector<Sample>& samples, std::uint64_t seed) {
    std::vector<std::string> stems;
    stems.reserve(samples.size());
    for (const Sample& s : samples) stems.push_back(s.id);
    std::sort(stems.begin(), stems.end());
    Rng rng(splitmix64(seed ^ 0x51117f00dULL));
    // Fisher-Yates
    for (std::size_t i = stems.size(); i > 1; --i)
        std::swap(stems[i - 1], stems[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
    const std::size_t n = stems.size();
    const std::size_t n_train = n * 8 / 10;
    const std::size_t n_val = n / 10;
    SplitManifest m;
    m.train.assign(stems.begin(), stems.begin() + static_cast<std::ptrdiff_t>(n_train));
    m.val.assign(stems.begin() + static_cast<std::ptrdiff_t>(n_train),
                 stems.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    m.test.assign(stems.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), stems.end());
    return m;
}

void save_manifest(const SplitManifest& m, const std::string& path) {
    nlohmann::json j{{"train", m.train}, {"val", m.val}, {"test", m.test}};
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_manifest: cannot open " + path);
    out << j.dump(2) << "\n";
}

SplitManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_manifest: cannot open " + path);
    nlohmann::json j;
    in >> j;
    SplitManifest m;
    j.at("train").get_to(m.train);
    j.at("val").get_to(m.val);
    j.at("test").get_to(m.test);
    return m;
}

std::vector<Sample> select_split(const std::vector<Sample>& samples,
                                 const std::vector<std::string>& stems) {
    std::map<std::string, const Sample*> index;
    for (const Sample& s : samples) index[s.id] = &s;
    std::vector<Sample> out;
    out.reserve(stems.size());
    for (const std::string& stem : stems) {
        auto it = index.find(stem);
        if (it == index.end())
            throw std::runtime_error("select_split: stem '" + stem + "' not in dataset");
        out.push_back(*it->second);
    }
    return out;
}

void write_dataset(const std::string& root, const std::vector<Sample>& samples) {
    fs::create_directories(fs::path(root) / "images");
    fs::create_directories(fs::path(root) / "masks");
    for (const Sample& s : samples) {
        const int h = s.image.dim(1), w = s.image.dim(2);
        PngImage img;
        img.width = w;
        img.height = h;
        img.channels = 3;
        img.pixels.resize(static_cast<std::size_t>(3) * h * w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c)
                    img.pixels[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
                        static_cast<std::uint8_t>(std::lround(
                            std::clamp(s.image.data()[(static_cast<std::size_t>(c) * h + y) * w + x],
                                       0.0f, 1.0f) * 255.0f));
        write_png((fs::path(root) / "images" / (s.id + ".png")).string(), img);
        save_mask(s.mask, (fs::path(root) / "masks" / (s.id + ".png")).string());
    }
}

}  // namespace protolab
