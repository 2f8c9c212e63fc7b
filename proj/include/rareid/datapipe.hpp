#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rareid/rng.hpp"
#include "rareid/serialize.hpp"
#include "rareid/tensor.hpp"

namespace rareid {

enum class Split { train, query, gallery };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::query: return "query";
        case Split::gallery: return "gallery";
    }
    return "?";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "query") return Split::query;
    if (s == "gallery") return Split::gallery;
    throw FormatError("unknown split '" + s + "'");
}

struct SyntheticDatasetSpec {
    std::size_t num_identities = 8;
    std::size_t images_per_identity = 8;
    std::size_t height = 64;
    std::size_t width = 32;
    std::size_t cameras = 4;
    double noise_level = 0.05;
    std::uint64_t seed = 0;
    // The last `query_per_identity` images of each identity are queries, the
    // `gallery_per_identity` before them gallery, the rest training images.
    std::size_t query_per_identity = 1;
    std::size_t gallery_per_identity = 2;

    void validate() const {
        if (num_identities == 0) throw std::invalid_argument("dataset.num_identities must be positive");
        if (images_per_identity == 0) throw std::invalid_argument("dataset.images_per_identity must be positive");
        if (height == 0 || width == 0) throw std::invalid_argument("dataset image size must be positive");
        if (cameras < 1) throw std::invalid_argument("dataset.cameras must be at least 1");
        if (!(noise_level >= 0.0)) throw std::invalid_argument("dataset.noise_level must be nonnegative");
        if (query_per_identity + gallery_per_identity >= images_per_identity) {
            throw std::invalid_argument("dataset.images_per_identity must exceed query_per_identity + gallery_per_identity");
        }
    }
};

struct Sample {
    Tensor image;  // 3×H×W
    int id = 0;
    int camera = 0;
    Split split = Split::train;
};

struct Dataset {
    SyntheticDatasetSpec spec;
    std::vector<Tensor> templates;  // empty for imported datasets
    std::vector<Sample> samples;

    std::vector<std::size_t> indices(Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < samples.size(); ++i)
            if (samples[i].split == s) out.push_back(i);
        return out;
    }

    std::size_t num_identities() const {
        int top = -1;
        for (const auto& s : samples) top = std::max(top, s.id);
        return static_cast<std::size_t>(top + 1);
    }
};

/// Per-camera colour transform: pixel ↦ gain[c]·pixel + bias[c].
struct CameraTransform {
    std::array<double, 3> gain{1.0, 1.0, 1.0};
    std::array<double, 3> bias{0.0, 0.0, 0.0};
};

namespace detail {

// Row boundaries of the four horizontal bands as fractions of the height.
inline constexpr std::array<double, 5> kBandEdges{0.0, 0.2, 0.5, 0.85, 1.0};

inline Tensor draw_template(std::size_t h, std::size_t w, Rng& rng) {
    Tensor t(Shape{3, h, w});
    std::array<std::array<double, 3>, 4> colours{};
    for (auto& c : colours)
        for (double& v : c) v = rng.uniform();
    const std::size_t period = std::size_t{2} << rng.below(3);  // 2, 4 or 8 columns
    const double amplitude = rng.uniform(0.1, 0.3);
    for (std::size_t y = 0; y < h; ++y) {
        const double frac = (static_cast<double>(y) + 0.5) / static_cast<double>(h);
        std::size_t band = 0;
        while (band < 3 && frac >= kBandEdges[band + 1]) ++band;
        for (std::size_t x = 0; x < w; ++x) {
            const bool stripe = band == 1 && (x / period) % 2 == 1;
            for (std::size_t c = 0; c < 3; ++c) t[(c * h + y) * w + x] = colours[band][c] + (stripe ? amplitude : 0.0);
        }
    }
    return t;
}

inline Tensor render(const Tensor& tmpl, const CameraTransform& cam) {
    Tensor img(tmpl.shape());
    const std::size_t plane = tmpl.dim(1) * tmpl.dim(2);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < plane; ++p) img[c * plane + p] = cam.gain[c] * tmpl[c * plane + p] + cam.bias[c];
    return img;
}

inline double squared_distance(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

inline int camera_of(std::size_t id, std::size_t j, std::size_t cameras) {
    return static_cast<int>((j + id) % cameras);
}

}  // namespace detail

/// Index of the template nearest to `image` in squared Euclidean distance.
inline std::size_t nearest_template(const Tensor& image, const std::vector<Tensor>& templates) {
    std::size_t best = 0;
    double best_d = detail::squared_distance(image, templates[0]);
    for (std::size_t t = 1; t < templates.size(); ++t) {
        const double d = detail::squared_distance(image, templates[t]);
        if (d < best_d) {
            best_d = d;
            best = t;
        }
    }
    return best;
}

/**
 * Deterministic synthetic re-identification set. Each identity is a colour
 * band template with a striped torso; each camera applies its own colour
 * gain and bias; Gaussian pixel noise is added on top. Template sets are
 * redrawn until every noise-free camera rendering is nearest to its own
 * template, which makes the identities separable by construction.
 */
inline Dataset generate_dataset(const SyntheticDatasetSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    Dataset ds;
    ds.spec = spec;

    std::vector<CameraTransform> cams(spec.cameras);
    for (auto& cam : cams) {
        for (std::size_t c = 0; c < 3; ++c) {
            cam.gain[c] = rng.uniform(0.9, 1.1);
            cam.bias[c] = rng.uniform(-0.1, 0.1);
        }
    }

    constexpr int kMaxTemplateDraws = 1000;
    bool separable = false;
    for (int attempt = 0; attempt < kMaxTemplateDraws && !separable; ++attempt) {
        ds.templates.clear();
        for (std::size_t id = 0; id < spec.num_identities; ++id) {
            ds.templates.push_back(detail::draw_template(spec.height, spec.width, rng));
        }
        separable = true;
        for (std::size_t id = 0; id < spec.num_identities && separable; ++id)
            for (const auto& cam : cams)
                if (nearest_template(detail::render(ds.templates[id], cam), ds.templates) != id) {
                    separable = false;
                    break;
                }
    }
    if (!separable) throw std::runtime_error("could not draw separable identity templates");

    const std::size_t n = spec.images_per_identity;
    const std::size_t first_query = n - spec.query_per_identity;
    const std::size_t first_gallery = first_query - spec.gallery_per_identity;
    for (std::size_t id = 0; id < spec.num_identities; ++id) {
        for (std::size_t j = 0; j < n; ++j) {
            Sample s;
            s.id = static_cast<int>(id);
            s.camera = detail::camera_of(id, j, spec.cameras);
            s.split = j >= first_query ? Split::query : j >= first_gallery ? Split::gallery : Split::train;
            s.image = detail::render(ds.templates[id], cams[static_cast<std::size_t>(s.camera)]);
            if (spec.noise_level > 0.0) {
                for (double& v : s.image.data()) v += spec.noise_level * rng.normal();
            }
            ds.samples.push_back(std::move(s));
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// PK sampling

struct SampleBatch {
    Tensor images;  // B×3×H×W
    std::vector<int> identity_labels;
    std::vector<int> camera_labels;
};

/// Stacks 3×H×W images into a B×3×H×W batch.
inline Tensor stack_images(const std::vector<Tensor>& images) {
    if (images.empty()) throw std::invalid_argument("cannot stack an empty image list");
    const Shape& s = images.front().shape();
    if (s.size() != 3) throw ShapeError("images must be 3×H×W, got " + to_string(s));
    Tensor out(Shape{images.size(), s[0], s[1], s[2]});
    const std::size_t each = images.front().numel();
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i].shape() != s) throw ShapeError("image " + std::to_string(i) + " has shape " + to_string(images[i].shape()));
        std::copy(images[i].data().begin(), images[i].data().end(), out.data().begin() + i * each);
    }
    return out;
}

/// Training-split indices grouped by identity, in identity order.
inline std::vector<std::vector<std::size_t>> train_groups(const Dataset& ds) {
    std::vector<std::vector<std::size_t>> groups(ds.num_identities());
    for (std::size_t i : ds.indices(Split::train)) groups[static_cast<std::size_t>(ds.samples[i].id)].push_back(i);
    return groups;
}

/// Partial Fisher-Yates: the first k entries become a uniform draw without replacement.
inline void draw_without_replacement(std::vector<std::size_t>& pool, std::size_t k, Rng& rng) {
    for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
}

/// Dataset indices of a P×K batch from the training split.
inline std::vector<std::size_t> pk_indices(const Dataset& ds, std::size_t p, std::size_t k, Rng& rng) {
    if (p == 0 || k == 0) throw std::invalid_argument("P and K must be positive");
    auto groups = train_groups(ds);
    std::vector<std::size_t> eligible;
    for (std::size_t id = 0; id < groups.size(); ++id)
        if (groups[id].size() >= k) eligible.push_back(id);
    if (eligible.size() < p) {
        throw std::invalid_argument("PK sampling needs " + std::to_string(p) + " identities with at least " +
                                    std::to_string(k) + " training images, found " + std::to_string(eligible.size()));
    }
    draw_without_replacement(eligible, p, rng);
    std::vector<std::size_t> out;
    out.reserve(p * k);
    for (std::size_t i = 0; i < p; ++i) {
        auto& members = groups[eligible[i]];
        draw_without_replacement(members, k, rng);
        out.insert(out.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(k));
    }
    return out;
}

inline SampleBatch gather(const Dataset& ds, const std::vector<std::size_t>& idx) {
    SampleBatch b;
    std::vector<Tensor> imgs;
    for (std::size_t i : idx) {
        imgs.push_back(ds.samples[i].image);
        b.identity_labels.push_back(ds.samples[i].id);
        b.camera_labels.push_back(ds.samples[i].camera);
    }
    b.images = stack_images(imgs);
    return b;
}

inline SampleBatch pk_sample(const Dataset& ds, std::size_t p, std::size_t k, Rng& rng) {
    return gather(ds, pk_indices(ds, p, k, rng));
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentParams {
    double flip_probability = 0.5;
    double erase_probability = 0.5;
    double erase_area_min = 0.02;
    double erase_area_max = 0.4;
    double erase_aspect_min = 0.3;
    double erase_aspect_max = 3.3;
    double erase_fill = 0.0;
    std::size_t erase_attempts = 100;

    void validate() const {
        auto prob = [](double p, const char* name) {
            if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument(std::string(name) + " must lie in [0, 1]");
        };
        prob(flip_probability, "augment.flip_probability");
        prob(erase_probability, "augment.erase_probability");
        if (!(erase_area_min > 0.0 && erase_area_min <= erase_area_max && erase_area_max <= 1.0)) {
            throw std::invalid_argument("augment.erase_area range must satisfy 0 < min <= max <= 1");
        }
        if (!(erase_aspect_min > 0.0 && erase_aspect_min <= erase_aspect_max)) {
            throw std::invalid_argument("augment.erase_aspect range must satisfy 0 < min <= max");
        }
    }
};

/// Axis-aligned rectangle [y0, y0+h) × [x0, x0+w).
struct EraseBox {
    std::size_t y0 = 0, x0 = 0, h = 0, w = 0;
};

inline Tensor flip_horizontal(const Tensor& image) {
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    Tensor out(image.shape());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = image[(ch * h + y) * w + (w - 1 - x)];
    return out;
}

/// Proposes an erase rectangle; nullopt when no proposal fits within the attempt budget.
inline std::optional<EraseBox> propose_erase(std::size_t h, std::size_t w, const AugmentParams& p, Rng& rng) {
    const double area = static_cast<double>(h * w);
    for (std::size_t attempt = 0; attempt < p.erase_attempts; ++attempt) {
        const double target = rng.uniform(p.erase_area_min, p.erase_area_max) * area;
        const double aspect = rng.uniform(p.erase_aspect_min, p.erase_aspect_max);
        const auto eh = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
        const auto ew = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
        if (eh == 0 || ew == 0 || eh >= h || ew >= w) continue;
        EraseBox box{rng.below(h - eh + 1), rng.below(w - ew + 1), eh, ew};
        return box;
    }
    return std::nullopt;
}

/// Horizontal flip, then random erasing, each with its own probability.
inline Tensor augment(const Tensor& image, const AugmentParams& p, Rng& rng) {
    if (image.rank() != 3) throw ShapeError("augment expects a 3×H×W image, got " + to_string(image.shape()));
    Tensor out = rng.bernoulli(p.flip_probability) ? flip_horizontal(image) : image.clone();
    if (rng.bernoulli(p.erase_probability)) {
        const std::size_t c = out.dim(0), h = out.dim(1), w = out.dim(2);
        if (auto box = propose_erase(h, w, p, rng)) {
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t y = box->y0; y < box->y0 + box->h; ++y)
                    for (std::size_t x = box->x0; x < box->x0 + box->w; ++x) out[(ch * h + y) * w + x] = p.erase_fill;
        }
    }
    return out;
}

inline SampleBatch augment_batch(const SampleBatch& batch, const AugmentParams& p, Rng& rng) {
    const std::size_t b = batch.images.dim(0);
    const Shape one(batch.images.shape().begin() + 1, batch.images.shape().end());
    const std::size_t each = numel_of(one);
    std::vector<Tensor> imgs;
    for (std::size_t i = 0; i < b; ++i) {
        Tensor img(one);
        std::copy_n(batch.images.data().begin() + i * each, each, img.data().begin());
        imgs.push_back(augment(img, p, rng));
    }
    SampleBatch out = batch;
    out.images = stack_images(imgs);
    return out;
}

// ---------------------------------------------------------------------------
// Export / import: <dir>/images/NNNNN.tnsr plus <dir>/manifest.csv

inline void export_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "images");
    std::ofstream manifest(dir / "manifest.csv");
    if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest.csv").string());
    manifest << "file,id,camera,split\n";
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "%05zu.tnsr", i);
        save_tensor(dir / "images" / name, ds.samples[i].image);
        manifest << "images/" << name << ',' << ds.samples[i].id << ',' << ds.samples[i].camera << ','
                 << split_name(ds.samples[i].split) << '\n';
    }
}

inline Dataset import_dataset(const std::filesystem::path& dir) {
    std::ifstream manifest(dir / "manifest.csv");
    if (!manifest) throw std::runtime_error("cannot read " + (dir / "manifest.csv").string());
    std::string line;
    std::getline(manifest, line);
    if (line != "file,id,camera,split") throw FormatError("unexpected manifest header '" + line + "'");
    Dataset ds;
    std::size_t row = 1;
    while (std::getline(manifest, line)) {
        ++row;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string file, id, cam, split;
        if (!std::getline(ss, file, ',') || !std::getline(ss, id, ',') || !std::getline(ss, cam, ',') ||
            !std::getline(ss, split)) {
            throw FormatError("manifest row " + std::to_string(row) + " is malformed");
        }
        Sample s;
        try {
            s.id = std::stoi(id);
            s.camera = std::stoi(cam);
        } catch (const std::exception&) {
            throw FormatError("manifest row " + std::to_string(row) + " has a non-integer id or camera");
        }
        s.split = parse_split(split);
        s.image = load_tensor(dir / file);
        ds.samples.push_back(std::move(s));
    }
    if (ds.samples.empty()) throw FormatError("manifest lists no images");
    const Tensor& first = ds.samples.front().image;
    if (first.rank() != 3) throw FormatError("dataset images must be 3×H×W");
    ds.spec.height = first.dim(1);
    ds.spec.width = first.dim(2);
    ds.spec.num_identities = ds.num_identities();
    return ds;
}

}  // namespace rareid
