#include "vesselnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace vesselnet {

DatasetSpec DatasetSpec::parse(const std::string& name) {
    if (name == "drive") return drive();
    if (name == "stare") return stare();
    if (name == "custom") return custom();
    throw ConfigError("unknown dataset: " + name + " (expected drive|stare|custom)");
}

std::string DatasetSpec::name() const {
    switch (kind) {
        case DatasetKind::kDrive: return "drive";
        case DatasetKind::kStare: return "stare";
        case DatasetKind::kCustom: return "custom";
    }
    return "custom";
}

Tensor image_to_tensor(const ImageU8& img) {
    Tensor t(Shape{1, img.channels, img.height, img.width});
    const std::int64_t plane = std::int64_t(img.height) * img.width;
    for (int c = 0; c < img.channels; ++c) {
        float* dst = t.plane_ptr(0, c);
        for (std::int64_t i = 0; i < plane; ++i)
            dst[i] = float(img.pixels[i * img.channels + c]) / 255.0f;
    }
    return t;
}

ImageU8 tensor_to_image(const Tensor& t) {
    if (t.shape.n != 1 || (t.shape.c != 1 && t.shape.c != 3))
        throw ContractError("tensor_to_image: expected (1,1,h,w) or (1,3,h,w)");
    ImageU8 img;
    img.width = t.shape.w;
    img.height = t.shape.h;
    img.channels = t.shape.c;
    img.pixels.resize(img.size_bytes());
    const std::int64_t plane = t.shape.plane();
    for (int c = 0; c < t.shape.c; ++c) {
        const float* src = t.plane_ptr(0, c);
        for (std::int64_t i = 0; i < plane; ++i) {
            float v = std::min(1.0f, std::max(0.0f, src[i]));
            img.pixels[i * t.shape.c + c] = std::uint8_t(std::lround(255.0f * v));
        }
    }
    return img;
}

Tensor label_to_tensor(const ImageU8& img, const std::string& origin) {
    Tensor t(Shape{1, 1, img.height, img.width});
    const std::int64_t plane = std::int64_t(img.height) * img.width;
    bool non_binary = false;
    for (std::int64_t i = 0; i < plane; ++i) {
        // multi-channel label files are reduced by their first channel
        std::uint8_t v = img.pixels[i * img.channels];
        if (v != 0 && v != 255) non_binary = true;
        t.data[i] = v >= 128 ? 1.0f : 0.0f;
    }
    if (non_binary)
        std::fprintf(stderr, "warning: label %s had non-binary pixels; thresholded at 128\n",
                     origin.c_str());
    return t;
}

namespace {

std::vector<fs::path> sorted_files(const fs::path& dir) {
    std::vector<fs::path> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file()) out.push_back(e.path());
    std::sort(out.begin(), out.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
    return out;
}

std::vector<Sample> load_split(const fs::path& dir, bool want_fov) {
    auto image_files = sorted_files(dir / "images");
    auto label_files = sorted_files(dir / "labels");
    if (image_files.empty())
        throw IngestError("no images found under " + (dir / "images").string());
    if (image_files.size() != label_files.size())
        throw IngestError("image/label count mismatch under " + dir.string() + ": " +
                          std::to_string(image_files.size()) + " vs " +
                          std::to_string(label_files.size()));
    auto fov_files = want_fov ? sorted_files(dir / "fov") : std::vector<fs::path>{};
    if (!fov_files.empty() && fov_files.size() != image_files.size())
        throw IngestError("fov mask count mismatch under " + dir.string());

    std::vector<Sample> out;
    out.reserve(image_files.size());
    for (std::size_t i = 0; i < image_files.size(); ++i) {
        Sample s;
        ImageU8 img = read_image(image_files[i].string());
        if (img.channels == 1) {
            // promote grayscale input to 3 channels
            ImageU8 rgb;
            rgb.width = img.width;
            rgb.height = img.height;
            rgb.channels = 3;
            rgb.pixels.resize(rgb.size_bytes());
            for (std::size_t p = 0; p < img.pixels.size(); ++p) {
                rgb.pixels[p * 3 + 0] = img.pixels[p];
                rgb.pixels[p * 3 + 1] = img.pixels[p];
                rgb.pixels[p * 3 + 2] = img.pixels[p];
            }
            img = std::move(rgb);
        }
        s.image = image_to_tensor(img);
        ImageU8 lab = read_image(label_files[i].string());
        if (lab.width != img.width || lab.height != img.height)
            throw IngestError("label size mismatch for " + label_files[i].string());
        s.label = label_to_tensor(lab, label_files[i].string());
        if (!fov_files.empty()) {
            ImageU8 fov = read_image(fov_files[i].string());
            if (fov.width != img.width || fov.height != img.height)
                throw IngestError("fov size mismatch for " + fov_files[i].string());
            s.fov = label_to_tensor(fov, fov_files[i].string());
        }
        s.id = image_files[i].stem().string();
        s.orig_h = img.height;
        s.orig_w = img.width;
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

Dataset load_dataset(const std::string& root, const DatasetSpec& spec) {
    const fs::path rootp(root);
    if (!fs::is_directory(rootp)) throw IngestError("dataset root not found: " + root);
    const bool want_fov = spec.kind != DatasetKind::kStare;

    Dataset ds;
    if (fs::is_directory(rootp / "training")) {
        ds.train = load_split(rootp / "training", want_fov);
        if (fs::is_directory(rootp / "test"))
            ds.test = load_split(rootp / "test", want_fov);
    } else if (spec.kind == DatasetKind::kStare && fs::is_directory(rootp / "images")) {
        // flat STARE layout: first 16 train, remaining 4 test
        auto all = load_split(rootp, false);
        const std::size_t cut = std::min<std::size_t>(16, all.size());
        ds.train.assign(all.begin(), all.begin() + cut);
        ds.test.assign(all.begin() + cut, all.end());
    } else {
        throw IngestError("expected " + (rootp / "training").string() +
                          " (or a flat images/labels layout for stare)");
    }
    return ds;
}

std::pair<int, int> pad_offsets(int h, int w, int target_h, int target_w) {
    if (target_h < h || target_w < w)
        throw ShapeError("pad: target " + std::to_string(target_h) + "x" +
                         std::to_string(target_w) + " smaller than source " +
                         std::to_string(h) + "x" + std::to_string(w));
    return {(target_h - h) / 2, (target_w - w) / 2};
}

Tensor pad_tensor(const Tensor& t, int target_h, int target_w) {
    auto [top, left] = pad_offsets(t.shape.h, t.shape.w, target_h, target_w);
    Tensor out(Shape{t.shape.n, t.shape.c, target_h, target_w});
    for (int n = 0; n < t.shape.n; ++n)
        for (int c = 0; c < t.shape.c; ++c) {
            const float* src = t.plane_ptr(n, c);
            float* dst = out.plane_ptr(n, c);
            for (int i = 0; i < t.shape.h; ++i)
                std::copy(src + std::int64_t(i) * t.shape.w,
                          src + std::int64_t(i + 1) * t.shape.w,
                          dst + std::int64_t(i + top) * target_w + left);
        }
    return out;
}

Sample pad(const Sample& s, int target_h, int target_w) {
    Sample out;
    out.image = pad_tensor(s.image, target_h, target_w);
    out.label = pad_tensor(s.label, target_h, target_w);
    if (s.fov) out.fov = pad_tensor(*s.fov, target_h, target_w);
    out.id = s.id;
    out.orig_h = s.orig_h;
    out.orig_w = s.orig_w;
    return out;
}

Tensor crop_back(const Tensor& padded, int orig_h, int orig_w) {
    auto [top, left] = pad_offsets(orig_h, orig_w, padded.shape.h, padded.shape.w);
    Tensor out(Shape{padded.shape.n, padded.shape.c, orig_h, orig_w});
    for (int n = 0; n < padded.shape.n; ++n)
        for (int c = 0; c < padded.shape.c; ++c) {
            const float* src = padded.plane_ptr(n, c);
            float* dst = out.plane_ptr(n, c);
            for (int i = 0; i < orig_h; ++i)
                std::copy(src + std::int64_t(i + top) * padded.shape.w + left,
                          src + std::int64_t(i + top) * padded.shape.w + left + orig_w,
                          dst + std::int64_t(i) * orig_w);
        }
    return out;
}

namespace {

enum class Geo { kId, kHFlip, kVFlip, kRot180, kRot90, kRot270 };

Tensor apply_geo(const Tensor& t, Geo g) {
    const Shape s = t.shape;
    if ((g == Geo::kRot90 || g == Geo::kRot270) && s.h != s.w)
        throw ConfigError("augment: 90/270 rotations need a square canvas, got " + s.str());
    Shape os = s;
    Tensor out(os);
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const float* src = t.plane_ptr(n, c);
            float* dst = out.plane_ptr(n, c);
            for (int i = 0; i < s.h; ++i)
                for (int j = 0; j < s.w; ++j) {
                    int si = i, sj = j;
                    switch (g) {
                        case Geo::kId: break;
                        case Geo::kHFlip: sj = s.w - 1 - j; break;
                        case Geo::kVFlip: si = s.h - 1 - i; break;
                        case Geo::kRot180: si = s.h - 1 - i; sj = s.w - 1 - j; break;
                        case Geo::kRot90: si = j; sj = s.w - 1 - i; break;
                        case Geo::kRot270: si = s.h - 1 - j; sj = i; break;
                    }
                    dst[std::int64_t(i) * s.w + j] = src[std::int64_t(si) * s.w + sj];
                }
        }
    return out;
}

Sample geo_variant(const Sample& s, Geo g, const char* tag) {
    Sample out;
    out.image = apply_geo(s.image, g);
    out.label = apply_geo(s.label, g);
    if (s.fov) out.fov = apply_geo(*s.fov, g);
    out.id = s.id + "_" + tag;
    out.orig_h = s.orig_h;
    out.orig_w = s.orig_w;
    return out;
}

Sample noise_variant(const Sample& s, Rng rng, const std::string& tag) {
    Sample out = s;
    out.id = s.id + "_" + tag;
    for (auto& v : out.image.data) {
        float n = 0.02f * rng.normal();
        v = std::min(1.0f, std::max(0.0f, v + n));
    }
    return out;
}

Sample gamma_variant(const Sample& s, float gamma, const char* tag) {
    Sample out = s;
    out.id = s.id + "_" + tag;
    for (auto& v : out.image.data) v = std::pow(std::max(0.0f, v), gamma);
    return out;
}

}  // namespace

std::vector<Sample> augment(const std::vector<Sample>& train, int multiplier, Rng rng) {
    if (multiplier < 1) throw ContractError("augment: multiplier must be >= 1");
    std::vector<Sample> out;
    out.reserve(train.size() * std::size_t(multiplier));
    for (std::size_t idx = 0; idx < train.size(); ++idx) {
        const Sample& s = train[idx];
        Rng sample_rng = rng.split(idx);
        for (int v = 0; v < multiplier; ++v) {
            switch (v) {
                case 0: out.push_back(geo_variant(s, Geo::kId, "orig")); break;
                case 1: out.push_back(geo_variant(s, Geo::kHFlip, "hf")); break;
                case 2: out.push_back(geo_variant(s, Geo::kVFlip, "vf")); break;
                case 3: out.push_back(geo_variant(s, Geo::kRot180, "r180")); break;
                case 4: out.push_back(geo_variant(s, Geo::kRot90, "r90")); break;
                case 5: out.push_back(geo_variant(s, Geo::kRot270, "r270")); break;
                case 6: out.push_back(noise_variant(s, sample_rng.split(v), "noise")); break;
                case 7: out.push_back(gamma_variant(s, 0.8f, "g08")); break;
                case 8: out.push_back(gamma_variant(s, 1.2f, "g12")); break;
                default:
                    out.push_back(noise_variant(s, sample_rng.split(v),
                                                "noise" + std::to_string(v - 8)));
            }
        }
    }
    return out;
}

std::pair<std::vector<Sample>, std::vector<Sample>> split_validation(
    std::vector<Sample> samples, double fraction, Rng rng) {
    if (samples.empty()) throw ContractError("split_validation: empty sample list");
    const std::size_t n = samples.size();
    const std::size_t n_val =
        std::min(n, static_cast<std::size_t>(std::llround(fraction * double(n))));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i > 1; --i)
        std::swap(order[i - 1], order[rng.next_below(i)]);
    std::vector<bool> in_val(n, false);
    for (std::size_t i = 0; i < n_val; ++i) in_val[order[i]] = true;
    std::vector<Sample> train, val;
    train.reserve(n - n_val);
    val.reserve(n_val);
    for (std::size_t i = 0; i < n; ++i)
        (in_val[i] ? val : train).push_back(std::move(samples[i]));
    return {std::move(train), std::move(val)};
}

void write_augmented_cache(const std::string& dir, const std::vector<Sample>& samples,
                           std::uint64_t seed) {
    fs::create_directories(dir);
    std::ofstream manifest(fs::path(dir) / "manifest.txt");
    if (!manifest) throw IngestError("cannot write manifest under " + dir);
    manifest << "seed=" << seed << "\n";
    for (const Sample& s : samples) {
        const std::string img_name = s.id + ".png";
        const std::string lab_name = s.id + ".label.png";
        write_png((fs::path(dir) / img_name).string(), tensor_to_image(s.image));
        write_png((fs::path(dir) / lab_name).string(), tensor_to_image(s.label));
        manifest << img_name << " label=" << lab_name << "\n";
    }
}

}  // namespace vesselnet
