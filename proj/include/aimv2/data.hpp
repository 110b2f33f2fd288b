#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "aimv2/config.hpp"
#include "aimv2/rng.hpp"
#include "aimv2/tensor.hpp"

namespace aimv2 {

// Byte-level tokenizer: ids 0..255 are raw bytes, then PAD/EOT/UNK.
constexpr int32_t pad_token_id = 256;
constexpr int32_t eot_token_id = 257;
constexpr int32_t unk_token_id = 258;
constexpr int64_t byte_vocab_size = 259;

inline std::vector<int32_t> tokenize(std::string_view text, int64_t max_len = 77) {
    std::vector<int32_t> ids;
    ids.reserve(text.size() + 1);
    for (unsigned char c : text) {
        ids.push_back(static_cast<int32_t>(c));
    }
    ids.push_back(eot_token_id);
    if (static_cast<int64_t>(ids.size()) > max_len) {
        ids.resize(static_cast<size_t>(max_len));
    }
    return ids;
}

inline std::string detokenize(const std::vector<int32_t>& ids) {
    std::string out;
    for (int32_t id : ids) {
        if (id < 0 || id > 255) {
            break; // EOT / PAD terminate the readable span
        }
        out.push_back(static_cast<char>(id));
    }
    return out;
}

// Decoder input form: the terminator is a target, not an input, so the
// trailing EOT produced by tokenize() is stripped.
inline std::vector<int32_t> caption_input_tokens(std::string_view caption, int64_t max_len) {
    std::vector<int32_t> ids = tokenize(caption, max_len);
    if (!ids.empty() && ids.back() == eot_token_id) {
        ids.pop_back();
    }
    if (ids.empty()) {
        ids.push_back(eot_token_id); // degenerate empty caption
    }
    return ids;
}

// ---------------------------------------------------------------------
// Synthetic captioned scenes: 1-3 colored shapes on a gray canvas with a
// canonical caption derived from the scene parameters.
// ---------------------------------------------------------------------

struct SceneSpec {
    int64_t canvas = 16;     // square, in pixels
    int64_t channels = 3;
    int64_t min_shapes = 1;
    int64_t max_shapes = 3;
    int64_t num_shape_kinds = 4; // square, circle, triangle, cross
    int64_t num_colors = 6;
};

struct CaptionedImage {
    Tensor image; // [H, W, C], values in [0, 1]
    std::string caption;
    int32_t source_id = 0;
    int32_t class_label = 0; // shape kind of the first shape
};

namespace detail {

inline const char* shape_name(int64_t k) {
    switch (k) {
        case 0: return "square";
        case 1: return "circle";
        case 2: return "triangle";
        case 3: return "cross";
        default: throw std::invalid_argument("shape_name: unknown shape kind");
    }
}

inline const char* color_name(int64_t c) {
    switch (c) {
        case 0: return "red";
        case 1: return "green";
        case 2: return "blue";
        case 3: return "yellow";
        case 4: return "magenta";
        case 5: return "cyan";
        default: throw std::invalid_argument("color_name: unknown color");
    }
}

inline void color_rgb(int64_t c, real rgb[3]) {
    static constexpr real table[6][3] = {
        {1.0, 0.15, 0.15}, {0.15, 1.0, 0.15}, {0.15, 0.35, 1.0},
        {1.0, 1.0, 0.2},   {1.0, 0.2, 1.0},   {0.2, 1.0, 1.0},
    };
    rgb[0] = table[c][0];
    rgb[1] = table[c][1];
    rgb[2] = table[c][2];
}

struct PlacedShape {
    int64_t kind = 0;
    int64_t color = 0;
    int64_t cx = 0, cy = 0; // center, pixels
    int64_t half = 0;
};

inline void draw_shape(Tensor& img, const PlacedShape& s) {
    const int64_t h = img.dim(0), w = img.dim(1);
    real rgb[3];
    color_rgb(s.color, rgb);
    auto put = [&](int64_t y, int64_t x) {
        if (y < 0 || y >= h || x < 0 || x >= w) {
            return;
        }
        real* px = img.data() + (y * w + x) * img.dim(2);
        for (int64_t c = 0; c < img.dim(2); ++c) {
            px[c] = rgb[c];
        }
    };
    const int64_t r = s.half;
    for (int64_t dy = -r; dy <= r; ++dy) {
        for (int64_t dx = -r; dx <= r; ++dx) {
            bool inside = false;
            switch (s.kind) {
                case 0: inside = true; break; // square: whole box
                case 1: inside = dx * dx + dy * dy <= r * r; break;
                case 2: inside = dy >= -r && (std::abs(dx) * 2 <= (dy + r)); break; // triangle
                case 3: inside = std::abs(dx) <= r / 3 || std::abs(dy) <= r / 3; break; // cross
                default: break;
            }
            if (inside) {
                put(s.cy + dy, s.cx + dx);
            }
        }
    }
}

} // namespace detail

inline CaptionedImage generate_scene(uint64_t seed, const SceneSpec& spec) {
    if (spec.canvas < 8) {
        throw std::invalid_argument("generate_scene: canvas too small for requested shapes");
    }
    if (spec.min_shapes < 1 || spec.max_shapes > 4 || spec.min_shapes > spec.max_shapes) {
        throw std::invalid_argument("generate_scene: shape count range invalid");
    }
    Rng rng(seed);
    CaptionedImage out;
    out.image = Tensor::full({spec.canvas, spec.canvas, spec.channels}, 0.12);

    const int64_t count = rng.uniform_int(spec.min_shapes, spec.max_shapes);
    const int64_t cell = spec.canvas / 2;

    // distinct quadrants so shapes never overlap
    std::vector<int64_t> cells = {0, 1, 2, 3};
    for (int64_t i = 3; i > 0; --i) {
        std::swap(cells[static_cast<size_t>(i)],
                  cells[static_cast<size_t>(rng.uniform_int(0, i))]);
    }

    std::vector<detail::PlacedShape> shapes;
    for (int64_t i = 0; i < count; ++i) {
        detail::PlacedShape s;
        s.kind = rng.uniform_int(0, spec.num_shape_kinds - 1);
        s.color = rng.uniform_int(0, spec.num_colors - 1);
        const int64_t q = cells[static_cast<size_t>(i)];
        s.cx = (q % 2) * cell + cell / 2;
        s.cy = (q / 2) * cell + cell / 2;
        s.half = std::max<int64_t>(1, cell * 2 / 5);
        detail::draw_shape(out.image, s);
        shapes.push_back(s);
    }

    auto describe = [](const detail::PlacedShape& s) {
        return std::string(detail::color_name(s.color)) + " " + detail::shape_name(s.kind);
    };
    if (count == 1) {
        out.caption = describe(shapes[0]);
    } else if (count == 2) {
        const auto& a = shapes[0];
        const auto& b = shapes[1];
        const int64_t dy = b.cy - a.cy, dx = b.cx - a.cx;
        const char* rel = (std::abs(dy) >= std::abs(dx)) ? (dy > 0 ? "above" : "below")
                                                         : (dx > 0 ? "left of" : "right of");
        out.caption = describe(a) + " " + rel + " " + describe(b);
    } else {
        out.caption = describe(shapes[0]);
        for (size_t i = 1; i + 1 < shapes.size(); ++i) {
            out.caption += ", " + describe(shapes[i]);
        }
        out.caption += " and " + describe(shapes.back());
    }
    out.class_label = static_cast<int32_t>(shapes[0].kind);
    return out;
}

// ---------------------------------------------------------------------
// Weighted mixture sampling over data sources.
// ---------------------------------------------------------------------

inline int64_t sample_source(const std::vector<MixtureSource>& sources, Rng& rng) {
    if (sources.empty()) {
        throw std::invalid_argument("sample_source: no sources");
    }
    double sum = 0.0;
    for (const auto& s : sources) {
        sum += s.prob;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        throw std::invalid_argument("sample_source: probabilities do not sum to 1");
    }
    const double u = rng.uniform01();
    double cum = 0.0;
    for (size_t i = 0; i < sources.size(); ++i) {
        cum += sources[i].prob;
        if (u < cum) {
            return static_cast<int64_t>(i);
        }
    }
    return static_cast<int64_t>(sources.size()) - 1;
}

inline std::vector<MixtureSource> load_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ValidationError("cannot open manifest '" + path + "'");
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(e.what());
    }
    if (!j.contains("schema_version") || j["schema_version"].get<int64_t>() != 1) {
        throw ValidationError("manifest missing or unsupported schema_version");
    }
    std::vector<MixtureSource> sources;
    for (const auto& s : j.at("sources")) {
        MixtureSource ms;
        ms.name = s.at("name").get<std::string>();
        ms.prob = s.at("prob").get<double>();
        if (s.contains("seed")) {
            ms.seed = s["seed"].get<uint64_t>();
        }
        sources.push_back(std::move(ms));
    }
    double sum = 0.0;
    for (const auto& s : sources) {
        sum += s.prob;
    }
    if (sources.empty() || std::abs(sum - 1.0) > 1e-9) {
        throw ValidationError("manifest source probabilities must sum to 1");
    }
    return sources;
}

// ---------------------------------------------------------------------
// Native-resolution batch planning: sample an area A = 2^n with n drawn
// from a truncated normal mapped onto [n_lo, n_hi], then size the
// mini-batch so the patch budget C is met exactly.
// ---------------------------------------------------------------------

struct BatchPlan {
    int64_t n = 0;
    int64_t area = 0;       // A, patches per image
    int64_t batch_size = 0; // B = C / A
    int64_t token_budget = 0;
};

// z in [-1, 1] maps linearly onto [n_lo, n_hi]; rounded half-up so that
// A = 2^n divides a power-of-two budget exactly.
inline int64_t area_exponent_from_z(double z, int64_t n_lo, int64_t n_hi) {
    const double mid = 0.5 * static_cast<double>(n_lo + n_hi);
    const double half = 0.5 * static_cast<double>(n_hi - n_lo);
    return static_cast<int64_t>(std::floor(mid + half * z + 0.5));
}

inline BatchPlan plan_native_batch(int64_t budget, Rng& rng, int64_t n_lo = 7, int64_t n_hi = 12) {
    if (n_lo < 0 || n_hi < n_lo) {
        throw std::invalid_argument("plan_native_batch: bad n range");
    }
    if (budget <= 0 || (budget & (budget - 1)) != 0 || budget < (int64_t(1) << n_hi)) {
        throw std::invalid_argument(
            "plan_native_batch: budget must be a power of two >= 2^n_hi");
    }
    const double z = rng.truncated_normal(-1.0, 1.0);
    BatchPlan plan;
    plan.n = area_exponent_from_z(z, n_lo, n_hi);
    plan.area = int64_t(1) << plan.n;
    plan.batch_size = budget / plan.area;
    plan.token_budget = budget;
    return plan;
}

// ---------------------------------------------------------------------
// Aspect-preserving fit of an image into an A-patch grid with zero
// padding; the grid factorization with the least padding wins.
// ---------------------------------------------------------------------

inline Tensor resize_bilinear(const Tensor& img, int64_t out_h, int64_t out_w) {
    const int64_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
    Tensor out({out_h, out_w, c});
    const double sy = static_cast<double>(h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(w) / static_cast<double>(out_w);
    for (int64_t y = 0; y < out_h; ++y) {
        double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
        const int64_t y0 = static_cast<int64_t>(std::floor(fy));
        const int64_t y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - static_cast<double>(y0);
        for (int64_t x = 0; x < out_w; ++x) {
            double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
            const int64_t x0 = static_cast<int64_t>(std::floor(fx));
            const int64_t x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - static_cast<double>(x0);
            for (int64_t ch = 0; ch < c; ++ch) {
                const double v00 = img[(y0 * w + x0) * c + ch];
                const double v01 = img[(y0 * w + x1) * c + ch];
                const double v10 = img[(y1 * w + x0) * c + ch];
                const double v11 = img[(y1 * w + x1) * c + ch];
                out[(y * out_w + x) * c + ch] = v00 * (1 - wy) * (1 - wx) + v01 * (1 - wy) * wx +
                                                v10 * wy * (1 - wx) + v11 * wy * wx;
            }
        }
    }
    return out;
}

struct FittedImage {
    Tensor image; // [rows*p, cols*p, C], zero-padded outside the resized content
    std::vector<uint8_t> valid;
    int64_t rows = 0;
    int64_t cols = 0;
    int64_t content_h = 0;
    int64_t content_w = 0;
};

inline FittedImage fit_image_to_area(const Tensor& img, int64_t area, int64_t p) {
    if (area < 1 || p < 1) {
        throw std::invalid_argument("fit_image_to_area: area and patch size must be positive");
    }
    const int64_t h = img.dim(0), w = img.dim(1), c = img.dim(2);

    int64_t best_rows = 0, best_cols = 0, best_h = 0, best_w = 0;
    int64_t best_pad = -1;
    double best_ratio_err = 0.0;
    for (int64_t rows = 1; rows <= area; ++rows) {
        if (area % rows != 0) {
            continue;
        }
        const int64_t cols = area / rows;
        const int64_t box_h = rows * p, box_w = cols * p;
        const double scale = std::min(static_cast<double>(box_h) / static_cast<double>(h),
                                      static_cast<double>(box_w) / static_cast<double>(w));
        const int64_t rh = std::clamp<int64_t>(std::llround(h * scale), 1, box_h);
        const int64_t rw = std::clamp<int64_t>(std::llround(w * scale), 1, box_w);
        const int64_t pad = box_h * box_w - rh * rw;
        const double ratio_err = std::abs(std::log(static_cast<double>(box_w) / box_h) -
                                          std::log(static_cast<double>(w) / h));
        if (best_pad < 0 || pad < best_pad ||
            (pad == best_pad && ratio_err < best_ratio_err)) {
            best_pad = pad;
            best_ratio_err = ratio_err;
            best_rows = rows;
            best_cols = cols;
            best_h = rh;
            best_w = rw;
        }
    }

    FittedImage fit;
    fit.rows = best_rows;
    fit.cols = best_cols;
    fit.content_h = best_h;
    fit.content_w = best_w;
    fit.image = Tensor({best_rows * p, best_cols * p, c});
    const Tensor resized = resize_bilinear(img, best_h, best_w);
    for (int64_t y = 0; y < best_h; ++y) {
        for (int64_t x = 0; x < best_w; ++x) {
            for (int64_t ch = 0; ch < c; ++ch) {
                fit.image[(y * best_cols * p + x) * c + ch] = resized[(y * best_w + x) * c + ch];
            }
        }
    }
    fit.valid.assign(static_cast<size_t>(area), 0);
    for (int64_t pr = 0; pr < best_rows; ++pr) {
        for (int64_t pc = 0; pc < best_cols; ++pc) {
            const bool has_content = pr * p < best_h && pc * p < best_w;
            fit.valid[static_cast<size_t>(pr * best_cols + pc)] = has_content ? 1 : 0;
        }
    }
    return fit;
}

// ---------------------------------------------------------------------
// Debug dumps: portable pixmap for images, portable graymap for patch
// visibility grids.
// ---------------------------------------------------------------------

inline void dump_ppm(const Tensor& image, const std::string& path) {
    const int64_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write '" + path + "'");
    }
    out << "P6\n" << w << " " << h << "\n255\n";
    for (int64_t i = 0; i < h * w; ++i) {
        for (int64_t ch = 0; ch < 3; ++ch) {
            const double v = (ch < c) ? image[i * c + ch] : image[i * c + c - 1];
            out.put(static_cast<char>(std::clamp<int64_t>(std::llround(v * 255.0), 0, 255)));
        }
    }
}

inline void dump_pgm(const std::vector<uint8_t>& grid, int64_t rows, int64_t cols,
                     const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write '" + path + "'");
    }
    out << "P5\n" << cols << " " << rows << "\n255\n";
    for (int64_t i = 0; i < rows * cols; ++i) {
        out.put(static_cast<char>(grid[static_cast<size_t>(i)] ? 255 : 0));
    }
}

} // namespace aimv2
