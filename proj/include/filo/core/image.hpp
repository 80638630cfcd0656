#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "filo/core/error.hpp"
#include "filo/core/tensor.hpp"

#ifdef FILO_HAS_PNG
#include <png.h>
#endif

namespace filo {

// RGB image with float channels in [0, 1], row-major.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> rgb; // height * width * 3

    Image() = default;
    Image(int h, int w, float fill = 0.0f)
        : height(h), width(w),
          rgb(static_cast<std::size_t>(h) * w * 3, fill) {}

    std::size_t idx(int y, int x, int c) const {
        return (static_cast<std::size_t>(y) * width + x) * 3 + static_cast<std::size_t>(c);
    }
    float& at(int y, int x, int c) { return rgb[idx(y, x, c)]; }
    float at(int y, int x, int c) const { return rgb[idx(y, x, c)]; }

    float gray(int y, int x) const {
        return 0.299f * at(y, x, 0) + 0.587f * at(y, x, 1) + 0.114f * at(y, x, 2);
    }

    bool empty() const { return rgb.empty(); }
};

namespace img {

inline std::uint8_t to_byte(float v) {
    const float c = std::min(1.0f, std::max(0.0f, v));
    return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

// --- PPM (P6) / PGM (P5), binary, maxval 255 ---

namespace detail {

inline void skip_pnm_space(std::istream& in) {
    for (;;) {
        const int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
    }
}

inline int read_pnm_int(std::istream& in) {
    skip_pnm_space(in);
    int v = 0;
    in >> v;
    return v;
}

} // namespace detail

inline void write_ppm(const Image& im, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorKind::io, "cannot open for write: " + path);
    out << "P6\n" << im.width << " " << im.height << "\n255\n";
    for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x)
            for (int c = 0; c < 3; ++c)
                out.put(static_cast<char>(to_byte(im.at(y, x, c))));
    require(out.good(), ErrorKind::io, "write failed: " + path);
}

// 8-bit grayscale, used for anomaly-map exports (value = round(255 * v)).
inline void write_pgm(const Tensor& map, const std::string& path) {
    require(map.ndim() == 2, ErrorKind::shape, "write_pgm expects a [H,W] map");
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorKind::io, "cannot open for write: " + path);
    out << "P5\n" << map.dim(1) << " " << map.dim(0) << "\n255\n";
    for (std::int64_t i = 0; i < map.size(); ++i)
        out.put(static_cast<char>(to_byte(static_cast<float>(map[i]))));
    require(out.good(), ErrorKind::io, "write failed: " + path);
}

inline Image read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::io, "cannot open image: " + path);
    std::string magic;
    in >> magic;
    require(magic == "P6" || magic == "P5", ErrorKind::io,
            "unsupported PNM magic '" + magic + "' in " + path);
    const int w = detail::read_pnm_int(in);
    const int h = detail::read_pnm_int(in);
    const int maxval = detail::read_pnm_int(in);
    require(w > 0 && h > 0 && maxval > 0 && maxval < 65536, ErrorKind::io,
            "bad PNM header in " + path);
    in.get(); // single whitespace after maxval
    const int channels = magic == "P6" ? 3 : 1;
    const int bytes_per = maxval > 255 ? 2 : 1;
    std::vector<char> raw(static_cast<std::size_t>(w) * h * channels * bytes_per);
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    require(in.gcount() == static_cast<std::streamsize>(raw.size()), ErrorKind::io,
            "truncated PNM data in " + path);
    Image im(h, w);
    const float inv = 1.0f / static_cast<float>(maxval);
    std::size_t p = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float px[3];
            for (int c = 0; c < channels; ++c) {
                int v = static_cast<unsigned char>(raw[p++]);
                if (bytes_per == 2) v = (v << 8) | static_cast<unsigned char>(raw[p++]);
                px[c] = static_cast<float>(v) * inv;
            }
            for (int c = 0; c < 3; ++c) im.at(y, x, c) = px[channels == 3 ? c : 0];
        }
    return im;
}

#ifdef FILO_HAS_PNG

inline Image read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    require(fp != nullptr, ErrorKind::io, "cannot open image: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        fail(ErrorKind::io, "libpng failed to decode " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    std::vector<png_byte> rowbuf(static_cast<std::size_t>(w) * 3);
    Image im(h, w);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, rowbuf.data(), nullptr);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                im.at(y, x, c) = static_cast<float>(rowbuf[static_cast<std::size_t>(x) * 3 + c]) / 255.0f;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return im;
}

inline void write_png_gray(const Tensor& map, const std::string& path) {
    require(map.ndim() == 2, ErrorKind::shape, "write_png_gray expects a [H,W] map");
    FILE* fp = std::fopen(path.c_str(), "wb");
    require(fp != nullptr, ErrorKind::io, "cannot open for write: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        fail(ErrorKind::io, "libpng failed to encode " + path);
    }
    png_init_io(png, fp);
    const int h = map.dim(0), w = map.dim(1);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> rowbuf(static_cast<std::size_t>(w));
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            rowbuf[static_cast<std::size_t>(x)] = to_byte(static_cast<float>(map.at2(y, x)));
        png_write_row(png, rowbuf.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

#endif // FILO_HAS_PNG

// Reads an image by extension. PPM/PGM always work; PNG when built with
// libpng.
inline Image read_image(const std::string& path) {
    const std::string ext = std::filesystem::path(path).extension().string();
    if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") return read_pnm(path);
#ifdef FILO_HAS_PNG
    if (ext == ".png") return read_png(path);
#endif
    fail(ErrorKind::io, "unsupported image format '" + ext + "': " + path);
}

inline bool readable_image_ext(const std::string& ext) {
    if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") return true;
#ifdef FILO_HAS_PNG
    if (ext == ".png") return true;
#endif
    return false;
}

// Corner-aligned bilinear resize; identical sizes reproduce the input
// exactly.
inline Image resize_bilinear(const Image& im, int out_h, int out_w) {
    require(!im.empty(), ErrorKind::shape, "resize of empty image");
    Image out(out_h, out_w);
    const double sy = (im.height == 1 || out_h == 1)
                          ? 0.0
                          : static_cast<double>(im.height - 1) / (out_h - 1);
    const double sx = (im.width == 1 || out_w == 1)
                          ? 0.0
                          : static_cast<double>(im.width - 1) / (out_w - 1);
    for (int y = 0; y < out_h; ++y) {
        const double fy = y * sy;
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, im.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = x * sx;
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, im.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const double v =
                    (1 - wy) * ((1 - wx) * im.at(y0, x0, c) + wx * im.at(y0, x1, c)) +
                    wy * ((1 - wx) * im.at(y1, x0, c) + wx * im.at(y1, x1, c));
                out.at(y, x, c) = static_cast<float>(v);
            }
        }
    }
    return out;
}

// Binary mask from a grayscale-ish image (anomaly ground truth): any channel
// above 0.5 counts as foreground.
inline Tensor mask_from_image(const Image& im) {
    Tensor m(std::vector<int>{im.height, im.width});
    for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x)
            m.at2(y, x) = im.gray(y, x) > 0.5f ? 1.0 : 0.0;
    return m;
}

// Nearest-neighbor mask resize keeps values binary.
inline Tensor resize_mask_nearest(const Tensor& mask, int out_h, int out_w) {
    require(mask.ndim() == 2, ErrorKind::shape, "mask must be [H,W]");
    const int h = mask.dim(0), w = mask.dim(1);
    Tensor out(std::vector<int>{out_h, out_w});
    for (int y = 0; y < out_h; ++y) {
        const int sy = std::min(h - 1, static_cast<int>((y + 0.5) * h / out_h));
        for (int x = 0; x < out_w; ++x) {
            const int sx = std::min(w - 1, static_cast<int>((x + 0.5) * w / out_w));
            out.at2(y, x) = mask.at2(sy, sx);
        }
    }
    return out;
}

} // namespace img
} // namespace filo
