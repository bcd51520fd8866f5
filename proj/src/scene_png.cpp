#include "scene_png.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numbers>
#include <vector>

#include <png.h>

namespace countlab {

namespace {

using Rgb = std::array<unsigned char, 3>;

// Same order as kColors.
constexpr std::array<Rgb, 8> kPalette{{{40, 90, 220},
                                       {40, 160, 60},
                                       {215, 40, 40},
                                       {235, 200, 30},
                                       {245, 140, 20},
                                       {130, 80, 40},
                                       {140, 60, 180},
                                       {30, 190, 200}}};

bool in_polygon(double u, double v, int sides, double radius) {
    const double r = std::hypot(u, v);
    const double sector = 2 * std::numbers::pi / sides;
    double a = std::atan2(u, v); // 0 points up
    a = std::fmod(a + 2 * std::numbers::pi, sector) - sector / 2;
    return r * std::cos(a) <= radius * std::cos(sector / 2);
}

/// u right, v up, both in [-1, 1].
bool inside(int shape, double u, double v) {
    switch (shape) {
    case 0: return u * u + v * v <= 0.72 * 0.72;
    case 1: return v >= -0.6 && v <= 0.75 && std::abs(u) <= (0.75 - v) * 0.62;
    case 2: return std::abs(u) <= 0.62 && std::abs(v) <= 0.62;
    case 3: return in_polygon(u, v, 5, 0.75);
    case 4: return in_polygon(u, v, 6, 0.75);
    case 5: {
        const double r = std::hypot(u, v);
        const double a = std::atan2(u, v);
        const double t = std::abs(std::fmod(a * 5 / (2 * std::numbers::pi) + 10.5, 1.0) - 0.5) * 2;
        return r <= 0.35 + 0.45 * (1 - t);
    }
    case 6: return std::abs(u) / 0.6 + std::abs(v) / 0.8 <= 1.0;
    case 7: return (std::abs(u) <= 0.22 && std::abs(v) <= 0.75) || (std::abs(v) <= 0.22 && std::abs(u) <= 0.75);
    default: {
        const double x = u / 0.75, y = v / 0.75 + 0.1;
        const double q = x * x + y * y - 1;
        return q * q * q - x * x * y * y * y <= 0;
    }
    }
}

} // namespace

void write_scene_png(const VisualScene& scene, const std::string& path, int cell_px) {
    if (cell_px < 4) {
        throw ConfigError("cell size must be at least 4 pixels");
    }
    const int side = scene.grid_size * cell_px + 1;
    std::vector<unsigned char> pixels(static_cast<std::size_t>(side * side * 3), 255);
    auto put = [&](int x, int y, const Rgb& c) {
        const std::size_t o = static_cast<std::size_t>((y * side + x) * 3);
        pixels[o] = c[0];
        pixels[o + 1] = c[1];
        pixels[o + 2] = c[2];
    };
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            if (x % cell_px == 0 || y % cell_px == 0) {
                put(x, y, {200, 200, 200});
                continue;
            }
            const int content = scene.cell(y / cell_px, x / cell_px);
            if (content == 0) {
                continue;
            }
            const double u = 2.0 * ((x % cell_px) + 0.5) / cell_px - 1.0;
            const double v = 1.0 - 2.0 * ((y % cell_px) + 0.5) / cell_px;
            if (inside(VisualScene::shape_of(content), u, v)) {
                put(x, y, kPalette[static_cast<std::size_t>(VisualScene::color_of(content))]);
            }
        }
    }

    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!fp) {
        throw InputError("cannot write " + path);
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
    if (info == nullptr) {
        png_destroy_write_struct(&png, nullptr);
        throw InputError("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw InputError("libpng failed writing " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(side), static_cast<png_uint_32>(side), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < side; ++y) {
        png_write_row(png, &pixels[static_cast<std::size_t>(y * side * 3)]);
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

} // namespace countlab
