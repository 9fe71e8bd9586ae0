#include "jem/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "jem/error.hpp"

namespace jem {
namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f != nullptr) {
            std::fclose(f);
        }
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Tensor read_png(const std::filesystem::path& path) {
    FilePtr file(std::fopen(path.c_str(), "rb"));
    if (!file) {
        throw IoError("cannot open PNG: " + path.string());
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
    if (png == nullptr || info == nullptr) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng initialisation failed");
    }
    std::vector<png_bytep> rows;
    std::vector<png_byte> buffer;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("cannot decode PNG: " + path.string());
    }
    png_init_io(png, file.get());
    png_read_info(png, info);
    const png_uint_32 width = png_get_image_width(png, info);
    const png_uint_32 height = png_get_image_height(png, info);
    const int color_type = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) {
        png_set_strip_16(png);
    }
    if (color_type == PNG_COLOR_TYPE_PALETTE) {
        png_set_palette_to_rgb(png);
    }
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA) {
        if (png_get_bit_depth(png, info) < 8) {
            png_set_expand_gray_1_2_4_to_8(png);
        }
        png_set_gray_to_rgb(png);
    }
    if ((color_type & PNG_COLOR_MASK_ALPHA) != 0) {
        png_set_strip_alpha(png);
    }
    png_read_update_info(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    if (stride != static_cast<std::size_t>(width) * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("unsupported PNG pixel layout: " + path.string());
    }
    buffer.resize(stride * height);
    rows.resize(height);
    for (png_uint_32 y = 0; y < height; ++y) {
        rows[y] = buffer.data() + y * stride;
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Tensor image({1, 3, height, width});
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                image[c * plane + y * width + x] = buffer[y * stride + x * 3 + c] / 255.0;
            }
        }
    }
    return image;
}

void write_png(const std::filesystem::path& path, const ImageTensor& images, std::size_t index) {
    if (index >= images.batch()) {
        throw InputError("image index out of range");
    }
    const std::size_t height = images.height();
    const std::size_t width = images.width();
    const std::size_t plane = height * width;
    const auto src = images.tensor().row(index);
    std::vector<png_byte> buffer(plane * 3);
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                buffer[(y * width + x) * 3 + c] =
                    static_cast<png_byte>(std::lround(255.0 * src[c * plane + y * width + x]));
            }
        }
    }
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    FilePtr file(std::fopen(path.c_str(), "wb"));
    if (!file) {
        throw IoError("cannot write PNG: " + path.string());
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
    if (png == nullptr || info == nullptr) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialisation failed");
    }
    std::vector<png_bytep> rows(height);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG encoding failed: " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t y = 0; y < height; ++y) {
        rows[y] = buffer.data() + y * width * 3;
    }
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

ImageTensor read_png_batch(const std::vector<std::filesystem::path>& paths) {
    if (paths.empty()) {
        throw InputError("no images given");
    }
    const Tensor first = read_png(paths.front());
    Shape shape = first.shape();
    shape[0] = paths.size();
    Tensor batch(shape);
    std::copy(first.storage().begin(), first.storage().end(), batch.row(0).begin());
    for (std::size_t i = 1; i < paths.size(); ++i) {
        const Tensor image = read_png(paths[i]);
        if (image.shape() != first.shape()) {
            throw InputError("image " + paths[i].string() + " has a different size");
        }
        std::copy(image.storage().begin(), image.storage().end(), batch.row(i).begin());
    }
    return ImageTensor(std::move(batch));
}

}  // namespace jem
