#pragma once

#include <filesystem>

#include "jem/encoders.hpp"

namespace jem {

// Decodes an 8-bit PNG (gray, gray+alpha, RGB or RGBA; alpha dropped) into a
// (1, 3, H, W) tensor with values k / 255.
Tensor read_png(const std::filesystem::path& path);

// Writes image `index` of the batch as 8-bit RGB, round(255 * v).
void write_png(const std::filesystem::path& path, const ImageTensor& images, std::size_t index = 0);

// Loads several PNGs of equal size into one batch.
ImageTensor read_png_batch(const std::vector<std::filesystem::path>& paths);

}  // namespace jem
