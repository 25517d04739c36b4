#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "sosd/tensor.hpp"

namespace sosd {

// 8-bit binary PPM (P6) from an HxWx3 float image in [0,1].
void write_image_ppm(const std::filesystem::path& path, const Tensor& image);

// 8-bit binary PGM (P5) from an HxW float grid, min-max normalized.
void write_grid_pgm(const std::filesystem::path& path, const Tensor& grid);

// Indexed-color PPM from an HxW grid of class ids and a palette.
void write_label_ppm(const std::filesystem::path& path, const Tensor& labels,
                     const std::vector<std::array<double, 3>>& palette);

// Readers return values normalized to [0,1] (value / 255).
Tensor read_image_ppm(const std::filesystem::path& path);
Tensor read_grid_pgm(const std::filesystem::path& path);

}  // namespace sosd
