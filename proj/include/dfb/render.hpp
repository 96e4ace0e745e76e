#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dfb/tensor.hpp"

namespace dfb::render {

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

// Simple axis+polyline chart written as PNG.
void line_plot(const std::filesystem::path& p, const std::vector<Series>& series,
               const std::string& title, const std::string& xlabel, const std::string& ylabel);

// Overlaid per-group histograms (shared binning across groups).
void histogram(const std::filesystem::path& p, const std::vector<std::vector<double>>& groups,
               const std::vector<std::string>& names, int bins, const std::string& title,
               const std::string& xlabel);

// Tile a batch {N,C,H,W} (values in [0,1]) into a grid image.
void image_grid(const std::filesystem::path& p, const Tensor& images, int cols, int upscale = 4);

// Input image with a heat overlay (heat {H,W} in [0,1]).
void heatmap_overlay(const std::filesystem::path& p, const Tensor& image_chw, const Tensor& heat,
                     int upscale = 4);

// Centered visualization of a signed residual: 0.5 + r / (2 max|r|).
Tensor residual_to_visual(const Tensor& residual_chw);

}  // namespace dfb::render
