#pragma once

#include "a2i/common.hpp"

#include <string>
#include <vector>

namespace a2i {

struct ImageSample {
    std::vector<float> pixels;  // [H, W, 3] interleaved, values in [-1, 1]
    int size = 0;               // H == W
    int class_id = -1;

    float& at(int y, int x, int c) { return pixels[((size_t)y * size + x) * 3 + c]; }
    float at(int y, int x, int c) const { return pixels[((size_t)y * size + x) * 3 + c]; }
};

ImageSample flip_horizontal(const ImageSample& img);

// bilinear resample of an arbitrary crop window to `out_size`
ImageSample crop_resize(const ImageSample& img, int x0, int y0, int crop_w, int crop_h,
                        int out_size);

// planar [3, H, W] layout used by the diffusion backbone
std::vector<float> to_chw(const ImageSample& img);
ImageSample from_chw(const std::vector<float>& chw, int size, int class_id = -1);

void write_png(const std::string& path, const ImageSample& img);
ImageSample read_png(const std::string& path);

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b);

}  // namespace a2i
