#pragma once

// Sample visualisation: PNG contact sheets and animated GIFs of clips in
// [-1, 1]. One or three channels.

#include <torch/torch.h>

#include <filesystem>

namespace pose {

// clips (N, F, C, H, W): one row per clip, one column per frame.
void write_png_grid(const std::filesystem::path& path, const torch::Tensor& clips, int scale = 4);

// clips (N, F, C, H, W): clips side by side, one GIF frame per video frame.
void write_gif(const std::filesystem::path& path, const torch::Tensor& clips, int scale = 4,
               int delay_cs = 12);

}  // namespace pose
