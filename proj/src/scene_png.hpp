#pragma once

#include <string>

#include "countlab/dataset.hpp"

namespace countlab {

/// Draws a scene as a PNG: one square tile per cell, objects as colored
/// glyphs of their shape. For looking at datasets, the pixels carry no meaning
/// for the model.
void write_scene_png(const VisualScene& scene, const std::string& path, int cell_px = 32);

} // namespace countlab
