#pragma once

#include <vector>

namespace rise {

// One colored point: position in meters, color in [0, 1].
struct ColoredPoint {
  float x = 0, y = 0, z = 0;
  float r = 0, g = 0, b = 0;
};

using PointCloud = std::vector<ColoredPoint>;

}  // namespace rise
