#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <random>
#include <stdexcept>
#include <vector>

#include "depthot/tensor.hpp"

// Synthetic indoor scenes with analytic depth: a back wall, a floor plane
// receding to the horizon, and a few fronto-parallel boxes standing on the
// floor. Floors carry a checker texture in world coordinates, and every
// surface is blended toward a fog colour with transmittance exp(-z / fog).
namespace depthot {

struct Scene {
  Tensor image;  // [3,H,W], channel-standardized (0 is the average colour)
  Tensor depth;  // [H,W], positive
};

struct SceneOptions {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t max_boxes = 3;
  double wall_min = 2.5, wall_max = 9.0;  // back wall depth range
  double fog = 5.0;  // attenuation length
  double noise = 0.02;
};

/// Colour statistics of generated scenes, used to standardize images.
inline constexpr std::array<double, 3> kChannelMean{0.55, 0.56, 0.57};
inline constexpr double kChannelStd = 0.17;

namespace detail {

using Rgb = std::array<double, 3>;

template <class Rng>
Rgb random_color(Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  return {u(rng), u(rng), u(rng)};
}

}  // namespace detail

template <class Rng>
Scene make_scene(const SceneOptions& opt, Rng& rng) {
  if (opt.height < 8 || opt.width < 8) throw std::invalid_argument("scenes need at least 8x8 pixels");
  const std::size_t h = opt.height, w = opt.width;
  std::uniform_real_distribution<double> u(0.0, 1.0);

  const double wall = opt.wall_min + (opt.wall_max - opt.wall_min) * u(rng);
  const double horizon = std::floor((0.2 + 0.4 * u(rng)) * static_cast<double>(h));
  const double near = 0.9 + 0.4 * u(rng);  // floor depth at the bottom row
  const double slope = (wall / near - 1.0) / (static_cast<double>(h - 1) - horizon);
  const detail::Rgb wall_rgb = detail::random_color(rng, 0.25, 0.4);
  const detail::Rgb floor_a = detail::random_color(rng, 0.05, 0.2);
  const detail::Rgb floor_b = detail::random_color(rng, 0.2, 0.35);

  Scene s{Tensor(Shape{3, h, w}), Tensor(Shape{h, w})};
  std::vector<detail::Rgb> albedo(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    const double dy = static_cast<double>(y) - horizon;
    for (std::size_t x = 0; x < w; ++x) {
      double z = wall;
      detail::Rgb c = wall_rgb;
      if (dy > 0) {
        z = std::min(wall, wall / (1.0 + slope * dy));
        const double lateral = (static_cast<double>(x) - 0.5 * static_cast<double>(w)) * z / static_cast<double>(w);
        const bool odd = (static_cast<long>(std::floor(2.0 * z)) + static_cast<long>(std::floor(3.0 * lateral))) & 1;
        c = odd ? floor_a : floor_b;
      }
      s.depth[y * w + x] = z;
      albedo[y * w + x] = c;
    }
  }

  // Boxes, drawn far to near so nearer ones occlude.
  struct Box {
    double z;
    std::size_t x0, x1, y0, y1;
    detail::Rgb rgb;
  };
  std::vector<Box> boxes;
  const std::size_t count = opt.max_boxes == 0 ? 0 : 1 + static_cast<std::size_t>(u(rng) * static_cast<double>(opt.max_boxes));
  for (std::size_t b = 0; b < std::min(count, opt.max_boxes); ++b) {
    const double z = near + 0.2 + u(rng) * (wall - near - 0.6);
    // Rests on the floor: its bottom edge is the row where the floor reaches z.
    const double bottom = horizon + (wall / z - 1.0) / slope;
    const double size = (0.25 + 0.2 * u(rng)) * static_cast<double>(h) * (near / z);
    const double cx = u(rng) * static_cast<double>(w);
    const double half = 0.5 * size * (0.7 + 0.6 * u(rng));
    const auto clampi = [](double v, std::size_t n) {
      return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(n)));
    };
    Box box{z, clampi(cx - half, w), clampi(cx + half, w), clampi(bottom - size, h), clampi(bottom + 1.0, h),
            detail::random_color(rng, 0.0, 0.45)};
    if (box.x1 > box.x0 && box.y1 > box.y0) boxes.push_back(box);
  }
  std::sort(boxes.begin(), boxes.end(), [](const Box& a, const Box& b) { return a.z > b.z; });
  for (const Box& b : boxes) {
    for (std::size_t y = b.y0; y < b.y1; ++y) {
      for (std::size_t x = b.x0; x < b.x1; ++x) {
        if (b.z >= s.depth[y * w + x]) continue;
        s.depth[y * w + x] = b.z;
        albedo[y * w + x] = b.rgb;
      }
    }
  }

  const detail::Rgb fog_rgb{0.92, 0.94, 0.97};
  std::normal_distribution<double> noise(0.0, opt.noise);
  for (std::size_t p = 0; p < h * w; ++p) {
    const double t = std::exp(-s.depth[p] / opt.fog);
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = albedo[p][c] * t + fog_rgb[c] * (1.0 - t) + (opt.noise > 0 ? noise(rng) : 0.0);
      s.image[c * h * w + p] = (std::clamp(v, 0.0, 1.0) - kChannelMean[c]) / kChannelStd;
    }
  }
  return s;
}

template <class Rng>
std::vector<Scene> make_scenes(std::size_t n, const SceneOptions& opt, Rng& rng) {
  std::vector<Scene> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_scene(opt, rng));
  return out;
}

}  // namespace depthot
