#pragma once

#include <vector>

#include "common.hpp"

namespace tpd::tri {

// Orbit camera looking at the origin, world up = +y.
struct CameraPose {
  double azimuth = 0.0;    // radians
  double elevation = 0.0;  // radians
  double radius = 2.7;
  double fov = 0.6;  // radians, full vertical/horizontal angle (square frames)
  int image_size = 64;

  void validate() const;
};

struct RaySamples {
  int width = 0, height = 0, samples_per_ray = 0;
  std::vector<double> origins;     // (R, 3)
  std::vector<double> dirs;        // (R, 3), unit norm
  std::vector<double> depths;      // (R, S), strictly increasing per ray
  std::vector<double> deltas;      // (R, S), segment lengths, last ends at t_far
  std::vector<double> positions;   // (R*S, 3), world space

  int64_t ray_count() const { return int64_t(width) * height; }
  int64_t point_count() const { return ray_count() * samples_per_ray; }
};

// One pinhole ray per pixel with S depth samples in [near, far). With jitter
// enabled, each sample is placed uniformly inside its stratum using the seed;
// otherwise at the stratum's left endpoint (so a homogeneous medium composites
// to exactly exp(-sigma * (far - near))). Deterministic given (pose, seed).
RaySamples camera_rays(const CameraPose& pose, int samples, double t_near, double t_far,
                       uint64_t seed, bool jitter);

}  // namespace tpd::tri
