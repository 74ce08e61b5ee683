#include "camera.hpp"

#include <cmath>

namespace tpd::tri {

void CameraPose::validate() const {
  if (!(radius > 0.0)) throw ContractError("CameraPose: radius must be > 0");
  if (!(fov > 0.0 && fov < M_PI)) throw ContractError("CameraPose: fov must be in (0, pi)");
  if (image_size < 1) throw ContractError("CameraPose: image_size must be >= 1");
}

RaySamples camera_rays(const CameraPose& pose, int samples, double t_near, double t_far,
                       uint64_t seed, bool jitter) {
  pose.validate();
  if (samples < 2) throw ContractError("camera_rays: need at least 2 samples per ray");
  if (!(t_far > t_near && t_near > 0.0)) throw ContractError("camera_rays: bad near/far");

  int n = pose.image_size;
  Vec3 cam{pose.radius * std::cos(pose.elevation) * std::sin(pose.azimuth),
           pose.radius * std::sin(pose.elevation),
           pose.radius * std::cos(pose.elevation) * std::cos(pose.azimuth)};
  Vec3 fwd = (Vec3{0, 0, 0} - cam).normalized();
  Vec3 up{0, 1, 0};
  Vec3 right = fwd.cross(up);
  double rn = right.norm();
  if (rn < 1e-9) {
    // looking straight up/down: pick a stable right axis from the azimuth
    right = Vec3{std::cos(pose.azimuth), 0, -std::sin(pose.azimuth)};
  } else {
    right = right * (1.0 / rn);
  }
  Vec3 vup = right.cross(fwd);
  double th = std::tan(pose.fov * 0.5);

  RaySamples rs;
  rs.width = rs.height = n;
  rs.samples_per_ray = samples;
  int64_t R = rs.ray_count();
  rs.origins.resize(size_t(R * 3));
  rs.dirs.resize(size_t(R * 3));
  rs.depths.resize(size_t(R) * size_t(samples));
  rs.deltas.resize(size_t(R) * size_t(samples));
  rs.positions.resize(size_t(R) * size_t(samples) * 3);

  double step = (t_far - t_near) / double(samples);
  Rng rng = Rng::derive(seed, 0x7261797374726174ull, 0);
  // note: one shared jitter stream in raster order keeps runs reproducible
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      int64_t r = int64_t(y) * n + x;
      double ndc_x = (double(x) + 0.5) / double(n) * 2.0 - 1.0;
      double ndc_y = 1.0 - (double(y) + 0.5) / double(n) * 2.0;
      Vec3 dir = (fwd + right * (ndc_x * th) + vup * (ndc_y * th)).normalized();
      rs.origins[size_t(r * 3) + 0] = cam.x;
      rs.origins[size_t(r * 3) + 1] = cam.y;
      rs.origins[size_t(r * 3) + 2] = cam.z;
      rs.dirs[size_t(r * 3) + 0] = dir.x;
      rs.dirs[size_t(r * 3) + 1] = dir.y;
      rs.dirs[size_t(r * 3) + 2] = dir.z;
      for (int i = 0; i < samples; ++i) {
        double frac = jitter ? rng.uniform() : 0.0;
        rs.depths[size_t(r * samples + i)] = t_near + (double(i) + frac) * step;
      }
      for (int i = 0; i < samples; ++i) {
        double t0 = rs.depths[size_t(r * samples + i)];
        double t1 = (i + 1 < samples) ? rs.depths[size_t(r * samples + i + 1)] : t_far;
        rs.deltas[size_t(r * samples + i)] = t1 - t0;
        size_t p = size_t(r * samples + i) * 3;
        rs.positions[p + 0] = cam.x + t0 * dir.x;
        rs.positions[p + 1] = cam.y + t0 * dir.y;
        rs.positions[p + 2] = cam.z + t0 * dir.z;
      }
    }
  }
  return rs;
}

}  // namespace tpd::tri
