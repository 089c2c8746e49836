#pragma once

// BEV voxelization: point-cloud frames into binary pseudo-image stacks, and
// actor annotations into per-cell class / state / displacement targets.

#include <cstdint>
#include <vector>

#include "stan/common.hpp"
#include "stan/tensor.hpp"

namespace stan {

enum ClassId : int {
  kBackground = 0,
  kVehicle = 1,
  kPedestrian = 2,
  kBicycle = 3,
  kOthers = 4,
};
inline constexpr int kNumClasses = 5;
inline const char* class_name(int c) {
  static const char* names[] = {"background", "vehicle", "pedestrian", "bicycle", "others"};
  return c >= 0 && c < kNumClasses ? names[c] : "?";
}

struct Point3 {
  float x, y, z;
};

struct Pose {
  double x = 0, y = 0, heading = 0;
};

/// Ego-centered grid with half-open bins [low, high) on every axis.
struct GridConfig {
  double x_min = -32.0, x_max = 32.0;
  double y_min = -32.0, y_max = 32.0;
  double z_min = -2.0, z_max = 3.2;
  double res_xy = 0.25;
  double res_z = 0.4;

  int nx() const { return static_cast<int>(std::llround((x_max - x_min) / res_xy)); }
  int ny() const { return static_cast<int>(std::llround((y_max - y_min) / res_xy)); }
  int nz() const { return static_cast<int>(std::llround((z_max - z_min) / res_z)); }

  void validate() const;

  /// Cell of a point, or false when outside the field of view.
  bool cell_of(double x, double y, double z, int& i, int& j, int& k) const;
  bool bev_cell_of(double x, double y, int& i, int& j) const;

  double cell_center_x(int i) const { return x_min + (i + 0.5) * res_xy; }
  double cell_center_y(int j) const { return y_min + (j + 0.5) * res_xy; }

  /// Fingerprint over the canonical parameter encoding.
  uint64_t hash() const;

  /// Same field of view at res_xy scaled by s (e.g. s=4 -> 64x64 BEV cells).
  static GridConfig scaled(int s) {
    GridConfig g;
    g.res_xy = 0.25 * s;
    return g;
  }
};

/// One actor as the rasterizer sees it: footprint, keyframe pose, the pose at
/// each future step, and the (constant) ground speed used for the static bit.
struct ActorSnapshot {
  int id = 0;  // > 0
  int class_id = kVehicle;
  double length = 4.0, width = 2.0;
  double speed = 0.0;
  Pose key_pose;
  std::vector<Pose> future;  // one pose per future step
};

/// One training sample: the five-frame binary stack plus rasterized targets.
struct VoxelClip {
  int H = 0, W = 0, T = 20;
  Tensor frames;                      // (5, H, W, Z) in {0,1}
  std::vector<int> class_target;      // H*W in [0, kNumClasses)
  std::vector<uint8_t> state_target;  // H*W, 1 = static
  std::vector<int> instance_target;   // H*W actor id, 0 = none
  std::vector<float> speed_target;    // H*W ground speed of the covering actor
  Tensor motion_target;               // (T, H, W, 2) displacement from cell center
  std::vector<uint8_t> valid_mask;    // H*W, cell occupied at the keyframe
};

/// Binary occupancy (H, W, Z): 1 iff at least one point falls in the cell.
/// Points outside the field of view are dropped silently.
Tensor voxelize_frame(const std::vector<Point3>& points, const GridConfig& cfg);

struct RasterizedTargets {
  std::vector<int> class_target;
  std::vector<uint8_t> state_target;
  std::vector<int> instance_target;
  std::vector<float> speed_target;
  Tensor motion_target;  // (T, H, W, 2)
};

/// Rasterizes actor footprints at the keyframe: covered cells get the actor's
/// class, instance, speed, static bit (speed exactly 0), and per-step
/// displacement of the cell center under the actor's rigid motion.  When
/// footprints overlap, the smaller footprint wins; ties break to the lower
/// actor id.
RasterizedTargets rasterize_targets(const std::vector<ActorSnapshot>& actors,
                                    const GridConfig& cfg, int horizon);

/// Builds one clip from exactly 20 past point-cloud frames (oldest first,
/// newest = keyframe), keeping every 4th frame, plus rasterized targets.
VoxelClip build_clip(const std::vector<std::vector<Point3>>& history,
                     const std::vector<ActorSnapshot>& actors, const GridConfig& cfg,
                     int horizon = 20);

}  // namespace stan
