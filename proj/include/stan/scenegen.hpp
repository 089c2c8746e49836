#pragma once

// Deterministic synthetic world: actors with rectangular footprints on a
// ground plane, straight or constant-turn-rate kinematics, surface-sampled
// LiDAR points, a single-file dataset container, and clip extraction.

#include <cstdint>
#include <string>
#include <vector>

#include "stan/voxelizer.hpp"

namespace stan {

struct Actor {
  int id = 0;
  int class_id = kVehicle;
  double length = 4.0, width = 2.0, height = 1.6;
  double speed = 0.0;      // m/s, constant; exactly 0 = static
  double turn_rate = 0.0;  // rad/s, constant
  std::vector<Pose> trajectory;  // one pose per 20 Hz frame
};

/// Actor counts and speed ranges for one generated scene.
struct SceneSpec {
  int vehicles = 3;
  int pedestrians = 2;
  int bicycles = 1;
  int others = 2;  // static obstacles
  double vehicle_speed_min = 2.0, vehicle_speed_max = 12.0;
  double pedestrian_speed_min = 0.5, pedestrian_speed_max = 2.0;
  double bicycle_speed_min = 3.0, bicycle_speed_max = 8.0;
  double static_fraction = 0.25;  // chance a moving-class actor is parked
  double turn_fraction = 0.3;     // chance a moving actor follows an arc
  double clutter_density = 0.05;  // ground points per square meter
  int duration_frames = 45;       // >= 40: 20 history + 20 future

  void validate() const;
};

struct Scene {
  uint32_t id = 0;
  int duration_frames = 0;
  double clutter_density = 0.0;
  uint64_t rng_seed = 0;
  std::vector<Actor> actors;
};

struct SceneRecord {
  Scene scene;
  std::vector<std::vector<Point3>> frames;  // sampled points per 20 Hz frame
};

struct SceneDataset {
  uint16_t version = 1;
  GridConfig grid;
  std::vector<SceneRecord> records;
};

inline constexpr double kFrameHz = 20.0;
inline constexpr double kFrameDt = 1.0 / kFrameHz;

/// Deterministic function of (spec, seed, scene_id): places actors without
/// initial footprint overlap and rolls out their trajectories.
Scene generate_scene(const SceneSpec& spec, uint64_t seed, uint32_t scene_id = 0);

/// Uniform samples on each actor's box surface plus fixed-count ground
/// clutter; deterministic per (scene, frame, seed).
std::vector<Point3> sample_lidar(const Scene& scene, int frame_index, int points_per_actor,
                                 uint64_t seed);

/// Generates `count` scenes and their per-frame point clouds.
SceneDataset build_dataset(const SceneSpec& spec, const GridConfig& grid, int count,
                           uint64_t seed, int points_per_actor);

void write_dataset(const std::string& path, const SceneDataset& ds);
SceneDataset read_dataset(const std::string& path);

/// Keyframe indices usable in a scene of the given length (first at 19, then
/// every `stride` frames, leaving a full horizon of future frames).
std::vector<int> clip_keyframes(int duration_frames, int stride, int horizon = 20);

/// One clip per valid keyframe per scene; scenes too short are skipped with a
/// warning.
std::vector<VoxelClip> dataset_to_clips(const SceneDataset& ds, int keyframe_stride,
                                        int horizon = 20);

/// Snapshot of every actor at keyframe `k` with `horizon` future poses.
std::vector<ActorSnapshot> actor_snapshots(const Scene& scene, int keyframe, int horizon);

}  // namespace stan
