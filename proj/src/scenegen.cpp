#include "stan/scenegen.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

namespace stan {

void SceneSpec::validate() const {
  if (vehicles < 0 || pedestrians < 0 || bicycles < 0 || others < 0)
    throw ConfigError("scene spec: actor counts must be >= 0");
  auto range_ok = [](double lo, double hi) { return 0.0 <= lo && lo <= hi && hi <= 20.0; };
  if (!range_ok(vehicle_speed_min, vehicle_speed_max) ||
      !range_ok(pedestrian_speed_min, pedestrian_speed_max) ||
      !range_ok(bicycle_speed_min, bicycle_speed_max))
    throw ConfigError("scene spec: speed ranges must lie in [0, 20] m/s");
  if (static_fraction < 0 || static_fraction > 1 || turn_fraction < 0 || turn_fraction > 1)
    throw ConfigError("scene spec: fractions must lie in [0, 1]");
  if (clutter_density < 0) throw ConfigError("scene spec: clutter density must be >= 0");
  if (duration_frames < 40)
    throw ConfigError("scene spec: duration must be >= 40 frames (20 history + 20 future)");
}

namespace {

struct ClassGeom {
  double length, width, height;
};

ClassGeom geometry_for(int class_id, Rng& rng) {
  switch (class_id) {
    case kVehicle:
      return {4.2 + rng.uniform(-0.4, 0.6), 1.9 + rng.uniform(-0.2, 0.2), 1.6};
    case kPedestrian:
      return {0.6, 0.6, 1.7};
    case kBicycle:
      return {1.8, 0.6, 1.4};
    default:
      return {1.2 + rng.uniform(0.0, 0.8), 1.2 + rng.uniform(0.0, 0.8), 1.0};
  }
}

Pose pose_at(double x0, double y0, double heading0, double speed, double turn_rate, double t) {
  if (turn_rate == 0.0)
    return {x0 + speed * t * std::cos(heading0), y0 + speed * t * std::sin(heading0), heading0};
  const double h = heading0 + turn_rate * t;
  const double r = speed / turn_rate;
  return {x0 + r * (std::sin(h) - std::sin(heading0)), y0 - r * (std::cos(h) - std::cos(heading0)),
          h};
}

bool placement_clear(const std::vector<Actor>& placed, double x, double y, double radius) {
  for (const Actor& a : placed) {
    const double r = 0.5 * std::hypot(a.length, a.width);
    const double dx = a.trajectory[0].x - x;
    const double dy = a.trajectory[0].y - y;
    if (std::hypot(dx, dy) < r + radius + 0.5) return false;
  }
  return true;
}

}  // namespace

Scene generate_scene(const SceneSpec& spec, uint64_t seed, uint32_t scene_id) {
  spec.validate();
  Scene scene;
  scene.id = scene_id;
  scene.duration_frames = spec.duration_frames;
  scene.clutter_density = spec.clutter_density;
  scene.rng_seed = Rng::mix(seed, scene_id);
  Rng rng(scene.rng_seed);

  struct Request {
    int class_id;
    double speed_min, speed_max;
  };
  std::vector<Request> requests;
  for (int i = 0; i < spec.vehicles; ++i)
    requests.push_back({kVehicle, spec.vehicle_speed_min, spec.vehicle_speed_max});
  for (int i = 0; i < spec.pedestrians; ++i)
    requests.push_back({kPedestrian, spec.pedestrian_speed_min, spec.pedestrian_speed_max});
  for (int i = 0; i < spec.bicycles; ++i)
    requests.push_back({kBicycle, spec.bicycle_speed_min, spec.bicycle_speed_max});
  for (int i = 0; i < spec.others; ++i) requests.push_back({kOthers, 0.0, 0.0});

  int next_id = 1;
  for (const Request& req : requests) {
    Actor a;
    a.id = next_id++;
    a.class_id = req.class_id;
    const ClassGeom g = geometry_for(req.class_id, rng);
    a.length = g.length;
    a.width = g.width;
    a.height = g.height;
    a.speed = req.class_id == kOthers ? 0.0 : rng.uniform(req.speed_min, req.speed_max);
    if (a.speed > 0.0 && rng.uniform() < spec.static_fraction) a.speed = 0.0;
    if (a.speed > 0.0 && rng.uniform() < spec.turn_fraction)
      a.turn_rate = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 0.5);

    const double radius = 0.5 * std::hypot(a.length, a.width);
    bool placed = false;
    for (int attempt = 0; attempt < 200; ++attempt) {
      const double x = rng.uniform(-28.0, 28.0);
      const double y = rng.uniform(-28.0, 28.0);
      if (!placement_clear(scene.actors, x, y, radius)) continue;
      const double heading = rng.uniform(0.0, 6.283185307179586);
      a.trajectory.resize(spec.duration_frames);
      for (int f = 0; f < spec.duration_frames; ++f)
        a.trajectory[f] = pose_at(x, y, heading, a.speed, a.turn_rate, f * kFrameDt);
      placed = true;
      break;
    }
    if (!placed)
      throw ValueError("generate_scene: could not place actor " + std::to_string(a.id) +
                       " without overlap");
    scene.actors.push_back(std::move(a));
  }
  return scene;
}

std::vector<Point3> sample_lidar(const Scene& scene, int frame_index, int points_per_actor,
                                 uint64_t seed) {
  if (frame_index < 0 || frame_index >= scene.duration_frames)
    throw ValueError("sample_lidar: frame " + std::to_string(frame_index) + " out of range");
  Rng rng(Rng::mix(Rng::mix(seed, scene.id), static_cast<uint64_t>(frame_index)));
  std::vector<Point3> points;

  for (const Actor& a : scene.actors) {
    const Pose& pose = a.trajectory[frame_index];
    const double c = std::cos(pose.heading);
    const double s = std::sin(pose.heading);
    // Faces: two long sides, two short sides, top; picked by surface area.
    const double area_long = a.length * a.height;
    const double area_short = a.width * a.height;
    const double area_top = a.length * a.width;
    const double total = 2 * area_long + 2 * area_short + area_top;
    for (int n = 0; n < points_per_actor; ++n) {
      const double pick = rng.uniform(0.0, total);
      double lx, ly, lz;
      if (pick < 2 * area_long) {
        lx = rng.uniform(-0.5 * a.length, 0.5 * a.length);
        ly = (pick < area_long ? -0.5 : 0.5) * a.width;
        lz = rng.uniform(0.0, a.height);
      } else if (pick < 2 * area_long + 2 * area_short) {
        lx = (pick < 2 * area_long + area_short ? -0.5 : 0.5) * a.length;
        ly = rng.uniform(-0.5 * a.width, 0.5 * a.width);
        lz = rng.uniform(0.0, a.height);
      } else {
        lx = rng.uniform(-0.5 * a.length, 0.5 * a.length);
        ly = rng.uniform(-0.5 * a.width, 0.5 * a.width);
        lz = a.height;
      }
      points.push_back({static_cast<float>(pose.x + c * lx - s * ly),
                        static_cast<float>(pose.y + s * lx + c * ly), static_cast<float>(lz)});
    }
  }

  // Ground clutter over the default 64 m x 64 m field of view; fixed count.
  const int clutter = static_cast<int>(std::llround(scene.clutter_density * 64.0 * 64.0));
  for (int n = 0; n < clutter; ++n)
    points.push_back({static_cast<float>(rng.uniform(-32.0, 32.0)),
                      static_cast<float>(rng.uniform(-32.0, 32.0)),
                      static_cast<float>(rng.uniform(0.0, 0.1))});
  return points;
}

SceneDataset build_dataset(const SceneSpec& spec, const GridConfig& grid, int count,
                           uint64_t seed, int points_per_actor) {
  grid.validate();
  SceneDataset ds;
  ds.grid = grid;
  for (int i = 0; i < count; ++i) {
    SceneRecord rec;
    rec.scene = generate_scene(spec, seed, static_cast<uint32_t>(i));
    rec.frames.reserve(rec.scene.duration_frames);
    for (int f = 0; f < rec.scene.duration_frames; ++f)
      rec.frames.push_back(sample_lidar(rec.scene, f, points_per_actor, seed));
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Dataset container: "VFDS", u16 version, grid block + hash, scene count,
// then per scene: header, actor table, per-frame point blocks (count-prefixed
// f32 triples).  All integers little-endian.
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'V', 'F', 'D', 'S'};
constexpr uint16_t kVersion = 1;

template <class T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const char* what) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError(std::string("dataset: truncated while reading ") + what);
  return v;
}

void put_grid(std::ostream& os, const GridConfig& g) {
  put(os, g.x_min);
  put(os, g.x_max);
  put(os, g.y_min);
  put(os, g.y_max);
  put(os, g.z_min);
  put(os, g.z_max);
  put(os, g.res_xy);
  put(os, g.res_z);
  put(os, g.hash());
}

GridConfig get_grid(std::istream& is) {
  GridConfig g;
  g.x_min = get<double>(is, "grid");
  g.x_max = get<double>(is, "grid");
  g.y_min = get<double>(is, "grid");
  g.y_max = get<double>(is, "grid");
  g.z_min = get<double>(is, "grid");
  g.z_max = get<double>(is, "grid");
  g.res_xy = get<double>(is, "grid");
  g.res_z = get<double>(is, "grid");
  const uint64_t h = get<uint64_t>(is, "grid hash");
  if (h != g.hash()) throw IoError("dataset: grid config hash mismatch (corrupt header)");
  return g;
}

}  // namespace

void write_dataset(const std::string& path, const SceneDataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("dataset: cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  put(os, kVersion);
  put_grid(os, ds.grid);
  put(os, static_cast<uint32_t>(ds.records.size()));
  for (const SceneRecord& rec : ds.records) {
    const Scene& sc = rec.scene;
    put(os, sc.id);
    put(os, static_cast<uint32_t>(sc.duration_frames));
    put(os, sc.clutter_density);
    put(os, sc.rng_seed);
    put(os, static_cast<uint32_t>(sc.actors.size()));
    for (const Actor& a : sc.actors) {
      put(os, static_cast<uint32_t>(a.id));
      put(os, static_cast<uint8_t>(a.class_id));
      put(os, a.length);
      put(os, a.width);
      put(os, a.height);
      put(os, a.speed);
      put(os, a.turn_rate);
      put(os, static_cast<uint32_t>(a.trajectory.size()));
      for (const Pose& p : a.trajectory) {
        put(os, p.x);
        put(os, p.y);
        put(os, p.heading);
      }
    }
    put(os, static_cast<uint32_t>(rec.frames.size()));
    for (const auto& frame : rec.frames) {
      put(os, static_cast<uint32_t>(frame.size()));
      for (const Point3& p : frame) {
        put(os, p.x);
        put(os, p.y);
        put(os, p.z);
      }
    }
  }
  if (!os) throw IoError("dataset: write failed for '" + path + "'");
}

SceneDataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("dataset: cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("dataset: bad magic in '" + path + "'");
  SceneDataset ds;
  ds.version = get<uint16_t>(is, "version");
  if (ds.version != kVersion)
    throw IoError("dataset: unsupported version " + std::to_string(ds.version) + " (expected " +
                  std::to_string(kVersion) + ")");
  ds.grid = get_grid(is);
  const uint32_t scenes = get<uint32_t>(is, "scene count");
  for (uint32_t si = 0; si < scenes; ++si) {
    SceneRecord rec;
    Scene& sc = rec.scene;
    sc.id = get<uint32_t>(is, "scene id");
    sc.duration_frames = static_cast<int>(get<uint32_t>(is, "duration"));
    sc.clutter_density = get<double>(is, "clutter density");
    sc.rng_seed = get<uint64_t>(is, "scene seed");
    const uint32_t actors = get<uint32_t>(is, "actor count");
    for (uint32_t ai = 0; ai < actors; ++ai) {
      Actor a;
      a.id = static_cast<int>(get<uint32_t>(is, "actor id"));
      a.class_id = get<uint8_t>(is, "actor class");
      if (a.class_id <= 0 || a.class_id >= kNumClasses)
        throw IoError("dataset: actor class out of range");
      a.length = get<double>(is, "actor length");
      a.width = get<double>(is, "actor width");
      a.height = get<double>(is, "actor height");
      a.speed = get<double>(is, "actor speed");
      a.turn_rate = get<double>(is, "actor turn rate");
      const uint32_t traj = get<uint32_t>(is, "trajectory length");
      if (traj != static_cast<uint32_t>(sc.duration_frames))
        throw IoError("dataset: trajectory length != scene duration");
      a.trajectory.resize(traj);
      for (Pose& p : a.trajectory) {
        p.x = get<double>(is, "pose");
        p.y = get<double>(is, "pose");
        p.heading = get<double>(is, "pose");
      }
      sc.actors.push_back(std::move(a));
    }
    const uint32_t frames = get<uint32_t>(is, "frame count");
    if (frames != static_cast<uint32_t>(sc.duration_frames))
      throw IoError("dataset: frame count != scene duration");
    rec.frames.resize(frames);
    for (auto& frame : rec.frames) {
      const uint32_t npts = get<uint32_t>(is, "point count");
      frame.resize(npts);
      for (Point3& p : frame) {
        p.x = get<float>(is, "point");
        p.y = get<float>(is, "point");
        p.z = get<float>(is, "point");
      }
    }
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

// ---------------------------------------------------------------------------

std::vector<int> clip_keyframes(int duration_frames, int stride, int horizon) {
  std::vector<int> keys;
  if (stride < 1) throw ConfigError("keyframe stride must be >= 1");
  for (int k = 19; k + horizon <= duration_frames - 1; k += stride) keys.push_back(k);
  return keys;
}

std::vector<ActorSnapshot> actor_snapshots(const Scene& scene, int keyframe, int horizon) {
  std::vector<ActorSnapshot> snaps;
  for (const Actor& a : scene.actors) {
    ActorSnapshot s;
    s.id = a.id;
    s.class_id = a.class_id;
    s.length = a.length;
    s.width = a.width;
    s.speed = a.speed;
    s.key_pose = a.trajectory[keyframe];
    s.future.assign(a.trajectory.begin() + keyframe + 1,
                    a.trajectory.begin() + keyframe + 1 + horizon);
    snaps.push_back(std::move(s));
  }
  return snaps;
}

std::vector<VoxelClip> dataset_to_clips(const SceneDataset& ds, int keyframe_stride,
                                        int horizon) {
  std::vector<VoxelClip> clips;
  for (const SceneRecord& rec : ds.records) {
    const auto keys = clip_keyframes(rec.scene.duration_frames, keyframe_stride, horizon);
    if (keys.empty()) {
      log_warn("dataset_to_clips: scene " + std::to_string(rec.scene.id) + " too short (" +
               std::to_string(rec.scene.duration_frames) + " frames), skipped");
      continue;
    }
    for (int k : keys) {
      std::vector<std::vector<Point3>> history(rec.frames.begin() + (k - 19),
                                               rec.frames.begin() + k + 1);
      clips.push_back(build_clip(history, actor_snapshots(rec.scene, k, horizon), ds.grid,
                                 horizon));
    }
  }
  return clips;
}

}  // namespace stan
