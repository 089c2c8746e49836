#include "stan/voxelizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace stan {

void GridConfig::validate() const {
  if (!(x_max > x_min && y_max > y_min && z_max > z_min && res_xy > 0 && res_z > 0))
    throw ConfigError("grid: extents must be positive");
  auto integral = [](double span, double res) {
    const double cells = span / res;
    return std::abs(cells - std::llround(cells)) < 1e-9;
  };
  if (!integral(x_max - x_min, res_xy) || !integral(y_max - y_min, res_xy) ||
      !integral(z_max - z_min, res_z))
    throw ConfigError("grid: range extents must be integer multiples of the resolution");
}

bool GridConfig::cell_of(double x, double y, double z, int& i, int& j, int& k) const {
  if (!(x >= x_min && x < x_max && y >= y_min && y < y_max && z >= z_min && z < z_max))
    return false;
  i = static_cast<int>(std::floor((x - x_min) / res_xy));
  j = static_cast<int>(std::floor((y - y_min) / res_xy));
  k = static_cast<int>(std::floor((z - z_min) / res_z));
  // Clamp against the open upper bound for values within one ulp of it.
  i = std::min(i, nx() - 1);
  j = std::min(j, ny() - 1);
  k = std::min(k, nz() - 1);
  return true;
}

bool GridConfig::bev_cell_of(double x, double y, int& i, int& j) const {
  if (!(x >= x_min && x < x_max && y >= y_min && y < y_max)) return false;
  i = std::min(static_cast<int>(std::floor((x - x_min) / res_xy)), nx() - 1);
  j = std::min(static_cast<int>(std::floor((y - y_min) / res_xy)), ny() - 1);
  return true;
}

uint64_t GridConfig::hash() const {
  const double fields[] = {x_min, x_max, y_min, y_max, z_min, z_max, res_xy, res_z};
  return fnv1a(fields, sizeof(fields));
}

Tensor voxelize_frame(const std::vector<Point3>& points, const GridConfig& cfg) {
  const int H = cfg.nx(), W = cfg.ny(), Z = cfg.nz();
  Tensor grid = Tensor::zeros({H, W, Z});
  float* g = grid.data();
  for (const Point3& p : points) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
      throw ValueError("voxelize_frame: non-finite point coordinate");
    int i, j, k;
    if (!cfg.cell_of(p.x, p.y, p.z, i, j, k)) continue;
    g[(static_cast<int64_t>(i) * W + j) * Z + k] = 1.0f;
  }
  return grid;
}

namespace {

// Point-in-oriented-rectangle test in the actor's local frame.
bool covers(const ActorSnapshot& a, double px, double py) {
  const double dx = px - a.key_pose.x;
  const double dy = py - a.key_pose.y;
  const double c = std::cos(a.key_pose.heading);
  const double s = std::sin(a.key_pose.heading);
  const double lx = c * dx + s * dy;   // along heading
  const double ly = -s * dx + c * dy;  // across
  return std::abs(lx) <= a.length * 0.5 && std::abs(ly) <= a.width * 0.5;
}

// True when `cand` takes precedence over `cur` for an overlapped cell.
bool wins(const ActorSnapshot& cand, const ActorSnapshot& cur) {
  const double area_cand = cand.length * cand.width;
  const double area_cur = cur.length * cur.width;
  if (area_cand != area_cur) return area_cand < area_cur;
  return cand.id < cur.id;
}

}  // namespace

RasterizedTargets rasterize_targets(const std::vector<ActorSnapshot>& actors,
                                    const GridConfig& cfg, int horizon) {
  const int H = cfg.nx(), W = cfg.ny();
  const int64_t cells = static_cast<int64_t>(H) * W;
  RasterizedTargets out;
  out.class_target.assign(cells, kBackground);
  out.state_target.assign(cells, 1);  // background cells are static
  out.instance_target.assign(cells, 0);
  out.speed_target.assign(cells, 0.0f);
  out.motion_target = Tensor::zeros({horizon, H, W, 2});

  std::vector<int> owner(cells, -1);  // index into `actors`
  for (size_t ai = 0; ai < actors.size(); ++ai) {
    const ActorSnapshot& a = actors[ai];
    if (static_cast<int>(a.future.size()) != horizon)
      throw ValueError("rasterize_targets: actor " + std::to_string(a.id) + " has " +
                       std::to_string(a.future.size()) + " future poses, expected " +
                       std::to_string(horizon));
    if (a.class_id <= 0 || a.class_id >= kNumClasses)
      throw ValueError("rasterize_targets: actor class out of range");
    // Cell range under the footprint's axis-aligned bound.
    const double r = 0.5 * std::hypot(a.length, a.width);
    int i0, j0, i1, j1;
    const double x0 = std::max(a.key_pose.x - r, cfg.x_min);
    const double y0 = std::max(a.key_pose.y - r, cfg.y_min);
    const double x1 = std::min(a.key_pose.x + r, cfg.x_max - 1e-9);
    const double y1 = std::min(a.key_pose.y + r, cfg.y_max - 1e-9);
    if (x0 > x1 || y0 > y1) continue;  // fully outside the FOV
    if (!cfg.bev_cell_of(x0, y0, i0, j0) || !cfg.bev_cell_of(x1, y1, i1, j1)) continue;
    for (int i = i0; i <= i1; ++i)
      for (int j = j0; j <= j1; ++j) {
        if (!covers(a, cfg.cell_center_x(i), cfg.cell_center_y(j))) continue;
        const int64_t cell = static_cast<int64_t>(i) * W + j;
        if (owner[cell] >= 0 && !wins(a, actors[owner[cell]])) continue;
        owner[cell] = static_cast<int>(ai);
      }
  }

  float* motion = out.motion_target.data();
  for (int64_t cell = 0; cell < cells; ++cell) {
    if (owner[cell] < 0) continue;
    const ActorSnapshot& a = actors[owner[cell]];
    const int i = static_cast<int>(cell / W);
    const int j = static_cast<int>(cell % W);
    out.class_target[cell] = a.class_id;
    out.state_target[cell] = a.speed == 0.0 ? 1 : 0;
    out.instance_target[cell] = a.id;
    out.speed_target[cell] = static_cast<float>(a.speed);

    // Carry the cell center with the actor's rigid motion.
    const double cx = cfg.cell_center_x(i);
    const double cy = cfg.cell_center_y(j);
    const double c0 = std::cos(a.key_pose.heading);
    const double s0 = std::sin(a.key_pose.heading);
    const double lx = c0 * (cx - a.key_pose.x) + s0 * (cy - a.key_pose.y);
    const double ly = -s0 * (cx - a.key_pose.x) + c0 * (cy - a.key_pose.y);
    for (int t = 0; t < horizon; ++t) {
      const Pose& pt = a.future[t];
      const int64_t base = (static_cast<int64_t>(t) * cells + cell) * 2;
      // Identical pose means the rigid transform is the identity; write exact
      // zeros instead of rotate/unrotate round-off.
      if (pt.x == a.key_pose.x && pt.y == a.key_pose.y && pt.heading == a.key_pose.heading) {
        motion[base] = 0.0f;
        motion[base + 1] = 0.0f;
        continue;
      }
      const double ct = std::cos(pt.heading);
      const double st = std::sin(pt.heading);
      const double wx = pt.x + ct * lx - st * ly;
      const double wy = pt.y + st * lx + ct * ly;
      motion[base] = static_cast<float>(wx - cx);
      motion[base + 1] = static_cast<float>(wy - cy);
    }
  }
  return out;
}

VoxelClip build_clip(const std::vector<std::vector<Point3>>& history,
                     const std::vector<ActorSnapshot>& actors, const GridConfig& cfg,
                     int horizon) {
  if (history.size() < 20)
    throw ValueError("build_clip: insufficient history, need 20 frames, got " +
                     std::to_string(history.size()));
  if (history.size() != 20)
    throw ValueError("build_clip: expected exactly 20 frames, got " +
                     std::to_string(history.size()));
  const int H = cfg.nx(), W = cfg.ny(), Z = cfg.nz();

  VoxelClip clip;
  clip.H = H;
  clip.W = W;
  clip.T = horizon;
  clip.frames = Tensor::zeros({5, H, W, Z});
  // Keep every 4th frame counting back from the keyframe (indices 3,7,11,15,19).
  const int64_t frame_n = static_cast<int64_t>(H) * W * Z;
  for (int f = 0; f < 5; ++f) {
    Tensor v = voxelize_frame(history[3 + 4 * f], cfg);
    std::memcpy(clip.frames.data() + f * frame_n, v.data(), frame_n * sizeof(float));
  }

  RasterizedTargets t = rasterize_targets(actors, cfg, horizon);
  clip.class_target = std::move(t.class_target);
  clip.state_target = std::move(t.state_target);
  clip.instance_target = std::move(t.instance_target);
  clip.speed_target = std::move(t.speed_target);
  clip.motion_target = std::move(t.motion_target);

  clip.valid_mask.assign(static_cast<int64_t>(H) * W, 0);
  const float* key = clip.frames.data() + 4 * frame_n;
  for (int64_t cell = 0; cell < static_cast<int64_t>(H) * W; ++cell)
    for (int k = 0; k < Z; ++k)
      if (key[cell * Z + k] != 0.0f) {
        clip.valid_mask[cell] = 1;
        break;
      }
  return clip;
}

}  // namespace stan
