#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "stan/scenegen.hpp"

using stan::GridConfig;
using stan::Scene;
using stan::SceneDataset;
using stan::SceneSpec;

namespace {

std::vector<char> slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is);
  return std::vector<char>(std::istreambuf_iterator<char>(is), {});
}

std::string tmp_path(const char* name) {
  return std::string("scenegen_test_") + name + ".vfds";
}

}  // namespace

TEST_CASE("same (spec, seed) generates identical scenes") {
  SceneSpec spec;
  Scene a = stan::generate_scene(spec, 7, 3);
  Scene b = stan::generate_scene(spec, 7, 3);
  REQUIRE(a.actors.size() == b.actors.size());
  for (size_t i = 0; i < a.actors.size(); ++i) {
    CHECK(a.actors[i].speed == b.actors[i].speed);
    for (size_t f = 0; f < a.actors[i].trajectory.size(); ++f) {
      CHECK(a.actors[i].trajectory[f].x == b.actors[i].trajectory[f].x);
      CHECK(a.actors[i].trajectory[f].y == b.actors[i].trajectory[f].y);
      CHECK(a.actors[i].trajectory[f].heading == b.actors[i].trajectory[f].heading);
    }
  }
}

TEST_CASE("zero-actor spec yields pure clutter") {
  SceneSpec spec;
  spec.vehicles = spec.pedestrians = spec.bicycles = spec.others = 0;
  spec.clutter_density = 0.05;
  Scene s = stan::generate_scene(spec, 1, 0);
  CHECK(s.actors.empty());
  auto pts = stan::sample_lidar(s, 0, 50, 9);
  CHECK(pts.size() == static_cast<size_t>(std::llround(0.05 * 64 * 64)));
  for (const auto& p : pts) CHECK(p.z < 0.1f);
}

TEST_CASE("requested fixed speed is honored exactly") {
  SceneSpec spec;
  spec.vehicles = 3;
  spec.pedestrians = spec.bicycles = spec.others = 0;
  spec.vehicle_speed_min = spec.vehicle_speed_max = 8.0;
  spec.static_fraction = 0.0;
  Scene s = stan::generate_scene(spec, 5, 0);
  REQUIRE(s.actors.size() == 3);
  for (const auto& a : s.actors) CHECK(a.speed == 8.0);
}

TEST_CASE("consecutive poses are consistent with the speed profile") {
  SceneSpec spec;
  spec.turn_fraction = 0.5;
  Scene s = stan::generate_scene(spec, 21, 2);
  for (const auto& a : s.actors) {
    for (size_t f = 1; f < a.trajectory.size(); ++f) {
      const double dx = a.trajectory[f].x - a.trajectory[f - 1].x;
      const double dy = a.trajectory[f].y - a.trajectory[f - 1].y;
      const double chord = std::hypot(dx, dy);
      double expect = a.speed * stan::kFrameDt;
      if (a.turn_rate != 0.0)
        expect = 2.0 * (a.speed / a.turn_rate) * std::sin(a.turn_rate * stan::kFrameDt / 2.0);
      CHECK(std::abs(chord - std::abs(expect)) < 1e-9);
    }
  }
}

TEST_CASE("initial footprints do not overlap") {
  SceneSpec spec;
  spec.vehicles = 6;
  spec.others = 4;
  Scene s = stan::generate_scene(spec, 33, 0);
  for (size_t i = 0; i < s.actors.size(); ++i)
    for (size_t j = i + 1; j < s.actors.size(); ++j) {
      const auto& a = s.actors[i];
      const auto& b = s.actors[j];
      const double d = std::hypot(a.trajectory[0].x - b.trajectory[0].x,
                                  a.trajectory[0].y - b.trajectory[0].y);
      const double ra = 0.5 * std::hypot(a.length, a.width);
      const double rb = 0.5 * std::hypot(b.length, b.width);
      CHECK(d >= ra + rb);
    }
}

TEST_CASE("lidar points lie on the actor box surface") {
  SceneSpec spec;
  spec.vehicles = 1;
  spec.pedestrians = spec.bicycles = spec.others = 0;
  spec.static_fraction = 0.0;
  spec.clutter_density = 0.0;
  Scene s = stan::generate_scene(spec, 3, 0);
  const auto& a = s.actors[0];
  auto pts = stan::sample_lidar(s, 10, 200, 17);
  CHECK(pts.size() == 200);
  const auto& pose = a.trajectory[10];
  const double c = std::cos(pose.heading), sn = std::sin(pose.heading);
  for (const auto& p : pts) {
    const double lx = c * (p.x - pose.x) + sn * (p.y - pose.y);
    const double ly = -sn * (p.x - pose.x) + c * (p.y - pose.y);
    CHECK(std::abs(lx) <= a.length / 2 + 1e-5);
    CHECK(std::abs(ly) <= a.width / 2 + 1e-5);
    CHECK(p.z >= -1e-5);
    CHECK(p.z <= a.height + 1e-5);
    const bool on_side = std::abs(std::abs(lx) - a.length / 2) < 1e-5 ||
                         std::abs(std::abs(ly) - a.width / 2) < 1e-5;
    const bool on_top = std::abs(p.z - a.height) < 1e-5;
    CHECK((on_side || on_top));
  }
}

TEST_CASE("per-frame point count is actors*points_per_actor plus fixed clutter") {
  SceneSpec spec;  // 8 actors
  spec.clutter_density = 0.03;
  Scene s = stan::generate_scene(spec, 13, 1);
  const size_t expected =
      s.actors.size() * 25 + static_cast<size_t>(std::llround(0.03 * 64 * 64));
  for (int f = 0; f < s.duration_frames; f += 7)
    CHECK(stan::sample_lidar(s, f, 25, 5).size() == expected);
}

TEST_CASE("dataset round-trip is the identity (checksum oracle, 100 scenes)") {
  SceneSpec spec;
  spec.vehicles = 1;
  spec.pedestrians = 1;
  spec.bicycles = 0;
  spec.others = 1;
  spec.clutter_density = 0.02;
  spec.duration_frames = 40;
  GridConfig grid = GridConfig::scaled(4);
  SceneDataset ds = stan::build_dataset(spec, grid, 100, 77, 10);

  const std::string p1 = tmp_path("rt1"), p2 = tmp_path("rt2");
  stan::write_dataset(p1, ds);
  SceneDataset back = stan::read_dataset(p1);
  CHECK(back.records.size() == 100);
  stan::write_dataset(p2, back);
  auto b1 = slurp(p1), b2 = slurp(p2);
  REQUIRE(b1.size() == b2.size());
  CHECK(stan::fnv1a(b1.data(), b1.size()) == stan::fnv1a(b2.data(), b2.size()));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("two-scene dataset written twice is byte-identical") {
  SceneSpec spec;
  GridConfig grid = GridConfig::scaled(4);
  SceneDataset ds1 = stan::build_dataset(spec, grid, 2, 5, 20);
  SceneDataset ds2 = stan::build_dataset(spec, grid, 2, 5, 20);
  const std::string p1 = tmp_path("det1"), p2 = tmp_path("det2");
  stan::write_dataset(p1, ds1);
  stan::write_dataset(p2, ds2);
  auto b1 = slurp(p1), b2 = slurp(p2);
  CHECK(b1 == b2);
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("corrupt header and truncated files raise decode errors") {
  SceneSpec spec;
  spec.duration_frames = 40;
  GridConfig grid = GridConfig::scaled(4);
  SceneDataset ds = stan::build_dataset(spec, grid, 1, 3, 10);
  const std::string path = tmp_path("corrupt");
  stan::write_dataset(path, ds);

  auto bytes = slurp(path);
  {
    auto bad = bytes;
    bad[4] ^= 0x5a;  // version byte
    std::ofstream os(path, std::ios::binary);
    os.write(bad.data(), bad.size());
    os.close();
    CHECK_THROWS_AS(stan::read_dataset(path), stan::IoError);
  }
  {
    auto bad = bytes;
    bad[1] ^= 0xff;  // magic
    std::ofstream os(path, std::ios::binary);
    os.write(bad.data(), bad.size());
    os.close();
    CHECK_THROWS_AS(stan::read_dataset(path), stan::IoError);
  }
  {
    std::ofstream os(path, std::ios::binary);
    os.write(bytes.data(), bytes.size() / 2);
    os.close();
    CHECK_THROWS_AS(stan::read_dataset(path), stan::IoError);
  }
  std::remove(path.c_str());
}

TEST_CASE("clip keyframe windows follow the stride arithmetic") {
  CHECK(stan::clip_keyframes(40, 10) == std::vector<int>{19});
  CHECK(stan::clip_keyframes(60, 10) == std::vector<int>{19, 29, 39});
  CHECK(stan::clip_keyframes(39, 10).empty());
}

TEST_CASE("clip count is independent of actor content") {
  GridConfig grid = GridConfig::scaled(4);
  SceneSpec empty_spec;
  empty_spec.vehicles = empty_spec.pedestrians = empty_spec.bicycles = empty_spec.others = 0;
  empty_spec.duration_frames = 60;
  SceneSpec full_spec;
  full_spec.duration_frames = 60;
  auto clips_a = stan::dataset_to_clips(stan::build_dataset(empty_spec, grid, 2, 9, 10), 10);
  auto clips_b = stan::dataset_to_clips(stan::build_dataset(full_spec, grid, 2, 9, 10), 10);
  CHECK(clips_a.size() == clips_b.size());
  CHECK(clips_a.size() == 6);
}

TEST_CASE("default spec covers all three speed buckets") {
  SceneSpec spec;
  GridConfig grid = GridConfig::scaled(4);
  auto ds = stan::build_dataset(spec, grid, 4, 123, 30);
  auto clips = stan::dataset_to_clips(ds, 20);
  int64_t n_static = 0, n_slow = 0, n_fast = 0;
  for (const auto& clip : clips) {
    const int64_t cells = static_cast<int64_t>(clip.H) * clip.W;
    for (int64_t cell = 0; cell < cells; ++cell) {
      if (clip.class_target[cell] == stan::kBackground) continue;
      const float v = clip.speed_target[cell];
      if (v == 0.0f)
        ++n_static;
      else if (v <= 5.0f)
        ++n_slow;
      else
        ++n_fast;
    }
  }
  CHECK(n_static > 0);
  CHECK(n_slow > 0);
  CHECK(n_fast > 0);
}

TEST_CASE("scene spec validation rejects bad ranges") {
  SceneSpec bad;
  bad.vehicle_speed_max = 25.0;
  CHECK_THROWS_AS(bad.validate(), stan::ConfigError);
  SceneSpec neg;
  neg.vehicles = -1;
  CHECK_THROWS_AS(neg.validate(), stan::ConfigError);
  SceneSpec short_scene;
  short_scene.duration_frames = 39;
  CHECK_THROWS_AS(short_scene.validate(), stan::ConfigError);
}
