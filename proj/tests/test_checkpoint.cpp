#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "stylediff/checkpoint.hpp"
#include "stylediff/error.hpp"

using namespace stylediff;

namespace {

PlannerConfig tiny_config() {
  PlannerConfig cfg;
  cfg.encoder.feature_dim = 16;
  cfg.encoder.num_heads = 2;
  cfg.encoder.n_max = 3;
  cfg.encoder.horizon = 6;
  cfg.encoder.dt = 0.1;
  cfg.encoder.spatial_hidden = 8;
  cfg.denoiser.width = 16;
  cfg.denoiser.hidden = 16;
  cfg.denoiser.blocks = 2;
  cfg.denoiser.token_hidden = 8;
  cfg.denoiser.horizon = 6;
  cfg.schedule.steps = 25;
  cfg.schedule.beta_end = 0.2;
  cfg.guidance.alpha_max = 1.4;  // non-default, must round trip
  cfg.dt = 0.1;
  return cfg;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

struct TempDir {
  std::filesystem::path dir;
  TempDir() {
    dir = std::filesystem::temp_directory_path() / "stylediff_ckpt_test";
    std::filesystem::create_directories(dir);
  }
  ~TempDir() { std::filesystem::remove_all(dir); }
  std::string path(const std::string& name) const { return (dir / name).string(); }
};

}  // namespace

TEST_SUITE("checkpoint") {

TEST_CASE("save, load and save again round-trips byte-identically") {
  TempDir tmp;
  Planner planner(tiny_config());
  planner.init_params(777);
  planner.norm_stats().mean_x = 21.5;
  planner.norm_stats().mean_y = -0.25;
  planner.norm_stats().std_x = 14.0;
  planner.norm_stats().std_y = 2.5;

  const std::string p1 = tmp.path("a.sddp");
  const std::string p2 = tmp.path("b.sddp");
  save_checkpoint(planner, 1234, p1);

  std::int64_t steps = 0;
  Planner loaded = load_checkpoint(p1, &steps);
  CHECK(steps == 1234);
  save_checkpoint(loaded, steps, p2);
  CHECK(read_file(p1) == read_file(p2));

  // Configuration, normalization and every parameter survive the trip.
  CHECK(loaded.config().encoder.feature_dim == 16);
  CHECK(loaded.config().schedule.steps == 25);
  CHECK(loaded.config().guidance.alpha_max == 1.4);
  CHECK(loaded.norm_stats().mean_x == 21.5);
  CHECK(loaded.norm_stats().std_y == 2.5);
  REQUIRE(loaded.params().names() == planner.params().names());
  for (const std::string& name : planner.params().names())
    CHECK(max_abs_diff(loaded.params().get(name), planner.params().get(name)) ==
          0.0);

  // The loaded planner behaves identically.
  GeneratorParams gp;
  gp.agent_count = 3;
  const Scenario scene = generate_scenario(ScenarioKind::kStraight, 3, gp);
  SampleRequest req;
  req.seed = 5;
  const SampleResult ra = planner.sample(scene, req);
  const SampleResult rb = loaded.sample(scene, req);
  CHECK(max_abs_diff(ra.trajectories[0], rb.trajectories[0]) == 0.0);
}

TEST_CASE("no stray temporary file is left behind") {
  TempDir tmp;
  Planner planner(tiny_config());
  planner.init_params(1);
  save_checkpoint(planner, 0, tmp.path("model.sddp"));
  int entries = 0;
  for (const auto& e : std::filesystem::directory_iterator(tmp.dir)) {
    (void)e;
    ++entries;
  }
  CHECK(entries == 1);
}

TEST_CASE("missing file raises IoError") {
  CHECK_THROWS_AS((void)load_checkpoint("/nonexistent/dir/model.sddp"),
                  IoError);
}

TEST_CASE("corrupted magic raises IoError") {
  TempDir tmp;
  Planner planner(tiny_config());
  planner.init_params(2);
  const std::string path = tmp.path("m.sddp");
  save_checkpoint(planner, 7, path);

  std::string bytes = read_file(path);
  bytes[0] = 'X';
  write_file(path, bytes);
  CHECK_THROWS_AS((void)load_checkpoint(path), IoError);
}

TEST_CASE("unsupported version raises ConfigError") {
  TempDir tmp;
  Planner planner(tiny_config());
  planner.init_params(3);
  const std::string path = tmp.path("v.sddp");
  save_checkpoint(planner, 7, path);

  std::string bytes = read_file(path);
  bytes[4] = 99;  // little-endian u32 version field
  write_file(path, bytes);
  CHECK_THROWS_AS((void)load_checkpoint(path), ConfigError);
}

TEST_CASE("truncated payload raises IoError") {
  TempDir tmp;
  Planner planner(tiny_config());
  planner.init_params(4);
  const std::string path = tmp.path("t.sddp");
  save_checkpoint(planner, 7, path);

  std::string bytes = read_file(path);
  write_file(path, bytes.substr(0, bytes.size() - 16));
  CHECK_THROWS_AS((void)load_checkpoint(path), IoError);

  // Trailing garbage is just as fatal: the manifest must account for every
  // payload byte.
  write_file(path, read_file(path) + std::string(8, '\0'));
  CHECK_THROWS_AS((void)load_checkpoint(path), IoError);
}

TEST_CASE("mangled header JSON raises IoError") {
  TempDir tmp;
  Planner planner(tiny_config());
  planner.init_params(5);
  const std::string path = tmp.path("h.sddp");
  save_checkpoint(planner, 7, path);

  std::string bytes = read_file(path);
  bytes[16] = '?';  // first byte of the JSON header
  write_file(path, bytes);
  CHECK_THROWS_AS((void)load_checkpoint(path), IoError);
}

TEST_CASE("non-finite payload raises IoError") {
  TempDir tmp;
  Planner planner(tiny_config());
  planner.init_params(6);
  const std::string path = tmp.path("n.sddp");
  save_checkpoint(planner, 7, path);

  std::string bytes = read_file(path);
  // Overwrite the first payload float64 with a quiet NaN (little-endian).
  const unsigned char nan_bytes[8] = {0, 0, 0, 0, 0, 0, 0xf8, 0x7f};
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i)
    header_len |= static_cast<std::uint64_t>(
                      static_cast<unsigned char>(bytes[std::size_t(8 + i)]))
                  << (8 * i);
  const std::size_t payload_at = 16 + header_len;
  REQUIRE(bytes.size() > payload_at + 8);
  for (int i = 0; i < 8; ++i)
    bytes[payload_at + std::size_t(i)] = static_cast<char>(nan_bytes[i]);
  write_file(path, bytes);
  CHECK_THROWS_AS((void)load_checkpoint(path), IoError);
}

TEST_CASE("trained step count round trips through repeated saves") {
  TempDir tmp;
  Planner planner(tiny_config());
  planner.init_params(8);
  const std::string path = tmp.path("s.sddp");
  for (std::int64_t steps : {0LL, 1LL, 50LL, 123456789LL}) {
    save_checkpoint(planner, steps, path);
    std::int64_t got = -1;
    (void)load_checkpoint(path, &got);
    CHECK(got == steps);
  }
}

}  // TEST_SUITE
