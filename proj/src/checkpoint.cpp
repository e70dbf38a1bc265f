#include "stylediff/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

#include "json.hpp"
#include "stylediff/error.hpp"

namespace stylediff {

namespace {

using nlohmann::json;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

json encoder_to_json(const EncoderConfig& c) {
  return json{{"feature_dim", c.feature_dim},
              {"num_heads", c.num_heads},
              {"n_max", c.n_max},
              {"horizon", c.horizon},
              {"dt", c.dt},
              {"kappa_init", c.kappa_init},
              {"gamma_t", c.gamma_t},
              {"fusion_cap", c.fusion_cap},
              {"spatial_hidden", c.spatial_hidden}};
}

EncoderConfig encoder_from_json(const json& j) {
  EncoderConfig c;
  c.feature_dim = j.at("feature_dim").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.n_max = j.at("n_max").get<int>();
  c.horizon = j.at("horizon").get<int>();
  c.dt = j.at("dt").get<double>();
  c.kappa_init = j.at("kappa_init").get<double>();
  c.gamma_t = j.at("gamma_t").get<double>();
  c.fusion_cap = j.at("fusion_cap").get<long>();
  c.spatial_hidden = j.at("spatial_hidden").get<int>();
  return c;
}

json denoiser_to_json(const DenoiserConfig& c) {
  return json{{"width", c.width},
              {"hidden", c.hidden},
              {"blocks", c.blocks},
              {"token_hidden", c.token_hidden},
              {"horizon", c.horizon}};
}

DenoiserConfig denoiser_from_json(const json& j) {
  DenoiserConfig c;
  c.width = j.at("width").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.blocks = j.at("blocks").get<int>();
  c.token_hidden = j.at("token_hidden").get<int>();
  c.horizon = j.at("horizon").get<int>();
  return c;
}

json schedule_to_json(const ScheduleConfig& c) {
  return json{{"steps", c.steps},
              {"beta_start", c.beta_start},
              {"beta_end", c.beta_end}};
}

ScheduleConfig schedule_from_json(const json& j) {
  ScheduleConfig c;
  c.steps = j.at("steps").get<int>();
  c.beta_start = j.at("beta_start").get<double>();
  c.beta_end = j.at("beta_end").get<double>();
  return c;
}

json guidance_to_json(const GuidanceConfig& c) {
  return json{{"lambda_base", c.lambda_base},
              {"lambda_slope", c.lambda_slope},
              {"sigma_d", c.sigma_d},
              {"alpha_max", c.alpha_max},
              {"beta_max", c.beta_max},
              {"epsilon_d", c.epsilon_d},
              {"sigma_c", c.sigma_c},
              {"v_max_rel", c.v_max_rel},
              {"gamma_w", c.gamma_w},
              {"sigma_rho", c.sigma_rho},
              {"gradient_clip", c.gradient_clip},
              {"fixed_weights", c.fixed_weights},
              {"fixed_collision_weight", c.fixed_collision_weight},
              {"fixed_speed_weight", c.fixed_speed_weight}};
}

GuidanceConfig guidance_from_json(const json& j) {
  GuidanceConfig c;
  c.lambda_base = j.at("lambda_base").get<double>();
  c.lambda_slope = j.at("lambda_slope").get<double>();
  c.sigma_d = j.at("sigma_d").get<double>();
  c.alpha_max = j.at("alpha_max").get<double>();
  c.beta_max = j.at("beta_max").get<double>();
  c.epsilon_d = j.at("epsilon_d").get<double>();
  c.sigma_c = j.at("sigma_c").get<double>();
  c.v_max_rel = j.at("v_max_rel").get<double>();
  c.gamma_w = j.at("gamma_w").get<double>();
  c.sigma_rho = j.at("sigma_rho").get<double>();
  c.gradient_clip = j.at("gradient_clip").get<double>();
  c.fixed_weights = j.at("fixed_weights").get<bool>();
  c.fixed_collision_weight = j.at("fixed_collision_weight").get<double>();
  c.fixed_speed_weight = j.at("fixed_speed_weight").get<double>();
  return c;
}

}  // namespace

void save_checkpoint(const Planner& planner, std::int64_t trained_steps,
                     const std::string& path) {
  const PlannerConfig& cfg = planner.config();
  const ParamStore& store = planner.params();

  json manifest = json::array();
  for (const std::string& name : store.names()) {
    const Tensor& t = store.get(name);
    manifest.push_back(json{{"name", name}, {"shape", t.shape()}});
  }

  json header{{"format_version", kCheckpointVersion},
              {"dt", cfg.dt},
              {"trained_steps", trained_steps},
              {"encoder", encoder_to_json(cfg.encoder)},
              {"denoiser", denoiser_to_json(cfg.denoiser)},
              {"schedule", schedule_to_json(cfg.schedule)},
              {"guidance", guidance_to_json(cfg.guidance)},
              {"normalization", json{{"mean_x", planner.norm_stats().mean_x},
                                     {"mean_y", planner.norm_stats().mean_y},
                                     {"std_x", planner.norm_stats().std_x},
                                     {"std_y", planner.norm_stats().std_y}}},
              {"params", manifest}};
  const std::string header_bytes = header.dump();

  std::string blob;
  blob.reserve(16 + header_bytes.size() + store.total_scalars() * 8);
  blob.append(kCheckpointMagic, 4);
  put_u32(blob, kCheckpointVersion);
  put_u64(blob, header_bytes.size());
  blob += header_bytes;
  static_assert(sizeof(double) == 8);
  for (const std::string& name : store.names()) {
    const Tensor& t = store.get(name);
    const char* raw = reinterpret_cast<const char*>(t.data());
    blob.append(raw, t.numel() * 8);  // little-endian on every supported target
  }

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + tmp);
    out.write(blob.data(), std::streamsize(blob.size()));
    if (!out) throw IoError("short write to checkpoint: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw IoError("cannot move checkpoint into place: " + path);
  }
}

Planner load_checkpoint(const std::string& path,
                        std::int64_t* trained_steps_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (blob.size() < 16) throw IoError("checkpoint truncated: " + path);
  if (std::memcmp(blob.data(), kCheckpointMagic, 4) != 0) {
    throw IoError("not a checkpoint file (bad magic): " + path);
  }
  const std::uint32_t version = get_u32(blob.data() + 4);
  if (version != kCheckpointVersion) {
    throw ConfigError("unsupported checkpoint version " +
                      std::to_string(version) + " in " + path);
  }
  const std::uint64_t header_len = get_u64(blob.data() + 8);
  if (16 + header_len > blob.size()) {
    throw IoError("checkpoint header truncated: " + path);
  }

  json header;
  try {
    header = json::parse(blob.begin() + 16, blob.begin() + 16 + long(header_len));
  } catch (const json::exception& e) {
    throw IoError("checkpoint header is not valid JSON: " +
                  std::string(e.what()));
  }

  PlannerConfig cfg;
  std::int64_t trained_steps = 0;
  NormStats norm;
  json manifest;
  try {
    cfg.dt = header.at("dt").get<double>();
    trained_steps = header.at("trained_steps").get<std::int64_t>();
    cfg.encoder = encoder_from_json(header.at("encoder"));
    cfg.denoiser = denoiser_from_json(header.at("denoiser"));
    cfg.schedule = schedule_from_json(header.at("schedule"));
    cfg.guidance = guidance_from_json(header.at("guidance"));
    const json& n = header.at("normalization");
    norm.mean_x = n.at("mean_x").get<double>();
    norm.mean_y = n.at("mean_y").get<double>();
    norm.std_x = n.at("std_x").get<double>();
    norm.std_y = n.at("std_y").get<double>();
    manifest = header.at("params");
  } catch (const json::exception& e) {
    throw IoError("checkpoint header missing fields: " + std::string(e.what()));
  }
  cfg.validate();
  norm.validate();

  Planner planner(cfg);
  planner.init_params(0);
  planner.norm_stats() = norm;

  ParamStore& store = planner.params();
  if (!manifest.is_array() || manifest.size() != store.count()) {
    throw IoError("checkpoint manifest does not match this configuration");
  }
  std::size_t offset = 16 + header_len;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const std::string name = manifest[i].at("name").get<std::string>();
    const std::vector<int> shape =
        manifest[i].at("shape").get<std::vector<int>>();
    if (!store.contains(name)) {
      throw IoError("checkpoint has unknown parameter: " + name);
    }
    Tensor& t = store.get(name);
    if (t.shape() != shape) {
      throw IoError("checkpoint shape mismatch for parameter: " + name);
    }
    const std::size_t bytes = t.numel() * 8;
    if (offset + bytes > blob.size()) {
      throw IoError("checkpoint payload truncated: " + path);
    }
    std::memcpy(t.data(), blob.data() + offset, bytes);
    offset += bytes;
  }
  if (offset != blob.size()) {
    throw IoError("checkpoint has trailing bytes: " + path);
  }
  if (!store.all_finite()) {
    throw IoError("checkpoint contains non-finite parameters: " + path);
  }

  if (trained_steps_out) *trained_steps_out = trained_steps;
  return planner;
}

}  // namespace stylediff
