#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefnet/trainer.hpp"

// Checkpoint container:
//   8 bytes   magic "PREFNET\0"
//   u32 LE    format version
//   u64 LE    header length
//   header    JSON: run metadata plus the name and shape of every array
//   payload   the arrays in header order, float64 little-endian
namespace prefnet {

inline constexpr char kCheckpointMagic[8] = {'P', 'R', 'E', 'F', 'N', 'E', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
T swap_bytes(T v) {
  auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
  std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

template <class T>
void write_le(std::ostream& out, T v) {
  if constexpr (std::endian::native == std::endian::big) v = swap_bytes(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T read_le(std::istream& in, const char* what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw Error(std::string("checkpoint: truncated ") + what);
  if constexpr (std::endian::native == std::endian::big) v = swap_bytes(v);
  return v;
}

inline void write_doubles(std::ostream& out, std::span<const double> xs) {
  for (double x : xs) write_le(out, std::bit_cast<std::uint64_t>(x));
}

inline void read_doubles(std::istream& in, std::span<double> xs) {
  for (double& x : xs) x = std::bit_cast<double>(read_le<std::uint64_t>(in, "array payload"));
}

struct NamedArray {
  std::string name;
  ad::Shape shape;
  std::span<double> data;
};

inline std::vector<NamedArray> model_arrays(RegretNetModel& model) {
  std::vector<NamedArray> out;
  auto params = model.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    out.push_back({"regretnet." + std::to_string(k), params[k].shape(), params[k].mutable_data()});
  }
  return out;
}

inline std::vector<NamedArray> mlp_arrays(PreferenceMLP& mlp) {
  std::vector<NamedArray> out;
  auto params = mlp.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    out.push_back({"mlp." + std::to_string(k), params[k].shape(), params[k].mutable_data()});
  }
  out.push_back({"mlp.bn1.running_mean", {mlp.hidden}, mlp.bn1.running_mean});
  out.push_back({"mlp.bn1.running_var", {mlp.hidden}, mlp.bn1.running_var});
  out.push_back({"mlp.bn2.running_mean", {mlp.hidden}, mlp.bn2.running_mean});
  out.push_back({"mlp.bn2.running_var", {mlp.hidden}, mlp.bn2.running_var});
  return out;
}

inline nlohmann::json metrics_json(const Metrics& m) {
  return {{"pca", m.pca},
          {"regret_mean", m.regret_mean},
          {"regret_std", m.regret_std},
          {"regret_max", m.regret_max},
          {"payment_mean", m.payment_mean},
          {"payment_std", m.payment_std},
          {"payment_max", m.payment_max}};
}

inline Metrics metrics_from_json(const nlohmann::json& j) {
  return {j.at("pca"),          j.at("regret_mean"), j.at("regret_std"), j.at("regret_max"),
          j.at("payment_mean"), j.at("payment_std"), j.at("payment_max")};
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const Checkpoint& cp) {
  Checkpoint copy = cp;  // arrays are exposed through mutable spans
  copy.model = cp.model.clone();
  if (cp.mlp) copy.mlp = cp.mlp->clone();
  auto arrays = detail::model_arrays(copy.model);
  if (copy.mlp) {
    auto more = detail::mlp_arrays(*copy.mlp);
    arrays.insert(arrays.end(), more.begin(), more.end());
  }
  nlohmann::json h;
  h["epoch"] = cp.epoch;
  h["seed"] = cp.seed;
  h["spec"] = {{"n_agents", cp.model.spec.n_agents},
               {"m_items", cp.model.spec.m_items},
               {"demand", to_string(cp.model.spec.demand)}};
  h["architecture"] = {{"hidden_layers", cp.model.arch.hidden_layers},
                       {"width", cp.model.arch.width},
                       {"activation", to_string(cp.model.arch.activation)}};
  h["model_seed"] = cp.model.seed;
  if (cp.mlp) {
    h["mlp"] = {{"input_width", cp.mlp->input_width}, {"hidden", cp.mlp->hidden}, {"seed", cp.mlp->seed}};
  } else {
    h["mlp"] = nullptr;
  }
  const auto& lg = cp.lagrange;
  h["lagrange"] = {{"lambda_r", lg.lambda_r}, {"rho_r", lg.rho_r}, {"lambda_s", lg.lambda_s},
                   {"rho_s", lg.rho_s},       {"iteration", lg.iteration}};
  h["metrics"] = detail::metrics_json(cp.metrics);
  for (const auto& a : arrays) h["arrays"].push_back({{"name", a.name}, {"shape", a.shape}});
  std::string header = h.dump();

  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::write_le<std::uint32_t>(out, kCheckpointVersion);
  detail::write_le<std::uint64_t>(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& a : arrays) detail::write_doubles(out, a.data);
  if (!out) throw Error("checkpoint: write failed");
}

inline Checkpoint read_checkpoint(std::istream& in) {
  char magic[sizeof kCheckpointMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw Error("checkpoint: not a checkpoint file (bad magic)");
  }
  auto version = detail::read_le<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw Error("checkpoint: unsupported format version " + std::to_string(version));
  }
  auto length = detail::read_le<std::uint64_t>(in, "header length");
  if (length > (std::uint64_t{1} << 30)) throw Error("checkpoint: implausible header length");
  std::string text(length, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(length))) throw Error("checkpoint: truncated header");

  Checkpoint cp;
  try {
    auto h = nlohmann::json::parse(text);
    const auto& s = h.at("spec");
    AuctionSpec spec{s.at("n_agents"), s.at("m_items"), parse_demand_kind(s.at("demand"))};
    const auto& a = h.at("architecture");
    Architecture arch{a.at("hidden_layers"), a.at("width"), parse_activation(a.at("activation"))};
    cp.epoch = h.at("epoch");
    cp.seed = h.at("seed");
    cp.model = init_regretnet(spec, arch, h.at("model_seed"));
    if (!h.at("mlp").is_null()) {
      const auto& m = h.at("mlp");
      cp.mlp = init_mlp(m.at("input_width"), m.at("seed"), m.at("hidden"));
    }
    const auto& lg = h.at("lagrange");
    cp.lagrange.lambda_r = lg.at("lambda_r").get<std::vector<double>>();
    cp.lagrange.rho_r = lg.at("rho_r");
    cp.lagrange.lambda_s = lg.at("lambda_s").get<std::vector<double>>();
    cp.lagrange.rho_s = lg.at("rho_s");
    cp.lagrange.iteration = lg.at("iteration");
    cp.metrics = detail::metrics_from_json(h.at("metrics"));

    auto arrays = detail::model_arrays(cp.model);
    if (cp.mlp) {
      auto more = detail::mlp_arrays(*cp.mlp);
      arrays.insert(arrays.end(), more.begin(), more.end());
    }
    const auto& listed = h.at("arrays");
    if (listed.size() != arrays.size()) {
      throw Error("checkpoint: expected " + std::to_string(arrays.size()) + " arrays, header lists " +
                  std::to_string(listed.size()));
    }
    for (std::size_t k = 0; k < arrays.size(); ++k) {
      auto shape = listed[k].at("shape").get<ad::Shape>();
      if (listed[k].at("name") != arrays[k].name || shape != arrays[k].shape) {
        throw Error("checkpoint: array " + std::to_string(k) + " is " + listed[k].dump() + ", expected " +
                    arrays[k].name + " " + ad::to_string(arrays[k].shape));
      }
      detail::read_doubles(in, arrays[k].data);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("checkpoint: malformed header: ") + e.what());
  }
  if (in.peek() != std::char_traits<char>::eof()) throw Error("checkpoint: trailing bytes after payload");
  return cp;
}

inline void save_checkpoint(const Checkpoint& cp, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write_checkpoint(out, cp);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

}  // namespace prefnet
