#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cloakforge/denoiser.hpp"

namespace cloakforge {

static_assert(std::endian::native == std::endian::little, "checkpoint files are little-endian");

inline constexpr char kCheckpointMagic[8] = {'C', 'L', 'O', 'A', 'K', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::int64_t steps = 0;
  std::string parent;
  bool operator==(const CheckpointMeta&) const = default;
};

template <class S>
struct DenoiserCheckpoint {
  std::string name;
  Architecture architecture;
  std::vector<std::string> vocabulary;
  std::vector<Tensor<S>> parameters;
  CheckpointMeta meta;

  bool operator==(const DenoiserCheckpoint&) const = default;
};

using Checkpoint = DenoiserCheckpoint<float>;

template <class S>
DenoiserCheckpoint<S> snapshot(const ConditionalUNet<S>& model, std::string name, CheckpointMeta meta = {}) {
  DenoiserCheckpoint<S> ck{std::move(name), model.architecture(), model.vocabulary(), {}, std::move(meta)};
  for (const auto& p : model.parameters()) ck.parameters.push_back(p.value());
  return ck;
}

template <class S>
ConditionalUNet<S> restore(const DenoiserCheckpoint<S>& ck) {
  ConditionalUNet<S> model(ck.architecture, 0);
  model.load_state(ck.vocabulary, ck.parameters);
  return model;
}

// Restores into an existing model; the architecture must match.
template <class S>
void restore_into(ConditionalUNet<S>& model, const DenoiserCheckpoint<S>& ck) {
  if (!(model.architecture() == ck.architecture)) {
    throw std::invalid_argument("restore: architecture of checkpoint '" + ck.name + "' does not match model");
  }
  model.load_state(ck.vocabulary, ck.parameters);
}

template <class S>
ConditionalUNet<S> clone(const ConditionalUNet<S>& model) {
  return ConditionalUNet<S>(model);
}

class CheckpointFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class S>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<S, float>) return "f32";
  else return "f64";
}

template <class S>
void save_checkpoint(const DenoiserCheckpoint<S>& ck, const std::filesystem::path& path) {
  nlohmann::json header;
  header["name"] = ck.name;
  header["architecture"] = ck.architecture;
  header["vocabulary"] = ck.vocabulary;
  header["meta"] = {{"seed", ck.meta.seed}, {"steps", ck.meta.steps}, {"parent", ck.meta.parent}};
  header["dtype"] = dtype_name<S>();
  auto names = ConditionalUNet<S>::parameter_names();
  nlohmann::json params = nlohmann::json::array();
  for (std::size_t i = 0; i < ck.parameters.size(); ++i) {
    const auto s = ck.parameters[i].shape();
    params.push_back({{"name", names.at(i)}, {"shape", {s.n, s.c, s.h, s.w}}});
  }
  header["parameters"] = params;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : ck.parameters) {
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(S)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

template <class S>
DenoiserCheckpoint<S> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw CheckpointFormatError(path.string() + " is not a checkpoint file");
  }
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (version != kCheckpointVersion) {
    throw CheckpointFormatError("unsupported checkpoint version " + std::to_string(version));
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  auto header = nlohmann::json::parse(text);
  if (header.at("dtype").get<std::string>() != dtype_name<S>()) {
    throw CheckpointFormatError("checkpoint dtype " + header.at("dtype").get<std::string>() + " does not match");
  }
  DenoiserCheckpoint<S> ck;
  ck.name = header.at("name").get<std::string>();
  ck.architecture = header.at("architecture").get<Architecture>();
  ck.vocabulary = header.at("vocabulary").get<std::vector<std::string>>();
  const auto& meta = header.at("meta");
  ck.meta.seed = meta.at("seed").get<std::uint64_t>();
  ck.meta.steps = meta.at("steps").get<std::int64_t>();
  ck.meta.parent = meta.at("parent").get<std::string>();
  for (const auto& p : header.at("parameters")) {
    auto dims = p.at("shape").get<std::vector<int>>();
    Tensor<S> t(Shape{dims.at(0), dims.at(1), dims.at(2), dims.at(3)});
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(S)));
    ck.parameters.push_back(std::move(t));
  }
  if (!in) throw CheckpointFormatError("truncated checkpoint " + path.string());
  return ck;
}

}  // namespace cloakforge
