#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "phaed/config.hpp"
#include "phaed/errors.hpp"
#include "phaed/model.hpp"
#include "phaed/training.hpp"
#include "phaed/vocab.hpp"

namespace phaed {

// Checkpoint layout: 8-byte magic, u32 format version, u64 header length,
// JSON header (config, vocabulary, parameter manifest, step, optimizer
// presence), then raw little-endian scalar payloads in traversal order
// (row-major within each matrix), parameters first, then Adam m/v pairs.
static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian raw scalars");

inline constexpr char kCheckpointMagic[8] = {'P', 'H', 'A', 'E', 'D', 'C', 'K', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
  ModelConfig model;
  std::vector<std::string> vocab_tokens;  // non-reserved, id order
  Index step = 0;
  bool has_optimizer = false;
};

namespace detail {

inline nlohmann::json read_checkpoint_header(std::ifstream& in, const std::string& path) {
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t header_len = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in || std::string(magic, 8) != std::string(kCheckpointMagic, 8))
    throw ParseError(path + ": not a checkpoint file");
  if (version != kCheckpointVersion)
    throw ParseError(path + ": unsupported checkpoint version " + std::to_string(version));
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw ParseError(path + ": truncated checkpoint header");
  try {
    return nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": bad checkpoint header: " + e.what());
  }
}

template <typename S>
void write_matrix(std::ofstream& out, const Mat<S>& m) {
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) {
      S v = m(i, j);
      out.write(reinterpret_cast<const char*>(&v), sizeof(S));
    }
}

template <typename S>
void read_matrix(std::ifstream& in, Mat<S>& m, const std::string& path,
                 const std::string& name) {
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) {
      S v;
      in.read(reinterpret_cast<char*>(&v), sizeof(S));
      if (!in) throw ParseError(path + ": truncated payload at " + name);
      m(i, j) = v;
    }
}

}  // namespace detail

inline CheckpointInfo peek_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint: " + path);
  nlohmann::json header = detail::read_checkpoint_header(in, path);
  CheckpointInfo info;
  try {
    info.model = parse_model_config(header.at("model"));
    info.vocab_tokens = header.at("vocab").get<std::vector<std::string>>();
    info.step = header.at("step").get<Index>();
    info.has_optimizer = header.at("optimizer").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": bad checkpoint header: " + e.what());
  }
  return info;
}

template <typename S>
void save_checkpoint(const std::string& path, const PhaedModel<S>& model,
                     const Vocabulary& vocab, Index step,
                     const AdamOptimizer<S>* optimizer = nullptr) {
  nlohmann::ordered_json header;
  header["model"] = to_json(model.config());
  header["vocab"] = vocab.content_tokens();
  header["step"] = step;
  header["optimizer"] = optimizer != nullptr;
  header["optimizer_step"] = optimizer ? optimizer->step_count() : 0;
  auto params = nlohmann::ordered_json::array();
  model.for_each([&](const std::string& name, const Mat<S>& m) {
    params.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  });
  header["params"] = std::move(params);
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParseError("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t header_len = header_text.size();
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));

  model.for_each([&](const std::string&, const Mat<S>& m) { detail::write_matrix(out, m); });
  if (optimizer) {
    if (optimizer->slots().empty())
      throw ContractViolation("optimizer has no state to checkpoint");
    for (const auto& [name, slot] : optimizer->slots()) {
      detail::write_matrix(out, slot.m);
      detail::write_matrix(out, slot.v);
    }
  }
  if (!out) throw ParseError("failed writing checkpoint: " + path);
}

template <typename S>
struct LoadedCheckpoint {
  PhaedModel<S> model;
  Vocabulary vocab;
  Index step = 0;
  bool restored_optimizer = false;
};

/// Rebuilds the model (and optionally Adam state) from a checkpoint. The
/// scalar type must match the stored precision; peek first to dispatch.
template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path,
                                    AdamOptimizer<S>* optimizer = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint: " + path);
  nlohmann::json header = detail::read_checkpoint_header(in, path);

  CheckpointInfo info;
  info.model = parse_model_config(header.at("model"));
  info.vocab_tokens = header.at("vocab").get<std::vector<std::string>>();
  info.step = header.at("step").get<Index>();
  info.has_optimizer = header.at("optimizer").get<bool>();

  const bool is64 = info.model.precision == Precision::kFloat64;
  if (is64 != (sizeof(S) == 8))
    throw ParseError(path + ": checkpoint precision is " + to_string(info.model.precision));

  LoadedCheckpoint<S> loaded{PhaedModel<S>(info.model),
                             Vocabulary::from_content_tokens(info.vocab_tokens), info.step,
                             false};

  const auto& manifest = header.at("params");
  std::size_t idx = 0;
  loaded.model.for_each([&](const std::string& name, Mat<S>& m) {
    if (idx >= manifest.size())
      throw ParseError(path + ": parameter manifest shorter than model");
    const auto& entry = manifest[idx];
    if (entry.at("name").template get<std::string>() != name ||
        entry.at("rows").template get<Index>() != m.rows() ||
        entry.at("cols").template get<Index>() != m.cols())
      throw ParseError(path + ": manifest mismatch at " + name);
    detail::read_matrix(in, m, path, name);
    ++idx;
  });
  if (idx != manifest.size())
    throw ParseError(path + ": parameter manifest longer than model");

  if (info.has_optimizer && optimizer) {
    std::vector<std::pair<std::string, typename AdamOptimizer<S>::Slot>> slots;
    loaded.model.for_each([&](const std::string& name, const Mat<S>& p) {
      typename AdamOptimizer<S>::Slot slot;
      slot.m = Mat<S>::Zero(p.rows(), p.cols());
      slot.v = Mat<S>::Zero(p.rows(), p.cols());
      detail::read_matrix(in, slot.m, path, name + " (adam m)");
      detail::read_matrix(in, slot.v, path, name + " (adam v)");
      slots.emplace_back(name, std::move(slot));
    });
    optimizer->restore(std::move(slots), header.at("optimizer_step").get<Index>());
    loaded.restored_optimizer = true;
  }
  return loaded;
}

}  // namespace phaed
