// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#include "plaindet/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace plaindet {

namespace {

void put_f64_le(std::string& out, double v) {
  const auto u = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
  }
}

double get_f64_le(const char* p) {
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) {
    u |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i]))
         << (8 * i);
  }
  return std::bit_cast<double>(u);
}

std::string basename_of(const std::string& path) {
  const auto pos = path.find_last_of('/');
  return pos == std::string::npos ? path : path.substr(pos + 1);
}

}  // namespace

void save_checkpoint(
    const std::string& prefix,
    const std::vector<std::pair<std::string, Tensor>>& tensors,
    const nlohmann::json& meta) {
  std::string blob;
  nlohmann::json entries = nlohmann::json::array();
  std::int64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    for (double v : t.values()) put_f64_le(blob, v);
    offset += t.numel() * 8;
  }
  nlohmann::json manifest = {
      {"format", "plaindet-checkpoint-v1"},
      {"blob", basename_of(prefix) + ".bin"},
      {"tensors", entries},
      {"meta", meta},
  };
  {
    std::ofstream f(prefix + ".json", std::ios::binary);
    if (!f) throw IoError("cannot write " + prefix + ".json");
    f << manifest.dump(2) << '\n';
  }
  {
    std::ofstream f(prefix + ".bin", std::ios::binary);
    if (!f) throw IoError("cannot write " + prefix + ".bin");
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  }
}

Checkpoint load_checkpoint(const std::string& prefix) {
  std::ifstream mf(prefix + ".json", std::ios::binary);
  if (!mf) throw IoError("cannot read " + prefix + ".json");
  nlohmann::json manifest;
  mf >> manifest;
  if (manifest.value("format", "") != "plaindet-checkpoint-v1") {
    throw IoError("unrecognized checkpoint format in " + prefix + ".json");
  }
  std::ifstream bf(prefix + ".bin", std::ios::binary);
  if (!bf) throw IoError("cannot read " + prefix + ".bin");
  std::string blob((std::istreambuf_iterator<char>(bf)),
                   std::istreambuf_iterator<char>());

  Checkpoint ckpt;
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& e : manifest.at("tensors")) {
    const std::string name = e.at("name").get<std::string>();
    const Shape shape = e.at("shape").get<Shape>();
    const std::int64_t offset = e.at("offset").get<std::int64_t>();
    const std::int64_t count = shape_numel(shape);
    if (offset < 0 ||
        offset + count * 8 > static_cast<std::int64_t>(blob.size())) {
      throw IoError("checkpoint blob truncated for tensor " + name);
    }
    std::vector<double> data(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
      data[static_cast<std::size_t>(i)] = get_f64_le(blob.data() + offset + i * 8);
    }
    ckpt.tensors.emplace_back(name, Tensor::from_data(shape, std::move(data)));
  }
  return ckpt;
}

}  // namespace plaindet
