// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#include "plaindet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "plaindet/rng.hpp"

namespace plaindet {

void SyntheticSpec::validate() const {
  if (image_size < 4) throw ConfigError("synth: image size too small");
  if (min_objects < 1 || max_objects < min_objects) {
    throw ConfigError("synth: invalid object count range");
  }
  if (!(min_size_frac > 0.0) || min_size_frac > max_size_frac ||
      max_size_frac > 1.0) {
    throw ConfigError("synth: invalid size fraction range");
  }
  if (min_size_frac * image_size < 1.0) {
    throw ConfigError("synth: minimum object size is below one pixel");
  }
  if (num_classes < 1) throw ConfigError("synth: need at least one class");
  if (noise_amplitude < 0.0 || noise_amplitude > 0.2) {
    throw ConfigError("synth: noise amplitude out of [0, 0.2]");
  }
  if (overlap_cap < 0.0 || overlap_cap > 1.0) {
    throw ConfigError("synth: overlap cap out of [0, 1]");
  }
}

double SyntheticSpec::band_intensity(int class_id) const {
  return static_cast<double>(class_id + 1) / (num_classes + 1);
}

Sample generate(const SyntheticSpec& spec, std::uint64_t index) {
  spec.validate();
  Rng rng = Rng::for_index(spec.seed, index);
  const int S = spec.image_size;

  Sample sample;
  sample.image_size = S;

  const int want = rng.uniform_int(spec.min_objects, spec.max_objects);
  for (int o = 0; o < want; ++o) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      const double w = rng.uniform(spec.min_size_frac, spec.max_size_frac) * S;
      const double h = rng.uniform(spec.min_size_frac, spec.max_size_frac) * S;
      const Box box{rng.uniform(w / 2, S - w / 2), rng.uniform(h / 2, S - h / 2),
                    w, h};
      bool ok = true;
      for (const GtObject& g : sample.gts) {
        if (iou(box, g.box) > spec.overlap_cap) {
          ok = false;
          break;
        }
      }
      if (ok) {
        sample.gts.push_back({rng.uniform_int(0, spec.num_classes - 1), box});
        placed = true;
      }
    }
    if (!placed) break;  // crowded image: settle for fewer objects
  }

  // Background first, then rectangles in placement order (later on top).
  sample.image.resize(static_cast<std::size_t>(S) * S);
  for (double& px : sample.image) px = spec.noise_amplitude * rng.uniform01();
  for (const GtObject& g : sample.gts) {
    const double band = spec.band_intensity(g.class_id);
    const int j0 = std::max(0, static_cast<int>(std::floor(g.box.x1() - 0.5)));
    const int j1 = std::min(S - 1, static_cast<int>(std::ceil(g.box.x2())));
    const int i0 = std::max(0, static_cast<int>(std::floor(g.box.y1() - 0.5)));
    const int i1 = std::min(S - 1, static_cast<int>(std::ceil(g.box.y2())));
    for (int i = i0; i <= i1; ++i) {
      const double py = i + 0.5;
      if (py < g.box.y1() || py >= g.box.y2()) continue;
      for (int j = j0; j <= j1; ++j) {
        const double px = j + 0.5;
        if (px < g.box.x1() || px >= g.box.x2()) continue;
        const double v =
            band + spec.noise_amplitude * (2.0 * rng.uniform01() - 1.0);
        sample.image[static_cast<std::size_t>(i) * S + j] =
            std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return sample;
}

void export_dataset(const SyntheticSpec& spec, int n, const std::string& dir,
                    bool write_images) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  const std::string ann_path = dir + "/annotations.jsonl";
  std::ofstream out(ann_path, std::ios::binary);
  if (!out) throw IoError("cannot write " + ann_path);
  for (int i = 0; i < n; ++i) {
    Sample s = generate(spec, static_cast<std::uint64_t>(i));
    nlohmann::json gts = nlohmann::json::array();
    for (const GtObject& g : s.gts) {
      gts.push_back({g.class_id, g.box.cx, g.box.cy, g.box.w, g.box.h});
    }
    out << nlohmann::json{{"index", i}, {"gts", gts}}.dump() << '\n';
    if (write_images) {
      char name[32];
      std::snprintf(name, sizeof(name), "img_%06d.pgm", i);
      write_pgm(dir + "/" + name, s.image, s.image_size, s.image_size);
    }
  }
  if (!out) throw IoError("write failed for " + ann_path);
}

std::vector<std::vector<GtObject>> load_annotations(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::vector<std::vector<GtObject>> all;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json rec = nlohmann::json::parse(line);
    std::vector<GtObject> gts;
    for (const auto& g : rec.at("gts")) {
      gts.push_back({g.at(0).get<int>(),
                     Box{g.at(1).get<double>(), g.at(2).get<double>(),
                         g.at(3).get<double>(), g.at(4).get<double>()}});
    }
    all.push_back(std::move(gts));
  }
  return all;
}

void write_pgm(const std::string& path, std::span<const double> values,
               int height, int width, bool normalize_max) {
  if (static_cast<std::int64_t>(values.size()) !=
      static_cast<std::int64_t>(height) * width) {
    throw ShapeError("write_pgm: value count does not match extents");
  }
  double scale = 255.0;
  if (normalize_max) {
    double mx = 0.0;
    for (double v : values) mx = std::max(mx, v);
    scale = mx > 0.0 ? 255.0 / mx : 0.0;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << "P5\n" << width << ' ' << height << "\n255\n";
  for (double v : values) {
    const int byte = std::clamp(static_cast<int>(std::lround(v * scale)), 0, 255);
    f.put(static_cast<char>(byte));
  }
  if (!f) throw IoError("write failed for " + path);
}

}  // namespace plaindet
