// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "plaindet/matching.hpp"

namespace plaindet {

/// Procedural rectangle-detection dataset. Classes are fill-intensity bands;
/// everything is a deterministic function of (seed, index).
struct SyntheticSpec {
  int image_size = 64;
  int min_objects = 2;
  int max_objects = 8;
  double min_size_frac = 0.10;
  double max_size_frac = 0.35;
  int num_classes = 3;
  double noise_amplitude = 0.05;
  double overlap_cap = 0.3;  // max pairwise IoU
  std::uint64_t seed = 0;

  void validate() const;
  /// Fill intensity of a class band: (c+1)/(num_classes+1).
  double band_intensity(int class_id) const;
};

struct Sample {
  int image_size = 0;
  std::vector<double> image;    // row-major grayscale in [0,1]
  std::vector<GtObject> gts;    // boxes in pixel units
};

Sample generate(const SyntheticSpec& spec, std::uint64_t index);

/// Writes `annotations.jsonl` (one record per sample: index, gts as
/// [class, cx, cy, w, h]) and, optionally, `img_NNNNNN.pgm` dumps.
void export_dataset(const SyntheticSpec& spec, int n, const std::string& dir,
                    bool write_images = false);

std::vector<std::vector<GtObject>> load_annotations(const std::string& path);

/// Binary 8-bit PGM. With normalize_max the values are scaled by the maximum;
/// otherwise they are read as already lying in [0,1].
void write_pgm(const std::string& path, std::span<const double> values,
               int height, int width, bool normalize_max = false);

}  // namespace plaindet
