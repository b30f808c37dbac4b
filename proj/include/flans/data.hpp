// SPDX-License-Identifier: Apache-2.0
//
// Synthetic organ phantoms and the on-disk dataset layout
//   <dir>/manifest.json
//   <dir>/images/<id>.fts          f32 [H, W], values in [0, 1]
//   <dir>/masks/<class>/<id>.fts   u8  [H, W], one file per class
//
// Canonical frame (origin top-left, x right, y down; anatomical right on the
// image left):
//   0 liver        rounded rectangle, upper left, the largest organ
//   1 spleen       crescent, upper right, the smallest organ
//   2 right kidney ellipse, lower left
//   3 left kidney  ellipse mirrored to the right, five pixels higher
// Unlabelled body outline, spine and an off-midline aorta are always drawn,
// so even a single organ leaves the orientation recoverable.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "flans/group.hpp"
#include "flans/tensor.hpp"

namespace flans {

enum class ShapeFamily { Ellipse, RoundedRect, Crescent };

struct PhantomClass {
  std::string name;
  ShapeFamily family;
  double cx, cy;                 // canonical centre at 64 x 64
  double rx_min, rx_max;         // half-width (radius for crescents)
  double ry_min, ry_max;         // half-height
  double intensity_min, intensity_max;
};

struct PhantomSpec {
  std::size_t image_size = 64;
  std::size_t class_count = 4;
  double noise_sigma = 0.03;
  double presence_probability = 0.9;
  double jitter = 1.5;  // uniform centre offset, pixels at 64 x 64
  std::uint64_t seed = 0;

  // The first class_count entries of the default table.
  std::vector<PhantomClass> classes() const;
  void validate() const;
};

std::vector<PhantomClass> default_phantom_classes();

struct Sample {
  std::string id;
  Tensor<float> image;           // [H, W]
  std::vector<Mask> masks;       // per class, [H, W]
  std::vector<int> present;      // sorted class ids with a non-empty mask
  std::optional<GroupElement> transform;
};

// One phantom drawn from rng.
Sample generate_phantom(const PhantomSpec& spec, std::mt19937_64& rng, std::string id);

struct SampleEntry {
  std::string id;
  std::string image;              // relative to the dataset dir
  std::vector<std::string> masks; // per class, relative
  std::vector<int> present;
  std::optional<GroupElement> transform;
};

struct Manifest {
  std::string name;
  std::vector<std::string> class_names;
  std::size_t image_size = 64;
  bool canonical = true;
  int group_order = 4;
  std::vector<SampleEntry> samples;

  std::string to_json() const;
  static Manifest from_json(const std::string& text);
};

struct Dataset {
  Manifest manifest;
  std::vector<Sample> samples;
};

// In-memory generation: n samples named "<name>_<index>", deterministic in
// spec.seed.
Dataset generate_samples(const PhantomSpec& spec, std::size_t n, const std::string& name);

// Writes images, masks and manifest.json. Throws IoError.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
// Loads and validates every referenced file. Throws IoError on missing or
// malformed entries.
Dataset load_dataset(const std::filesystem::path& dir);

Manifest generate_dataset(const PhantomSpec& spec, std::size_t n, const std::filesystem::path& out_dir,
                          const std::string& name = "phantom");

// Applies one uniformly drawn element of `group` per sample to image and
// masks, records it and clears the canonical flag.
Dataset transform_dataset(const Dataset& source, const std::vector<GroupElement>& group, std::uint64_t seed);
Manifest apply_dataset_transforms(const std::filesystem::path& source_dir, const std::vector<GroupElement>& group,
                                  std::uint64_t seed, const std::filesystem::path& out_dir);

}  // namespace flans
