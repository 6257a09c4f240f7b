#pragma once

// Synthetic part/attribute images. G rectangular regions sit on a fixed
// grid; each region is painted in one of C palette hues. With probability
// rho all regions of a sample share the same hue index, otherwise every
// region draws independently. Attributes are the one-hot hue codes, so
// A = G * C and attribute a belongs to part a / C.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "partleak/leakmetrics.hpp"

namespace partleak::synth {

struct Region {
  std::size_t top, left, height, width;  // pixels
  bool contains(std::size_t r, std::size_t c) const {
    return r >= top && r < top + height && c >= left && c < left + width;
  }
};

struct DatasetSpec {
  std::size_t parts = 4;    // G
  std::size_t colors = 6;   // C
  double rho = 0.5;
  std::size_t n_train = 2000, n_val = 0, n_test = 500;
  std::size_t image_size = 32;
  std::size_t patch_size = 4;  // regions are aligned to this grid
  std::size_t margin = 4;      // inset of each region inside its grid cell
  double noise_std = 0.05;
  double background = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t attributes() const { return parts * colors; }
  /// Region of every part; throws when they cannot fit the image.
  std::vector<Region> regions() const;
};

struct Split {
  std::size_t n = 0;
  std::vector<double> images;          // [n, 3, S, S]
  std::vector<std::uint8_t> attributes;  // [n, G*C]
  std::vector<std::uint8_t> masks;      // [n, G, S, S]
  std::vector<std::int32_t> keypoints;  // [n, G, 2] (row, col) in pixels
  std::vector<std::int32_t> colors;     // [n, G] hue index per part

  std::vector<double> labels() const { return {attributes.begin(), attributes.end()}; }
};

struct Dataset {
  DatasetSpec spec;
  std::vector<std::array<double, 3>> palette;
  Split train, val, test;

  leak::AttributeSpec attribute_spec() const;
  const Split& split(const std::string& name) const;
};

/// C hues evenly spaced around the colour wheel, saturation 0.8, value 0.9.
std::vector<std::array<double, 3>> make_palette(std::size_t colors);

Dataset generate(const DatasetSpec& spec);

/// Patch-level masks [n, G, HW] (a patch belongs to g when any pixel does).
std::vector<double> patch_masks(const Split& s, const DatasetSpec& spec);
/// Keypoints mapped onto the patch grid.
leak::KeypointSet patch_keypoints(const Split& s, const DatasetSpec& spec);

/// Directory with manifest.json plus raw little-endian arrays, each with a
/// CRC-32 recorded in the manifest.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

/// Parse / emit DatasetSpec fields as JSON text.
DatasetSpec spec_from_json(const std::string& text);
std::string spec_to_json(const DatasetSpec& spec);

}  // namespace partleak::synth
