#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "awmf/image.hpp"

namespace awmf {

// Full-resolution raster with a co-registered label map. Label values are
// class indices in 0..M-1 with 255 reserved for ignore.
struct Slide {
  Raster image;
  Raster labels;
  std::string id;

  void validate(int num_classes) const;
};

// Co-registered patches at scale factors (1,2,4) over one W x W target
// region. Scale f covers an fW x fW slide area resampled to W x W; the
// three fields of view are concentric on the target region.
struct PatchTriplet {
  std::array<Raster, 3> images;
  std::array<Raster, 3> labels;
  int row0 = 0;  // target-region origin in slide coordinates
  int col0 = 0;
  std::string slide_id;
  std::size_t id = 0;  // index within the extraction order
};

struct DatasetSplit {
  std::vector<PatchTriplet> train;
  std::vector<PatchTriplet> val;  // doubles as X' for the weighting network
  std::vector<PatchTriplet> test;
  std::uint64_t seed = 0;
};

// Tiles the slide with the given stride (row-major, fully inside the
// slide). Wide fields of view that overrun the border are mirror-padded.
// Images downsample by area averaging, labels by nearest neighbor.
std::vector<PatchTriplet> extract_triplets(const Slide& slide, int window, int stride);

// Same flip decision applied to all six rasters, preserving registration.
PatchTriplet flip_triplet(const PatchTriplet& t, bool horizontal, bool vertical);
PatchTriplet flip_augment(const PatchTriplet& t, std::uint64_t seed);

// Seeded shuffle then partition; the validation fraction provides the
// weighting-network training pool.
DatasetSplit split_dataset(std::vector<PatchTriplet> triplets, double val_fraction,
                           std::uint64_t seed);

// Synthetic slide generator. Classes form a two-factor design:
//   fine factor   - cell-size-2 micro texture (checkerboard vs line pairs)
//                   whose 4x4 block means cancel exactly, so the cue dies
//                   at the widest field of view's downsampling;
//   coarse factor - macro texture topology (long bands vs a blob lattice)
//                   at a wavelength wider than one target patch, readable
//                   only with a wide field of view.
// Four-class mode labels pixels by (coarse, fine); two-class mode uses the
// coarse factor alone.
struct SynthConfig {
  int num_classes = 4;            // 2 or 4
  int width = 256;
  int height = 256;
  std::vector<double> class_ratios;  // defaults depend on num_classes
  double coarse_wavelength = 112.0;  // macro texture period (> one window)
  double band_amplitude = 45.0;
  double fine_amplitude = 35.0;
  double noise_amplitude = 3.0;
  double ignore_fraction = 0.0;
  // Factor-field scales: where each factor's regions live.
  double coarse_region_scale = 190.0;
  double fine_region_scale = 120.0;

  std::vector<double> ratios_or_default() const;
};

Slide synth_generate(const SynthConfig& cfg, std::uint64_t seed);

// Measured per-class pixel fractions (ignore excluded).
std::vector<double> class_area_ratios(const Raster& labels, int num_classes);

// Line-oriented dataset manifest: one record per slide,
// `slide=<image-path> labels=<label-path> split=<train|test>`.
struct ManifestEntry {
  std::string image_path;
  std::string labels_path;
  std::string split;  // "train" or "test"
};

std::vector<ManifestEntry> load_manifest(const std::string& path);
void save_manifest(const std::vector<ManifestEntry>& entries, const std::string& path);

}  // namespace awmf
