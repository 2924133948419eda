#include "awmf/pyramid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace awmf {

namespace {

constexpr std::array<int, 3> kScales = {1, 2, 4};

inline int reflect(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - i - 1;
  }
  return i;
}

}  // namespace

void Slide::validate(int num_classes) const {
  if (!image.same_extents(labels)) {
    throw DataError("slide " + id + ": image " + std::to_string(image.width) + "x" +
                    std::to_string(image.height) + " and labels " +
                    std::to_string(labels.width) + "x" + std::to_string(labels.height) +
                    " extents differ");
  }
  if (labels.channels != 1) throw DataError("slide " + id + ": labels must be single-channel");
  for (std::uint8_t v : labels.data) {
    if (v != kIgnoreLabel && v >= num_classes) {
      throw DataError("slide " + id + ": label value " + std::to_string(v) +
                      " outside 0.." + std::to_string(num_classes - 1));
    }
  }
}

std::vector<PatchTriplet> extract_triplets(const Slide& slide, int window, int stride) {
  if (window < 4 || window % 4 != 0) {
    throw ConfigError("window must be a positive multiple of 4, got " +
                      std::to_string(window));
  }
  if (stride < 1) throw ConfigError("stride must be >= 1");
  const int sw = slide.image.width, sh = slide.image.height;
  if (sw < window || sh < window) {
    throw DataError("slide " + slide.id + " (" + std::to_string(sw) + "x" +
                    std::to_string(sh) + ") smaller than window " + std::to_string(window));
  }
  const int chans = slide.image.channels;

  std::vector<PatchTriplet> out;
  std::size_t next_id = 0;
  for (int r0 = 0; r0 + window <= sh; r0 += stride) {
    for (int c0 = 0; c0 + window <= sw; c0 += stride) {
      PatchTriplet t;
      t.row0 = r0;
      t.col0 = c0;
      t.slide_id = slide.id;
      t.id = next_id++;
      for (std::size_t ki = 0; ki < kScales.size(); ++ki) {
        const int f = kScales[ki];
        // fW x fW area concentric on the target region.
        const int a_r0 = r0 - (f - 1) * window / 2;
        const int a_c0 = c0 - (f - 1) * window / 2;
        Raster img(window, window, chans);
        Raster lab(window, window, 1);
        for (int y = 0; y < window; ++y) {
          for (int x = 0; x < window; ++x) {
            for (int c = 0; c < chans; ++c) {
              int acc = 0;
              for (int dy = 0; dy < f; ++dy) {
                const int sy = reflect(a_r0 + y * f + dy, sh);
                for (int dx = 0; dx < f; ++dx) {
                  const int sx = reflect(a_c0 + x * f + dx, sw);
                  acc += slide.image.at(sy, sx, c);
                }
              }
              img.at(y, x, c) =
                  static_cast<std::uint8_t>((acc + f * f / 2) / (f * f));
            }
            // Labels take the block's top-left sample: no label mixing.
            lab.at(y, x) = slide.labels.at(reflect(a_r0 + y * f, sh),
                                           reflect(a_c0 + x * f, sw));
          }
        }
        t.images[ki] = std::move(img);
        t.labels[ki] = std::move(lab);
      }
      out.push_back(std::move(t));
    }
  }
  return out;
}

namespace {

Raster flip_raster(const Raster& r, bool horizontal, bool vertical) {
  Raster out(r.width, r.height, r.channels);
  for (int y = 0; y < r.height; ++y) {
    const int sy = vertical ? r.height - 1 - y : y;
    for (int x = 0; x < r.width; ++x) {
      const int sx = horizontal ? r.width - 1 - x : x;
      for (int c = 0; c < r.channels; ++c) out.at(y, x, c) = r.at(sy, sx, c);
    }
  }
  return out;
}

}  // namespace

PatchTriplet flip_triplet(const PatchTriplet& t, bool horizontal, bool vertical) {
  PatchTriplet out = t;
  if (!horizontal && !vertical) return out;
  for (std::size_t k = 0; k < 3; ++k) {
    out.images[k] = flip_raster(t.images[k], horizontal, vertical);
    out.labels[k] = flip_raster(t.labels[k], horizontal, vertical);
  }
  return out;
}

PatchTriplet flip_augment(const PatchTriplet& t, std::uint64_t seed) {
  Rng rng(seed);
  const bool horizontal = rng.coin();
  const bool vertical = rng.coin();
  return flip_triplet(t, horizontal, vertical);
}

DatasetSplit split_dataset(std::vector<PatchTriplet> triplets, double val_fraction,
                           std::uint64_t seed) {
  if (val_fraction <= 0.0 || val_fraction >= 1.0) {
    throw ConfigError("val_fraction must be in (0,1), got " + std::to_string(val_fraction));
  }
  std::vector<std::size_t> order(triplets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = Rng::derive(seed, 0x53504c54u);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);
  }
  const std::size_t n_val =
      static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(order.size())));
  if (n_val == 0 || n_val >= order.size()) {
    throw DataError("split produces an empty partition (" + std::to_string(order.size()) +
                    " triplets, fraction " + std::to_string(val_fraction) + ")");
  }
  DatasetSplit split;
  split.seed = seed;
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& dst = i < order.size() - n_val ? split.train : split.val;
    dst.push_back(std::move(triplets[order[i]]));
  }
  return split;
}

// --- synthetic slides ---------------------------------------------------------

namespace {

// Smooth random field: a sum of sinusoids with wavelengths around `scale`.
// Thresholding at an empirical quantile carves regions of the desired area.
class RandomField {
 public:
  RandomField(Rng& rng, double scale, int terms = 6) {
    for (int i = 0; i < terms; ++i) {
      const double wavelength = scale * rng.uniform(0.75, 1.35);
      const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      Term t;
      t.ux = std::cos(angle) * 2.0 * std::numbers::pi / wavelength;
      t.uy = std::sin(angle) * 2.0 * std::numbers::pi / wavelength;
      t.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      terms_.push_back(t);
    }
  }

  double operator()(int x, int y) const {
    double v = 0.0;
    for (const Term& t : terms_) v += std::sin(t.ux * x + t.uy * y + t.phase);
    return v;
  }

 private:
  struct Term {
    double ux, uy, phase;
  };
  std::vector<Term> terms_;
};

double quantile_of(std::vector<double> values, double q) {
  if (values.empty()) throw DataError("quantile of empty set");
  std::size_t k = static_cast<std::size_t>(q * static_cast<double>(values.size()));
  k = std::min(k, values.size() - 1);
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k),
                   values.end());
  return values[k];
}

std::vector<double> ratios_or_default_checked(const SynthConfig& cfg) {
  std::vector<double> ratios = cfg.ratios_or_default();
  if (ratios.size() != static_cast<std::size_t>(cfg.num_classes)) {
    throw ConfigError("expected " + std::to_string(cfg.num_classes) + " class ratios, got " +
                      std::to_string(ratios.size()));
  }
  double total = 0.0;
  for (double r : ratios) {
    if (r <= 0.0 || r >= 1.0) throw ConfigError("class ratios must lie in (0,1)");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw ConfigError("class ratios must sum to 1, got " + std::to_string(total));
  }
  return ratios;
}

}  // namespace

std::vector<double> SynthConfig::ratios_or_default() const {
  if (!class_ratios.empty()) return class_ratios;
  if (num_classes == 2) return {0.67, 0.33};
  return {0.25, 0.29, 0.23, 0.23};
}

Slide synth_generate(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.num_classes != 2 && cfg.num_classes != 4) {
    throw ConfigError("synthetic generator supports 2 or 4 classes, got " +
                      std::to_string(cfg.num_classes));
  }
  if (cfg.width < 16 || cfg.height < 16) throw ConfigError("synthetic slide too small");
  const std::vector<double> ratios = ratios_or_default_checked(cfg);
  const int w = cfg.width, h = cfg.height;
  const std::size_t npix = static_cast<std::size_t>(w) * h;

  Rng coarse_rng = Rng::derive(seed, 0x434f4152u);
  Rng fine_rng = Rng::derive(seed, 0x46494e45u);
  Rng tex_rng = Rng::derive(seed, 0x54455855u);
  Rng noise_rng = Rng::derive(seed, 0x4e4f4953u);

  RandomField coarse_field(coarse_rng, cfg.coarse_region_scale);
  RandomField fine_field(fine_rng, cfg.fine_region_scale);

  std::vector<double> cvals(npix), fvals(npix);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      cvals[static_cast<std::size_t>(y) * w + x] = coarse_field(x, y);
      fvals[static_cast<std::size_t>(y) * w + x] = fine_field(x, y);
    }
  }

  // Coarse split first; fine thresholds are conditional per coarse group so
  // the four joint areas land on the configured ratios.
  const double p_coarse_a =
      cfg.num_classes == 2 ? ratios[0] : ratios[0] + ratios[1];
  const double c_thresh = quantile_of(cvals, p_coarse_a);
  std::vector<std::uint8_t> coarse_bit(npix);
  for (std::size_t i = 0; i < npix; ++i) coarse_bit[i] = cvals[i] < c_thresh ? 0 : 1;

  std::vector<std::uint8_t> fine_bit(npix, 0);
  if (cfg.num_classes == 4) {
    for (int group = 0; group < 2; ++group) {
      std::vector<double> members;
      for (std::size_t i = 0; i < npix; ++i) {
        if (coarse_bit[i] == group) members.push_back(fvals[i]);
      }
      if (members.empty()) throw DataError("degenerate coarse split in synthetic slide");
      const double q = group == 0 ? ratios[0] / (ratios[0] + ratios[1])
                                  : ratios[2] / (ratios[2] + ratios[3]);
      const double f_thresh = quantile_of(std::move(members), q);
      for (std::size_t i = 0; i < npix; ++i) {
        if (coarse_bit[i] == group) fine_bit[i] = fvals[i] < f_thresh ? 0 : 1;
      }
    }
  }

  // Macro texture: group A renders long straight bands, group B a blob
  // lattice at the same wavelength. Within one target window both look like
  // a generic light/dark boundary; a full period reveals the topology.
  const double theta = tex_rng.uniform(0.0, std::numbers::pi);
  const double phase1 = tex_rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double phase2 = tex_rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double kx = std::cos(theta) * 2.0 * std::numbers::pi / cfg.coarse_wavelength;
  const double ky = std::sin(theta) * 2.0 * std::numbers::pi / cfg.coarse_wavelength;
  // Perpendicular carrier for the blob lattice.
  const double px = -ky, py = kx;

  Slide slide;
  slide.image = Raster(w, h, 1);
  slide.labels = Raster(w, h, 1);

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const double band = std::sin(kx * x + ky * y + phase1);
      const double blob = band * std::sin(px * x + py * y + phase2);
      const double macro = (coarse_bit[i] == 0 ? (band >= 0.0) : (blob >= 0.0)) ? 1.0 : -1.0;

      // Micro texture with exact 4x4 block cancellation: checkerboard for
      // fine bit 0, horizontal line pairs for fine bit 1 (cell size 2).
      const int cx = x >> 1, cy = y >> 1;
      const double micro_a = ((cx + cy) & 1) ? 1.0 : -1.0;
      const double micro_b = (cy & 1) ? 1.0 : -1.0;
      const double micro = fine_bit[i] == 0 ? micro_a : micro_b;

      const double noise = cfg.noise_amplitude * (2.0 * noise_rng.uniform() - 1.0);
      const double v = 128.0 + cfg.band_amplitude * macro + cfg.fine_amplitude * micro + noise;
      slide.image.at(y, x) =
          static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));

      std::uint8_t label;
      if (cfg.num_classes == 2) {
        label = coarse_bit[i];
      } else {
        label = static_cast<std::uint8_t>(2 * coarse_bit[i] + fine_bit[i]);
      }
      slide.labels.at(y, x) = label;
    }
  }

  if (cfg.ignore_fraction > 0.0) {
    Rng ignore_rng = Rng::derive(seed, 0x49474e4fu);
    RandomField ignore_field(ignore_rng, cfg.fine_region_scale);
    std::vector<double> ivals(npix);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) ivals[static_cast<std::size_t>(y) * w + x] = ignore_field(x, y);
    }
    const double thresh = quantile_of(ivals, cfg.ignore_fraction);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (ivals[static_cast<std::size_t>(y) * w + x] < thresh) {
          slide.labels.at(y, x) = kIgnoreLabel;
        }
      }
    }
  }

  slide.id = "synthetic-" + std::to_string(seed);
  return slide;
}

std::vector<double> class_area_ratios(const Raster& labels, int num_classes) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  std::size_t total = 0;
  for (std::uint8_t v : labels.data) {
    if (v == kIgnoreLabel) continue;
    if (v < num_classes) {
      ++counts[v];
      ++total;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(num_classes), 0.0);
  if (total == 0) return out;
  for (int c = 0; c < num_classes; ++c) {
    out[static_cast<std::size_t>(c)] =
        static_cast<double>(counts[static_cast<std::size_t>(c)]) / static_cast<double>(total);
  }
  return out;
}

// --- manifest -----------------------------------------------------------------

std::vector<ManifestEntry> load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest: " + path);
  std::vector<ManifestEntry> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    ManifestEntry e;
    std::istringstream ss(line);
    std::string token;
    while (ss >> token) {
      const auto eq = token.find('=');
      if (eq == std::string::npos) {
        throw DataError(path + ":" + std::to_string(line_no) + ": expected key=value, got '" +
                        token + "'");
      }
      const std::string key = token.substr(0, eq);
      const std::string value = token.substr(eq + 1);
      if (key == "slide") {
        e.image_path = value;
      } else if (key == "labels") {
        e.labels_path = value;
      } else if (key == "split") {
        e.split = value;
      } else {
        throw DataError(path + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
      }
    }
    if (e.image_path.empty() || e.labels_path.empty() ||
        (e.split != "train" && e.split != "test")) {
      throw DataError(path + ":" + std::to_string(line_no) +
                      ": record needs slide=, labels= and split=train|test");
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

void save_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot open manifest for writing: " + path);
  for (const auto& e : entries) {
    f << "slide=" << e.image_path << " labels=" << e.labels_path << " split=" << e.split
      << "\n";
  }
  if (!f) throw DataError("failed writing manifest: " + path);
}

}  // namespace awmf
