#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "awmf/pyramid.hpp"

using namespace awmf;

namespace {

std::string temp_path(const std::string& name) {
  static int counter = 0;
  auto dir = std::filesystem::temp_directory_path() /
             ("awmf_pyramid_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return (dir / (std::to_string(counter++) + "_" + name)).string();
}

Slide constant_slide(int w, int h, std::uint8_t gray, std::uint8_t label) {
  Slide s;
  s.image = Raster(w, h, 1, gray);
  s.labels = Raster(w, h, 1, label);
  s.id = "const";
  return s;
}

Slide random_slide(int w, int h, int num_classes, std::uint64_t seed,
                   bool with_ignore = false) {
  Slide s;
  s.image = Raster(w, h, 1);
  s.labels = Raster(w, h, 1);
  Rng rng(seed);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      s.image.at(y, x) = static_cast<std::uint8_t>(rng.below(256));
      const std::uint64_t roll = rng.below(with_ignore ? num_classes + 1 : num_classes);
      s.labels.at(y, x) = roll == static_cast<std::uint64_t>(num_classes)
                              ? kIgnoreLabel
                              : static_cast<std::uint8_t>(roll);
    }
  }
  s.id = "random";
  return s;
}

// Downsample a raster region by area averaging (independent reference).
double block_mean(const Raster& r, int y0, int x0, int f) {
  double acc = 0.0;
  for (int dy = 0; dy < f; ++dy) {
    for (int dx = 0; dx < f; ++dx) acc += r.at(y0 + dy, x0 + dx);
  }
  return acc / (f * f);
}

}  // namespace

TEST_CASE("extract_triplets tiling and registration") {
  SUBCASE("128x128 slide, W=32, stride 32 -> 16 triplets in row-major order") {
    Slide s = constant_slide(128, 128, 100, 1);
    auto triplets = extract_triplets(s, 32, 32);
    REQUIRE(triplets.size() == 16);
    for (std::size_t i = 0; i < triplets.size(); ++i) {
      CHECK(triplets[i].id == i);
      CHECK(triplets[i].row0 == static_cast<int>(i / 4) * 32);
      CHECK(triplets[i].col0 == static_cast<int>(i % 4) * 32);
    }
  }

  SUBCASE("constant slide gives constant patches at every scale") {
    Slide s = constant_slide(64, 64, 77, 2);
    auto triplets = extract_triplets(s, 32, 32);
    for (const auto& t : triplets) {
      for (int k = 0; k < 3; ++k) {
        for (auto v : t.images[static_cast<std::size_t>(k)].data) CHECK(v == 77);
        for (auto v : t.labels[static_cast<std::size_t>(k)].data) CHECK(v == 2);
      }
    }
  }

  SUBCASE("delta image maps to the concentric position in each frame") {
    const int w = 32;
    for (auto [dy, dx] : {std::pair{8, 12}, std::pair{16, 16}, std::pair{4, 24}}) {
      Slide s = constant_slide(4 * w, 4 * w, 0, 0);
      // One bright block inside the target region of the second tile.
      const int r0 = w, c0 = w;  // tile at (1,1) of the 4x4 grid
      s.image.at(r0 + dy, c0 + dx) = 255;
      auto triplets = extract_triplets(s, w, w);
      const auto& t = triplets[5];  // row-major tile (1,1)
      REQUIRE(t.row0 == r0);
      REQUIRE(t.col0 == c0);
      // Scale 1: exact position.
      CHECK(t.images[0].at(dy, dx) == 255);
      // Scale 2: area origin is (r0 - W/2); the delta falls in the 2x2 block
      // at output (W/4 + dy/2, W/4 + dx/2) when dy,dx are even.
      const int y2 = w / 4 + dy / 2, x2 = w / 4 + dx / 2;
      CHECK(t.images[1].at(y2, x2) == (255 + 2) / 4);
      // Scale 4: origin (r0 - 3W/2); block (3W/8 + dy/4, 3W/8 + dx/4).
      const int y4 = 3 * w / 8 + dy / 4, x4 = 3 * w / 8 + dx / 4;
      CHECK(t.images[2].at(y4, x4) == (255 + 8) / 16);
      // No other pixel carries mass at scale 1.
      int nonzero = 0;
      for (auto v : t.images[0].data) nonzero += v != 0;
      CHECK(nonzero == 1);
    }
  }

  SUBCASE("central half of X2 equals X1 downsampled for block-constant slides") {
    // 8x8 constant blocks make area averaging exact at both scales.
    Slide s = constant_slide(64, 64, 0, 0);
    Rng rng(51);
    for (int by = 0; by < 8; ++by) {
      for (int bx = 0; bx < 8; ++bx) {
        const std::uint8_t v = static_cast<std::uint8_t>(rng.below(256));
        for (int y = 0; y < 8; ++y) {
          for (int x = 0; x < 8; ++x) s.image.at(by * 8 + y, bx * 8 + x) = v;
        }
      }
    }
    const int w = 32;
    auto triplets = extract_triplets(s, w, w);
    for (const auto& t : triplets) {
      // X2's central W/2 region, upsampled x2 by replication, must equal
      // X1 downsampled by 2 then restored the same way.
      for (int y = 0; y < w; y += 2) {
        for (int x = 0; x < w; x += 2) {
          const double from_x1 = block_mean(t.images[0], y, x, 2);
          const int cy = w / 4 + y / 2, cx = w / 4 + x / 2;
          CHECK(t.images[1].at(cy, cx) == doctest::Approx(from_x1).epsilon(1e-12));
        }
      }
    }
  }

  SUBCASE("wide fields of view mirror at the slide border") {
    Slide s = random_slide(64, 64, 2, 52);
    auto triplets = extract_triplets(s, 32, 32);
    const auto& corner = triplets[0];  // target at (0,0)
    // X3 output (0,0) covers slide rows/cols [-48,-45), mirrored to
    // [44,48) reversed; area averaging is order-invariant.
    double want = 0.0;
    for (int y = 44; y < 48; ++y) {
      for (int x = 44; x < 48; ++x) want += s.image.at(y, x);
    }
    want /= 16.0;
    CHECK(std::abs(corner.images[2].at(0, 0) - want) <= 0.5);  // u8 rounding
  }

  SUBCASE("label downsampling never invents classes") {
    for (std::uint64_t seed = 60; seed < 64; ++seed) {
      Slide s = random_slide(64, 64, 3, seed, true);
      std::set<std::uint8_t> source(s.labels.data.begin(), s.labels.data.end());
      auto triplets = extract_triplets(s, 32, 32);
      for (const auto& t : triplets) {
        for (int k = 0; k < 3; ++k) {
          for (auto v : t.labels[static_cast<std::size_t>(k)].data) {
            CHECK(source.count(v) == 1);
          }
        }
      }
    }
  }

  SUBCASE("extraction is deterministic") {
    Slide s = random_slide(64, 64, 2, 53);
    auto a = extract_triplets(s, 32, 32);
    auto b = extract_triplets(s, 32, 32);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].images[1].data == b[i].images[1].data);
      CHECK(a[i].labels[2].data == b[i].labels[2].data);
    }
  }

  SUBCASE("errors: slide smaller than the window; bad window") {
    Slide s = constant_slide(16, 16, 0, 0);
    CHECK_THROWS_AS(extract_triplets(s, 32, 32), DataError);
    Slide ok = constant_slide(64, 64, 0, 0);
    CHECK_THROWS_AS(extract_triplets(ok, 30, 30), ConfigError);
  }
}

TEST_CASE("flip augmentation") {
  Slide s = random_slide(64, 64, 3, 54);
  auto triplets = extract_triplets(s, 32, 32);
  const auto& t = triplets[1];

  SUBCASE("double flip is the identity") {
    auto once = flip_triplet(t, true, false);
    auto twice = flip_triplet(once, true, false);
    for (int k = 0; k < 3; ++k) {
      CHECK(twice.images[static_cast<std::size_t>(k)].data ==
            t.images[static_cast<std::size_t>(k)].data);
      CHECK(twice.labels[static_cast<std::size_t>(k)].data ==
            t.labels[static_cast<std::size_t>(k)].data);
    }
  }

  SUBCASE("flips preserve per-class pixel counts") {
    auto flipped = flip_triplet(t, true, true);
    for (int k = 0; k < 3; ++k) {
      std::array<int, 256> before{}, after{};
      for (auto v : t.labels[static_cast<std::size_t>(k)].data) ++before[v];
      for (auto v : flipped.labels[static_cast<std::size_t>(k)].data) ++after[v];
      CHECK(before == after);
    }
  }

  SUBCASE("flipping preserves concentric registration") {
    // Flipping every raster about its own center maps the target region
    // consistently: the flipped X1 must equal the target crop of the
    // flipped slide extraction.
    Slide flipped_slide = s;
    for (int y = 0; y < 64; ++y) {
      for (int x = 0; x < 64; ++x) {
        flipped_slide.image.at(y, x) = s.image.at(y, 63 - x);
        flipped_slide.labels.at(y, x) = s.labels.at(y, 63 - x);
      }
    }
    auto from_slide = extract_triplets(flipped_slide, 32, 32);
    // Tile (0,1) of the original corresponds to tile (0,0) of the flipped
    // slide when mirrored horizontally.
    auto flipped_patch = flip_triplet(triplets[1], true, false);
    CHECK(flipped_patch.images[0].data == from_slide[0].images[0].data);
    CHECK(flipped_patch.labels[0].data == from_slide[0].labels[0].data);
    CHECK(flipped_patch.images[1].data == from_slide[0].images[1].data);
  }

  SUBCASE("seeded flips are deterministic") {
    auto a = flip_augment(t, 77);
    auto b = flip_augment(t, 77);
    CHECK(a.images[0].data == b.images[0].data);
  }
}

TEST_CASE("split_dataset") {
  std::vector<PatchTriplet> triplets(100);
  for (std::size_t i = 0; i < triplets.size(); ++i) triplets[i].id = i;

  SUBCASE("100 triplets at 0.2 split 80/20") {
    auto split = split_dataset(triplets, 0.2, 9);
    CHECK(split.train.size() == 80);
    CHECK(split.val.size() == 20);
  }

  SUBCASE("same seed reproduces identical membership") {
    auto a = split_dataset(triplets, 0.2, 9);
    auto b = split_dataset(triplets, 0.2, 9);
    for (std::size_t i = 0; i < a.train.size(); ++i) CHECK(a.train[i].id == b.train[i].id);
    for (std::size_t i = 0; i < a.val.size(); ++i) CHECK(a.val[i].id == b.val[i].id);
  }

  SUBCASE("train and validation ids are disjoint and cover everything") {
    auto split = split_dataset(triplets, 0.2, 10);
    std::set<std::size_t> train_ids, val_ids;
    for (const auto& t : split.train) train_ids.insert(t.id);
    for (const auto& t : split.val) val_ids.insert(t.id);
    CHECK(train_ids.size() == 80);
    CHECK(val_ids.size() == 20);
    for (auto id : val_ids) CHECK(train_ids.count(id) == 0);
  }

  SUBCASE("degenerate fractions fail") {
    CHECK_THROWS_AS(split_dataset(triplets, 0.0, 1), ConfigError);
    std::vector<PatchTriplet> two(2);
    CHECK_THROWS_AS(split_dataset(two, 0.01, 1), DataError);
  }
}

TEST_CASE("PGM/PPM round trips and malformed inputs") {
  SUBCASE("grayscale and color round trips are bytewise stable") {
    Rng rng(55);
    Raster gray(7, 5, 1);
    for (auto& v : gray.data) v = static_cast<std::uint8_t>(rng.below(256));
    const std::string p = temp_path("gray.pgm");
    save_image(gray, p);
    Raster back = load_image(p);
    CHECK(back.width == 7);
    CHECK(back.height == 5);
    CHECK(back.data == gray.data);
    // Second save is byte-identical.
    const std::string p2 = temp_path("gray2.pgm");
    save_image(back, p2);
    std::ifstream f1(p, std::ios::binary), f2(p2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);

    Raster rgb(3, 2, 3);
    for (auto& v : rgb.data) v = static_cast<std::uint8_t>(rng.below(256));
    const std::string pc = temp_path("color.ppm");
    save_image(rgb, pc);
    CHECK(load_image(pc).data == rgb.data);
  }

  SUBCASE("P5 with labels {0,1,2,255} parses exactly") {
    const std::string p = temp_path("labels.pgm");
    std::ofstream f(p, std::ios::binary);
    f << "P5\n# comment line\n2 2\n255\n";
    const unsigned char payload[4] = {0, 1, 2, 255};
    f.write(reinterpret_cast<const char*>(payload), 4);
    f.close();
    Raster labels = load_labels(p);
    CHECK(labels.at(0, 0) == 0);
    CHECK(labels.at(0, 1) == 1);
    CHECK(labels.at(1, 0) == 2);
    CHECK(labels.at(1, 1) == 255);
  }

  SUBCASE("truncated payloads and malformed headers fail distinctly") {
    const std::string p = temp_path("trunc.pgm");
    {
      std::ofstream f(p, std::ios::binary);
      f << "P5\n4 4\n255\n";
      f.write("ab", 2);
    }
    CHECK_THROWS_WITH_AS(load_image(p), doctest::Contains("unexpected end of pixel data"),
                         DataError);

    const std::string bad_magic = temp_path("magic.pgm");
    {
      std::ofstream f(bad_magic, std::ios::binary);
      f << "P7\n1 1\n255\nx";
    }
    CHECK_THROWS_AS(load_image(bad_magic), DataError);

    const std::string bad_maxval = temp_path("maxval.pgm");
    {
      std::ofstream f(bad_maxval, std::ios::binary);
      f << "P5\n1 1\n65535\nxx";
    }
    CHECK_THROWS_AS(load_image(bad_maxval), DataError);

    const std::string no_header = temp_path("header.pgm");
    {
      std::ofstream f(no_header, std::ios::binary);
      f << "P5\nabc\n255\nx";
    }
    CHECK_THROWS_WITH_AS(load_image(no_header), doctest::Contains("malformed header"),
                         DataError);

    const std::string huge = temp_path("huge.pgm");
    {
      std::ofstream f(huge, std::ios::binary);
      f << "P5\n99999999 2\n255\nxx";
    }
    CHECK_THROWS_AS(load_image(huge), DataError);
  }
}

TEST_CASE("synthetic slide generator") {
  SUBCASE("defaults carry the documented class ratios") {
    SynthConfig two;
    two.num_classes = 2;
    CHECK(two.ratios_or_default() == std::vector<double>{0.67, 0.33});
    SynthConfig four;
    four.num_classes = 4;
    CHECK(four.ratios_or_default() == std::vector<double>{0.25, 0.29, 0.23, 0.23});
  }

  SUBCASE("same seed gives a bytewise-identical slide") {
    SynthConfig cfg;
    cfg.num_classes = 4;
    cfg.width = 128;
    cfg.height = 128;
    Slide a = synth_generate(cfg, 1234);
    Slide b = synth_generate(cfg, 1234);
    CHECK(a.image.data == b.image.data);
    CHECK(a.labels.data == b.labels.data);
    Slide c = synth_generate(cfg, 1235);
    CHECK(a.image.data != c.image.data);
  }

  SUBCASE("measured class areas stay within 0.05 of the configured ratios") {
    for (int m : {2, 4}) {
      SynthConfig cfg;
      cfg.num_classes = m;
      cfg.width = 256;
      cfg.height = 256;
      Slide s = synth_generate(cfg, 99);
      const auto measured = class_area_ratios(s.labels, m);
      const auto target = cfg.ratios_or_default();
      for (int c = 0; c < m; ++c) {
        CHECK(std::abs(measured[static_cast<std::size_t>(c)] -
                       target[static_cast<std::size_t>(c)]) < 0.05);
      }
    }
  }

  SUBCASE("the fine cue survives full resolution and dies at 4x downsampling") {
    SynthConfig cfg;
    cfg.num_classes = 4;
    cfg.width = 256;
    cfg.height = 256;
    cfg.noise_amplitude = 0.0;

    // Horizontal-difference energy separates the two micro textures at
    // scale 1 and collapses after 4x4 area averaging.
    auto hdiff_full = [](const Raster& img, int y0, int x0, int n) {
      double acc = 0.0;
      int cnt = 0;
      for (int y = y0; y < y0 + n; ++y) {
        for (int x = x0; x < x0 + n - 1; ++x) {
          acc += std::abs(static_cast<double>(img.at(y, x + 1)) - img.at(y, x));
          ++cnt;
        }
      }
      return acc / cnt;
    };
    auto hdiff_down4 = [](const Raster& img, int y0, int x0, int n) {
      const int dn = n / 4;
      std::vector<double> down(static_cast<std::size_t>(dn) * dn);
      for (int y = 0; y < dn; ++y) {
        for (int x = 0; x < dn; ++x) {
          down[static_cast<std::size_t>(y) * dn + x] =
              block_mean(img, y0 + 4 * y, x0 + 4 * x, 4);
        }
      }
      double acc = 0.0;
      int cnt = 0;
      for (int y = 0; y < dn; ++y) {
        for (int x = 0; x + 1 < dn; ++x) {
          acc += std::abs(down[static_cast<std::size_t>(y) * dn + x + 1] -
                          down[static_cast<std::size_t>(y) * dn + x]);
          ++cnt;
        }
      }
      return acc / cnt;
    };

    std::vector<double> full_a, full_b, down_a, down_b;
    const int win = 16;
    for (std::uint64_t seed = 200; seed < 206 && (full_a.size() < 100 || full_b.size() < 100);
         ++seed) {
      Slide s = synth_generate(cfg, seed);
      for (int y0 = 0; y0 + win <= cfg.height; y0 += win) {
        for (int x0 = 0; x0 + win <= cfg.width; x0 += win) {
          // Pure windows only: all labels share a fine bit.
          bool pure = true;
          const int fine = s.labels.at(y0, x0) & 1;
          for (int y = y0; y < y0 + win && pure; ++y) {
            for (int x = x0; x < x0 + win; ++x) {
              if ((s.labels.at(y, x) & 1) != fine) {
                pure = false;
                break;
              }
            }
          }
          if (!pure) continue;
          auto& full = fine == 0 ? full_a : full_b;
          auto& down = fine == 0 ? down_a : down_b;
          full.push_back(hdiff_full(s.image, y0, x0, win));
          down.push_back(hdiff_down4(s.image, y0, x0, win));
        }
      }
    }
    REQUIRE(full_a.size() >= 100);
    REQUIRE(full_b.size() >= 100);

    auto mean_std = [](const std::vector<double>& v) {
      double m = 0.0;
      for (double x : v) m += x;
      m /= static_cast<double>(v.size());
      double s2 = 0.0;
      for (double x : v) s2 += (x - m) * (x - m);
      return std::pair{m, std::sqrt(s2 / static_cast<double>(v.size()))};
    };
    const auto [fa_m, fa_s] = mean_std(full_a);
    const auto [fb_m, fb_s] = mean_std(full_b);
    const auto [da_m, da_s] = mean_std(down_a);
    const auto [db_m, db_s] = mean_std(down_b);

    // Separable at scale 1 (checker alternates along x, line pairs do not).
    const double full_pooled = std::sqrt(0.5 * (fa_s * fa_s + fb_s * fb_s));
    CHECK(std::abs(fa_m - fb_m) > 2.0 * full_pooled);
    // Indistinguishable after 4x area averaging.
    const double down_pooled = std::sqrt(0.5 * (da_s * da_s + db_s * db_s));
    CHECK(std::abs(da_m - db_m) < 0.5 * std::max(down_pooled, 1e-9));
  }

  SUBCASE("ignore fraction carves ignore pixels") {
    SynthConfig cfg;
    cfg.num_classes = 2;
    cfg.width = 128;
    cfg.height = 128;
    cfg.ignore_fraction = 0.1;
    Slide s = synth_generate(cfg, 7);
    std::size_t ignored = 0;
    for (auto v : s.labels.data) ignored += v == kIgnoreLabel;
    const double frac = static_cast<double>(ignored) / s.labels.data.size();
    CHECK(std::abs(frac - 0.1) < 0.02);
  }

  SUBCASE("infeasible ratios are rejected") {
    SynthConfig cfg;
    cfg.num_classes = 2;
    cfg.class_ratios = {0.9, 0.2};
    CHECK_THROWS_AS(synth_generate(cfg, 1), ConfigError);
    cfg.class_ratios = {1.2, -0.2};
    CHECK_THROWS_AS(synth_generate(cfg, 1), ConfigError);
  }
}

TEST_CASE("manifest round trip and validation") {
  const std::string p = temp_path("manifest.txt");
  std::vector<ManifestEntry> entries = {{"slide_000.pgm", "labels_000.pgm", "train"},
                                        {"slide_001.pgm", "labels_001.pgm", "test"}};
  save_manifest(entries, p);
  auto back = load_manifest(p);
  REQUIRE(back.size() == 2);
  CHECK(back[0].image_path == "slide_000.pgm");
  CHECK(back[1].split == "test");

  const std::string bad = temp_path("bad_manifest.txt");
  {
    std::ofstream f(bad);
    f << "slide=a.pgm labels=b.pgm split=nope\n";
  }
  CHECK_THROWS_AS(load_manifest(bad), DataError);
  {
    std::ofstream f(bad);
    f << "slide=a.pgm owner=me split=train\n";
  }
  CHECK_THROWS_WITH_AS(load_manifest(bad), doctest::Contains("unknown key"), DataError);
}
