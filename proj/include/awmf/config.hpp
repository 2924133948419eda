#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "awmf/networks.hpp"
#include "awmf/pyramid.hpp"
#include "awmf/trainer.hpp"

namespace awmf {

// Run configuration parsed from a line-oriented `key = value` file with
// '#' comments and dotted section keys. Every key is schema-checked;
// unknown keys are rejected. CLI flags override file values.
struct RunConfig {
  std::string mode = "four-class";  // two-class | four-class | cascade

  // data
  std::string manifest;
  int stride = 0;  // 0 means the window size

  // synthetic generator
  int synth_slides = 16;
  int synth_test_slides = 4;
  SynthConfig synth;

  // model + training
  NetConfig net;
  TrainConfig train;
  double val_fraction = 0.2;

  std::string eval_split = "test";  // train | val | test

  std::map<int, std::array<std::uint8_t, 3>> palette_overrides;

  std::string out_dir = "out";
  std::uint64_t seed = 0;
  int threads = 1;

  int num_classes() const;
  void finalize();  // propagates mode/seed/out into the nested configs
};

RunConfig parse_run_config(const std::string& path);
// Applies one `key=value` (same schema as the file).
void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value);
// One line per key: name, default and description (backs --help).
std::string config_schema_help();

}  // namespace awmf
