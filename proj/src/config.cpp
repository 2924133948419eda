#include "awmf/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace awmf {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

long parse_int(const std::string& key, const std::string& v) {
  long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

std::vector<std::string> split_commas(const std::string& v) {
  std::vector<std::string> parts;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) parts.push_back(trim(item));
  return parts;
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  for (const auto& p : split_commas(v)) out.push_back(static_cast<int>(parse_int(key, p)));
  return out;
}

std::vector<double> parse_double_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& p : split_commas(v)) out.push_back(parse_double(key, p));
  return out;
}

struct SchemaEntry {
  const char* key;
  const char* default_value;
  const char* description;
  std::function<void(RunConfig&, const std::string&)> apply;
};

const std::vector<SchemaEntry>& schema() {
  static const std::vector<SchemaEntry> entries = {
      {"mode", "four-class", "segmentation regime: two-class | four-class | cascade",
       [](RunConfig& c, const std::string& v) {
         if (v != "two-class" && v != "four-class" && v != "cascade") {
           throw ConfigError("mode: expected two-class|four-class|cascade, got '" + v + "'");
         }
         c.mode = v;
       }},
      {"seed", "0", "master seed for generation, splits and training",
       [](RunConfig& c, const std::string& v) {
         c.seed = static_cast<std::uint64_t>(parse_int("seed", v));
       }},
      {"threads", "1", "patch-parallel fan-out for inference-style passes",
       [](RunConfig& c, const std::string& v) {
         c.threads = static_cast<int>(parse_int("threads", v));
       }},
      {"out", "out", "output directory for all artifacts",
       [](RunConfig& c, const std::string& v) { c.out_dir = v; }},
      {"data.manifest", "", "dataset manifest path",
       [](RunConfig& c, const std::string& v) { c.manifest = v; }},
      {"data.stride", "0", "tiling stride; 0 uses the window size",
       [](RunConfig& c, const std::string& v) {
         c.stride = static_cast<int>(parse_int("data.stride", v));
       }},
      {"synth.slides", "16", "number of synthetic slides to generate",
       [](RunConfig& c, const std::string& v) {
         c.synth_slides = static_cast<int>(parse_int("synth.slides", v));
       }},
      {"synth.test_slides", "4", "trailing slides marked split=test",
       [](RunConfig& c, const std::string& v) {
         c.synth_test_slides = static_cast<int>(parse_int("synth.test_slides", v));
       }},
      {"synth.width", "256", "synthetic slide width",
       [](RunConfig& c, const std::string& v) {
         c.synth.width = static_cast<int>(parse_int("synth.width", v));
       }},
      {"synth.height", "256", "synthetic slide height",
       [](RunConfig& c, const std::string& v) {
         c.synth.height = static_cast<int>(parse_int("synth.height", v));
       }},
      {"synth.ratios", "", "target class-area ratios (comma list; empty = defaults)",
       [](RunConfig& c, const std::string& v) {
         c.synth.class_ratios = parse_double_list("synth.ratios", v);
       }},
      {"synth.coarse_wavelength", "112", "macro texture period in pixels",
       [](RunConfig& c, const std::string& v) {
         c.synth.coarse_wavelength = parse_double("synth.coarse_wavelength", v);
       }},
      {"synth.band_amplitude", "45", "macro texture amplitude",
       [](RunConfig& c, const std::string& v) {
         c.synth.band_amplitude = parse_double("synth.band_amplitude", v);
       }},
      {"synth.fine_amplitude", "35", "micro texture amplitude",
       [](RunConfig& c, const std::string& v) {
         c.synth.fine_amplitude = parse_double("synth.fine_amplitude", v);
       }},
      {"synth.noise", "3", "uniform pixel noise amplitude",
       [](RunConfig& c, const std::string& v) {
         c.synth.noise_amplitude = parse_double("synth.noise", v);
       }},
      {"synth.ignore_fraction", "0", "fraction of pixels labeled ignore (255)",
       [](RunConfig& c, const std::string& v) {
         c.synth.ignore_fraction = parse_double("synth.ignore_fraction", v);
       }},
      {"synth.coarse_region_scale", "190", "coarse factor region wavelength",
       [](RunConfig& c, const std::string& v) {
         c.synth.coarse_region_scale = parse_double("synth.coarse_region_scale", v);
       }},
      {"synth.fine_region_scale", "120", "fine factor region wavelength",
       [](RunConfig& c, const std::string& v) {
         c.synth.fine_region_scale = parse_double("synth.fine_region_scale", v);
       }},
      {"model.window", "32", "target patch extent W (multiple of 8)",
       [](RunConfig& c, const std::string& v) {
         c.net.window = static_cast<int>(parse_int("model.window", v));
       }},
      {"model.in_channels", "1", "input channels (1 grayscale, 3 color)",
       [](RunConfig& c, const std::string& v) {
         c.net.in_channels = static_cast<int>(parse_int("model.in_channels", v));
       }},
      {"model.expert_widths", "16,32,64", "expert encoder stage widths",
       [](RunConfig& c, const std::string& v) {
         c.net.expert_widths = parse_int_list("model.expert_widths", v);
       }},
      {"model.weighting_widths", "8,16,32,32", "weighting net block widths",
       [](RunConfig& c, const std::string& v) {
         c.net.weighting_widths = parse_int_list("model.weighting_widths", v);
       }},
      {"model.agg_channels", "32", "aggregator hidden channels",
       [](RunConfig& c, const std::string& v) {
         c.net.aggregator_channels = static_cast<int>(parse_int("model.agg_channels", v));
       }},
      {"model.crop_mode", "bilinear", "crop-and-upsample interpolation: nearest | bilinear",
       [](RunConfig& c, const std::string& v) {
         if (v == "nearest") {
           c.net.crop_mode = Resample::kNearest;
         } else if (v == "bilinear") {
           c.net.crop_mode = Resample::kBilinear;
         } else {
           throw ConfigError("model.crop_mode: expected nearest|bilinear, got '" + v + "'");
         }
       }},
      {"train.lr", "1e-4", "Nadam learning rate",
       [](RunConfig& c, const std::string& v) { c.train.lr = parse_double("train.lr", v); }},
      {"train.batch_size", "8", "mini-batch size",
       [](RunConfig& c, const std::string& v) {
         c.train.batch_size = static_cast<int>(parse_int("train.batch_size", v));
       }},
      {"train.max_epochs", "50", "alternating-epoch budget L",
       [](RunConfig& c, const std::string& v) {
         c.train.max_epochs = static_cast<int>(parse_int("train.max_epochs", v));
       }},
      {"train.pretrain_epochs", "20", "expert pre-training epoch budget",
       [](RunConfig& c, const std::string& v) {
         c.train.pretrain_epochs = static_cast<int>(parse_int("train.pretrain_epochs", v));
       }},
      {"train.patience", "5", "early-stop patience (epochs)",
       [](RunConfig& c, const std::string& v) {
         c.train.patience = static_cast<int>(parse_int("train.patience", v));
       }},
      {"train.min_improvement", "1e-4", "validation-loss improvement threshold",
       [](RunConfig& c, const std::string& v) {
         c.train.min_improvement = parse_double("train.min_improvement", v);
       }},
      {"train.val_fraction", "0.2", "validation fraction (also the weighting pool)",
       [](RunConfig& c, const std::string& v) {
         c.val_fraction = parse_double("train.val_fraction", v);
       }},
      {"train.augment", "true", "random horizontal/vertical flip augmentation",
       [](RunConfig& c, const std::string& v) {
         c.train.augment = parse_bool("train.augment", v);
       }},
      {"eval.split", "test", "split evaluated by eval/agreement: train | val | test",
       [](RunConfig& c, const std::string& v) {
         if (v != "train" && v != "val" && v != "test") {
           throw ConfigError("eval.split: expected train|val|test, got '" + v + "'");
         }
         c.eval_split = v;
       }},
  };
  return entries;
}

bool apply_palette_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  if (key.rfind("palette.", 0) != 0) return false;
  const std::string which = key.substr(8);
  int label;
  if (which == "ignore") {
    label = kIgnoreLabel;
  } else {
    label = static_cast<int>(parse_int(key, which));
    if (label < 0 || label > 254) throw ConfigError(key + ": label out of range");
  }
  const auto parts = parse_int_list(key, value);
  if (parts.size() != 3) throw ConfigError(key + ": expected r,g,b");
  for (int p : parts) {
    if (p < 0 || p > 255) throw ConfigError(key + ": channel values must be 0..255");
  }
  cfg.palette_overrides[label] = {static_cast<std::uint8_t>(parts[0]),
                                  static_cast<std::uint8_t>(parts[1]),
                                  static_cast<std::uint8_t>(parts[2])};
  return true;
}

}  // namespace

int RunConfig::num_classes() const {
  if (mode == "two-class") return 2;
  if (mode == "four-class") return 4;
  throw ConfigError("mode '" + mode + "' does not define a single class count");
}

void RunConfig::finalize() {
  if (mode != "cascade") {
    net.num_classes = num_classes();
    synth.num_classes = num_classes();
  }
  train.seed = seed;
  train.threads = threads;
  train.out_dir = out_dir;
  if (stride == 0) stride = net.window;
  if (stride < 1) throw ConfigError("data.stride must be >= 1");
  if (val_fraction <= 0.0 || val_fraction >= 1.0) {
    throw ConfigError("train.val_fraction must be in (0,1)");
  }
  if (synth_slides < 1) throw ConfigError("synth.slides must be >= 1");
  if (synth_test_slides < 0 || synth_test_slides >= synth_slides) {
    throw ConfigError("synth.test_slides must be in [0, synth.slides)");
  }
  train.validate();
}

void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
  if (apply_palette_key(cfg, key, value)) return;
  for (const auto& entry : schema()) {
    if (key == entry.key) {
      entry.apply(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown configuration key '" + key + "'");
}

RunConfig parse_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  RunConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError(path + ":" + std::to_string(line_no) + ": empty key");
    }
    try {
      apply_config_entry(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return cfg;
}

std::string config_schema_help() {
  std::string out;
  out += "configuration keys (key = value per line, '#' comments):\n";
  for (const auto& e : schema()) {
    out += "  ";
    out += e.key;
    out += " (default: ";
    out += *e.default_value ? e.default_value : "<empty>";
    out += ") - ";
    out += e.description;
    out += "\n";
  }
  out += "  palette.<label>|palette.ignore (default: built-in) - r,g,b render color\n";
  return out;
}

}  // namespace awmf
