#include "awmf/networks.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace awmf {

void NetConfig::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (window < 8 || window % 8 != 0) {
    // The central 1/4 crop needs 3W/8 to be integral, so W must be a
    // multiple of 8 (every supported window is).
    throw ConfigError("window must be a positive multiple of 8, got " +
                      std::to_string(window));
  }
  if (in_channels != 1 && in_channels != 3) {
    throw ConfigError("in_channels must be 1 or 3");
  }
  if (expert_widths.size() < 2) throw ConfigError("expert_widths needs >= 2 stages");
  int extent = window;
  for (std::size_t i = 1; i < expert_widths.size(); ++i) {
    extent /= 2;
    if (extent < 2) throw ConfigError("expert_widths too deep for window");
  }
  if (weighting_widths.empty()) throw ConfigError("weighting_widths must not be empty");
  extent = window;
  for (std::size_t i = 0; i < weighting_widths.size(); ++i) {
    if (extent % 2 != 0 || extent < 2) {
      throw ConfigError("weighting_widths too deep for window " + std::to_string(window));
    }
    extent /= 2;
  }
  for (int wd : expert_widths) {
    if (wd < 1) throw ConfigError("expert widths must be positive");
  }
  if (aggregator_channels < 1) throw ConfigError("aggregator_channels must be positive");
}

// --- ExpertNet --------------------------------------------------------------

ExpertNet::ExpertNet(ParameterStore& store, const std::string& prefix,
                     const NetConfig& cfg, Rng& rng)
    : window_(cfg.window), in_channels_(cfg.in_channels) {
  const auto& widths = cfg.expert_widths;
  const int depth = static_cast<int>(widths.size());
  encoder_.resize(static_cast<std::size_t>(depth));
  for (int s = 0; s < depth; ++s) {
    const int cin = s == 0 ? cfg.in_channels : widths[static_cast<std::size_t>(s - 1)];
    const int cout = widths[static_cast<std::size_t>(s)];
    const std::string base = prefix + ".enc" + std::to_string(s);
    auto& b = encoder_[static_cast<std::size_t>(s)];
    b.conv0 = Conv2d(store, base + ".conv0", cin, cout, 3, rng);
    b.bn0 = BatchNorm2d(store, base + ".bn0", cout);
    b.conv1 = Conv2d(store, base + ".conv1", cout, cout, 3, rng);
    b.bn1 = BatchNorm2d(store, base + ".bn1", cout);
  }
  decoder_.resize(static_cast<std::size_t>(depth - 1));
  for (int s = depth - 2; s >= 0; --s) {
    const int skip = widths[static_cast<std::size_t>(s)];
    const int below = widths[static_cast<std::size_t>(s + 1)];
    const std::string base = prefix + ".dec" + std::to_string(s);
    auto& b = decoder_[static_cast<std::size_t>(s)];
    b.conv0 = Conv2d(store, base + ".conv0", below + skip, skip, 3, rng);
    b.bn0 = BatchNorm2d(store, base + ".bn0", skip);
    b.conv1 = Conv2d(store, base + ".conv1", skip, skip, 3, rng);
    b.bn1 = BatchNorm2d(store, base + ".bn1", skip);
  }
  head_ = Conv2d(store, prefix + ".head", widths[0], cfg.num_classes, 1, rng, 1,
                 Pad::kSameZero, cfg.zero_init_heads);
}

Tensor ExpertNet::run_block(Block& b, const Tensor& x, Mode mode, Tape* tape) {
  Tensor h = b.conv0.forward(x, tape);
  h = b.bn0.forward(h, mode, tape);
  h = activation(h, Activation::kElu, tape);
  h = b.conv1.forward(h, tape);
  h = b.bn1.forward(h, mode, tape);
  return activation(h, Activation::kElu, tape);
}

Tensor ExpertNet::forward(const Tensor& x, Mode mode, Tape* tape) {
  if (x.rank() != 4 || x.dim(1) != in_channels_ || x.dim(2) != window_ ||
      x.dim(3) != window_) {
    throw ShapeError("expert input must be (N," + std::to_string(in_channels_) + "," +
                     std::to_string(window_) + "," + std::to_string(window_) +
                     "), got " + shape_str(x.shape()));
  }
  std::vector<Tensor> skips;
  Tensor h = x;
  for (std::size_t s = 0; s < encoder_.size(); ++s) {
    if (s > 0) h = max_pool2d(h, 2, 2, tape);
    h = run_block(encoder_[s], h, mode, tape);
    skips.push_back(h);
  }
  for (std::size_t s = decoder_.size(); s-- > 0;) {
    h = upsample(h, 2, Resample::kNearest, tape);
    h = concat_channels({h, skips[s]}, tape);
    h = run_block(decoder_[s], h, mode, tape);
  }
  h = head_.forward(h, tape);
  return softmax_channels(h, tape);
}

// --- WeightingNet -----------------------------------------------------------

WeightingNet::WeightingNet(ParameterStore& store, const std::string& prefix,
                           const NetConfig& cfg, Rng& rng)
    : window_(cfg.window), in_channels_(cfg.in_channels) {
  int cin = cfg.in_channels;
  int extent = cfg.window;
  for (std::size_t i = 0; i < cfg.weighting_widths.size(); ++i) {
    const int cout = cfg.weighting_widths[i];
    const std::string base = prefix + ".block" + std::to_string(i);
    Block b;
    b.conv = Conv2d(store, base + ".conv", cin, cout, 3, rng);
    b.bn = BatchNorm2d(store, base + ".bn", cout);
    blocks_.push_back(std::move(b));
    cin = cout;
    extent /= 2;
  }
  fc_ = Linear(store, prefix + ".fc", cin, 3, rng, cfg.zero_init_heads);
}

Tensor WeightingNet::forward(const Tensor& x2, Mode mode, Tape* tape) {
  if (x2.rank() != 4 || x2.dim(1) != in_channels_ || x2.dim(2) != window_ ||
      x2.dim(3) != window_) {
    throw ShapeError("weighting input must be (N," + std::to_string(in_channels_) + "," +
                     std::to_string(window_) + "," + std::to_string(window_) +
                     "), got " + shape_str(x2.shape()));
  }
  Tensor h = x2;
  for (auto& b : blocks_) {
    h = b.conv.forward(h, tape);
    h = b.bn.forward(h, mode, tape);
    h = activation(h, Activation::kElu, tape);
    h = max_pool2d(h, 2, 2, tape);
  }
  h = global_avg_pool(h, tape);
  h = fc_.forward(h, tape);
  return activation(h, Activation::kSigmoid, tape);
}

// --- AggregatingNet ---------------------------------------------------------

AggregatingNet::AggregatingNet(ParameterStore& store, const std::string& prefix,
                               const NetConfig& cfg, Rng& rng) {
  const int m = cfg.num_classes;
  const int c = cfg.aggregator_channels;
  const std::array<std::pair<int, int>, 5> io = {{{3 * m, c}, {c, c}, {c, c}, {c, c}, {c, m}}};
  for (std::size_t i = 0; i < io.size(); ++i) {
    const std::string base = prefix + ".conv" + std::to_string(i);
    const bool last = i + 1 == io.size();
    convs_.push_back(Conv2d(store, base, io[i].first, io[i].second, 3, rng, 1,
                            Pad::kSameZero, last && cfg.zero_init_heads));
    if (!last) bns_.push_back(BatchNorm2d(store, prefix + ".bn" + std::to_string(i), io[i].second));
  }
}

Tensor AggregatingNet::forward(const Tensor& fused, Mode mode, Tape* tape) {
  Tensor h = fused;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    h = convs_[i].forward(h, tape);
    if (i + 1 < convs_.size()) {
      h = bns_[i].forward(h, mode, tape);
      h = activation(h, Activation::kElu, tape);
    }
  }
  return softmax_channels(h, tape);
}

// --- ModelBundle ------------------------------------------------------------

ModelBundle ModelBundle::create(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelBundle b;
  b.config = cfg;
  for (int k = 0; k < 3; ++k) {
    Rng rng = Rng::derive(seed, 0x45585045u /* per-network stream */, static_cast<std::uint64_t>(k));
    b.experts[static_cast<std::size_t>(k)] = std::make_unique<ExpertNet>(
        b.store, "expert" + std::to_string(k + 1), cfg, rng);
  }
  {
    Rng rng = Rng::derive(seed, 0x57454947u, 0);
    b.weighting = std::make_unique<WeightingNet>(b.store, "weighting", cfg, rng);
  }
  {
    Rng rng = Rng::derive(seed, 0x41474752u, 0);
    b.aggregator = std::make_unique<AggregatingNet>(b.store, "aggregator", cfg, rng);
  }
  return b;
}

std::vector<Parameter*> ModelBundle::params_with_prefix(const std::string& prefix) {
  std::vector<Parameter*> out;
  for (auto& [name, p] : store.params()) {
    if (name.rfind(prefix, 0) == 0) out.push_back(&p);
  }
  return out;
}

std::vector<Parameter*> ModelBundle::expert_params(int k) {
  return params_with_prefix("expert" + std::to_string(k + 1) + ".");
}

std::vector<Parameter*> ModelBundle::weighting_params() {
  return params_with_prefix("weighting.");
}

std::vector<Parameter*> ModelBundle::integrated_params() {
  std::vector<Parameter*> out;
  for (auto& [name, p] : store.params()) {
    if (name.rfind("weighting.", 0) != 0) out.push_back(&p);
  }
  return out;
}

// --- geometry ---------------------------------------------------------------

Tensor crop_and_upsample(const Tensor& heatmap, int k, Resample mode, Tape* tape) {
  if (heatmap.rank() != 4 || heatmap.dim(2) != heatmap.dim(3)) {
    throw ShapeError("crop_and_upsample expects a square rank-4 map, got " +
                     shape_str(heatmap.shape()));
  }
  if (k < 0 || k > 2) throw ShapeError("expert index must be 0..2, got " + std::to_string(k));
  const int w = heatmap.dim(2);
  if (w % 8 != 0) {
    throw ShapeError("crop_and_upsample needs extents divisible by 8, got " +
                     shape_str(heatmap.shape()));
  }
  if (k == 0) return heatmap;
  const int factor = kScaleFactors[static_cast<std::size_t>(k)];
  Tensor cropped = crop_center(heatmap, w / factor, w / factor, tape);
  return upsample(cropped, factor, mode, tape);
}

Tensor fuse_expert_maps(const std::array<Tensor, 3>& aligned,
                        const std::array<Tensor, 3>& weights, Tape* tape) {
  std::vector<Tensor> scaled;
  scaled.reserve(3);
  for (int k = 0; k < 3; ++k) {
    scaled.push_back(scale_rows(aligned[static_cast<std::size_t>(k)],
                                weights[static_cast<std::size_t>(k)], tape));
  }
  return concat_channels(scaled, tape);
}

Tensor expert_forward(ExpertNet& net, const Tensor& x, Mode mode, Tape* tape) {
  return net.forward(x, mode, tape);
}

Tensor weighting_forward(WeightingNet& net, const Tensor& x2, Mode mode, Tape* tape) {
  return net.forward(x2, mode, tape);
}

Tensor aggregate_forward(AggregatingNet& net, const std::array<Tensor, 3>& aligned,
                         const std::array<Tensor, 3>& weights, Mode mode, Tape* tape) {
  return net.forward(fuse_expert_maps(aligned, weights, tape), mode, tape);
}

IntegratedOutput integrated_forward(ModelBundle& bundle, const std::array<Tensor, 3>& xs,
                                    const std::array<Tensor, 3>& weights, Mode mode,
                                    Tape* tape) {
  IntegratedOutput out;
  for (int k = 0; k < 3; ++k) {
    out.expert_full[static_cast<std::size_t>(k)] =
        bundle.experts[static_cast<std::size_t>(k)]->forward(
            xs[static_cast<std::size_t>(k)], mode, tape);
    out.expert_aligned[static_cast<std::size_t>(k)] = crop_and_upsample(
        out.expert_full[static_cast<std::size_t>(k)], k, bundle.config.crop_mode, tape);
  }
  out.fused = aggregate_forward(*bundle.aggregator, out.expert_aligned, weights, mode, tape);
  return out;
}

Tensor column(const Tensor& t, int j) {
  if (t.rank() != 2 || j < 0 || j >= t.dim(1)) {
    throw ShapeError("column " + std::to_string(j) + " out of range for " +
                     shape_str(t.shape()));
  }
  const int n = t.dim(0), k = t.dim(1);
  Tensor out = Tensor::zeros({n});
  for (int i = 0; i < n; ++i) {
    out.values_mut()[static_cast<std::size_t>(i)] =
        t.values()[static_cast<std::size_t>(i) * k + static_cast<std::size_t>(j)];
  }
  return out;
}

std::array<Tensor, 3> constant_weights(int batch, double value) {
  return {Tensor::full({batch}, value), Tensor::full({batch}, value),
          Tensor::full({batch}, value)};
}

// --- checkpoint I/O ---------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'A', 'W', 'M', 'F'};

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  b[0] = static_cast<char>(v & 0xff);
  b[1] = static_cast<char>((v >> 8) & 0xff);
  b[2] = static_cast<char>((v >> 16) & 0xff);
  b[3] = static_cast<char>((v >> 24) & 0xff);
  out.append(b, 4);
}

void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

class Reader {
 public:
  Reader(std::string data, std::string path)
      : data_(std::move(data)), path_(std::move(path)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) {
      v = (v << 8) | static_cast<unsigned char>(data_[pos_ + static_cast<std::size_t>(i)]);
    }
    pos_ += 4;
    return v;
  }

  float f32() {
    std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) {
    if (pos_ + n > data_.size()) {
      throw CheckpointError(CheckpointFault::kTruncated,
                            "truncated checkpoint: " + path_);
    }
  }
  std::string data_;
  std::string path_;
  std::size_t pos_ = 0;
};

void write_record(std::string& out, const std::string& name, const Shape& shape,
                  std::span<const double> values) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.append(name);
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (int e : shape) put_u32(out, static_cast<std::uint32_t>(e));
  for (double v : values) put_f32(out, static_cast<float>(v));
}

struct Record {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

Record read_record(Reader& r) {
  Record rec;
  const std::uint32_t name_len = r.u32();
  if (name_len > 4096) {
    throw CheckpointError(CheckpointFault::kTruncated, "implausible record name length");
  }
  rec.name = r.bytes(name_len);
  const std::uint32_t rank = r.u32();
  if (rank > 8) {
    throw CheckpointError(CheckpointFault::kTruncated, "implausible record rank");
  }
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint32_t e = r.u32();
    if (e == 0 || e > (1u << 24)) {
      throw CheckpointError(CheckpointFault::kTruncated, "implausible record extent");
    }
    rec.shape.push_back(static_cast<int>(e));
    count *= e;
  }
  if (count > r.remaining() / 4 + 1) {
    throw CheckpointError(CheckpointFault::kTruncated,
                          "record payload exceeds file size");
  }
  rec.values.resize(count);
  for (std::size_t i = 0; i < count; ++i) rec.values[i] = static_cast<double>(r.f32());
  return rec;
}

}  // namespace

void save_bundle(const ModelBundle& bundle, const std::string& path,
                 bool with_train_state,
                 const std::map<std::string, double>& extra_scalars) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(bundle.config.num_classes));
  put_u32(out, static_cast<std::uint32_t>(bundle.config.window));
  for (int f : kScaleFactors) put_u32(out, static_cast<std::uint32_t>(f));

  const auto& params = bundle.store.params();
  const auto& buffers = bundle.store.buffers();
  put_u32(out, static_cast<std::uint32_t>(params.size() + buffers.size()));
  for (const auto& [name, p] : params) write_record(out, name, p.tensor.shape(), p.tensor.values());
  for (const auto& [name, b] : buffers) write_record(out, name, b.shape(), b.values());

  put_u32(out, with_train_state ? 1u : 0u);
  if (with_train_state) {
    put_u32(out, static_cast<std::uint32_t>(params.size() * 3 + extra_scalars.size()));
    for (const auto& [name, p] : params) {
      write_record(out, name + ".opt_m", p.tensor.shape(), p.moment1);
      write_record(out, name + ".opt_v", p.tensor.shape(), p.moment2);
      const double step = static_cast<double>(p.step);
      write_record(out, name + ".opt_step", {1}, std::span<const double>(&step, 1));
    }
    for (const auto& [name, v] : extra_scalars) {
      write_record(out, name, {1}, std::span<const double>(&v, 1));
    }
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open checkpoint for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("failed writing checkpoint: " + path);
}

namespace {

Reader open_checkpoint(const std::string& path, std::uint32_t* num_classes,
                       std::uint32_t* window) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(std::move(data), path);
  std::string magic = r.bytes(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) {
    throw CheckpointError(CheckpointFault::kBadMagic, "not an AWMF checkpoint: " + path);
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointFault::kBadVersion,
                          "unsupported checkpoint version " + std::to_string(version) +
                              " in " + path);
  }
  *num_classes = r.u32();
  *window = r.u32();
  for (int expected : kScaleFactors) {
    if (r.u32() != static_cast<std::uint32_t>(expected)) {
      throw CheckpointError(CheckpointFault::kMismatch,
                            "unexpected scale factors in " + path);
    }
  }
  return r;
}

}  // namespace

void peek_checkpoint_geometry(const std::string& path, int* num_classes, int* window) {
  std::uint32_t m = 0, w = 0;
  open_checkpoint(path, &m, &w);
  if (num_classes) *num_classes = static_cast<int>(m);
  if (window) *window = static_cast<int>(w);
}

bool reload_bundle(ModelBundle& bundle, const std::string& path,
                   std::map<std::string, double>* extra_scalars) {
  std::uint32_t m = 0, w = 0;
  Reader r = open_checkpoint(path, &m, &w);
  if (static_cast<int>(m) != bundle.config.num_classes ||
      static_cast<int>(w) != bundle.config.window) {
    throw CheckpointError(CheckpointFault::kMismatch,
                          "checkpoint geometry (M=" + std::to_string(m) + ", W=" +
                              std::to_string(w) + ") does not match model (M=" +
                              std::to_string(bundle.config.num_classes) + ", W=" +
                              std::to_string(bundle.config.window) + ")");
  }

  const std::uint32_t count = r.u32();
  std::size_t loaded = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    Record rec = read_record(r);
    Tensor* dst = nullptr;
    if (bundle.store.contains(rec.name)) {
      dst = &bundle.store.get(rec.name).tensor;
    } else if (bundle.store.has_buffer(rec.name)) {
      dst = &bundle.store.buffer(rec.name);
    } else {
      throw CheckpointError(CheckpointFault::kMismatch,
                            "checkpoint record does not match model architecture: " +
                                rec.name);
    }
    if (dst->shape() != rec.shape) {
      throw CheckpointError(CheckpointFault::kMismatch,
                            "shape mismatch for " + rec.name + ": file " +
                                shape_str(rec.shape) + " vs model " + shape_str(dst->shape()));
    }
    std::copy(rec.values.begin(), rec.values.end(), dst->values_mut().begin());
    ++loaded;
  }
  const std::size_t expected =
      bundle.store.params().size() + bundle.store.buffers().size();
  if (loaded != expected) {
    throw CheckpointError(CheckpointFault::kMismatch,
                          "checkpoint holds " + std::to_string(loaded) + " records, model needs " +
                              std::to_string(expected));
  }

  const std::uint32_t has_state = r.u32();
  if (has_state) {
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      Record rec = read_record(r);
      auto ends_with = [&](const char* suffix) {
        const std::size_t sl = std::strlen(suffix);
        return rec.name.size() > sl &&
               rec.name.compare(rec.name.size() - sl, sl, suffix) == 0;
      };
      auto param_of = [&](const char* suffix) -> Parameter& {
        return bundle.store.get(rec.name.substr(0, rec.name.size() - std::strlen(suffix)));
      };
      if (ends_with(".opt_m")) {
        param_of(".opt_m").moment1 = rec.values;
      } else if (ends_with(".opt_v")) {
        param_of(".opt_v").moment2 = rec.values;
      } else if (ends_with(".opt_step")) {
        param_of(".opt_step").step = static_cast<std::int64_t>(rec.values.at(0));
      } else if (extra_scalars) {
        (*extra_scalars)[rec.name] = rec.values.at(0);
      }
    }
  }
  for (auto& [name, p] : bundle.store.params()) p.tensor.zero_grad();
  return has_state != 0;
}

ModelBundle load_bundle(const std::string& path, const NetConfig& cfg,
                        std::map<std::string, double>* extra_scalars) {
  ModelBundle bundle = ModelBundle::create(cfg, 0);
  reload_bundle(bundle, path, extra_scalars);
  return bundle;
}

}  // namespace awmf
