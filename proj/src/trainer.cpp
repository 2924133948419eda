#include "awmf/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "awmf/metrics.hpp"

namespace awmf {

namespace {

constexpr std::uint64_t kStreamPretrain = 0x50524554u;
constexpr std::uint64_t kStreamWeighting = 0x5745504fu;
constexpr std::uint64_t kStreamEndToEnd = 0x45324520u;
constexpr std::uint64_t kStreamAugment = 0x41554758u;

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);
  }
  return order;
}

// Splits [0, n) into contiguous chunks and runs fn(chunk, begin, end) on
// each; the work is read-only over the bundle, so per-chunk results can be
// merged in chunk order afterwards.
void parallel_ranges(std::size_t n, int threads,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
  if (threads <= 1 || n < 2) {
    fn(0, 0, n);
    return;
  }
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, w, begin, end] { fn(w, begin, end); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace

void TrainConfig::validate() const {
  if (lr <= 0.0) throw ConfigError("learning rate must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (pretrain_epochs < 0) throw ConfigError("pretrain_epochs must be >= 0");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (min_improvement < 0.0) throw ConfigError("min_improvement must be >= 0");
  if (threads < 1) throw ConfigError("threads must be >= 1");
}

const char* TrainLog::csv_header() {
  return "epoch,loss_e1,loss_e2,loss_e3,loss_w,loss_a,loss_total,val_loss,val_miou,"
         "w1_mean,w2_mean,w3_mean,seconds";
}

void TrainLog::write_csv(const std::string& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot open training log for writing: " + path);
  f << csv_header() << "\n";
  char line[512];
  for (const EpochRecord& r : records) {
    std::snprintf(line, sizeof(line),
                  "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.3f",
                  r.epoch, r.loss_expert[0], r.loss_expert[1], r.loss_expert[2],
                  r.loss_weighting, r.loss_aggregated, r.loss_total, r.val_loss, r.val_miou,
                  r.weight_mean[0], r.weight_mean[1], r.weight_mean[2], r.seconds);
    f << line << "\n";
  }
  if (!f) throw DataError("failed writing training log: " + path);
}

Tensor input_batch(const std::vector<const PatchTriplet*>& batch, int k) {
  if (batch.empty()) throw DataError("input_batch: empty batch");
  const Raster& first = batch[0]->images[static_cast<std::size_t>(k)];
  const int w = first.width, h = first.height, c = first.channels;
  Tensor t = Tensor::zeros({static_cast<int>(batch.size()), c, h, w});
  auto v = t.values_mut();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const Raster& img = batch[n]->images[static_cast<std::size_t>(k)];
    for (int ch = 0; ch < c; ++ch) {
      double* dst = v.data() + (n * static_cast<std::size_t>(c) + static_cast<std::size_t>(ch)) * plane;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          dst[static_cast<std::size_t>(y) * w + x] = img.at(y, x, ch) / 255.0;
        }
      }
    }
  }
  return t;
}

Tensor label_batch(const std::vector<const PatchTriplet*>& batch, int k, int num_classes) {
  if (batch.empty()) throw DataError("label_batch: empty batch");
  const Raster& first = batch[0]->labels[static_cast<std::size_t>(k)];
  const int w = first.width, h = first.height;
  std::vector<std::uint8_t> labels;
  labels.reserve(batch.size() * first.pixel_count());
  for (const PatchTriplet* t : batch) {
    const Raster& lab = t->labels[static_cast<std::size_t>(k)];
    labels.insert(labels.end(), lab.data.begin(), lab.data.end());
  }
  return one_hot(labels, num_classes, static_cast<int>(batch.size()), h, w);
}

std::array<ClassWeights, 3> magnification_class_weights(
    const std::vector<PatchTriplet>& train, int num_classes) {
  std::array<ClassWeights, 3> out;
  for (int k = 0; k < 3; ++k) {
    std::vector<std::vector<std::uint8_t>> maps;
    maps.reserve(train.size());
    for (const PatchTriplet& t : train) {
      maps.push_back(t.labels[static_cast<std::size_t>(k)].data);
    }
    out[static_cast<std::size_t>(k)] = class_weights(maps, num_classes);
  }
  return out;
}

namespace {

PatchTriplet maybe_augment(const PatchTriplet& t, const TrainConfig& cfg, int epoch,
                           std::size_t index) {
  if (!cfg.augment) return t;
  const std::uint64_t s =
      Rng::derive(cfg.seed, kStreamAugment ^ static_cast<std::uint64_t>(epoch), index)
          .next_u64();
  return flip_augment(t, s);
}

double expert_validation_loss(ModelBundle& bundle,
                              const std::vector<PatchTriplet>& val,
                              const std::array<ClassWeights, 3>& alphas, int batch_size,
                              int threads) {
  const int m = bundle.config.num_classes;
  std::vector<double> partial(std::max(1, threads), 0.0);
  parallel_ranges(val.size(), threads, [&](std::size_t chunk, std::size_t begin, std::size_t end) {
    double acc = 0.0;
    for (std::size_t at = begin; at < end; at += static_cast<std::size_t>(batch_size)) {
      const std::size_t stop = std::min(end, at + static_cast<std::size_t>(batch_size));
      std::vector<const PatchTriplet*> batch;
      for (std::size_t i = at; i < stop; ++i) batch.push_back(&val[i]);
      for (int k = 0; k < 3; ++k) {
        Tensor x = input_batch(batch, k);
        Tensor y = bundle.experts[static_cast<std::size_t>(k)]->forward(x, Mode::kEval, nullptr);
        Tensor t = label_batch(batch, k, m);
        acc += weighted_cross_entropy(y, t, alphas[static_cast<std::size_t>(k)], nullptr).scalar();
      }
    }
    partial[chunk] += acc;
  });
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

}  // namespace

void pretrain_experts(ModelBundle& bundle, const DatasetSplit& split,
                      const TrainConfig& cfg) {
  cfg.validate();
  if (split.train.empty() || split.val.empty()) {
    throw DataError("pretraining requires non-empty train and validation sets");
  }
  const int m = bundle.config.num_classes;
  const auto alphas = magnification_class_weights(split.train, m);
  const NadamConfig opt{cfg.lr};

  double best_val = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;
  for (int epoch = 1; epoch <= cfg.pretrain_epochs; ++epoch) {
    const auto order = shuffled_indices(
        split.train.size(), Rng::derive(cfg.seed, kStreamPretrain, static_cast<std::uint64_t>(epoch)));
    std::array<double, 3> sums = {};
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size));
      std::vector<PatchTriplet> staged;
      staged.reserve(stop - at);
      for (std::size_t i = at; i < stop; ++i) {
        staged.push_back(maybe_augment(split.train[order[i]], cfg, epoch, order[i]));
      }
      std::vector<const PatchTriplet*> batch;
      for (const PatchTriplet& t : staged) batch.push_back(&t);
      for (int k = 0; k < 3; ++k) {
        try {
          Tape tape;
          Tensor x = input_batch(batch, k);
          Tensor y = bundle.experts[static_cast<std::size_t>(k)]->forward(x, Mode::kTrain, &tape);
          Tensor t = label_batch(batch, k, m);
          Tensor loss =
              weighted_cross_entropy(y, t, alphas[static_cast<std::size_t>(k)], &tape);
          sums[static_cast<std::size_t>(k)] += loss.scalar();
          tape.backward(loss);
          auto params = bundle.expert_params(k);
          nadam_step(params, opt);
        } catch (const DivergenceError& e) {
          throw DivergenceError("pretraining expert " + std::to_string(k + 1) + ", epoch " +
                                std::to_string(epoch) + ", batch " +
                                std::to_string(at / static_cast<std::size_t>(cfg.batch_size)) +
                                ": " + e.what());
        }
      }
    }
    const double val =
        expert_validation_loss(bundle, split.val, alphas, cfg.batch_size, cfg.threads);
    std::cout << "pretrain epoch " << epoch << " loss_e=(" << sums[0] << "," << sums[1] << ","
              << sums[2] << ") val=" << val << "\n";
    if (val < best_val - cfg.min_improvement) {
      best_val = val;
      bad_epochs = 0;
    } else {
      ++bad_epochs;
      if (bad_epochs >= cfg.patience) {
        std::cout << "pretrain early stop at epoch " << epoch << "\n";
        break;
      }
    }
  }
}

WeightTargetSet generate_weight_targets(ModelBundle& bundle,
                                        const std::vector<PatchTriplet>& pool,
                                        int threads) {
  const int m = bundle.config.num_classes;
  WeightTargetSet set;
  set.patch_ids.resize(pool.size());
  set.targets.resize(pool.size());
  constexpr std::size_t kBatch = 16;
  parallel_ranges(pool.size(), threads, [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t at = begin; at < end; at += kBatch) {
      const std::size_t stop = std::min(end, at + kBatch);
      std::vector<const PatchTriplet*> batch;
      for (std::size_t i = at; i < stop; ++i) batch.push_back(&pool[i]);
      for (int k = 0; k < 3; ++k) {
        Tensor x = input_batch(batch, k);
        Tensor y = bundle.experts[static_cast<std::size_t>(k)]->forward(x, Mode::kEval, nullptr);
        Tensor t = label_batch(batch, k, m);
        const std::vector<double> dice = dice_weight_targets_batch(y, t);
        for (std::size_t i = at; i < stop; ++i) {
          set.targets[i][static_cast<std::size_t>(k)] = dice[i - at];
        }
      }
      for (std::size_t i = at; i < stop; ++i) set.patch_ids[i] = pool[i].id;
    }
  });
  return set;
}

double train_weighting_epoch(ModelBundle& bundle, const std::vector<PatchTriplet>& pool,
                             const WeightTargetSet& targets, const TrainConfig& cfg,
                             int epoch) {
  if (pool.empty() || targets.size() != pool.size()) {
    throw DataError("weighting epoch: target set does not match the pool (" +
                    std::to_string(targets.size()) + " vs " + std::to_string(pool.size()) + ")");
  }
  const NadamConfig opt{cfg.lr};
  const auto order = shuffled_indices(
      pool.size(), Rng::derive(cfg.seed, kStreamWeighting, static_cast<std::uint64_t>(epoch)));
  double sum = 0.0;
  for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
    const std::size_t stop = std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size));
    std::vector<const PatchTriplet*> batch;
    Tensor target = Tensor::zeros({static_cast<int>(stop - at), 3});
    for (std::size_t i = at; i < stop; ++i) {
      batch.push_back(&pool[order[i]]);
      for (int k = 0; k < 3; ++k) {
        target.values_mut()[(i - at) * 3 + static_cast<std::size_t>(k)] =
            targets.targets[order[i]][static_cast<std::size_t>(k)];
      }
    }
    try {
      Tape tape;
      Tensor x2 = input_batch(batch, 1);  // second magnification drives the weights
      Tensor y = bundle.weighting->forward(x2, Mode::kTrain, &tape);
      Tensor loss = mse_weight_loss(y, target, &tape);
      sum += loss.scalar();
      tape.backward(loss);
      auto params = bundle.weighting_params();
      nadam_step(params, opt);
    } catch (const DivergenceError& e) {
      throw DivergenceError("weighting epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(at / static_cast<std::size_t>(cfg.batch_size)) + ": " +
                            e.what());
    }
  }
  return sum;
}

EndToEndSums end_to_end_epoch(ModelBundle& bundle, const DatasetSplit& split,
                              const std::array<ClassWeights, 3>& alphas,
                              const TrainConfig& cfg, int epoch) {
  if (split.train.empty()) throw DataError("end-to-end epoch: empty training set");
  const int m = bundle.config.num_classes;
  const NadamConfig opt{cfg.lr};
  const auto order = shuffled_indices(
      split.train.size(), Rng::derive(cfg.seed, kStreamEndToEnd, static_cast<std::uint64_t>(epoch)));
  EndToEndSums sums;
  std::size_t weight_samples = 0;
  for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
    const std::size_t stop = std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size));
    std::vector<PatchTriplet> staged;
    staged.reserve(stop - at);
    for (std::size_t i = at; i < stop; ++i) {
      staged.push_back(maybe_augment(split.train[order[i]], cfg, epoch, order[i]));
    }
    std::vector<const PatchTriplet*> batch;
    for (const PatchTriplet& t : staged) batch.push_back(&t);
    try {
      std::array<Tensor, 3> xs = {input_batch(batch, 0), input_batch(batch, 1),
                                  input_batch(batch, 2)};
      // Weights come from the frozen weighting net: eval mode, no tape, so
      // no gradient reaches it and its running stats stay put.
      Tensor w = bundle.weighting->forward(xs[1], Mode::kEval, nullptr);
      std::array<Tensor, 3> weights = {column(w, 0), column(w, 1), column(w, 2)};
      for (int k = 0; k < 3; ++k) {
        for (double v : weights[static_cast<std::size_t>(k)].values()) {
          sums.weight_mean[static_cast<std::size_t>(k)] += v;
        }
      }
      weight_samples += stop - at;

      Tape tape;
      IntegratedOutput out = integrated_forward(bundle, xs, weights, Mode::kTrain, &tape);
      std::array<Tensor, 3> ts = {label_batch(batch, 0, m), label_batch(batch, 1, m),
                                  label_batch(batch, 2, m)};
      LossBreakdown bd;
      Tensor loss = total_loss(out.fused, ts[0], out.expert_full, ts, alphas, alphas[0],
                               &tape, &bd);
      sums.loss_aggregated += bd.aggregated;
      for (int k = 0; k < 3; ++k) {
        sums.loss_expert[static_cast<std::size_t>(k)] += bd.expert[static_cast<std::size_t>(k)];
      }
      sums.loss_total += bd.total;
      tape.backward(loss);
      auto params = bundle.integrated_params();
      nadam_step(params, opt);
    } catch (const DivergenceError& e) {
      throw DivergenceError("end-to-end epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(at / static_cast<std::size_t>(cfg.batch_size)) + ": " +
                            e.what());
    }
  }
  if (weight_samples > 0) {
    for (int k = 0; k < 3; ++k) {
      sums.weight_mean[static_cast<std::size_t>(k)] /= static_cast<double>(weight_samples);
    }
  }
  return sums;
}

ValidationMetrics validate(ModelBundle& bundle, const std::vector<PatchTriplet>& triplets,
                           const std::array<ClassWeights, 3>& alphas, int threads) {
  const int m = bundle.config.num_classes;
  constexpr std::size_t kBatch = 16;
  std::vector<double> loss_part(std::max(1, threads), 0.0);
  std::vector<ConfusionMatrix> cms(static_cast<std::size_t>(std::max(1, threads)),
                                   ConfusionMatrix(m));
  parallel_ranges(triplets.size(), threads, [&](std::size_t slot, std::size_t begin, std::size_t end) {
    for (std::size_t at = begin; at < end; at += kBatch) {
      const std::size_t stop = std::min(end, at + kBatch);
      std::vector<const PatchTriplet*> batch;
      for (std::size_t i = at; i < stop; ++i) batch.push_back(&triplets[i]);
      std::array<Tensor, 3> xs = {input_batch(batch, 0), input_batch(batch, 1),
                                  input_batch(batch, 2)};
      Tensor w = bundle.weighting->forward(xs[1], Mode::kEval, nullptr);
      std::array<Tensor, 3> weights = {column(w, 0), column(w, 1), column(w, 2)};
      IntegratedOutput out = integrated_forward(bundle, xs, weights, Mode::kEval, nullptr);
      std::array<Tensor, 3> ts = {label_batch(batch, 0, m), label_batch(batch, 1, m),
                                  label_batch(batch, 2, m)};
      LossBreakdown bd;
      total_loss(out.fused, ts[0], out.expert_full, ts, alphas, alphas[0], nullptr, &bd);
      loss_part[slot] += bd.total;
      const std::vector<Raster> preds = argmax_labels(out.fused);
      for (std::size_t i = at; i < stop; ++i) {
        cms[slot].accumulate(preds[i - at], triplets[i].labels[0]);
      }
    }
  });
  ValidationMetrics vm;
  ConfusionMatrix cm(m);
  for (std::size_t i = 0; i < loss_part.size(); ++i) {
    vm.loss += loss_part[i];
    cm.merge(cms[i]);
  }
  vm.miou = miou(cm);
  return vm;
}

void quantize_to_checkpoint_precision(ModelBundle& bundle) {
  auto round_trip = [](std::span<double> vs) {
    for (double& v : vs) v = static_cast<double>(static_cast<float>(v));
  };
  for (auto& [name, p] : bundle.store.params()) {
    round_trip(p.tensor.values_mut());
    round_trip(std::span<double>(p.moment1));
    round_trip(std::span<double>(p.moment2));
  }
  for (auto& [name, b] : bundle.store.buffers()) round_trip(b.values_mut());
}

RunResult run_training(ModelBundle& bundle, const DatasetSplit& split,
                       const TrainConfig& cfg,
                       const std::optional<std::string>& resume_from, bool skip_pretrain) {
  cfg.validate();
  if (split.train.empty() || split.val.empty()) {
    throw DataError("training requires non-empty train and validation splits");
  }
  namespace fs = std::filesystem;
  if (!cfg.out_dir.empty()) fs::create_directories(cfg.out_dir);
  auto out_path = [&](const std::string& name) {
    return cfg.out_dir.empty() ? name : cfg.out_dir + "/" + name;
  };

  const auto alphas = magnification_class_weights(split.train, bundle.config.num_classes);

  RunResult result;
  int start_epoch = 1;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int bad_epochs = 0;

  if (resume_from) {
    std::map<std::string, double> extras;
    reload_bundle(bundle, *resume_from, &extras);
    auto need = [&](const char* key) {
      auto it = extras.find(key);
      if (it == extras.end()) {
        throw CheckpointError(CheckpointFault::kMismatch,
                              *resume_from + " is missing trainer state '" + key + "'");
      }
      return it->second;
    };
    start_epoch = static_cast<int>(need("trainer.epoch")) + 1;
    best_val = need("trainer.best_val");
    best_epoch = static_cast<int>(need("trainer.best_epoch"));
    bad_epochs = static_cast<int>(need("trainer.bad_epochs"));
    std::cout << "resuming at epoch " << start_epoch << "\n";
  } else if (!skip_pretrain) {
    try {
      pretrain_experts(bundle, split, cfg);
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string("stage pretrain: ") + e.what());
    }
    save_bundle(bundle, out_path("pretrain.awmf"));
    // State rounds through the file encoding so resumed and uninterrupted
    // runs share one trajectory.
    quantize_to_checkpoint_precision(bundle);
  }

  for (int epoch = start_epoch; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    try {
      WeightTargetSet targets = generate_weight_targets(bundle, split.val, cfg.threads);
      rec.loss_weighting = train_weighting_epoch(bundle, split.val, targets, cfg, epoch);
      EndToEndSums sums = end_to_end_epoch(bundle, split, alphas, cfg, epoch);
      rec.loss_expert = sums.loss_expert;
      rec.loss_aggregated = sums.loss_aggregated;
      rec.loss_total = sums.loss_total;
      rec.weight_mean = sums.weight_mean;
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string("stage alternation: ") + e.what());
    }

    quantize_to_checkpoint_precision(bundle);
    const ValidationMetrics vm = validate(bundle, split.val, alphas, cfg.threads);
    rec.val_loss = vm.loss;
    rec.val_miou = vm.miou;

    if (vm.loss < best_val - cfg.min_improvement) {
      best_val = vm.loss;
      best_epoch = epoch;
      bad_epochs = 0;
    } else {
      ++bad_epochs;
    }

    const std::string ckpt = out_path("epoch_" + std::to_string(epoch) + ".awmf");
    save_bundle(bundle, ckpt, true,
                {{"trainer.epoch", static_cast<double>(epoch)},
                 {"trainer.best_val", best_val},
                 {"trainer.best_epoch", static_cast<double>(best_epoch)},
                 {"trainer.bad_epochs", static_cast<double>(bad_epochs)}});
    if (best_epoch == epoch) {
      fs::copy_file(ckpt, out_path("best.awmf"), fs::copy_options::overwrite_existing);
    }

    rec.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.records.push_back(rec);
    result.log.write_csv(out_path("train_log.csv"));
    result.last_epoch = epoch;
    std::cout << "epoch " << epoch << " loss_total=" << rec.loss_total
              << " val_loss=" << rec.val_loss << " val_miou=" << rec.val_miou << " w_mean=("
              << rec.weight_mean[0] << "," << rec.weight_mean[1] << "," << rec.weight_mean[2]
              << ")\n";

    if (bad_epochs >= cfg.patience) {
      result.early_stopped = true;
      std::cout << "early stop: no validation improvement for " << cfg.patience
                << " epochs\n";
      break;
    }
  }
  result.best_epoch = best_epoch;
  result.best_val_loss = best_val;
  return result;
}

}  // namespace awmf
