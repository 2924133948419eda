#include "awmf/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "awmf/trainer.hpp"

namespace awmf {

namespace fs = std::filesystem;

namespace {

std::string resolve_relative(const std::string& base_file, const std::string& path) {
  fs::path p(path);
  if (p.is_absolute()) return path;
  return (fs::path(base_file).parent_path() / p).string();
}

std::string slide_stem(const std::string& path) {
  return fs::path(path).stem().string();
}

}  // namespace

DatasetSplit build_dataset(const RunConfig& cfg) {
  if (cfg.manifest.empty()) throw DataError("no dataset manifest configured (data.manifest)");
  const auto entries = load_manifest(cfg.manifest);
  if (entries.empty()) throw DataError("manifest " + cfg.manifest + " lists no slides");

  std::vector<PatchTriplet> train_pool;
  std::vector<PatchTriplet> test_pool;
  for (const auto& e : entries) {
    Slide slide;
    slide.image = load_image(resolve_relative(cfg.manifest, e.image_path));
    slide.labels = load_labels(resolve_relative(cfg.manifest, e.labels_path));
    slide.id = slide_stem(e.image_path);
    slide.validate(cfg.net.num_classes);
    auto triplets = extract_triplets(slide, cfg.net.window, cfg.stride);
    auto& pool = e.split == "test" ? test_pool : train_pool;
    for (auto& t : triplets) pool.push_back(std::move(t));
  }
  // Global patch identifiers: extraction order over the manifest.
  std::size_t next_id = 0;
  for (auto& t : train_pool) t.id = next_id++;
  for (auto& t : test_pool) t.id = next_id++;

  if (train_pool.empty()) throw DataError("manifest has no train-split slides");
  DatasetSplit split = split_dataset(std::move(train_pool), cfg.val_fraction, cfg.seed);
  split.test = std::move(test_pool);
  return split;
}

namespace {

// Target-frame prediction rasters for one variant over a triplet range.
template <typename Fn>
void for_batches(const std::vector<PatchTriplet>& triplets, std::size_t begin,
                 std::size_t end, const Fn& fn) {
  constexpr std::size_t kBatch = 16;
  for (std::size_t at = begin; at < end; at += kBatch) {
    const std::size_t stop = std::min(end, at + kBatch);
    std::vector<const PatchTriplet*> batch;
    for (std::size_t i = at; i < stop; ++i) batch.push_back(&triplets[i]);
    fn(batch, at);
  }
}

void parallel_chunks(std::size_t n, int threads,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
  if (threads <= 1 || n < 2) {
    fn(0, 0, n);
    return;
  }
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, w, begin, end] { fn(w, begin, end); });
  }
  for (auto& t : pool) t.join();
}

bool network_trained(const ModelBundle& bundle, const std::string& bn_flag) {
  return bundle.store.has_buffer(bn_flag) && bundle.store.buffer(bn_flag).scalar() != 0.0;
}

std::array<Tensor, 3> batch_inputs(const std::vector<const PatchTriplet*>& batch) {
  return {input_batch(batch, 0), input_batch(batch, 1), input_batch(batch, 2)};
}

}  // namespace

std::vector<VariantResult> evaluate_variants(ModelBundle& bundle,
                                             const std::vector<PatchTriplet>& triplets,
                                             int threads) {
  const int m = bundle.config.num_classes;
  const bool has_aggregator = network_trained(bundle, "aggregator.bn0.initialized");
  const bool has_weighting = network_trained(bundle, "weighting.block0.bn.initialized");

  std::vector<std::string> models = {"expert1", "expert2", "expert3"};
  if (has_aggregator) models.push_back("fixed");
  if (has_aggregator && has_weighting) models.push_back("adaptive");

  std::vector<VariantResult> results;
  for (const auto& model : models) {
    std::vector<ConfusionMatrix> cms(static_cast<std::size_t>(std::max(1, threads)),
                                     ConfusionMatrix(m));
    parallel_chunks(triplets.size(), threads,
                    [&](std::size_t slot, std::size_t begin, std::size_t end) {
                      for_batches(triplets, begin, end,
                                  [&](const std::vector<const PatchTriplet*>& batch, std::size_t) {
                                    std::array<Tensor, 3> xs = batch_inputs(batch);
                                    Tensor map;
                                    if (model == "fixed" || model == "adaptive") {
                                      std::array<Tensor, 3> w =
                                          model == "fixed"
                                              ? constant_weights(static_cast<int>(batch.size()), 1.0)
                                              : std::array<Tensor, 3>{};
                                      if (model == "adaptive") {
                                        Tensor pred = bundle.weighting->forward(xs[1], Mode::kEval, nullptr);
                                        w = {column(pred, 0), column(pred, 1), column(pred, 2)};
                                      }
                                      map = integrated_forward(bundle, xs, w, Mode::kEval, nullptr).fused;
                                    } else {
                                      const int k = model[6] - '1';
                                      Tensor full = bundle.experts[static_cast<std::size_t>(k)]->forward(
                                          xs[static_cast<std::size_t>(k)], Mode::kEval, nullptr);
                                      map = crop_and_upsample(full, k, bundle.config.crop_mode, nullptr);
                                    }
                                    const auto preds = argmax_labels(map);
                                    for (std::size_t i = 0; i < batch.size(); ++i) {
                                      cms[slot].accumulate(preds[i], batch[i]->labels[0]);
                                    }
                                  });
                    });
    VariantResult r{model, ConfusionMatrix(m)};
    for (const auto& cm : cms) r.cm.merge(cm);
    results.push_back(std::move(r));
  }
  return results;
}

AgreementTable expert_agreement(ModelBundle& bundle,
                                const std::vector<PatchTriplet>& triplets, int threads) {
  std::vector<AgreementTable> tables(static_cast<std::size_t>(std::max(1, threads)));
  parallel_chunks(triplets.size(), threads,
                  [&](std::size_t slot, std::size_t begin, std::size_t end) {
                    for_batches(triplets, begin, end,
                                [&](const std::vector<const PatchTriplet*>& batch, std::size_t) {
                                  std::array<Tensor, 3> xs = batch_inputs(batch);
                                  std::array<std::vector<Raster>, 3> preds;
                                  for (int k = 0; k < 3; ++k) {
                                    Tensor full = bundle.experts[static_cast<std::size_t>(k)]->forward(
                                        xs[static_cast<std::size_t>(k)], Mode::kEval, nullptr);
                                    preds[static_cast<std::size_t>(k)] = argmax_labels(
                                        crop_and_upsample(full, k, bundle.config.crop_mode, nullptr));
                                  }
                                  for (std::size_t i = 0; i < batch.size(); ++i) {
                                    merge_agreement(tables[slot],
                                                    agreement({preds[0][i], preds[1][i], preds[2][i]},
                                                              batch[i]->labels[0]));
                                  }
                                });
                  });
  AgreementTable out;
  for (const auto& t : tables) merge_agreement(out, t);
  return out;
}

namespace {

// --- subcommand implementations ----------------------------------------------

int cmd_gen_data(const RunConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  std::vector<ManifestEntry> entries;
  std::vector<double> aggregate(static_cast<std::size_t>(cfg.synth.num_classes), 0.0);
  for (int i = 0; i < cfg.synth_slides; ++i) {
    const std::uint64_t slide_seed =
        Rng::derive(cfg.seed, 0x47454e44u, static_cast<std::uint64_t>(i)).next_u64();
    Slide slide = synth_generate(cfg.synth, slide_seed);
    char img_name[64], lab_name[64];
    std::snprintf(img_name, sizeof(img_name), "slide_%03d.pgm", i);
    std::snprintf(lab_name, sizeof(lab_name), "labels_%03d.pgm", i);
    save_image(slide.image, cfg.out_dir + "/" + img_name);
    save_labels(slide.labels, cfg.out_dir + "/" + lab_name);
    const bool is_test = i >= cfg.synth_slides - cfg.synth_test_slides;
    entries.push_back({img_name, lab_name, is_test ? "test" : "train"});
    const auto ratios = class_area_ratios(slide.labels, cfg.synth.num_classes);
    for (std::size_t c = 0; c < ratios.size(); ++c) aggregate[c] += ratios[c];
  }
  save_manifest(entries, cfg.out_dir + "/manifest.txt");

  const auto targets = cfg.synth.ratios_or_default();
  std::cout << "generated " << cfg.synth_slides << " slides (" << cfg.synth_test_slides
            << " test) under " << cfg.out_dir << "\n";
  for (std::size_t c = 0; c < aggregate.size(); ++c) {
    std::cout << "class " << c << ": measured ratio "
              << aggregate[c] / static_cast<double>(cfg.synth_slides) << " (target "
              << targets[c] << ")\n";
  }
  return 0;
}

int cmd_pretrain(const RunConfig& cfg) {
  DatasetSplit split = build_dataset(cfg);
  ModelBundle bundle = ModelBundle::create(cfg.net, cfg.seed);
  pretrain_experts(bundle, split, cfg.train);
  fs::create_directories(cfg.out_dir);
  save_bundle(bundle, cfg.out_dir + "/pretrain.awmf");
  std::cout << "wrote " << cfg.out_dir << "/pretrain.awmf\n";
  return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& resume,
              const std::string& pretrain_ckpt) {
  DatasetSplit split = build_dataset(cfg);
  ModelBundle bundle = ModelBundle::create(cfg.net, cfg.seed);
  bool skip_pretrain = false;
  if (!pretrain_ckpt.empty()) {
    reload_bundle(bundle, pretrain_ckpt);
    skip_pretrain = true;
  }
  std::optional<std::string> resume_from;
  if (!resume.empty()) resume_from = resume;
  RunResult result = run_training(bundle, split, cfg.train, resume_from, skip_pretrain);
  std::cout << "finished after epoch " << result.last_epoch << " (best epoch "
            << result.best_epoch << ", val loss " << result.best_val_loss << ")\n";
  return 0;
}

void write_metrics_csv(const std::string& path, const std::vector<VariantResult>& results) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot open metrics report for writing: " + path);
  f << "model,scope,metric,value\n";
  char line[256];
  for (const auto& r : results) {
    for (int c = 0; c < r.cm.num_classes(); ++c) {
      const auto tp = r.cm.true_positives(c);
      const auto fp = r.cm.false_positives(c);
      const auto fn = r.cm.false_negatives(c);
      if (tp + fp > 0) {
        std::snprintf(line, sizeof(line), "%s,class%d,precision,%.9g", r.model.c_str(), c,
                      static_cast<double>(tp) / static_cast<double>(tp + fp));
        f << line << "\n";
      }
      if (tp + fp + fn > 0) {
        std::snprintf(line, sizeof(line), "%s,class%d,iou,%.9g", r.model.c_str(), c,
                      static_cast<double>(tp) / static_cast<double>(tp + fp + fn));
        f << line << "\n";
      }
    }
    std::snprintf(line, sizeof(line), "%s,summary,op,%.17g", r.model.c_str(), op_accuracy(r.cm));
    f << line << "\n";
    std::snprintf(line, sizeof(line), "%s,summary,pc,%.17g", r.model.c_str(), pc_accuracy(r.cm));
    f << line << "\n";
    std::snprintf(line, sizeof(line), "%s,summary,miou,%.17g", r.model.c_str(), miou(r.cm));
    f << line << "\n";
  }
}

const std::vector<PatchTriplet>& pick_split(const DatasetSplit& split,
                                            const std::string& which) {
  if (which == "train") return split.train;
  if (which == "val") return split.val;
  return split.test;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint) {
  // Checkpoint first: geometry mismatches should fail before dataset I/O.
  ModelBundle bundle = load_bundle(checkpoint, cfg.net);
  DatasetSplit split = build_dataset(cfg);
  const auto& triplets = pick_split(split, cfg.eval_split);
  if (triplets.empty()) throw DataError("eval split '" + cfg.eval_split + "' is empty");
  const auto results = evaluate_variants(bundle, triplets, cfg.threads);
  fs::create_directories(cfg.out_dir);
  const std::string path = cfg.out_dir + "/metrics.csv";
  write_metrics_csv(path, results);
  for (const auto& r : results) {
    std::cout << r.model << ": op=" << op_accuracy(r.cm) << " pc=" << pc_accuracy(r.cm)
              << " miou=" << miou(r.cm) << "\n";
  }
  std::cout << "wrote " << path << "\n";
  return 0;
}

void write_agreement_rows(std::ofstream& f, const std::string& stage,
                          const std::string& scope, const AgreementTable& t) {
  static const char* kSubset[8] = {"none", "e1",   "e2",   "e1e2",
                                   "e3",   "e1e3", "e2e3", "e1e2e3"};
  char line[256];
  for (int mask = 0; mask < 8; ++mask) {
    std::snprintf(line, sizeof(line), "%s,%s,%s,%.17g", stage.c_str(), scope.c_str(),
                  kSubset[mask], t.rate(mask));
    f << line << "\n";
  }
  for (int k = 0; k < 3; ++k) {
    std::snprintf(line, sizeof(line), "%s,%s,expert%d,%.17g", stage.c_str(), scope.c_str(),
                  k + 1, t.expert_rate(k));
    f << line << "\n";
  }
  std::snprintf(line, sizeof(line), "%s,%s,union,%.17g", stage.c_str(), scope.c_str(),
                t.union_rate());
  f << line << "\n";
  std::snprintf(line, sizeof(line), "%s,%s,intersection,%.17g", stage.c_str(), scope.c_str(),
                t.intersection_rate());
  f << line << "\n";
}

int cmd_agreement(const RunConfig& cfg, const std::string& checkpoint,
                  const std::string& after) {
  std::vector<std::pair<std::string, std::string>> stages = {{"before", checkpoint}};
  if (!after.empty()) stages.push_back({"after", after});
  // Checkpoints first so geometry mismatches fail before dataset I/O.
  std::vector<ModelBundle> bundles;
  for (const auto& [stage, ckpt] : stages) bundles.push_back(load_bundle(ckpt, cfg.net));

  DatasetSplit split = build_dataset(cfg);
  const auto& triplets = pick_split(split, cfg.eval_split);
  if (triplets.empty()) throw DataError("agreement split '" + cfg.eval_split + "' is empty");

  fs::create_directories(cfg.out_dir);
  const std::string path = cfg.out_dir + "/agreement.csv";
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot open agreement report for writing: " + path);
  f << "stage,scope,subset,rate\n";

  for (std::size_t si = 0; si < stages.size(); ++si) {
    const auto& stage = stages[si].first;
    ModelBundle& bundle = bundles[si];
    AgreementTable table = expert_agreement(bundle, triplets, cfg.threads);
    write_agreement_rows(f, stage, "all", table);
    for (const auto& [cls, counts] : table.per_class) {
      AgreementTable sub;
      sub.counts = counts;
      write_agreement_rows(f, stage, "class" + std::to_string(cls), sub);
    }
    std::cout << stage << ": union=" << table.union_rate()
              << " intersection=" << table.intersection_rate() << " experts=("
              << table.expert_rate(0) << "," << table.expert_rate(1) << ","
              << table.expert_rate(2) << ")\n";
  }
  std::cout << "wrote " << path << "\n";
  return 0;
}

Raster predict_slide(ModelBundle& bundle, const Slide& slide, int threads) {
  const int w = bundle.config.window;
  auto triplets = extract_triplets(slide, w, w);
  std::vector<PatchPrediction> preds(triplets.size());
  const bool adaptive = network_trained(bundle, "weighting.block0.bn.initialized");
  parallel_chunks(triplets.size(), threads,
                  [&](std::size_t, std::size_t begin, std::size_t end) {
                    for_batches(triplets, begin, end,
                                [&](const std::vector<const PatchTriplet*>& batch, std::size_t at) {
                                  std::array<Tensor, 3> xs = batch_inputs(batch);
                                  std::array<Tensor, 3> wts;
                                  if (adaptive) {
                                    Tensor pred = bundle.weighting->forward(xs[1], Mode::kEval, nullptr);
                                    wts = {column(pred, 0), column(pred, 1), column(pred, 2)};
                                  } else {
                                    wts = constant_weights(static_cast<int>(batch.size()), 1.0);
                                  }
                                  Tensor map =
                                      integrated_forward(bundle, xs, wts, Mode::kEval, nullptr).fused;
                                  auto labels = argmax_labels(map);
                                  for (std::size_t i = 0; i < batch.size(); ++i) {
                                    preds[at + i] = {batch[i]->row0, batch[i]->col0,
                                                     std::move(labels[i])};
                                  }
                                });
                  });
  return stitch_masks(preds, slide.image.width, slide.image.height);
}

int cmd_segment(const RunConfig& cfg, const std::string& checkpoint,
                const std::string& slide_path, const std::string& subtype_checkpoint) {
  Slide slide;
  slide.image = load_image(slide_path);
  slide.labels = Raster(slide.image.width, slide.image.height, 1, kIgnoreLabel);
  slide.id = slide_stem(slide_path);

  Raster mask;
  int palette_classes;
  if (cfg.mode == "cascade") {
    if (subtype_checkpoint.empty()) {
      throw ConfigError("cascade segmentation needs --subtype-checkpoint");
    }
    NetConfig cfg2 = cfg.net;
    cfg2.num_classes = 2;
    NetConfig cfg4 = cfg.net;
    cfg4.num_classes = 4;
    ModelBundle two = load_bundle(checkpoint, cfg2);
    ModelBundle four = load_bundle(subtype_checkpoint, cfg4);
    const Raster gate = predict_slide(two, slide, cfg.threads);
    const Raster subtype = predict_slide(four, slide, cfg.threads);
    // Subtype labels pass through unchanged; the normal class claims the
    // next free label slot.
    mask = cascade_merge(gate, subtype, 4);
    palette_classes = 5;
  } else {
    ModelBundle bundle = load_bundle(checkpoint, cfg.net);
    mask = predict_slide(bundle, slide, cfg.threads);
    palette_classes = cfg.net.num_classes;
  }

  Palette palette = Palette::default_palette(palette_classes);
  for (const auto& [label, rgb] : cfg.palette_overrides) palette.colors[label] = rgb;

  fs::create_directories(cfg.out_dir);
  const std::string mask_path = cfg.out_dir + "/" + slide.id + "_mask.pgm";
  const std::string render_path = cfg.out_dir + "/" + slide.id + "_mask.ppm";
  save_labels(mask, mask_path);
  save_image(render_mask(mask, palette), render_path);
  std::cout << "wrote " << mask_path << " and " << render_path << "\n";
  return 0;
}

RunConfig assemble_config(const std::string& config_path,
                          const std::vector<std::string>& sets, bool have_seed,
                          std::uint64_t seed, bool have_threads, int threads,
                          const std::string& out_dir, bool have_max_epochs,
                          int max_epochs, const std::string& eval_split) {
  RunConfig cfg = config_path.empty() ? RunConfig() : parse_run_config(config_path);
  for (const std::string& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("--set expects key=value, got '" + kv + "'");
    }
    apply_config_entry(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (have_seed) cfg.seed = seed;
  if (have_threads) cfg.threads = threads;
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  if (have_max_epochs) cfg.train.max_epochs = max_epochs;
  if (!eval_split.empty()) apply_config_entry(cfg, "eval.split", eval_split);
  cfg.finalize();
  return cfg;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Adaptive-weighting multi-field-of-view segmentation engine"};
  app.require_subcommand(1);
  app.footer(config_schema_help());

  std::string config_path, out_dir, eval_split;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  int threads = 1, max_epochs = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "configuration file");
    sub->add_option("--set", sets, "override one config key (key=value)");
    sub->add_option("--seed", seed, "override the master seed");
    sub->add_option("--threads", threads, "override the thread count");
    sub->add_option("--out", out_dir, "override the output directory");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic slide dataset");
  add_common(gen);

  CLI::App* pre = app.add_subcommand("pretrain", "pre-train the three experts");
  add_common(pre);

  CLI::App* train = app.add_subcommand("train", "run the full alternating training loop");
  add_common(train);
  std::string resume, pretrain_ckpt;
  train->add_option("--resume", resume, "resume from an epoch checkpoint");
  train->add_option("--pretrain", pretrain_ckpt, "start from a pre-training checkpoint");
  train->add_option("--max-epochs", max_epochs, "override train.max_epochs");

  CLI::App* seg = app.add_subcommand("segment", "segment one slide image");
  add_common(seg);
  std::string checkpoint, slide_path, subtype_ckpt;
  seg->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  seg->add_option("--slide", slide_path, "slide image (PGM/PPM)")->required();
  seg->add_option("--subtype-checkpoint", subtype_ckpt,
                  "subtype model for cascade mode");

  CLI::App* evalc = app.add_subcommand("eval", "evaluate model variants on a split");
  add_common(evalc);
  std::string eval_ckpt;
  evalc->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
  evalc->add_option("--split", eval_split, "override eval.split (train|val|test)");

  CLI::App* agree = app.add_subcommand("agreement", "expert-correctness Venn analysis");
  add_common(agree);
  std::string agree_ckpt, agree_after;
  agree->add_option("--checkpoint", agree_ckpt, "checkpoint (typically pre-training)")
      ->required();
  agree->add_option("--after", agree_after, "second checkpoint (after end-to-end training)");

  try {
    app.parse(argc, const_cast<char**>(argv));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    auto cfg = [&] {
      return assemble_config(config_path, sets, gen->count("--seed") || pre->count("--seed") ||
                                                    train->count("--seed") || seg->count("--seed") ||
                                                    evalc->count("--seed") || agree->count("--seed"),
                             seed,
                             gen->count("--threads") || pre->count("--threads") ||
                                 train->count("--threads") || seg->count("--threads") ||
                                 evalc->count("--threads") || agree->count("--threads"),
                             threads, out_dir, train->count("--max-epochs") > 0, max_epochs,
                             eval_split);
    };
    if (gen->parsed()) return cmd_gen_data(cfg());
    if (pre->parsed()) return cmd_pretrain(cfg());
    if (train->parsed()) return cmd_train(cfg(), resume, pretrain_ckpt);
    if (seg->parsed()) return cmd_segment(cfg(), checkpoint, slide_path, subtype_ckpt);
    if (evalc->parsed()) return cmd_eval(cfg(), eval_ckpt);
    if (agree->parsed()) return cmd_agreement(cfg(), agree_ckpt, agree_after);
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "geometry error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return 4;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace awmf
