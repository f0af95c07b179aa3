// wsss: weakly supervised tree-species segmentation pipeline.
//
// Subcommands: gen-data, train, explain, segment, eval, bench, sweep-seeds,
// compare. Every run is replayable: identical flags and inputs reproduce
// identical artifacts (timing fields excepted). Existing outputs are never
// overwritten without --force.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "wsss/data.hpp"
#include "wsss/explain.hpp"
#include "wsss/io.hpp"
#include "wsss/metrics.hpp"
#include "wsss/model.hpp"
#include "wsss/segment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonOpts {
  std::string dataset_dir;
  std::string checkpoint;
  std::string out;
  double tau = 0.5;
  int seeds = 10;
  std::string method = "all";
  uint64_t seed = 42;
  int threads = 1;
  bool force = false;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool needs_dataset, bool needs_checkpoint,
                bool needs_out) {
  auto* ds = cmd->add_option("--dataset-dir", o.dataset_dir, "Dataset directory");
  auto* ck = cmd->add_option("--checkpoint", o.checkpoint, "Model checkpoint directory");
  auto* out = cmd->add_option("--out", o.out, "Output directory");
  if (needs_dataset) ds->required();
  if (needs_checkpoint) ck->required();
  if (needs_out) out->required();
  cmd->add_option("--tau", o.tau, "Image-level probability threshold")
      ->default_val(0.5)
      ->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--seeds", o.seeds, "Number of SEM seed points E")->default_val(10);
  cmd->add_option("--method", o.method, "Explanation method")
      ->default_val("all")
      ->check(CLI::IsMember({"cam", "gradcam", "pcm", "sem", "all"}));
  cmd->add_option("--seed", o.seed, "RNG seed")->default_val(42);
  cmd->add_option("--threads", o.threads, "Worker cap (1 = deterministic reference path)")
      ->default_val(1)
      ->check(CLI::PositiveNumber);
  cmd->add_flag("--force", o.force, "Allow overwriting existing outputs");
  cmd->set_config("--config", "", "Read defaults from a config file");
}

// refuse to write into a non-empty directory unless --force
void claim_output(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir) && !force)
    throw std::runtime_error("output directory " + dir.string() +
                             " already exists and is not empty (use --force)");
  fs::create_directories(dir);
}

std::vector<wsss::Method> selected_methods(const std::string& method) {
  if (method == "all")
    return {wsss::Method::Cam, wsss::Method::GradCam, wsss::Method::Pcm,
            wsss::Method::Sem};
  return {wsss::method_from_name(method)};
}

std::vector<wsss::TrainSample> to_train_samples(const std::vector<wsss::Sample>& in) {
  std::vector<wsss::TrainSample> out;
  out.reserve(in.size());
  for (const wsss::Sample& s : in) out.push_back({s.image, s.labels});
  return out;
}

wsss::Model load_checkpoint(const std::string& path) {
  if (!fs::exists(fs::path(path) / "manifest.json"))
    throw std::runtime_error("checkpoint not found: " + path +
                             " (missing manifest.json)");
  return wsss::Model::load(path);
}

const std::vector<wsss::Sample>& pick_split(const wsss::LoadedDataset& ds,
                                            const std::string& split) {
  if (split == "train") return ds.data.train;
  if (split == "val") return ds.data.val;
  if (split == "test") return ds.data.test;
  throw std::runtime_error("unknown split: " + split);
}

int cmd_gen_data(const CommonOpts& o, int samples, int image_size) {
  claim_output(o.out, o.force);
  wsss::SyntheticConfig cfg;
  cfg.total_samples = samples;
  cfg.height = cfg.width = image_size;
  const wsss::Dataset ds = wsss::generate(cfg, o.seed);
  wsss::save_dataset(ds, cfg, o.seed, o.out);
  std::cout << "gen-data: wrote " << ds.train.size() << "/" << ds.val.size() << "/"
            << ds.test.size() << " train/val/test samples to " << o.out << "\n";
  return 0;
}

int cmd_train(const CommonOpts& o, int epochs, int batch_size, double lr, bool pcm) {
  claim_output(o.out, o.force);
  const wsss::LoadedDataset ds = wsss::load_dataset(o.dataset_dir);

  wsss::BackboneConfig mcfg;
  mcfg.in_channels = ds.config.channels;
  mcfg.num_classes = ds.config.num_classes;
  mcfg.pcm_branch = pcm;
  wsss::Model model(mcfg, o.seed);

  wsss::TrainConfig tcfg;
  tcfg.epochs = epochs;
  tcfg.batch_size = batch_size;
  tcfg.learning_rate = static_cast<float>(lr);
  tcfg.seed = o.seed;
  tcfg.tau = static_cast<float>(o.tau);

  const wsss::TrainResult res =
      wsss::train(model, to_train_samples(ds.data.train), to_train_samples(ds.data.val), tcfg);
  model.save(o.out);

  json report{{"loss_history", res.loss_history},
              {"val_f1_history", res.val_f1_history},
              {"best_epoch", res.best_epoch},
              {"best_val_f1", res.best_val_f1},
              {"epochs", epochs},
              {"batch_size", batch_size},
              {"learning_rate", lr},
              {"seed", o.seed},
              {"pcm_branch", pcm}};
  std::ofstream(fs::path(o.out) / "train_report.json") << report.dump(2) << "\n";
  std::cout << "train: best val image-level F1 " << res.best_val_f1 << " at epoch "
            << res.best_epoch << ", checkpoint in " << o.out << "\n";
  return 0;
}

int cmd_explain(const CommonOpts& o, const std::string& split, int index) {
  claim_output(o.out, o.force);
  const wsss::LoadedDataset ds = wsss::load_dataset(o.dataset_dir);
  const wsss::Model model = load_checkpoint(o.checkpoint);
  const auto& samples = pick_split(ds, split);
  if (index < 0 || index >= static_cast<int>(samples.size()))
    throw std::runtime_error("--index " + std::to_string(index) + " out of range for " +
                             split + " (" + std::to_string(samples.size()) + " samples)");
  const wsss::Sample& sample = samples[index];

  for (wsss::Method m : selected_methods(o.method)) {
    const auto fwd = model.forward(sample.image);
    const std::vector<int> classes =
        wsss::predict_classes(fwd.probs, static_cast<float>(o.tau));
    const wsss::HeatmapSet hm =
        wsss::compute_heatmaps(model, sample.image, m, classes, o.seeds);
    const std::string name = wsss::method_name(m);
    wsss::write_tensor(fs::path(o.out) / (name + ".heatmaps.wsst"), hm.maps);
    const int h = hm.maps.dim(1), w = hm.maps.dim(2);
    for (int c = 0; c < hm.maps.dim(0); ++c) {
      wsss::Tensor chan(wsss::Shape{h, w});
      std::copy_n(hm.maps.data.begin() + static_cast<size_t>(c) * h * w, h * w,
                  chan.data.begin());
      wsss::write_pgm(
          fs::path(o.out) / (name + ".class" + std::to_string(c) + ".pgm"), chan);
    }
  }
  std::cout << "explain: wrote heatmaps for " << split << "[" << index << "] to "
            << o.out << "\n";
  return 0;
}

int cmd_segment(const CommonOpts& o, const std::string& split, int index) {
  claim_output(o.out, o.force);
  const wsss::LoadedDataset ds = wsss::load_dataset(o.dataset_dir);
  const wsss::Model model = load_checkpoint(o.checkpoint);
  const auto& samples = pick_split(ds, split);
  const int lo = index >= 0 ? index : 0;
  const int hi = index >= 0 ? index + 1 : static_cast<int>(samples.size());
  if (lo >= static_cast<int>(samples.size()))
    throw std::runtime_error("--index out of range");
  for (wsss::Method m : selected_methods(o.method)) {
    const fs::path mdir = fs::path(o.out) / wsss::method_name(m);
    fs::create_directories(mdir);
    for (int i = lo; i < hi; ++i) {
      const wsss::SegmentationMap seg = wsss::run_wsss(
          model, samples[i].image, m, static_cast<float>(o.tau), o.seeds);
      char base[32];
      std::snprintf(base, sizeof(base), "%04d", i);
      wsss::write_label_map(mdir / (std::string(base) + ".seg.wsst"), seg.labels);
      wsss::write_ppm(mdir / (std::string(base) + ".ppm"), seg.labels);
    }
  }
  std::cout << "segment: wrote label maps to " << o.out << "\n";
  return 0;
}

int cmd_eval(const CommonOpts& o) {
  claim_output(o.out, o.force);
  const wsss::LoadedDataset ds = wsss::load_dataset(o.dataset_dir);
  const wsss::Model model = load_checkpoint(o.checkpoint);
  json out = json::object();
  for (wsss::Method m : selected_methods(o.method)) {
    wsss::Confusion conf(model.config().num_classes);
    const auto maps = wsss::segment_all(model, ds.data.test, m,
                                        static_cast<float>(o.tau), o.seeds, o.threads);
    for (size_t i = 0; i < maps.size(); ++i) conf.add(maps[i], ds.data.test[i].reference);
    const wsss::PixelF1Result f1 = wsss::f1_from_confusion(conf);
    out[wsss::method_name(m)] = {{"f1_per_class", f1.f1}, {"f1_macro", f1.macro}};
    std::cout << "eval: " << wsss::method_name(m) << " pixel macro F1 " << f1.macro
              << "\n";
  }
  std::ofstream(fs::path(o.out) / "eval.json") << out.dump(2) << "\n";
  return 0;
}

int cmd_bench(const CommonOpts& o, int repetitions) {
  claim_output(o.out, o.force);
  const wsss::LoadedDataset ds = wsss::load_dataset(o.dataset_dir);
  const wsss::Model model = load_checkpoint(o.checkpoint);
  json out = json::object();
  for (wsss::Method m : selected_methods(o.method)) {
    const wsss::SegTime t = wsss::measure_seg_time(
        model, ds.data.test, m, static_cast<float>(o.tau), o.seeds, repetitions);
    out[wsss::method_name(m)] = {{"seg_time_ms_mean", t.mean_ms},
                                 {"seg_time_ms_std", t.std_ms}};
    std::cout << "bench: " << wsss::method_name(m) << " " << t.mean_ms << " ms/image\n";
  }
  std::ofstream(fs::path(o.out) / "bench.json") << out.dump(2) << "\n";
  return 0;
}

int cmd_sweep_seeds(const CommonOpts& o, const std::vector<int>& candidates) {
  claim_output(o.out, o.force);
  const wsss::LoadedDataset ds = wsss::load_dataset(o.dataset_dir);
  const wsss::Model model = load_checkpoint(o.checkpoint);
  const wsss::SeedSweepResult r = wsss::sweep_seeds(
      model, ds.data.val, candidates, static_cast<float>(o.tau), o.threads);
  json out{{"candidates", r.candidates}, {"macro_f1", r.macro_f1}, {"best_e", r.best_e}};
  std::ofstream(fs::path(o.out) / "sweep.json") << out.dump(2) << "\n";
  std::cout << "sweep-seeds: best E = " << r.best_e << "\n";
  return 0;
}

int cmd_compare(const CommonOpts& o, bool export_maps) {
  claim_output(o.out, o.force);
  const wsss::LoadedDataset ds = wsss::load_dataset(o.dataset_dir);
  const wsss::Model model = load_checkpoint(o.checkpoint);
  wsss::CompareOptions copts;
  copts.tau = static_cast<float>(o.tau);
  copts.seed_count = o.seeds;
  copts.threads = o.threads;
  if (export_maps) copts.export_dir = fs::path(o.out) / "maps";
  const auto reports =
      wsss::compare_methods(model, ds.data.test, selected_methods(o.method), copts);
  const std::string table = wsss::report_table(reports);
  std::ofstream(fs::path(o.out) / "report.json") << wsss::report_json(reports) << "\n";
  std::ofstream(fs::path(o.out) / "report.txt") << table;
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised tree-species segmentation from image-level labels"};
  app.require_subcommand(1);

  CommonOpts o;
  int samples = 856, image_size = 64, epochs = 30, batch_size = 16, index = 0;
  int repetitions = 3;
  double lr = 0.003;
  bool pcm = true, export_maps = false;
  std::string split = "test";
  std::vector<int> candidates = {1, 5, 10, 25};

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic forest-tile corpus");
  add_common(gen, o, false, false, true);
  gen->add_option("--samples", samples, "Total sample budget (split 70/15/15)")
      ->default_val(856);
  gen->add_option("--image-size", image_size, "Tile height and width")->default_val(64);

  auto* tr = app.add_subcommand("train", "Train the multi-label classifier");
  add_common(tr, o, true, false, true);
  tr->add_option("--epochs", epochs)->default_val(30);
  tr->add_option("--batch-size", batch_size)->default_val(16);
  tr->add_option("--lr", lr, "SGD learning rate")->default_val(0.003);
  tr->add_flag("--pcm,!--no-pcm", pcm, "Attach the PCM branch (default on)");

  auto* ex = app.add_subcommand("explain", "Write heatmaps (WSST + PGM) for one sample");
  add_common(ex, o, true, true, true);
  ex->add_option("--split", split)->default_val("test")
      ->check(CLI::IsMember({"train", "val", "test"}));
  ex->add_option("--index", index, "Sample index within the split")->default_val(0);

  auto* sg = app.add_subcommand("segment", "Write segmentation maps (WSST + PPM)");
  add_common(sg, o, true, true, true);
  sg->add_option("--split", split)->default_val("test")
      ->check(CLI::IsMember({"train", "val", "test"}));
  sg->add_option("--index", index, "Sample index, -1 = whole split")->default_val(-1);

  auto* ev = app.add_subcommand("eval", "Pixel F1 on the test split");
  add_common(ev, o, true, true, true);

  auto* be = app.add_subcommand("bench", "Segmentation time per image");
  add_common(be, o, true, true, true);
  be->add_option("--repetitions", repetitions)->default_val(3)->check(CLI::Range(3, 1000));

  auto* sw = app.add_subcommand("sweep-seeds", "Pick E by validation macro F1");
  add_common(sw, o, true, true, true);
  sw->add_option("--candidates", candidates, "Candidate E values")
      ->default_val(std::vector<int>{1, 5, 10, 25});

  auto* cp = app.add_subcommand("compare", "Table of F1 / params / time per method");
  add_common(cp, o, true, true, true);
  cp->add_flag("--export-maps", export_maps, "Also write per-image label maps");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(o, samples, image_size);
    if (tr->parsed()) return cmd_train(o, epochs, batch_size, lr, pcm);
    if (ex->parsed()) return cmd_explain(o, split, index);
    if (sg->parsed()) return cmd_segment(o, split, index);
    if (ev->parsed()) return cmd_eval(o);
    if (be->parsed()) return cmd_bench(o, repetitions);
    if (sw->parsed()) return cmd_sweep_seeds(o, candidates);
    if (cp->parsed()) return cmd_compare(o, export_maps);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
