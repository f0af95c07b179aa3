#include "wsss/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>
#include <thread>

#include <json.hpp>

#include "wsss/io.hpp"

namespace wsss {

using nlohmann::json;

void Confusion::add(const LabelMap& pred, const LabelMap& ref) {
  if (pred.h != ref.h || pred.w != ref.w)
    throw std::invalid_argument("Confusion::add: prediction " + std::to_string(pred.h) +
                                "x" + std::to_string(pred.w) + " vs reference " +
                                std::to_string(ref.h) + "x" + std::to_string(ref.w));
  for (size_t p = 0; p < pred.labels.size(); ++p) {
    if (pred.labels[p] >= num_classes || ref.labels[p] >= num_classes)
      throw std::invalid_argument("Confusion::add: label out of range");
    at(ref.labels[p], pred.labels[p])++;
  }
}

PixelF1Result f1_from_confusion(const Confusion& conf) {
  const int s = conf.num_classes;
  PixelF1Result r;
  r.confusion = conf;
  r.f1.resize(s);
  r.precision.resize(s);
  r.recall.resize(s);
  float macro_sum = 0.0f;
  int macro_n = 0;
  for (int c = 0; c < s; ++c) {
    const long long tp = conf.at(c, c);
    long long fp = 0, fn = 0;
    for (int o = 0; o < s; ++o) {
      if (o == c) continue;
      fp += conf.at(o, c);
      fn += conf.at(c, o);
    }
    const bool present = tp + fp + fn > 0;
    r.precision[c] = tp + fp > 0 ? static_cast<float>(tp) / (tp + fp) : (present ? 0.0f : 1.0f);
    r.recall[c] = tp + fn > 0 ? static_cast<float>(tp) / (tp + fn) : (present ? 0.0f : 1.0f);
    // 0/0 counts as 1: the class is absent from both maps
    r.f1[c] = present ? 2.0f * tp / static_cast<float>(2 * tp + fp + fn) : 1.0f;
    if (present) {
      macro_sum += r.f1[c];
      ++macro_n;
    }
  }
  r.macro = macro_n > 0 ? macro_sum / macro_n : 1.0f;
  return r;
}

PixelF1Result pixel_f1(const LabelMap& pred, const LabelMap& ref, int num_classes) {
  Confusion conf(num_classes);
  conf.add(pred, ref);
  return f1_from_confusion(conf);
}

SegmentationMap run_wsss(const Model& model, const Tensor& image, Method method,
                         float tau, int seed_count) {
  const auto fwd = model.forward(image);
  const std::vector<int> classes = predict_classes(fwd.probs, tau);
  const HeatmapSet hm = compute_heatmaps(model, image, method, classes, seed_count);
  return assemble(hm, classes, fwd.probs, image.dim(1), image.dim(2));
}

SegTime measure_seg_time(const Model& model, const std::vector<Sample>& images,
                         Method method, float tau, int seed_count, int repetitions) {
  if (repetitions < 3)
    throw std::invalid_argument("measure_seg_time: repetitions must be >= 3");
  if (images.empty())
    throw std::invalid_argument("measure_seg_time: empty image set");
  using clock = std::chrono::steady_clock;
  std::vector<double> per_rep;
  for (int rep = 0; rep < repetitions; ++rep) {
    const auto t0 = clock::now();
    for (const Sample& s : images) run_wsss(model, s.image, method, tau, seed_count);
    const auto t1 = clock::now();
    per_rep.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count() /
                      static_cast<double>(images.size()));
  }
  std::vector<double> sorted = per_rep;
  std::sort(sorted.begin(), sorted.end());
  SegTime out;
  out.mean_ms = sorted[sorted.size() / 2];
  double mean = 0.0;
  for (double v : per_rep) mean += v;
  mean /= per_rep.size();
  double var = 0.0;
  for (double v : per_rep) var += (v - mean) * (v - mean);
  out.std_ms = std::sqrt(var / per_rep.size());
  return out;
}

std::vector<LabelMap> segment_all(const Model& model, const std::vector<Sample>& set,
                                  Method method, float tau, int seed_count,
                                  int threads) {
  std::vector<LabelMap> out(set.size());
  if (threads <= 1 || set.size() < 2) {
    for (size_t i = 0; i < set.size(); ++i)
      out[i] = run_wsss(model, set[i].image, method, tau, seed_count).labels;
    return out;
  }
  const int n_workers = std::min<int>(threads, static_cast<int>(set.size()));
  std::vector<std::thread> pool;
  std::vector<long long> backward(n_workers, 0);
  std::atomic<size_t> next{0};
  for (int t = 0; t < n_workers; ++t) {
    pool.emplace_back([&, t] {
      Model local = model;  // each worker owns its forward cache
      local.reset_backward_counter();
      for (size_t i = next.fetch_add(1); i < set.size(); i = next.fetch_add(1))
        out[i] = run_wsss(local, set[i].image, method, tau, seed_count).labels;
      backward[t] = local.backward_passes();
    });
  }
  for (auto& th : pool) th.join();
  for (long long b : backward) model.add_backward_passes(b);
  return out;
}

namespace {

float sem_macro_f1(const Model& model, const std::vector<Sample>& set, float tau,
                   int seed_count, int threads) {
  Confusion conf(model.config().num_classes);
  const std::vector<LabelMap> maps =
      segment_all(model, set, Method::Sem, tau, seed_count, threads);
  for (size_t i = 0; i < set.size(); ++i) conf.add(maps[i], set[i].reference);
  return f1_from_confusion(conf).macro;
}

}  // namespace

SeedSweepResult sweep_seeds(const Model& model, const std::vector<Sample>& val_set,
                            const std::vector<int>& candidates, float tau,
                            int threads) {
  if (candidates.empty())
    throw std::invalid_argument("sweep_seeds: no candidates");
  const std::set<int> unique(candidates.begin(), candidates.end());
  SeedSweepResult r;
  r.candidates.assign(unique.begin(), unique.end());
  float best = -1.0f;
  for (int e : r.candidates) {
    const float f1 = sem_macro_f1(model, val_set, tau, e, threads);
    r.macro_f1.push_back(f1);
    if (f1 > best) {
      best = f1;
      r.best_e = e;
    }
  }
  return r;
}

std::vector<EvalReport> compare_methods(const Model& model,
                                        const std::vector<Sample>& test_set,
                                        const std::vector<Method>& methods,
                                        const CompareOptions& opts) {
  namespace fs = std::filesystem;
  const int s = model.config().num_classes;
  const long long pcm_params = model.pcm() ? model.pcm()->param_count() : 0;

  std::vector<EvalReport> reports;
  for (Method method : methods) {
    EvalReport rep;
    rep.method = method;
    rep.params =
        method == Method::Pcm ? model.param_count() : model.param_count() - pcm_params;

    fs::path method_dir;
    if (opts.export_dir) {
      method_dir = *opts.export_dir / method_name(method);
      fs::create_directories(method_dir);
    }

    Confusion conf(s);
    model.reset_backward_counter();
    const std::vector<LabelMap> maps =
        segment_all(model, test_set, method, opts.tau, opts.seed_count, opts.threads);
    for (size_t i = 0; i < test_set.size(); ++i) {
      conf.add(maps[i], test_set[i].reference);
      if (opts.export_dir) {
        char base[32];
        std::snprintf(base, sizeof(base), "%04zu", i);
        write_label_map(method_dir / (std::string(base) + ".seg.wsst"), maps[i]);
        write_ppm(method_dir / (std::string(base) + ".ppm"), maps[i]);
      }
    }
    rep.backward_passes = model.backward_passes();
    const PixelF1Result f1 = f1_from_confusion(conf);
    rep.f1_per_class = f1.f1;
    rep.precision = f1.precision;
    rep.recall = f1.recall;
    rep.f1_macro = f1.macro;
    rep.confusion = f1.confusion;

    const SegTime t = measure_seg_time(model, test_set, method, opts.tau,
                                       opts.seed_count, opts.timing_repetitions);
    rep.seg_time_ms_mean = t.mean_ms;
    rep.seg_time_ms_std = t.std_ms;
    reports.push_back(std::move(rep));
  }
  return reports;
}

std::string report_table(const std::vector<EvalReport>& reports) {
  char buf[128];
  std::string out = "Metric            ";
  for (const EvalReport& r : reports) {
    std::snprintf(buf, sizeof(buf), "%12s", method_name(r.method).c_str());
    out += buf;
  }
  out += "\n";
  auto row = [&](const char* label, auto value) {
    std::string line = label;
    line.resize(18, ' ');
    for (const EvalReport& r : reports) {
      std::snprintf(buf, sizeof(buf), "%12s", value(r).c_str());
      line += buf;
    }
    out += line + "\n";
  };
  row("F1 (%)", [&](const EvalReport& r) {
    std::snprintf(buf, sizeof(buf), "%.2f", 100.0f * r.f1_macro);
    return std::string(buf);
  });
  row("# Param", [&](const EvalReport& r) { return std::to_string(r.params); });
  row("Seg. Time (ms)", [&](const EvalReport& r) {
    std::snprintf(buf, sizeof(buf), "%.3f", r.seg_time_ms_mean);
    return std::string(buf);
  });
  row("Backward passes", [&](const EvalReport& r) { return std::to_string(r.backward_passes); });
  return out;
}

std::string report_json(const std::vector<EvalReport>& reports) {
  json out = json::object();
  for (const EvalReport& r : reports) {
    json conf = json::array();
    for (int ref = 0; ref < r.confusion.num_classes; ++ref) {
      json row = json::array();
      for (int pred = 0; pred < r.confusion.num_classes; ++pred)
        row.push_back(r.confusion.at(ref, pred));
      conf.push_back(row);
    }
    out[method_name(r.method)] = {
        {"f1_per_class", r.f1_per_class},
        {"f1_macro", r.f1_macro},
        {"precision_per_class", r.precision},
        {"recall_per_class", r.recall},
        {"confusion", conf},
        {"params", r.params},
        {"seg_time_ms_mean", r.seg_time_ms_mean},
        {"seg_time_ms_std", r.seg_time_ms_std},
        {"backward_passes", r.backward_passes},
    };
  }
  return out.dump(2);
}

}  // namespace wsss
