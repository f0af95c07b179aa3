#include "wsss/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "wsss/io.hpp"

namespace wsss {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e9b5ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::mt19937 sample_rng(uint64_t seed, int split, int index) {
  const uint64_t mixed =
      splitmix64(seed ^ splitmix64(static_cast<uint64_t>(split) << 32 |
                                   static_cast<uint64_t>(index)));
  return std::mt19937(static_cast<uint32_t>(mixed ^ (mixed >> 32)));
}

Sample generate_sample(const SyntheticConfig& cfg, std::mt19937& rng) {
  const int h = cfg.height, w = cfg.width, s = cfg.num_classes;
  std::uniform_int_distribution<int> n_rects_dist(cfg.min_regions, cfg.max_regions);
  std::uniform_int_distribution<int> class_dist(1, s - 1);
  std::uniform_real_distribution<float> frac_dist(cfg.min_region_fraction,
                                                  cfg.max_region_fraction);

  LabelMap ref;
  const bool full_cover =
      std::uniform_real_distribution<float>(0.0f, 1.0f)(rng) < cfg.full_cover_fraction;
  if (full_cover) {
    // fully forested tile: one stand, no Cleared pixels
    const uint8_t cls = static_cast<uint8_t>(class_dist(rng));
    ref = LabelMap(h, w);
    std::fill(ref.labels.begin(), ref.labels.end(), cls);
  }
  const bool need_background = !full_cover && cfg.max_region_fraction < 1.0f;
  bool ok = full_cover;
  for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
    ref = LabelMap(h, w);
    const int n_rects = n_rects_dist(rng);
    for (int r = 0; r < n_rects; ++r) {
      const int cls = class_dist(rng);
      const int rh = std::clamp(static_cast<int>(std::lround(frac_dist(rng) * h)), 1, h);
      const int rw = std::clamp(static_cast<int>(std::lround(frac_dist(rng) * w)), 1, w);
      const int y0 = std::uniform_int_distribution<int>(0, h - rh)(rng);
      const int x0 = std::uniform_int_distribution<int>(0, w - rw)(rng);
      for (int y = y0; y < y0 + rh; ++y)
        for (int x = x0; x < x0 + rw; ++x) ref.at(y, x) = static_cast<uint8_t>(cls);
    }
    ok = !need_background ||
         std::find(ref.labels.begin(), ref.labels.end(), 0) != ref.labels.end();
  }
  if (!ok)
    throw std::runtime_error(
        "generate: region constraints leave no background pixel after 100 attempts");

  Sample sample;
  sample.reference = ref;
  sample.image = Tensor(Shape{cfg.channels, h, w});
  std::normal_distribution<float> noise(0.0f, cfg.noise_sigma);
  for (int c = 0; c < cfg.channels; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        sample.image.at(c, y, x) = std::clamp(
            cfg.signatures[ref.at(y, x)][c] + noise(rng), 0.0f, 1.0f);

  sample.labels.assign(s, 0.0f);
  for (uint8_t v : ref.labels) sample.labels[v] = 1.0f;
  return sample;
}

json config_to_json(const SyntheticConfig& c) {
  json sig = json::array();
  for (const auto& sg : c.signatures) sig.push_back(std::vector<float>(sg.begin(), sg.end()));
  return json{{"height", c.height},
              {"width", c.width},
              {"channels", c.channels},
              {"num_classes", c.num_classes},
              {"total_samples", c.total_samples},
              {"min_regions", c.min_regions},
              {"max_regions", c.max_regions},
              {"min_region_fraction", c.min_region_fraction},
              {"max_region_fraction", c.max_region_fraction},
              {"full_cover_fraction", c.full_cover_fraction},
              {"noise_sigma", c.noise_sigma},
              {"signatures", sig}};
}

SyntheticConfig config_from_json(const json& j) {
  SyntheticConfig c;
  c.height = j.at("height");
  c.width = j.at("width");
  c.channels = j.at("channels");
  c.num_classes = j.at("num_classes");
  c.total_samples = j.at("total_samples");
  c.min_regions = j.at("min_regions");
  c.max_regions = j.at("max_regions");
  c.min_region_fraction = j.at("min_region_fraction");
  c.max_region_fraction = j.at("max_region_fraction");
  c.full_cover_fraction = j.at("full_cover_fraction");
  c.noise_sigma = j.at("noise_sigma");
  c.signatures.clear();
  for (const auto& row : j.at("signatures")) {
    std::array<float, 4> sg{};
    for (size_t i = 0; i < 4; ++i) sg[i] = row.at(i);
    c.signatures.push_back(sg);
  }
  return c;
}

const char* kSplitNames[3] = {"train", "val", "test"};

}  // namespace

void SyntheticConfig::validate() const {
  if (height < 8 || width < 8)
    throw std::invalid_argument("SyntheticConfig: image size too small");
  if (channels != 4)
    throw std::invalid_argument("SyntheticConfig: expected 4 channels (RGB+NIR)");
  if (num_classes < 2)
    throw std::invalid_argument("SyntheticConfig: need a background plus >= 1 class");
  if (static_cast<int>(signatures.size()) != num_classes)
    throw std::invalid_argument("SyntheticConfig: one signature per class required");
  if (min_regions < 1 || max_regions < min_regions)
    throw std::invalid_argument("SyntheticConfig: bad region count range");
  if (min_region_fraction <= 0.0f || max_region_fraction > 1.0f ||
      min_region_fraction > max_region_fraction)
    throw std::invalid_argument("SyntheticConfig: bad region fraction range");
  if (full_cover_fraction < 0.0f || full_cover_fraction > 1.0f)
    throw std::invalid_argument("SyntheticConfig: full_cover_fraction outside [0,1]");
  if (total_samples < 1)
    throw std::invalid_argument("SyntheticConfig: total_samples must be >= 1");
  // learnability: classes must be >= 4 sigma apart in at least one channel
  for (int a = 0; a < num_classes; ++a)
    for (int b = a + 1; b < num_classes; ++b) {
      float best = 0.0f;
      for (int c = 0; c < 4; ++c)
        best = std::max(best, std::abs(signatures[a][c] - signatures[b][c]));
      // small slack so separations of exactly 4 sigma pass under f32 rounding
      if (best + 1e-6f < 4.0f * noise_sigma)
        throw std::invalid_argument(
            "SyntheticConfig: signatures of classes " + std::to_string(a) + " and " +
            std::to_string(b) + " are closer than 4 sigma in every channel");
    }
}

SplitSizes split_sizes(int total) {
  SplitSizes s;
  s.val = static_cast<int>(total * 0.15);
  s.test = static_cast<int>(total * 0.15);
  s.train = total - s.val - s.test;
  return s;
}

Dataset generate(const SyntheticConfig& cfg, uint64_t seed) {
  cfg.validate();
  const SplitSizes sizes = split_sizes(cfg.total_samples);
  Dataset ds;
  const int counts[3] = {sizes.train, sizes.val, sizes.test};
  std::vector<Sample>* splits[3] = {&ds.train, &ds.val, &ds.test};
  for (int sp = 0; sp < 3; ++sp) {
    splits[sp]->reserve(counts[sp]);
    for (int i = 0; i < counts[sp]; ++i) {
      std::mt19937 rng = sample_rng(seed, sp, i);
      splits[sp]->push_back(generate_sample(cfg, rng));
    }
  }
  return ds;
}

void save_dataset(const Dataset& ds, const SyntheticConfig& cfg, uint64_t seed,
                  const fs::path& dir) {
  const std::vector<Sample>* splits[3] = {&ds.train, &ds.val, &ds.test};
  json split_json;
  for (int sp = 0; sp < 3; ++sp) {
    fs::create_directories(dir / "samples" / kSplitNames[sp]);
    json entries = json::array();
    for (size_t i = 0; i < splits[sp]->size(); ++i) {
      char base[32];
      std::snprintf(base, sizeof(base), "%04zu", i);
      const fs::path rel = fs::path("samples") / kSplitNames[sp] / base;
      const Sample& s = (*splits[sp])[i];
      write_tensor(dir / (rel.string() + ".img.wsst"), s.image);
      write_tensor(dir / (rel.string() + ".lbl.wsst"),
                   Tensor(Shape{static_cast<int>(s.labels.size())}, s.labels));
      write_label_map(dir / (rel.string() + ".ref.wsst"), s.reference);
      entries.push_back(rel.generic_string());
    }
    split_json[kSplitNames[sp]] = entries;
  }
  json manifest{{"format_version", 1},
                {"seed", seed},
                {"config", config_to_json(cfg)},
                {"splits", split_json}};
  std::ofstream os(dir / "manifest.json");
  if (!os)
    throw std::runtime_error("save_dataset: cannot write manifest in " + dir.string());
  os << manifest.dump(2) << "\n";
}

LoadedDataset load_dataset(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is)
    throw std::runtime_error("load_dataset: missing manifest: " +
                             (dir / "manifest.json").string());
  json manifest = json::parse(is);
  if (manifest.at("format_version") != 1)
    throw std::runtime_error("load_dataset: unsupported format version in " +
                             dir.string());
  LoadedDataset out;
  out.seed = manifest.at("seed").get<uint64_t>();
  out.config = config_from_json(manifest.at("config"));

  std::vector<Sample>* splits[3] = {&out.data.train, &out.data.val, &out.data.test};
  for (int sp = 0; sp < 3; ++sp) {
    for (const auto& rel : manifest.at("splits").at(kSplitNames[sp])) {
      const std::string base = (dir / rel.get<std::string>()).string();
      Sample s;
      s.image = read_tensor(base + ".img.wsst");
      s.labels = read_tensor(base + ".lbl.wsst").data;
      s.reference = read_label_map(base + ".ref.wsst");
      if (static_cast<int>(s.labels.size()) != out.config.num_classes)
        throw std::runtime_error("load_dataset: label length mismatch in " + base);
      splits[sp]->push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace wsss
