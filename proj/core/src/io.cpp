#include "wsss/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace wsss {

namespace fs = std::filesystem;

namespace {

[[noreturn]] void fail(const fs::path& path, long long offset, const std::string& what) {
  throw std::runtime_error("WSST: " + what + " in " + path.string() +
                           " at offset " + std::to_string(offset));
}

void put_u32le(std::ofstream& os, uint32_t v) {
  const uint8_t b[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8),
                        static_cast<uint8_t>(v >> 16), static_cast<uint8_t>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32le(std::ifstream& is) {
  uint8_t b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

struct Header {
  uint8_t dtype = 0;
  std::vector<int> dims;
  long long payload_offset = 0;
};

void write_header(std::ofstream& os, uint8_t dtype, const std::vector<int>& dims) {
  os.write(reinterpret_cast<const char*>(kWsstMagic.data()), 4);
  os.put(static_cast<char>(kWsstVersion));
  os.put(static_cast<char>(dtype));
  os.put(static_cast<char>(dims.size()));
  for (int d : dims) put_u32le(os, static_cast<uint32_t>(d));
}

Header read_header(std::ifstream& is, const fs::path& path) {
  uint8_t magic[4];
  is.read(reinterpret_cast<char*>(magic), 4);
  if (!is || std::memcmp(magic, kWsstMagic.data(), 4) != 0)
    fail(path, 0, "bad magic");
  const int version = is.get();
  if (version != kWsstVersion) fail(path, 4, "unsupported version " + std::to_string(version));
  Header h;
  h.dtype = static_cast<uint8_t>(is.get());
  const int ndim = is.get();
  if (ndim < 1 || ndim > 4) fail(path, 6, "bad ndim " + std::to_string(ndim));
  for (int i = 0; i < ndim; ++i) {
    const uint32_t d = get_u32le(is);
    if (!is || d == 0) fail(path, 7 + 4 * i, "bad dim");
    h.dims.push_back(static_cast<int>(d));
  }
  h.payload_offset = 7 + 4 * ndim;
  return h;
}

static_assert(sizeof(float) == 4);

}  // namespace

void write_tensor(const fs::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("WSST: cannot open for writing: " + path.string());
  write_header(os, kWsstF32, t.shape.dims);
  // little-endian host assumed; asserted at build configuration time
  os.write(reinterpret_cast<const char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * 4));
  if (!os) throw std::runtime_error("WSST: short write: " + path.string());
}

Tensor read_tensor(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("WSST: cannot open: " + path.string());
  const Header h = read_header(is, path);
  if (h.dtype != kWsstF32)
    fail(path, 5, "expected f32 dtype, got " + std::to_string(h.dtype));
  Tensor t{Shape(h.dims)};
  is.read(reinterpret_cast<char*>(t.data.data()),
          static_cast<std::streamsize>(t.data.size() * 4));
  if (!is) fail(path, h.payload_offset, "truncated payload");
  return t;
}

void write_label_map(const fs::path& path, const LabelMap& m) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("WSST: cannot open for writing: " + path.string());
  write_header(os, kWsstU8, {m.h, m.w});
  os.write(reinterpret_cast<const char*>(m.labels.data()),
           static_cast<std::streamsize>(m.labels.size()));
  if (!os) throw std::runtime_error("WSST: short write: " + path.string());
}

LabelMap read_label_map(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("WSST: cannot open: " + path.string());
  const Header h = read_header(is, path);
  if (h.dtype != kWsstU8)
    fail(path, 5, "expected u8 dtype, got " + std::to_string(h.dtype));
  if (h.dims.size() != 2) fail(path, 6, "label map must be rank 2");
  LabelMap m(h.dims[0], h.dims[1]);
  is.read(reinterpret_cast<char*>(m.labels.data()),
          static_cast<std::streamsize>(m.labels.size()));
  if (!is) fail(path, h.payload_offset, "truncated payload");
  return m;
}

void write_pgm(const fs::path& path, const Tensor& map) {
  if (map.rank() != 2)
    throw std::invalid_argument("write_pgm: expected HxW map, got " + map.shape.str());
  const int h = map.dim(0), w = map.dim(1);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("write_pgm: cannot open: " + path.string());
  os << "P5\n" << w << " " << h << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(w));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const float v = std::clamp(map.at(y, x), 0.0f, 1.0f);
      row[x] = static_cast<uint8_t>(std::lround(255.0f * v));
    }
    os.write(reinterpret_cast<const char*>(row.data()), w);
  }
}

const std::vector<Rgb>& class_palette() {
  // 0 Cleared, 1 Pine, 2 Spruce, 3 Beech, 4 Oak (documented in the README)
  static const std::vector<Rgb> palette = {
      {210, 200, 170}, {34, 102, 51}, {0, 60, 120}, {200, 120, 40}, {150, 40, 120},
  };
  return palette;
}

void write_ppm(const fs::path& path, const LabelMap& m) {
  const auto& palette = class_palette();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("write_ppm: cannot open: " + path.string());
  os << "P6\n" << m.w << " " << m.h << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(m.w) * 3);
  for (int y = 0; y < m.h; ++y) {
    for (int x = 0; x < m.w; ++x) {
      const Rgb c = palette[m.at(y, x) % palette.size()];
      row[3 * x] = c.r;
      row[3 * x + 1] = c.g;
      row[3 * x + 2] = c.b;
    }
    os.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
}

}  // namespace wsss
