#include "fsseg/io.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace fsseg::io {

namespace {

constexpr int64_t kMaxDim = 1 << 16;

void put_u32le(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32le(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw TruncatedFile(path + ": short header");
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}

}  // namespace

void save_uft(const std::string& path, const nd::Shape& shape, std::span<const float> data) {
  if (nd::numel(shape) != static_cast<int64_t>(data.size()))
    throw ShapeMismatch("save_uft: shape " + nd::shape_str(shape) + " vs " +
                        std::to_string(data.size()) + " values");
  for (int64_t d : shape)
    if (d > kMaxDim) throw DimOverflow(path + ": dim " + std::to_string(d));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  os.write("UFT1", 4);
  unsigned char dtype = 0, ndim = static_cast<unsigned char>(shape.size());
  os.put(static_cast<char>(dtype));
  os.put(static_cast<char>(ndim));
  for (int64_t d : shape) put_u32le(os, static_cast<uint32_t>(d));
  // payload is little-endian float32; this targets little-endian hosts
  os.write(reinterpret_cast<const char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!os) throw IoError("write failed: " + path);
}

UftTensor load_uft(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[4];
  if (!is.read(magic, 4)) throw TruncatedFile(path + ": no magic");
  if (std::string(magic, 4) != "UFT1") throw BadMagic(path);
  int dtype = is.get();
  int ndim = is.get();
  if (dtype == EOF || ndim == EOF) throw TruncatedFile(path + ": short header");
  if (dtype != 0) throw BadFormat(path + ": unknown dtype code " + std::to_string(dtype));
  UftTensor t;
  t.shape.resize(ndim);
  for (int i = 0; i < ndim; ++i) {
    uint32_t d = get_u32le(is, path);
    if (d > kMaxDim) throw DimOverflow(path + ": dim " + std::to_string(d));
    t.shape[i] = d;
  }
  int64_t n = nd::numel(t.shape);
  t.data.resize(n);
  if (!is.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(n * sizeof(float))))
    throw TruncatedFile(path + ": payload shorter than header claims");
  return t;
}

void save_manifest(const std::string& path,
                   const std::vector<std::pair<std::string, std::string>>& entries) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for write: " + path);
  for (const auto& [k, v] : entries) os << k << ' ' << v << '\n';
  if (!os) throw IoError("write failed: " + path);
}

std::vector<std::pair<std::string, std::string>> load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto sp = line.find(' ');
    if (sp == std::string::npos) throw BadFormat(path + ": bad manifest line: " + line);
    out.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  return out;
}

namespace {

// Reads one whitespace-delimited token, skipping '#' comments.
std::string next_pnm_token(std::istream& is, const std::string& path) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw TruncatedFile(path + ": unexpected end of header");
  return tok;
}

std::pair<int64_t, int64_t> read_pnm_header(std::istream& is, const std::string& path,
                                            const char* magic) {
  std::string m = next_pnm_token(is, path);
  if (m != magic) throw BadMagic(path + ": expected " + magic + ", got " + m);
  int64_t w = std::stoll(next_pnm_token(is, path));
  int64_t h = std::stoll(next_pnm_token(is, path));
  int64_t maxval = std::stoll(next_pnm_token(is, path));
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
    throw BadFormat(path + ": unsupported dimensions or maxval");
  return {h, w};
}

}  // namespace

void save_pgm(const std::string& path, const GrayImage& img) {
  if (static_cast<int64_t>(img.pixels.size()) != img.h * img.w)
    throw ShapeMismatch("save_pgm: pixel count");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  os << "P5\n" << img.w << ' ' << img.h << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw IoError("write failed: " + path);
}

GrayImage load_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  auto [h, w] = read_pnm_header(is, path, "P5");
  GrayImage img;
  img.h = h;
  img.w = w;
  img.pixels.resize(h * w);
  if (!is.read(reinterpret_cast<char*>(img.pixels.data()),
               static_cast<std::streamsize>(img.pixels.size())))
    throw TruncatedFile(path + ": pixel data");
  return img;
}

void save_ppm(const std::string& path, const RgbImage& img) {
  if (static_cast<int64_t>(img.pixels.size()) != img.h * img.w * 3)
    throw ShapeMismatch("save_ppm: pixel count");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  os << "P6\n" << img.w << ' ' << img.h << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw IoError("write failed: " + path);
}

RgbImage load_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  auto [h, w] = read_pnm_header(is, path, "P6");
  RgbImage img;
  img.h = h;
  img.w = w;
  img.pixels.resize(h * w * 3);
  if (!is.read(reinterpret_cast<char*>(img.pixels.data()),
               static_cast<std::streamsize>(img.pixels.size())))
    throw TruncatedFile(path + ": pixel data");
  return img;
}

void save_checkpoint(const std::string& dir,
                     const std::vector<std::pair<std::string, nd::Tensor<float>>>& params) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  std::vector<std::pair<std::string, std::string>> entries;
  int idx = 0;
  for (const auto& [name, t] : params) {
    char fname[32];
    std::snprintf(fname, sizeof(fname), "p%04d.uft", idx++);
    save_uft(dir + "/" + fname, t.shape(), t.values());
    entries.emplace_back(name, fname);
  }
  save_manifest(dir + "/manifest.txt", entries);
}

std::vector<std::pair<std::string, UftTensor>> load_checkpoint(const std::string& dir) {
  auto entries = load_manifest(dir + "/manifest.txt");
  std::vector<std::pair<std::string, UftTensor>> out;
  out.reserve(entries.size());
  for (const auto& [name, fname] : entries)
    out.emplace_back(name, load_uft(dir + "/" + fname));
  return out;
}

void restore_params(std::vector<std::pair<std::string, nd::Tensor<float>>>& params,
                    const std::vector<std::pair<std::string, UftTensor>>& loaded) {
  if (params.size() != loaded.size())
    throw BadFormat("checkpoint has " + std::to_string(loaded.size()) + " tensors, model has " +
                    std::to_string(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params[i];
    const auto& [lname, lt] = loaded[i];
    if (name != lname) throw BadFormat("checkpoint tensor " + lname + " where " + name + " expected");
    if (t.shape() != lt.shape)
      throw ShapeMismatch("checkpoint " + name + ": " + nd::shape_str(lt.shape) + " vs model " +
                          nd::shape_str(t.shape()));
    std::copy(lt.data.begin(), lt.data.end(), t.node->value.begin());
  }
}

uint64_t hash_bytes(const void* data, size_t n, uint64_t seed) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

uint64_t hash_params(const std::vector<std::pair<std::string, nd::Tensor<float>>>& params) {
  uint64_t h = 1469598103934665603ull;
  for (const auto& [name, t] : params) {
    h = hash_bytes(name.data(), name.size(), h);
    h = hash_bytes(t.values().data(), t.size() * sizeof(float), h);
  }
  return h;
}

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  os << content;
  if (!os) throw IoError("write failed: " + path);
}

}  // namespace fsseg::io
