#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fsseg/error.hpp"
#include "fsseg/nd/tensor.hpp"

// File formats: UFT1 tensor container, plain-text manifests, PGM/PPM images,
// parameter checkpoints.
//
// UFT1 layout: magic "UFT1", u8 dtype code (0 = float32), u8 ndim,
// ndim x u32 little-endian dims, then row-major little-endian float payload.
namespace fsseg::io {

struct UftTensor {
  nd::Shape shape;
  std::vector<float> data;
};

void save_uft(const std::string& path, const nd::Shape& shape, std::span<const float> data);
UftTensor load_uft(const std::string& path);

// One "key value" pair per line; used for feature-stack layer lists
// (key = layer index) and checkpoint tensor lists (key = parameter name).
void save_manifest(const std::string& path,
                   const std::vector<std::pair<std::string, std::string>>& entries);
std::vector<std::pair<std::string, std::string>> load_manifest(const std::string& path);

struct GrayImage {
  int64_t h = 0, w = 0;
  std::vector<uint8_t> pixels;  // row-major
};

struct RgbImage {
  int64_t h = 0, w = 0;
  std::vector<uint8_t> pixels;  // row-major, 3 bytes per pixel
};

void save_pgm(const std::string& path, const GrayImage& img);
GrayImage load_pgm(const std::string& path);
void save_ppm(const std::string& path, const RgbImage& img);
RgbImage load_ppm(const std::string& path);

// Checkpoints: directory of one UFT file per tensor plus manifest.txt
// mapping parameter name -> file name, in registry order.
void save_checkpoint(const std::string& dir,
                     const std::vector<std::pair<std::string, nd::Tensor<float>>>& params);
std::vector<std::pair<std::string, UftTensor>> load_checkpoint(const std::string& dir);

// Assign loaded tensors into an existing parameter list; every name must
// match and shapes must agree.
void restore_params(std::vector<std::pair<std::string, nd::Tensor<float>>>& params,
                    const std::vector<std::pair<std::string, UftTensor>>& loaded);

uint64_t hash_bytes(const void* data, size_t n, uint64_t seed = 1469598103934665603ull);

// Order-sensitive hash of all parameter payloads; detects any bit change.
uint64_t hash_params(const std::vector<std::pair<std::string, nd::Tensor<float>>>& params);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace fsseg::io
