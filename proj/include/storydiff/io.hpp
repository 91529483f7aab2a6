#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "storydiff/autodiff.hpp"

namespace storydiff {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::uint64_t fnv1a64(std::span<const unsigned char> bytes);
std::uint64_t fnv1a64(std::string_view text);
std::string hex64(std::uint64_t v);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);
/// hex64 of fnv1a64 over the file bytes.
std::string file_digest(const std::filesystem::path& path);

/// Binary P6, maxval 255. Pixel = clamp((v + 1) / 2) * 255, rounded half away from zero.
std::string encode_ppm(const Tensor& image);
Tensor decode_ppm(std::string_view bytes);
void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// u32 count, then per tensor a u32 byte length, the UTF-8 name and a TSR1 record.
std::string encode_named_tensors(const NamedTensors& tensors);
NamedTensors decode_named_tensors(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const ParameterRefs& params, const NamedTensors& extra = {});
/// Fills every parameter by name; shapes must match. Returns the tensors that
/// are not parameters.
NamedTensors load_checkpoint(const std::filesystem::path& path, const ParameterRefs& params);

}  // namespace storydiff
