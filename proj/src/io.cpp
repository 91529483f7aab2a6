#include "storydiff/io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace storydiff {

std::uint64_t fnv1a64(std::span<const unsigned char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t fnv1a64(std::string_view text) {
  return fnv1a64(std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

std::string file_digest(const std::filesystem::path& path) { return hex64(fnv1a64(read_file(path))); }

std::string encode_ppm(const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw DimensionError("encode_ppm: expected [H, W, 3], got " + shape_string(image.shape()));
  std::string out = "P6\n" + std::to_string(image.dim(1)) + " " + std::to_string(image.dim(0)) + "\n255\n";
  for (float v : image.data()) {
    const double c = std::clamp((static_cast<double>(v) + 1.0) / 2.0, 0.0, 1.0) * 255.0;
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::round(c))));
  }
  return out;
}

Tensor decode_ppm(std::string_view bytes) {
  std::size_t pos = 0;
  const auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  const auto number = [&] {
    skip_space();
    int v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + (bytes[pos++] - '0');
      any = true;
      if (v > 1 << 20) throw IoError("PPM header value too large");
    }
    if (!any) throw IoError("malformed PPM header");
    return v;
  };
  if (bytes.substr(0, 2) != "P6") throw IoError("not a binary PPM (P6)");
  pos = 2;
  const int w = number();
  const int h = number();
  const int maxval = number();
  if (maxval != 255) throw IoError("only maxval 255 is supported");
  ++pos;  // single whitespace before the raster
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3;
  if (bytes.size() < pos + n) throw IoError("truncated PPM raster");
  Tensor t({h, w, 3});
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = static_cast<float>(static_cast<unsigned char>(bytes[pos + i]) / 255.0 * 2.0 - 1.0);
  }
  return t;
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) { write_file(path, encode_ppm(image)); }

Tensor read_ppm(const std::filesystem::path& path) { return decode_ppm(read_file(path)); }

std::string encode_named_tensors(const NamedTensors& tensors) {
  std::ostringstream out(std::ios::binary);
  write_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tsr1(out, t);
  }
  return out.str();
}

NamedTensors decode_named_tensors(std::string_view bytes) {
  std::istringstream in(std::string(bytes), std::ios::binary);
  NamedTensors out;
  const std::uint32_t count = read_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = read_u32(in);
    if (len > 4096) throw IoError("tensor name too long");
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (!in) throw IoError("truncated tensor name");
    out.emplace_back(std::move(name), read_tsr1(in));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterRefs& params, const NamedTensors& extra) {
  NamedTensors all;
  for (const Parameter* p : params) all.emplace_back(p->name, p->value());
  all.insert(all.end(), extra.begin(), extra.end());
  write_file(path, encode_named_tensors(all));
}

NamedTensors load_checkpoint(const std::filesystem::path& path, const ParameterRefs& params) {
  NamedTensors stored = decode_named_tensors(read_file(path));
  std::map<std::string, Tensor*> by_name;
  for (auto& [name, t] : stored) {
    if (!by_name.emplace(name, &t).second) throw IoError(path.string() + ": duplicate tensor " + name);
  }
  for (Parameter* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw IoError(path.string() + ": missing tensor " + p->name);
    if (it->second->shape() != p->value().shape()) {
      throw IoError(path.string() + ": tensor " + p->name + " has shape " + shape_string(it->second->shape()) +
                    ", expected " + shape_string(p->value().shape()));
    }
    p->var.mutable_value() = *it->second;
    by_name.erase(it);
  }
  NamedTensors rest;
  for (auto& [name, t] : stored) {
    if (by_name.count(name)) rest.emplace_back(name, t);
  }
  return rest;
}

}  // namespace storydiff
