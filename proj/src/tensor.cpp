#include "storydiff/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace storydiff {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " elements");
  }
}

Tensor Tensor::from_matrix(const RowMatrixXf& m) {
  Tensor t({static_cast<int>(m.rows()), static_cast<int>(m.cols())});
  t.matrix() = m;
  return t;
}

int Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw DimensionError("axis out of range for " + shape_string(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

int Tensor::rows() const {
  if (shape_.empty()) return 0;
  return static_cast<int>(data_.size() / static_cast<std::size_t>(shape_.back()));
}

int Tensor::cols() const { return shape_.empty() ? 0 : shape_.back(); }

std::size_t Tensor::offset(std::initializer_list<int> index) const {
  if (index.size() != shape_.size()) {
    throw DimensionError("index rank mismatch for " + shape_string(shape_));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (int i : index) {
    if (i < 0 || i >= shape_[axis]) throw DimensionError("index out of range for " + shape_string(shape_));
    off = off * static_cast<std::size_t>(shape_[axis]) + static_cast<std::size_t>(i);
    ++axis;
  }
  return off;
}

float& Tensor::at(std::initializer_list<int> index) { return data_[offset(index)]; }
float Tensor::at(std::initializer_list<int> index) const { return data_[offset(index)]; }

MatrixMap Tensor::matrix() { return MatrixMap(data_.data(), rows(), cols()); }
ConstMatrixMap Tensor::matrix() const { return ConstMatrixMap(data_.data(), rows(), cols()); }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::rows_slice(int begin, int count) const {
  if (begin < 0 || count < 0 || begin + count > rows()) {
    throw DimensionError("row slice out of range for " + shape_string(shape_));
  }
  const auto c = static_cast<std::size_t>(cols());
  std::vector<float> out(data_.begin() + static_cast<std::ptrdiff_t>(begin * c),
                         data_.begin() + static_cast<std::ptrdiff_t>((begin + count) * c));
  if (count == 0) return Tensor();
  return Tensor({count, cols()}, std::move(out));
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  float m = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

void write_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char bytes[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                  static_cast<unsigned char>(v >> 16),
                                  static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4)) throw std::runtime_error("unexpected end of stream");
  return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) | (static_cast<std::uint32_t>(bytes[3]) << 24);
}

void write_tsr1(std::ostream& out, const Tensor& t) {
  out.write("TSR1", 4);
  write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) write_u32(out, static_cast<std::uint32_t>(d));
  for (float v : t.data()) write_u32(out, std::bit_cast<std::uint32_t>(v));
  if (!out) throw std::runtime_error("failed writing TSR1 record");
}

Tensor read_tsr1(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "TSR1", 4) != 0) {
    throw std::runtime_error("bad TSR1 magic");
  }
  const std::uint32_t rank = read_u32(in);
  if (rank == 0 || rank > 8) throw std::runtime_error("unsupported TSR1 rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    const std::uint32_t v = read_u32(in);
    if (v == 0 || v > (1u << 28)) throw std::runtime_error("bad TSR1 dimension");
    d = static_cast<int>(v);
  }
  std::vector<float> data(shape_size(shape));
  for (auto& v : data) v = std::bit_cast<float>(read_u32(in));
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace storydiff
