#include "vqi/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

namespace vqi {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

void expect_shape(const Shape& actual, const Shape& expected, const char* what) {
  if (actual == expected) return;
  if (actual.size() != expected.size()) {
    throw ShapeError(std::string(what) + ": rank " + std::to_string(actual.size()) + " " +
                     shape_str(actual) + ", expected rank " + std::to_string(expected.size()) +
                     " " + shape_str(expected));
  }
  for (std::size_t i = 0; i < actual.size(); ++i) {
    if (actual[i] != expected[i]) {
      throw ShapeError(std::string(what) + ": dimension " + std::to_string(i) + " is " +
                       std::to_string(actual[i]) + ", expected " + std::to_string(expected[i]) +
                       " (got " + shape_str(actual) + ")");
    }
  }
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor " + shape_str(shape_) + " needs " + std::to_string(shape_numel(shape_)) +
                     " values, got " + std::to_string(data_.size()));
  }
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  }
  return shape_[axis];
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
void Tensor<T>::reshape(Shape shape) {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  shape_ = std::move(shape);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

namespace {

constexpr std::array<char, 4> kMagic = {'T', 'N', 'S', 'R'};

void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("TNSR: truncated stream");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

}  // namespace

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(kMagic.data(), kMagic.size());
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) put_u32(os, static_cast<std::uint32_t>(e));
  for (std::size_t i = 0; i < t.numel(); ++i) {
    put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(t[i])));
  }
  if (!os) throw std::runtime_error("TNSR: write failed");
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) {
    throw std::runtime_error("TNSR: bad magic");
  }
  const std::uint32_t rank = get_u32(is);
  if (rank > 8) throw std::runtime_error("TNSR: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = get_u32(is);
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(std::bit_cast<float>(get_u32(is)));
  return Tensor<T>(std::move(shape), std::move(values));
}

template class Tensor<float>;
template class Tensor<double>;
template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);

}  // namespace vqi
