#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sg2im {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dense row-major tensor. Values are owned; copies are deep.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape_numel(shape))
      throw ShapeError("tensor data size " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  bool empty() const { return data.empty(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  T& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace sg2im
