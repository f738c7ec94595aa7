#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace deepthal::nn {

/// Channel-major 4-D shape: C channels over an X*Y*Z grid, z fastest.
struct Shape {
  int c = 0;
  int x = 0;
  int y = 0;
  int z = 0;

  std::int64_t voxels() const { return std::int64_t(x) * y * z; }
  std::int64_t size() const { return voxels() * c; }
  std::array<int, 3> grid() const { return {x, y, z}; }

  friend bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << c << ", " << x << ", " << y << ", " << z << ")";
    return os.str();
  }
};

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense activation tensor. Rows are channels, columns are voxels, so
/// channel-mixing operations are plain matrix products.
template <typename Scalar>
struct Tensor {
  Shape shape;
  RowMatrix<Scalar> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(s), data(RowMatrix<Scalar>::Zero(s.c, s.voxels())) {}
  Tensor(Shape s, RowMatrix<Scalar> d) : shape(s), data(std::move(d)) {
    if (data.rows() != s.c || data.cols() != s.voxels())
      throw std::invalid_argument("tensor data does not match shape " + s.str());
  }

  static Tensor zeros(Shape s) { return Tensor(s); }
  static Tensor constant(Shape s, Scalar v) {
    return Tensor(s, RowMatrix<Scalar>::Constant(s.c, s.voxels(), v));
  }

  std::int64_t index(int x, int y, int z) const {
    return (std::int64_t(x) * shape.y + y) * shape.z + z;
  }
  Scalar& at(int c, int x, int y, int z) { return data(c, index(x, y, z)); }
  Scalar at(int c, int x, int y, int z) const { return data(c, index(x, y, z)); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape, data.template cast<Other>());
  }
};

}  // namespace deepthal::nn
