#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <filesystem>
#include <initializer_list>
#include <string>
#include <vector>

#include "rfc/errors.hpp"

namespace rfc {

using Shape = std::vector<std::size_t>;
using MatrixRM =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Dense double tensor with row-major flat storage. Rank is dynamic; all math
// runs through Eigen maps over the flat buffer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    data_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(count(shape_)));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    t.data_.setConstant(v);
    return t;
  }

  static Tensor scalar(double v) { return full({1}, v); }

  static Tensor from(Shape shape, std::initializer_list<double> values) {
    Tensor t(std::move(shape));
    check_dim(values.size() == t.size(), "Tensor::from: value count mismatch");
    std::size_t i = 0;
    for (double v : values) t.data_[static_cast<Eigen::Index>(i++)] = v;
    return t;
  }

  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return static_cast<std::size_t>(data_.size()); }
  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t axis) const {
    check_dim(axis < shape_.size(), "Tensor::dim: axis out of range");
    return shape_[axis];
  }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[static_cast<Eigen::Index>(i)]; }
  double operator[](std::size_t i) const { return data_[static_cast<Eigen::Index>(i)]; }

  double& at(std::size_t i, std::size_t j) {
    return data_[static_cast<Eigen::Index>(i * shape_[1] + j)];
  }
  double at(std::size_t i, std::size_t j) const {
    return data_[static_cast<Eigen::Index>(i * shape_[1] + j)];
  }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[static_cast<Eigen::Index>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[static_cast<Eigen::Index>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data_[static_cast<Eigen::Index>(
        ((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }
  double at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return data_[static_cast<Eigen::Index>(
        ((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }

  // Row-major matrix view; rows*cols must cover the whole buffer.
  Eigen::Map<MatrixRM> matrix(std::size_t rows, std::size_t cols) {
    check_dim(rows * cols == size(), "Tensor::matrix: extent product mismatch");
    return {data_.data(), static_cast<Eigen::Index>(rows),
            static_cast<Eigen::Index>(cols)};
  }
  Eigen::Map<const MatrixRM> matrix(std::size_t rows, std::size_t cols) const {
    check_dim(rows * cols == size(), "Tensor::matrix: extent product mismatch");
    return {data_.data(), static_cast<Eigen::Index>(rows),
            static_cast<Eigen::Index>(cols)};
  }

  Eigen::Map<Eigen::ArrayXd> array() { return {data_.data(), data_.size()}; }
  Eigen::Map<const Eigen::ArrayXd> array() const {
    return {data_.data(), data_.size()};
  }

  void fill(double v) { data_.setConstant(v); }

  bool all_finite() const {
    for (Eigen::Index i = 0; i < data_.size(); ++i)
      if (!std::isfinite(data_[i])) return false;
    return true;
  }

  static std::size_t count(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
  }

 private:
  Shape shape_;
  Eigen::VectorXd data_;
};

// On-disk tensor record: magic "RFCT", u32 LE rank, rank u32 LE extents,
// then size doubles, IEEE-754 LE, row-major.
void save_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace rfc
