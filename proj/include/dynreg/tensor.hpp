// Copyright (c) 2026 the dynreg authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <initializer_list>
#include <string>
#include <vector>

namespace dynreg {

using Scalar = double;
using Shape = std::vector<Eigen::Index>;

// Row-major dense views backing the matmul and convolution kernels.
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

std::string shape_str(const Shape& s);
Eigen::Index shape_numel(const Shape& s);

// Dense n-d array of doubles stored flat in row-major order.
// Invariant: data.size() == product(shape); the product of an empty
// shape list is rejected at construction.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, Eigen::ArrayXd data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, Scalar value);
  static Tensor from(Shape shape, std::initializer_list<Scalar> values);
  static Tensor scalar(Scalar value) { return full({1}, value); }

  const Shape& shape() const { return shape_; }
  Eigen::Index dim(int axis) const { return shape_.at(static_cast<size_t>(axis)); }
  int rank() const { return static_cast<int>(shape_.size()); }
  Eigen::Index numel() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Eigen::ArrayXd& array() { return data_; }
  const Eigen::ArrayXd& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Eigen::Index i) { return data_[i]; }
  Scalar operator[](Eigen::Index i) const { return data_[i]; }

  // Indexing helpers for the ranks the ops actually use.
  Scalar& at2(Eigen::Index i, Eigen::Index j) { return data_[i * shape_[1] + j]; }
  Scalar at2(Eigen::Index i, Eigen::Index j) const { return data_[i * shape_[1] + j]; }
  Scalar& at4(Eigen::Index n, Eigen::Index c, Eigen::Index h, Eigen::Index w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  Scalar at4(Eigen::Index n, Eigen::Index c, Eigen::Index h, Eigen::Index w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const { return data_.isFinite().all(); }

  // Value of a one-element tensor; rejects anything larger.
  Scalar item() const;

 private:
  Shape shape_;
  Eigen::ArrayXd data_;
};

}  // namespace dynreg
