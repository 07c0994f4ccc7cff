#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "rose/error.hpp"

namespace rose {

// Dense row-major matrix of doubles. Rows are observations.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ConfigError("matrix data size does not match its shape");
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return rows_ == 0; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const {
    return {data_.data() + i * cols_, cols_};
  }

  const std::vector<double>& data() const { return data_; }

  Matrix select_rows(std::span<const std::size_t> idx) const {
    Matrix out(idx.size(), cols_);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto src = row(idx[r]);
      std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
  }

  // Returns [column | this], used for regressions on (X, Z).
  Matrix prepend_column(std::span<const double> col) const {
    Matrix out(rows_, cols_ + 1);
    for (std::size_t i = 0; i < rows_; ++i) {
      out(i, 0) = col[i];
      for (std::size_t j = 0; j < cols_; ++j) out(i, j + 1) = (*this)(i, j);
    }
    return out;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// One draw S = (Y, X, Z).
struct Observation {
  double y = 0.0;
  double x = 0.0;
  std::span<const double> z;
};

// Row-aligned response, scalar covariate of interest and confounders.
struct Dataset {
  std::vector<double> y;
  std::vector<double> x;
  Matrix z;

  std::size_t size() const { return y.size(); }
  std::size_t dim() const { return z.cols(); }

  Observation operator[](std::size_t i) const { return {y[i], x[i], z.row(i)}; }

  void validate() const {
    if (x.size() != y.size() || z.rows() != y.size()) {
      throw ConfigError("dataset columns are not row-aligned");
    }
    if (!y.empty() && z.cols() == 0) {
      throw ConfigError("dataset needs at least one confounder column");
    }
    for (std::size_t i = 0; i < y.size(); ++i) {
      bool ok = std::isfinite(y[i]) && std::isfinite(x[i]);
      for (double v : z.row(i)) ok = ok && std::isfinite(v);
      if (!ok) throw NumericError("non-finite entry in dataset", i);
    }
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out;
    out.y.reserve(idx.size());
    out.x.reserve(idx.size());
    for (std::size_t i : idx) {
      out.y.push_back(y[i]);
      out.x.push_back(x[i]);
    }
    out.z = z.select_rows(idx);
    return out;
  }
};

}  // namespace rose
