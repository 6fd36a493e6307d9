// Dense row-major tensor, the single numeric currency of the stack.
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace eomt {

using Shape = std::vector<int>;

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    check(d > 0, "shape extents must be positive");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(Shape shape, S fill = S(0))
      : shape_(std::move(shape)),
        data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}
  Tensor(Shape shape, std::vector<S> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check(static_cast<std::int64_t>(data_.size()) == shape_numel(shape_),
          "data size does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(S v) { return Tensor(Shape{1}, std::vector<S>{v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }

  S& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  S operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // rank-2 access
  int rows() const { return shape_[0]; }
  int cols() const { return shape_[rank() - 1]; }
  S& at(int i, int j) { return data_[static_cast<std::size_t>(i) * cols() + j]; }
  S at(int i, int j) const { return data_[static_cast<std::size_t>(i) * cols() + j]; }

  // rank-3 access (channel, row, col)
  S& at(int c, int y, int x) {
    return data_[(static_cast<std::size_t>(c) * dim(1) + y) * dim(2) + x];
  }
  S at(int c, int y, int x) const {
    return data_[(static_cast<std::size_t>(c) * dim(1) + y) * dim(2) + x];
  }

  Eigen::Map<Mat> mat() {
    check(rank() == 2, "mat() requires a rank-2 tensor, got " + shape_str(shape_));
    return Eigen::Map<Mat>(data_.data(), shape_[0], shape_[1]);
  }
  Eigen::Map<const Mat> mat() const {
    check(rank() == 2, "mat() requires a rank-2 tensor, got " + shape_str(shape_));
    return Eigen::Map<const Mat>(data_.data(), shape_[0], shape_[1]);
  }
  Eigen::Map<Arr> flat() { return Eigen::Map<Arr>(data_.data(), numel()); }
  Eigen::Map<const Arr> flat() const { return Eigen::Map<const Arr>(data_.data(), numel()); }

  Tensor reshaped(Shape shape) const {
    check(shape_numel(shape) == numel(), "reshape: element count mismatch");
    return Tensor(std::move(shape), data_);
  }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

 private:
  Shape shape_;
  std::vector<S> data_;
};

template <typename S>
bool all_finite(const Tensor<S>& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(static_cast<double>(t[i]))) return false;
  return true;
}

template <typename S>
Tensor<S> zeros_like(const Tensor<S>& t) {
  return Tensor<S>(t.shape());
}

}  // namespace eomt
