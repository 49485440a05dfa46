#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstdint>
#include <string>

#include "sat3d/errors.hpp"

namespace sat3d {

using Voxel = std::array<int, 3>;

// Spatial extent of a grid along (H, W, D).
struct Extent3 {
  int h = 0;
  int w = 0;
  int d = 0;

  std::int64_t count() const { return std::int64_t(h) * w * d; }
  bool contains(const Voxel& v) const {
    return v[0] >= 0 && v[0] < h && v[1] >= 0 && v[1] < w && v[2] >= 0 && v[2] < d;
  }
  std::int64_t offset(int i, int j, int k) const { return (std::int64_t(i) * w + j) * d + k; }
  std::int64_t offset(const Voxel& v) const { return offset(v[0], v[1], v[2]); }
  Voxel voxel(std::int64_t off) const {
    const int k = int(off % d);
    off /= d;
    return {int(off / w), int(off % w), k};
  }
  int operator[](int axis) const { return axis == 0 ? h : (axis == 1 ? w : d); }
  friend bool operator==(const Extent3&, const Extent3&) = default;
};

inline Extent3 cube(int side) { return {side, side, side}; }

// Millimetres per voxel. A default-constructed spacing is "unset" (all zero).
struct Spacing {
  double sx = 0.0;
  double sy = 0.0;
  double sz = 0.0;

  bool valid() const {
    return std::isfinite(sx) && std::isfinite(sy) && std::isfinite(sz) && sx > 0 && sy > 0 &&
           sz > 0;
  }
  double operator[](int axis) const { return axis == 0 ? sx : (axis == 1 ? sy : sz); }
  double voxel_volume() const { return sx * sy * sz; }
  friend bool operator==(const Spacing&, const Spacing&) = default;
};

inline Spacing isotropic(double s) { return {s, s, s}; }

// Dense C x H x W x D grid in C order (channel-major, then H, W, D).
template <typename Scalar>
class Grid {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Grid() = default;
  Grid(int channels, Extent3 extent, Scalar fill = Scalar(0))
      : channels_(channels), extent_(extent) {
    if (channels < 1 || extent.h < 1 || extent.w < 1 || extent.d < 1)
      throw ShapeError("grid dimensions must be >= 1");
    data_ = Array::Constant(channels * extent.count(), fill);
  }
  Grid(Extent3 extent, Scalar fill = Scalar(0)) : Grid(1, extent, fill) {}

  int channels() const { return channels_; }
  const Extent3& extent() const { return extent_; }
  std::int64_t voxels() const { return extent_.count(); }
  std::int64_t size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Array& values() { return data_; }
  const Array& values() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator()(int c, int i, int j, int k) { return data_[index(c, i, j, k)]; }
  Scalar operator()(int c, int i, int j, int k) const { return data_[index(c, i, j, k)]; }
  Scalar& at(const Voxel& v, int c = 0) { return (*this)(c, v[0], v[1], v[2]); }
  Scalar at(const Voxel& v, int c = 0) const { return (*this)(c, v[0], v[1], v[2]); }

  // One channel as a flat column over H*W*D.
  auto channel(int c) { return data_.segment(std::int64_t(c) * voxels(), voxels()); }
  auto channel(int c) const { return data_.segment(std::int64_t(c) * voxels(), voxels()); }

  template <typename Other>
  Grid<Other> cast() const {
    Grid<Other> out(channels_, extent_);
    out.values() = data_.template cast<Other>();
    return out;
  }

  bool same_shape(const Grid& o) const {
    return channels_ == o.channels_ && extent_ == o.extent_;
  }

  friend bool operator==(const Grid& a, const Grid& b) {
    return a.same_shape(b) && (a.data_ == b.data_).all();
  }

 private:
  std::int64_t index(int c, int i, int j, int k) const {
    return std::int64_t(c) * voxels() + extent_.offset(i, j, k);
  }

  int channels_ = 0;
  Extent3 extent_{};
  Array data_;
};

using ScalarGrid = Grid<float>;
using LabelGrid = Grid<std::uint8_t>;
// Critic output: one channel of per-voxel confidence in [0, 1].
using ConfidenceMap = Grid<float>;

struct Volume {
  ScalarGrid data;
  Spacing spacing = isotropic(1.0);
  std::string modality;

  Extent3 extent() const { return data.extent(); }
};

struct BinaryMask {
  LabelGrid data;
  Spacing spacing = isotropic(1.0);

  BinaryMask() = default;
  explicit BinaryMask(Extent3 extent, Spacing s = isotropic(1.0))
      : data(1, extent, 0), spacing(s) {}

  Extent3 extent() const { return data.extent(); }
  std::int64_t count() const { return data.values().template cast<std::int64_t>().sum(); }
  bool any() const { return (data.values() != 0).any(); }
  std::uint8_t at(const Voxel& v) const { return data.at(v); }
  std::uint8_t& at(const Voxel& v) { return data.at(v); }
  friend bool operator==(const BinaryMask& a, const BinaryMask& b) { return a.data == b.data; }
};

// Threshold a probability or confidence grid with a strict ">" rule.
template <typename Scalar>
BinaryMask threshold(const Grid<Scalar>& g, Scalar level, Spacing spacing = isotropic(1.0)) {
  BinaryMask m(g.extent(), spacing);
  m.data.values() = (g.channel(0) > level).template cast<std::uint8_t>();
  return m;
}

}  // namespace sat3d
