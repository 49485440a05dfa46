#pragma once

#include <Eigen/Core>

#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sat3d/grid.hpp"

namespace sat3d::metrics {

// Boundary faces of a mask. Voxel centres sit at index * spacing, so a face
// centroid is the voxel centre shifted by half a voxel along its normal axis.
struct SurfaceMesh {
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> centroids;
  Eigen::VectorXd areas;

  Eigen::Index size() const { return areas.size(); }
  bool empty() const { return areas.size() == 0; }
  double total_area() const { return areas.sum(); }
};

struct MetricReport {
  double dsc = 0;
  double iou = 0;
  double rve = 0;
  double hd95 = 0;  // mm
  double assd = 0;  // mm
  bool empty_flag = false;  // either mask empty; distances may be a sentinel
};

struct MetricOptions {
  // Distance reported when the prediction is empty. Defaults to the gt grid
  // diagonal in millimetres.
  std::optional<double> empty_sentinel_mm;
};

// Nearest-neighbour resampling of pred onto gt's grid. Grids share the origin
// (voxel i sits at i * spacing); samples falling outside pred are background.
BinaryMask align_to_gt(const BinaryMask& pred, const BinaryMask& gt);

double dsc(const BinaryMask& pred, const BinaryMask& gt);
double iou(const BinaryMask& pred, const BinaryMask& gt);
double rve(const BinaryMask& pred, const BinaryMask& gt, Spacing spacing);

SurfaceMesh extract_surface(const BinaryMask& mask, Spacing spacing);

// Distance from every surfel of `from` to the nearest surfel centroid of `to`.
Eigen::VectorXd directed_distances(const SurfaceMesh& from, const SurfaceMesh& to);

// Smallest distance whose cumulative area reaches q of the total.
double weighted_percentile(const Eigen::VectorXd& dist, const Eigen::VectorXd& area, double q);

double hd95(const BinaryMask& pred, const BinaryMask& gt, Spacing spacing);
double assd(const BinaryMask& pred, const BinaryMask& gt, Spacing spacing);

MetricReport report(const BinaryMask& pred, const BinaryMask& gt, Spacing spacing,
                    const MetricOptions& opts = {});

void to_json(nlohmann::json& j, const MetricReport& r);

// case_id,dsc,iou,rve,hd95_mm,assd_mm,empty_flag
void write_csv(std::ostream& os, const std::vector<std::pair<std::string, MetricReport>>& rows);

}  // namespace sat3d::metrics
