#include "sat3d/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include <boost/geometry.hpp>
#include <boost/geometry/index/rtree.hpp>

namespace sat3d::metrics {

namespace bg = boost::geometry;
namespace bgi = boost::geometry::index;

namespace {

using Point = bg::model::point<double, 3, bg::cs::cartesian>;

void check_same_grid(const BinaryMask& a, const BinaryMask& b) {
  if (!(a.extent() == b.extent()))
    throw ShapeError("masks must share a grid; call align_to_gt first");
}

std::int64_t overlap(const BinaryMask& a, const BinaryMask& b) {
  return ((a.data.values() != 0) && (b.data.values() != 0)).count();
}

double grid_diagonal(const BinaryMask& m, Spacing s) {
  const Extent3 e = m.extent();
  return std::sqrt(std::pow(e.h * s.sx, 2) + std::pow(e.w * s.sy, 2) + std::pow(e.d * s.sz, 2));
}

void check_spacing(Spacing s) {
  if (!s.valid()) throw MetadataError("voxel spacing missing or non-positive");
}

}  // namespace

BinaryMask align_to_gt(const BinaryMask& pred, const BinaryMask& gt) {
  if (!pred.spacing.valid() || !gt.spacing.valid())
    throw MetadataError("both masks need a valid voxel spacing");
  if (pred.extent() == gt.extent() && pred.spacing == gt.spacing) return pred;
  const Extent3 te = gt.extent(), se = pred.extent();
  BinaryMask out(te, gt.spacing);
  std::array<std::vector<int>, 3> src;
  for (int a = 0; a < 3; ++a) {
    const double r = gt.spacing[a] / pred.spacing[a];
    src[a].resize(te[a]);
    for (int i = 0; i < te[a]; ++i) {
      const long s = std::lround(i * r);
      src[a][i] = (s >= 0 && s < se[a]) ? int(s) : -1;
    }
  }
  for (int i = 0; i < te.h; ++i) {
    if (src[0][i] < 0) continue;
    for (int j = 0; j < te.w; ++j) {
      if (src[1][j] < 0) continue;
      for (int k = 0; k < te.d; ++k) {
        if (src[2][k] < 0) continue;
        out.at({i, j, k}) = pred.at({src[0][i], src[1][j], src[2][k]}) ? 1 : 0;
      }
    }
  }
  return out;
}

double dsc(const BinaryMask& pred, const BinaryMask& gt) {
  check_same_grid(pred, gt);
  const double p = pred.count(), g = gt.count();
  if (p + g == 0) return 1.0;
  return 2.0 * double(overlap(pred, gt)) / (p + g);
}

double iou(const BinaryMask& pred, const BinaryMask& gt) {
  check_same_grid(pred, gt);
  const double inter = double(overlap(pred, gt));
  const double uni = double(pred.count()) + double(gt.count()) - inter;
  if (uni == 0) return 1.0;
  return inter / uni;
}

double rve(const BinaryMask& pred, const BinaryMask& gt, Spacing spacing) {
  check_same_grid(pred, gt);
  check_spacing(spacing);
  if (!gt.any()) throw UndefinedMetricError("relative volume error undefined for empty ground truth");
  const double v = spacing.voxel_volume();
  const double vp = double(pred.count()) * v, vg = double(gt.count()) * v;
  return std::abs(vp - vg) / vg;
}

SurfaceMesh extract_surface(const BinaryMask& mask, Spacing spacing) {
  check_spacing(spacing);
  const Extent3 e = mask.extent();
  const double face_area[3] = {spacing.sy * spacing.sz, spacing.sx * spacing.sz,
                               spacing.sx * spacing.sy};
  std::vector<std::array<double, 3>> c;
  std::vector<double> a;
  for (int i = 0; i < e.h; ++i)
    for (int j = 0; j < e.w; ++j)
      for (int k = 0; k < e.d; ++k) {
        if (!mask.at({i, j, k})) continue;
        const Voxel v{i, j, k};
        for (int axis = 0; axis < 3; ++axis)
          for (int dir : {-1, 1}) {
            Voxel n = v;
            n[axis] += dir;
            if (e.contains(n) && mask.at(n)) continue;
            std::array<double, 3> p{i * spacing.sx, j * spacing.sy, k * spacing.sz};
            p[axis] += 0.5 * dir * spacing[axis];
            c.push_back(p);
            a.push_back(face_area[axis]);
          }
      }
  SurfaceMesh m;
  m.centroids.resize(Eigen::Index(c.size()), 3);
  m.areas.resize(Eigen::Index(a.size()));
  for (std::size_t n = 0; n < c.size(); ++n) {
    m.centroids.row(Eigen::Index(n)) << c[n][0], c[n][1], c[n][2];
    m.areas[Eigen::Index(n)] = a[n];
  }
  return m;
}

Eigen::VectorXd directed_distances(const SurfaceMesh& from, const SurfaceMesh& to) {
  if (to.empty()) throw UndefinedMetricError("distance to an empty surface");
  std::vector<Point> pts;
  pts.reserve(std::size_t(to.size()));
  for (Eigen::Index n = 0; n < to.size(); ++n)
    pts.emplace_back(to.centroids(n, 0), to.centroids(n, 1), to.centroids(n, 2));
  const bgi::rtree<Point, bgi::rstar<16>> tree(pts.begin(), pts.end());
  Eigen::VectorXd d(from.size());
  std::vector<Point> hit;
  for (Eigen::Index n = 0; n < from.size(); ++n) {
    const Point q(from.centroids(n, 0), from.centroids(n, 1), from.centroids(n, 2));
    hit.clear();
    tree.query(bgi::nearest(q, 1), std::back_inserter(hit));
    d[n] = bg::distance(q, hit.front());
  }
  return d;
}

double weighted_percentile(const Eigen::VectorXd& dist, const Eigen::VectorXd& area, double q) {
  if (dist.size() == 0 || dist.size() != area.size())
    throw ShapeError("percentile needs matching, non-empty distance and area vectors");
  std::vector<Eigen::Index> order(std::size_t(dist.size()));
  std::iota(order.begin(), order.end(), Eigen::Index(0));
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return dist[a] < dist[b]; });
  const double target = q * area.sum();
  double cum = 0;
  for (auto n : order) {
    cum += area[n];
    if (cum >= target) return dist[n];
  }
  return dist[order.back()];
}

namespace {

struct Directed {
  Eigen::VectorXd pg, gp;
  SurfaceMesh sp, sg;
};

Directed both_directions(const BinaryMask& pred, const BinaryMask& gt, Spacing spacing) {
  check_same_grid(pred, gt);
  if (!pred.any() || !gt.any())
    throw UndefinedMetricError("surface distance undefined when a mask is empty");
  Directed r;
  r.sp = extract_surface(pred, spacing);
  r.sg = extract_surface(gt, spacing);
  r.pg = directed_distances(r.sp, r.sg);
  r.gp = directed_distances(r.sg, r.sp);
  return r;
}

double hd95_of(const Directed& d) {
  return std::max(weighted_percentile(d.pg, d.sp.areas, 0.95),
                  weighted_percentile(d.gp, d.sg.areas, 0.95));
}

double assd_of(const Directed& d) {
  const double a = d.pg.dot(d.sp.areas) / d.sp.total_area();
  const double b = d.gp.dot(d.sg.areas) / d.sg.total_area();
  return 0.5 * (a + b);
}

}  // namespace

double hd95(const BinaryMask& pred, const BinaryMask& gt, Spacing spacing) {
  return hd95_of(both_directions(pred, gt, spacing));
}

double assd(const BinaryMask& pred, const BinaryMask& gt, Spacing spacing) {
  return assd_of(both_directions(pred, gt, spacing));
}

MetricReport report(const BinaryMask& pred, const BinaryMask& gt, Spacing spacing,
                    const MetricOptions& opts) {
  check_same_grid(pred, gt);
  check_spacing(spacing);
  MetricReport r;
  const bool pe = !pred.any(), ge = !gt.any();
  if (pe && ge) {
    r = {1.0, 1.0, 0.0, 0.0, 0.0, true};
    return r;
  }
  if (ge) throw UndefinedMetricError("ground truth is empty but the prediction is not");
  r.dsc = dsc(pred, gt);
  r.iou = iou(pred, gt);
  r.rve = rve(pred, gt, spacing);
  if (pe) {
    r.hd95 = r.assd = opts.empty_sentinel_mm.value_or(grid_diagonal(gt, spacing));
    r.empty_flag = true;
    return r;
  }
  const Directed d = both_directions(pred, gt, spacing);
  r.hd95 = hd95_of(d);
  r.assd = assd_of(d);
  return r;
}

void to_json(nlohmann::json& j, const MetricReport& r) {
  j = {{"dsc", r.dsc},   {"iou", r.iou},   {"rve", r.rve},
       {"hd95_mm", r.hd95}, {"assd_mm", r.assd}, {"empty_flag", r.empty_flag}};
}

void write_csv(std::ostream& os, const std::vector<std::pair<std::string, MetricReport>>& rows) {
  os << "case_id,dsc,iou,rve,hd95_mm,assd_mm,empty_flag\n";
  const auto prec = os.precision(10);
  for (const auto& [id, r] : rows)
    os << id << ',' << r.dsc << ',' << r.iou << ',' << r.rve << ',' << r.hd95 << ',' << r.assd
       << ',' << (r.empty_flag ? 1 : 0) << '\n';
  os.precision(prec);
}

}  // namespace sat3d::metrics
