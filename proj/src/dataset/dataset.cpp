#include "sat3d/dataset.hpp"

#include <algorithm>
#include <cstdio>

#include "sat3d/volgrid/io.hpp"
#include "sat3d/volgrid/preprocess.hpp"

namespace sat3d::dataset {

namespace fs = std::filesystem;

namespace {

bool ends_with(const std::string& s, const std::string& tail) {
  return s.size() >= tail.size() && s.compare(s.size() - tail.size(), tail.size(), tail) == 0;
}

}  // namespace

std::vector<Case> load_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw FormatError("not a directory: " + dir.string());
  std::vector<Case> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string ext = entry.path().extension().string();
    const std::string stem = entry.path().stem().string();
    if ((ext != kNativeExt && ext != ".nii") || !ends_with(stem, kImageSuffix)) continue;
    const std::string id = stem.substr(0, stem.size() - std::string(kImageSuffix).size());
    const fs::path seg = dir / (id + kMaskSuffix + ext);
    if (!fs::exists(seg)) throw FormatError("no mask for case " + id + " (expected " + seg.string() + ")");
    Case c{id, volgrid::load_volume(entry.path()), volgrid::load_mask(seg)};
    if (c.volume.extent() != c.mask.extent()) throw ShapeError("image and mask of " + id + " differ in shape");
    out.push_back(std::move(c));
  }
  std::sort(out.begin(), out.end(), [](const Case& a, const Case& b) { return a.id < b.id; });
  return out;
}

std::vector<Case> make_phantoms(int n, const volgrid::PhantomSpec& spec) {
  if (n < 1) throw ConfigError("phantom count must be positive");
  std::vector<Case> out;
  for (int i = 0; i < n; ++i) {
    volgrid::PhantomSpec s = spec;
    s.seed = spec.seed + std::uint64_t(i);
    auto p = volgrid::generate_phantom(s);
    char id[32];
    std::snprintf(id, sizeof id, "phantom_%03d", i);
    out.push_back({id, std::move(p.volume), std::move(p.mask)});
  }
  return out;
}

std::vector<std::string> write_phantoms(const fs::path& dir, int n, const volgrid::PhantomSpec& spec) {
  fs::create_directories(dir);
  std::vector<std::string> ids;
  for (const Case& c : make_phantoms(n, spec)) {
    volgrid::save_volume(dir / (c.id + kImageSuffix + kNativeExt), c.volume);
    volgrid::save_mask(dir / (c.id + kMaskSuffix + kNativeExt), c.mask);
    ids.push_back(c.id);
  }
  return ids;
}

trainer::Sample prepare(const Case& c, Extent3 crop) {
  const Volume norm = volgrid::znormalize(c.volume);
  auto r = volgrid::crop_or_pad(norm, c.mask, crop);
  r.volume.spacing = c.volume.spacing;
  r.mask.spacing = c.mask.spacing;
  return {std::move(r.volume), std::move(r.mask), c.id};
}

std::vector<trainer::Sample> prepare_all(const std::vector<Case>& cases, Extent3 crop) {
  std::vector<trainer::Sample> out;
  for (const auto& c : cases) out.push_back(prepare(c, crop));
  return out;
}

}  // namespace sat3d::dataset
