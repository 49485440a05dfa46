#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "sat3d/trainer.hpp"
#include "sat3d/volgrid/phantom.hpp"

// Directory layout shared by the CLI and the service: each case is a pair
// "<id>_img.<ext>" / "<id>_seg.<ext>", where <ext> is the native format
// (".s3v") or single-file NIfTI (".nii").
namespace sat3d::dataset {

struct Case {
  std::string id;
  Volume volume;
  BinaryMask mask;
};

inline constexpr const char* kImageSuffix = "_img";
inline constexpr const char* kMaskSuffix = "_seg";
inline constexpr const char* kNativeExt = ".s3v";

// Cases sorted by id. Throws FormatError for an image without a mask.
std::vector<Case> load_dir(const std::filesystem::path& dir);

// Writes n phantoms with seeds spec.seed, spec.seed + 1, ...; returns their ids.
std::vector<std::string> write_phantoms(const std::filesystem::path& dir, int n,
                                        const volgrid::PhantomSpec& spec);
std::vector<Case> make_phantoms(int n, const volgrid::PhantomSpec& spec);

// Z-score normalisation then crop/pad around the foreground to `crop`.
trainer::Sample prepare(const Case& c, Extent3 crop);
std::vector<trainer::Sample> prepare_all(const std::vector<Case>& cases, Extent3 crop);

}  // namespace sat3d::dataset
