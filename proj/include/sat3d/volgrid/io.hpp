#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "sat3d/grid.hpp"

namespace sat3d::volgrid {

inline constexpr const char* kNativeMagic = "SAT3DVOL1";

// Native format: one UTF-8 JSON header line
//   {"magic":"SAT3DVOL1","dtype":"f32le"|"u8","shape":[C,H,W,D],"spacing":[sx,sy,sz]}
// followed by C*H*W*D little-endian values in C order.
void write_volume(std::ostream& out, const Volume& v);
void write_mask(std::ostream& out, const BinaryMask& m);
Volume read_volume(std::istream& in);
BinaryMask read_mask(std::istream& in);

void save_volume(const std::filesystem::path& path, const Volume& v);
void save_mask(const std::filesystem::path& path, const BinaryMask& m);

// Native or NIfTI-1 (single-file .nii). NIfTI input is reoriented to the closest
// canonical RAS+ axis order using sform, else qform, else the voxel axes as stored.
Volume load_volume(const std::filesystem::path& path);
BinaryMask load_mask(const std::filesystem::path& path);

Volume read_nifti(std::istream& in);

// Serialisation to an in-memory byte string (used by the HTTP layer).
std::string encode_volume(const Volume& v);
std::string encode_mask(const BinaryMask& m);
Volume decode_volume(const std::string& bytes);
BinaryMask decode_mask(const std::string& bytes);

}  // namespace sat3d::volgrid
