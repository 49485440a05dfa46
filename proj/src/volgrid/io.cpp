#include "sat3d/volgrid/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

namespace sat3d::volgrid {

static_assert(std::endian::native == std::endian::little,
              "native volume IO assumes a little-endian host");

namespace {

using nlohmann::json;

json make_header(const char* dtype, int channels, const Extent3& e, const Spacing& s) {
  return json{{"magic", kNativeMagic},
              {"dtype", dtype},
              {"shape", {channels, e.h, e.w, e.d}},
              {"spacing", {s.sx, s.sy, s.sz}}};
}

struct NativeHeader {
  std::string dtype;
  int channels = 0;
  Extent3 extent;
  Spacing spacing;
  std::string modality;
};

NativeHeader parse_header(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("missing native header line");
  json h;
  try {
    h = json::parse(line);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed native header: ") + e.what());
  }
  if (!h.is_object() || h.value("magic", "") != kNativeMagic)
    throw FormatError("bad magic in native header");
  NativeHeader out;
  try {
    out.dtype = h.at("dtype").get<std::string>();
    const auto shape = h.at("shape").get<std::vector<long long>>();
    const auto spacing = h.at("spacing").get<std::vector<double>>();
    if (shape.size() != 4 || spacing.size() != 3)
      throw FormatError("header shape must have 4 entries and spacing 3");
    for (long long s : shape)
      if (s < 1 || s > (1 << 20)) throw FormatError("header shape entries must be positive");
    out.channels = int(shape[0]);
    out.extent = {int(shape[1]), int(shape[2]), int(shape[3])};
    out.spacing = {spacing[0], spacing[1], spacing[2]};
    out.modality = h.value("modality", "");
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed native header: ") + e.what());
  }
  if (!out.spacing.valid()) throw FormatError("header spacing must be positive and finite");
  return out;
}

template <typename T>
void read_payload(std::istream& in, T* dst, std::int64_t count) {
  const auto bytes = std::streamsize(count * std::int64_t(sizeof(T)));
  in.read(reinterpret_cast<char*>(dst), bytes);
  if (in.gcount() != bytes)
    throw IntegrityError("payload shorter than header shape (" + std::to_string(in.gcount()) +
                         " of " + std::to_string(bytes) + " bytes)");
  if (in.peek() != std::char_traits<char>::eof())
    throw IntegrityError("payload longer than header shape");
}

std::string read_all(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// --- NIfTI-1 -------------------------------------------------------------

template <typename T>
T load_field(const char* base, std::size_t offset, bool swap) {
  T v;
  std::memcpy(&v, base + offset, sizeof(T));
  if (swap) {
    auto* p = reinterpret_cast<unsigned char*>(&v);
    std::reverse(p, p + sizeof(T));
  }
  return v;
}

template <typename T>
double fetch(const char* p, bool swap) {
  return double(load_field<T>(p, 0, swap));
}

using Mat3 = std::array<std::array<double, 3>, 3>;

// Voxel-axis -> world-axis direction cosines scaled by voxel size.
std::optional<Mat3> nifti_affine(const char* hdr, bool swap, const double pixdim[4]) {
  const short qform_code = load_field<short>(hdr, 252, swap);
  const short sform_code = load_field<short>(hdr, 254, swap);
  Mat3 m{};
  if (sform_code > 0) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) m[r][c] = load_field<float>(hdr, 280 + 16 * r + 4 * c, swap);
    return m;
  }
  if (qform_code > 0) {
    const double b = load_field<float>(hdr, 256, swap);
    const double c = load_field<float>(hdr, 260, swap);
    const double d = load_field<float>(hdr, 264, swap);
    const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
    const double qfac = pixdim[0] < 0 ? -1.0 : 1.0;
    const Mat3 rot{{{a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
                    {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)},
                    {2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b}}};
    const double scale[3] = {pixdim[1], pixdim[2], pixdim[3] * qfac};
    for (int r = 0; r < 3; ++r)
      for (int col = 0; col < 3; ++col) m[r][col] = rot[r][col] * scale[col];
    return m;
  }
  return std::nullopt;
}

struct AxisMap {
  std::array<int, 3> source{0, 1, 2};  // canonical axis r reads input voxel axis source[r]
  std::array<bool, 3> flip{false, false, false};
};

AxisMap closest_canonical(const Mat3& m) {
  AxisMap map;
  std::array<bool, 3> used_world{}, used_voxel{};
  for (int round = 0; round < 3; ++round) {
    double best = -1;
    int br = 0, bc = 0;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        if (!used_world[r] && !used_voxel[c] && std::abs(m[r][c]) > best) {
          best = std::abs(m[r][c]);
          br = r;
          bc = c;
        }
    used_world[br] = used_voxel[bc] = true;
    map.source[br] = bc;
    map.flip[br] = m[br][bc] < 0;
  }
  return map;
}

}  // namespace

void write_volume(std::ostream& out, const Volume& v) {
  auto h = make_header("f32le", v.data.channels(), v.data.extent(), v.spacing);
  if (!v.modality.empty()) h["modality"] = v.modality;
  out << h.dump() << '\n';
  out.write(reinterpret_cast<const char*>(v.data.data()),
            std::streamsize(v.data.size() * sizeof(float)));
}

void write_mask(std::ostream& out, const BinaryMask& m) {
  out << make_header("u8", 1, m.extent(), m.spacing).dump() << '\n';
  out.write(reinterpret_cast<const char*>(m.data.data()), std::streamsize(m.data.size()));
}

Volume read_volume(std::istream& in) {
  const NativeHeader h = parse_header(in);
  Volume v;
  v.spacing = h.spacing;
  v.modality = h.modality;
  if (h.dtype == "f32le") {
    v.data = ScalarGrid(h.channels, h.extent);
    read_payload(in, v.data.data(), v.data.size());
  } else if (h.dtype == "u8") {
    LabelGrid raw(h.channels, h.extent);
    read_payload(in, raw.data(), raw.size());
    v.data = raw.cast<float>();
  } else {
    throw FormatError("unsupported dtype '" + h.dtype + "'");
  }
  return v;
}

BinaryMask read_mask(std::istream& in) {
  const NativeHeader h = parse_header(in);
  if (h.channels != 1) throw FormatError("mask must have exactly one channel");
  BinaryMask m(h.extent, h.spacing);
  if (h.dtype == "u8") {
    read_payload(in, m.data.data(), m.data.size());
    if ((m.data.values() > 1).any()) throw FormatError("mask values must be 0 or 1");
  } else if (h.dtype == "f32le") {
    ScalarGrid raw(1, h.extent);
    read_payload(in, raw.data(), raw.size());
    m.data.values() = (raw.values() > 0.5f).cast<std::uint8_t>();
  } else {
    throw FormatError("unsupported dtype '" + h.dtype + "'");
  }
  return m;
}

void save_volume(const std::filesystem::path& path, const Volume& v) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path.string());
  write_volume(f, v);
}

void save_mask(const std::filesystem::path& path, const BinaryMask& m) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path.string());
  write_mask(f, m);
}

Volume read_nifti(std::istream& in) {
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  if (bytes.size() < 348) throw FormatError("file too short for a NIfTI-1 header");
  const char* hdr = bytes.data();

  bool swap = false;
  if (load_field<int>(hdr, 0, false) != 348) {
    if (load_field<int>(hdr, 0, true) != 348) throw FormatError("sizeof_hdr is not 348");
    swap = true;
  }
  if (std::memcmp(hdr + 344, "n+1\0", 4) != 0)
    throw FormatError("only single-file NIfTI-1 ('n+1') is supported");

  short dim[8];
  for (int i = 0; i < 8; ++i) dim[i] = load_field<short>(hdr, 40 + 2 * i, swap);
  if (dim[0] < 1 || dim[0] > 7) throw FormatError("dim[0] out of range");
  std::array<int, 5> n{1, 1, 1, 1, 1};
  for (int i = 1; i <= std::min<int>(dim[0], 4); ++i) {
    if (dim[i] < 1) throw FormatError("non-positive NIfTI dimension");
    n[i - 1] = dim[i];
  }
  for (int i = 5; i <= dim[0]; ++i)
    if (dim[i] > 1) throw FormatError("NIfTI dimensions beyond the 4th are not supported");

  const short datatype = load_field<short>(hdr, 70, swap);
  double pixdim[4];
  for (int i = 0; i < 4; ++i) pixdim[i] = load_field<float>(hdr, 76 + 4 * i, swap);
  const auto vox_offset = std::int64_t(load_field<float>(hdr, 108, swap));
  double slope = load_field<float>(hdr, 112, swap);
  double inter = load_field<float>(hdr, 116, swap);
  if (slope == 0.0 || !std::isfinite(slope)) {
    slope = 1.0;
    inter = 0.0;
  }
  if (!std::isfinite(inter)) inter = 0.0;

  int elem = 0;
  double (*conv)(const char*, bool) = nullptr;
  switch (datatype) {
    case 2: elem = 1; conv = &fetch<std::uint8_t>; break;
    case 4: elem = 2; conv = &fetch<std::int16_t>; break;
    case 8: elem = 4; conv = &fetch<std::int32_t>; break;
    case 16: elem = 4; conv = &fetch<float>; break;
    case 64: elem = 8; conv = &fetch<double>; break;
    case 256: elem = 1; conv = &fetch<std::int8_t>; break;
    case 512: elem = 2; conv = &fetch<std::uint16_t>; break;
    case 768: elem = 4; conv = &fetch<std::uint32_t>; break;
    default: throw FormatError("unsupported NIfTI datatype " + std::to_string(datatype));
  }

  const std::int64_t nvox = std::int64_t(n[0]) * n[1] * n[2];
  const std::int64_t total = nvox * n[3];
  if (vox_offset < 348 || std::int64_t(bytes.size()) < vox_offset + total * elem)
    throw IntegrityError("NIfTI payload shorter than header dimensions");

  Spacing raw_spacing{std::abs(pixdim[1]), std::abs(pixdim[2]), std::abs(pixdim[3])};
  if (dim[0] < 2) raw_spacing.sy = 1.0;
  if (dim[0] < 3) raw_spacing.sz = 1.0;
  if (!raw_spacing.valid()) throw FormatError("NIfTI pixdim must be positive");

  AxisMap map;
  if (auto affine = nifti_affine(hdr, swap, pixdim)) map = closest_canonical(*affine);

  const std::array<int, 3> in_dims{n[0], n[1], n[2]};
  const Extent3 out_extent{in_dims[map.source[0]], in_dims[map.source[1]],
                           in_dims[map.source[2]]};
  Volume v;
  v.data = ScalarGrid(n[3], out_extent);
  v.spacing = {raw_spacing[map.source[0]], raw_spacing[map.source[1]],
               raw_spacing[map.source[2]]};
  v.modality = "nifti";

  const char* payload = hdr + vox_offset;
  for (int c = 0; c < n[3]; ++c)
    for (int i = 0; i < out_extent.h; ++i)
      for (int j = 0; j < out_extent.w; ++j)
        for (int k = 0; k < out_extent.d; ++k) {
          std::array<int, 3> src{};
          const int out_idx[3] = {i, j, k};
          for (int r = 0; r < 3; ++r) {
            const int ext = out_extent[r];
            src[map.source[r]] = map.flip[r] ? ext - 1 - out_idx[r] : out_idx[r];
          }
          // NIfTI stores x fastest.
          const std::int64_t lin =
              src[0] + std::int64_t(n[0]) * (src[1] + std::int64_t(n[1]) * src[2]) + nvox * c;
          v.data(c, i, j, k) = float(conv(payload + lin * elem, swap) * slope + inter);
        }
  return v;
}

Volume load_volume(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string());
  char first = char(f.peek());
  if (first == '{') return read_volume(f);
  return read_nifti(f);
}

BinaryMask load_mask(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string());
  if (char(f.peek()) == '{') return read_mask(f);
  Volume v = read_nifti(f);
  if (v.data.channels() != 1) throw FormatError("mask must have exactly one channel");
  BinaryMask m(v.extent(), v.spacing);
  m.data.values() = (v.data.values() > 0.5f).cast<std::uint8_t>();
  return m;
}

std::string encode_volume(const Volume& v) {
  std::ostringstream ss(std::ios::binary);
  write_volume(ss, v);
  return ss.str();
}

std::string encode_mask(const BinaryMask& m) {
  std::ostringstream ss(std::ios::binary);
  write_mask(ss, m);
  return ss.str();
}

Volume decode_volume(const std::string& bytes) {
  std::istringstream ss(bytes, std::ios::binary);
  if (!bytes.empty() && bytes.front() != '{') return read_nifti(ss);
  return read_volume(ss);
}

BinaryMask decode_mask(const std::string& bytes) {
  std::istringstream ss(bytes, std::ios::binary);
  return read_mask(ss);
}

}  // namespace sat3d::volgrid
