#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "sat3d/volgrid/io.hpp"
#include "sat3d/volgrid/phantom.hpp"
#include "sat3d/volgrid/preprocess.hpp"

using namespace sat3d;
using namespace sat3d::volgrid;

namespace {

Volume random_volume(Extent3 e, unsigned seed, int channels = 1) {
  Volume v;
  v.data = ScalarGrid(channels, e);
  v.spacing = {0.7, 1.1, 2.5};
  v.modality = "CT";
  std::mt19937 rng{seed};
  std::normal_distribution<float> n;
  for (auto& x : v.data.values()) x = n(rng);
  return v;
}

BinaryMask random_mask(Extent3 e, unsigned seed, double p = 0.3) {
  BinaryMask m(e, isotropic(1.0));
  std::mt19937 rng{seed};
  std::bernoulli_distribution b(p);
  for (auto& x : m.data.values()) x = b(rng);
  return m;
}

// Minimal NIfTI-1 single-file writer (float32), independent of the reader.
std::string nifti_bytes(const Extent3& e, const float* xyz, float px, float py, float pz,
                        const float* srow = nullptr) {
  std::string h(352, '\0');
  auto put = [&](int off, auto value) { std::memcpy(h.data() + off, &value, sizeof value); };
  put(0, std::int32_t(348));
  const std::int16_t dim[8] = {3, std::int16_t(e.h), std::int16_t(e.w), std::int16_t(e.d), 1, 1, 1, 1};
  std::memcpy(h.data() + 40, dim, sizeof dim);
  put(70, std::int16_t(16));
  put(72, std::int16_t(32));
  const float pix[8] = {1, px, py, pz, 1, 1, 1, 1};
  std::memcpy(h.data() + 76, pix, sizeof pix);
  put(108, 352.0f);
  put(112, 1.0f);
  if (srow) {
    put(254, std::int16_t(1));
    std::memcpy(h.data() + 280, srow, 12 * sizeof(float));
  }
  std::memcpy(h.data() + 344, "n+1\0", 4);
  h.append(reinterpret_cast<const char*>(xyz), sizeof(float) * std::size_t(e.count()));
  return h;
}

}  // namespace

TEST_CASE("native volume round trip is bit exact") {
  const Volume v = random_volume({4, 5, 3}, 1, 2);
  std::stringstream ss;
  write_volume(ss, v);
  const Volume r = read_volume(ss);
  CHECK(r.data == v.data);
  CHECK(r.spacing == v.spacing);
  CHECK(r.modality == "CT");
  CHECK(std::memcmp(r.data.data(), v.data.data(), sizeof(float) * std::size_t(v.data.size())) == 0);

  const BinaryMask m = random_mask({3, 3, 3}, 2);
  CHECK(decode_mask(encode_mask(m)).data == m.data);

  const auto dir = std::filesystem::temp_directory_path() / "sat3d_io_test";
  std::filesystem::create_directories(dir);
  save_volume(dir / "v.vol", v);
  CHECK(load_volume(dir / "v.vol").data == v.data);
  std::filesystem::remove_all(dir);
}

TEST_CASE("native header example: 1x4x4x4 plus 64 floats") {
  std::string bytes =
      "{\"magic\":\"SAT3DVOL1\",\"dtype\":\"f32le\",\"shape\":[1,4,4,4],\"spacing\":[1,1,1]}\n";
  std::vector<float> vals(64);
  for (int i = 0; i < 64; ++i) vals[i] = float(i);
  bytes.append(reinterpret_cast<const char*>(vals.data()), 64 * sizeof(float));
  const Volume v = decode_volume(bytes);
  CHECK(v.data.channels() == 1);
  CHECK(v.data.extent() == cube(4));
  CHECK(v.data(0, 1, 2, 3) == float((1 * 4 + 2) * 4 + 3));
}

TEST_CASE("malformed or inconsistent native files are rejected") {
  const std::string good = encode_volume(random_volume(cube(2), 3));
  CHECK_THROWS_AS(decode_volume("not json\n"), FormatError);
  CHECK_THROWS_AS(decode_volume("{\"magic\":\"OTHER\",\"dtype\":\"f32le\",\"shape\":[1,2,2,2],\"spacing\":[1,1,1]}\n"),
                  FormatError);
  CHECK_THROWS_AS(decode_volume(good.substr(0, good.size() - 4)), IntegrityError);
  CHECK_THROWS_AS(decode_volume(good + "xxxx"), IntegrityError);
}

TEST_CASE("NIfTI spacing and axis order") {
  const Extent3 e{3, 4, 2};
  std::vector<float> xyz(e.count());
  for (int z = 0; z < e.d; ++z)
    for (int y = 0; y < e.w; ++y)
      for (int x = 0; x < e.h; ++x) xyz[x + e.h * (y + e.w * z)] = float(100 * x + 10 * y + z);

  std::istringstream plain(nifti_bytes(e, xyz.data(), 0.5f, 0.5f, 2.0f));
  const Volume v = read_nifti(plain);
  CHECK(v.spacing == Spacing{0.5, 0.5, 2.0});
  CHECK(v.data.extent() == e);
  CHECK(v.data(0, 2, 3, 1) == 231.0f);

  // An sform with a flipped x axis is brought back to RAS+.
  const float srow[12] = {-0.5f, 0, 0, 0, 0, 0.5f, 0, 0, 0, 0, 2.0f, 0};
  std::istringstream flipped(nifti_bytes(e, xyz.data(), 0.5f, 0.5f, 2.0f, srow));
  const Volume f = read_nifti(flipped);
  CHECK(f.spacing == Spacing{0.5, 0.5, 2.0});
  CHECK(f.data(0, 0, 3, 1) == 231.0f);

  // Axis permutation through the sform: voxel axis 0 runs along z.
  const float perm[12] = {0, 0.5f, 0, 0, 0, 0, 2.0f, 0, 0.5f, 0, 0, 0};
  std::istringstream permuted(nifti_bytes(e, xyz.data(), 0.5f, 0.5f, 2.0f, perm));
  const Volume p = read_nifti(permuted);
  CHECK(p.data.extent() == Extent3{4, 2, 3});
  CHECK(p.spacing == Spacing{0.5, 2.0, 0.5});
  CHECK(p.data(0, 3, 1, 2) == 231.0f);

  std::string trunc = nifti_bytes(e, xyz.data(), 0.5f, 0.5f, 2.0f);
  trunc.resize(trunc.size() - 8);
  std::istringstream bad(trunc);
  CHECK_THROWS_AS(read_nifti(bad), IntegrityError);
}

TEST_CASE("znormalize") {
  SUBCASE("constant positive volume maps to zero") {
    Volume v;
    v.data = ScalarGrid(cube(3), 5.0f);
    CHECK((znormalize(v).data.values() == 0.0f).all());
  }
  SUBCASE("two equally frequent values map to -1 and +1") {
    Volume v;
    v.data = ScalarGrid(cube(2));
    for (int i = 0; i < 8; ++i) v.data.values()[i] = i % 2 ? 3.0f : 1.0f;
    const Volume z = znormalize(v);
    for (int i = 0; i < 8; ++i) CHECK(z.data.values()[i] == doctest::Approx(i % 2 ? 1.0 : -1.0));
  }
  SUBCASE("negative background is excluded and zeroed") {
    Volume v = random_volume(cube(6), 4);
    for (auto& x : v.data.values()) x = x > 0 ? x + 2.0f : -1.0f;
    const Volume z = znormalize(v);
    double s = 0, s2 = 0;
    int n = 0;
    for (std::int64_t i = 0; i < v.data.size(); ++i) {
      if (v.data.values()[i] <= 0) {
        CHECK(z.data.values()[i] == 0.0f);
        continue;
      }
      s += z.data.values()[i];
      s2 += double(z.data.values()[i]) * z.data.values()[i];
      ++n;
    }
    CHECK(std::abs(s / n) < 1e-5);
    CHECK(std::abs(std::sqrt(s2 / n - (s / n) * (s / n)) - 1.0) < 1e-5);
  }
  SUBCASE("idempotent on the masked region") {
    // With every voxel positive the mask is the whole grid; a constant shift
    // keeps the normalised values inside the mask for the second pass.
    Volume v = random_volume(cube(6), 5);
    v.data.values() = v.data.values().abs() + 0.1f;
    const Volume once = znormalize(v);
    Volume shifted = once;
    shifted.data.values() += 10.0f;
    const Volume twice = znormalize(shifted);
    CHECK((twice.data.values() - once.data.values()).abs().maxCoeff() < 1e-5f);
  }
  SUBCASE("no positive voxel is degenerate") {
    Volume v;
    v.data = ScalarGrid(cube(2), -1.0f);
    CHECK_THROWS_AS(znormalize(v), DegenerateInputError);
  }
}

TEST_CASE("crop_or_pad") {
  SUBCASE("matching size is unchanged") {
    const Volume v = random_volume(cube(16), 6);
    const BinaryMask m = random_mask(cube(16), 7);
    const CropResult r = crop_or_pad(v, m, cube(16));
    CHECK(r.volume.data == v.data);
    CHECK(r.mask.data == m.data);
    CHECK(r.offset == Voxel{0, 0, 0});
  }
  SUBCASE("smaller input is centred with zero padding") {
    const Volume v = random_volume(cube(8), 8);
    const BinaryMask m = random_mask(cube(8), 9);
    const CropResult r = crop_or_pad(v, m, cube(16));
    CHECK(r.volume.data.extent() == cube(16));
    CHECK(r.offset == Voxel{-4, -4, -4});
    CHECK(r.volume.data(0, 4, 4, 4) == v.data(0, 0, 0, 0));
    CHECK(r.volume.data(0, 11, 11, 11) == v.data(0, 7, 7, 7));
    CHECK(r.volume.data(0, 3, 5, 5) == 0.0f);
    CHECK(r.mask.count() == m.count());
  }
  SUBCASE("corner lesion survives a crop") {
    const Extent3 big = cube(200);
    Volume v;
    v.data = ScalarGrid(big, 1.0f);
    BinaryMask m(big, isotropic(1.0));
    for (int i = 185; i < 195; ++i)
      for (int j = 185; j < 195; ++j)
        for (int k = 185; k < 195; ++k) m.data(0, i, j, k) = 1;
    const CropResult r = crop_or_pad(v, m, cube(128));
    CHECK(r.volume.data.extent() == cube(128));
    CHECK(r.mask.count() == 1000);
  }
  SUBCASE("inverse placement recovers the overlap") {
    const Volume v = random_volume({20, 12, 9}, 10);
    const BinaryMask m = random_mask({20, 12, 9}, 11, 0.05);
    const CropResult r = crop_or_pad(v, m, {10, 16, 9});
    const ScalarGrid back = place_back(r.volume.data, {20, 12, 9}, r.offset, -7.0f);
    for (int i = 0; i < 20; ++i)
      for (int j = 0; j < 12; ++j)
        for (int k = 0; k < 9; ++k) {
          const Voxel o{i - r.offset[0], j - r.offset[1], k - r.offset[2]};
          if (Extent3{10, 16, 9}.contains(o))
            CHECK(back(0, i, j, k) == v.data(0, i, j, k));
          else
            CHECK(back(0, i, j, k) == -7.0f);
        }
  }
}

TEST_CASE("augmentation") {
  const Volume v = random_volume({6, 6, 4}, 12);
  const BinaryMask m = random_mask({6, 6, 4}, 13);
  SUBCASE("identity parameters leave data untouched") {
    AugmentParams id;
    CHECK(id.identity());
    CHECK(apply_augmentation(v.data, id) == v.data);
    // Some seed draws the identity; find one and check augment agrees.
    std::uint64_t seed = 0;
    while (!draw_augmentation(seed).identity()) ++seed;
    const Augmented a = augment(v, m, seed);
    CHECK(a.volume.data == v.data);
    CHECK(a.mask.data == m.data);
  }
  SUBCASE("label counts and intensity multiset are preserved") {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      const Augmented a = augment(v, m, seed);
      CHECK(a.mask.count() == m.count());
      CHECK(a.volume.data.values().sum() == doctest::Approx(v.data.values().sum()).epsilon(1e-5));
      CHECK(a.volume.data.extent().count() == v.data.extent().count());
    }
  }
  SUBCASE("same seed, same output") {
    const Augmented a = augment(v, m, 99), b = augment(v, m, 99);
    CHECK(a.volume.data == b.volume.data);
    CHECK(a.mask.data == b.mask.data);
  }
  SUBCASE("a quarter turn maps voxels as a rotation") {
    AugmentParams p;
    p.rotation_axis = 2;
    p.quarter_turns = 1;
    const ScalarGrid r = apply_augmentation(v.data, p);
    // Four quarter turns are the identity; two equal a double flip.
    ScalarGrid g = v.data;
    AugmentParams q;
    q.rotation_axis = 2;
    q.quarter_turns = 1;
    for (int t = 0; t < 4; ++t) g = apply_augmentation(g, q);
    CHECK(g == v.data);
    q.quarter_turns = 2;
    AugmentParams f;
    f.flip = {true, true, false};
    CHECK(apply_augmentation(v.data, q) == apply_augmentation(v.data, f));
    CHECK(r.extent() == v.data.extent());
  }
}

TEST_CASE("phantom generation") {
  SUBCASE("radius 8 sphere volume within 5%") {
    PhantomSpec s;
    s.min_radius = s.max_radius = 8.0;
    s.boundary_noise = 0.0;
    s.image_noise = 0.0;
    s.seed = 3;
    const Phantom p = generate_phantom(s);
    const double sphere = 4.0 / 3.0 * std::numbers::pi * 512.0;
    CHECK(std::abs(double(p.mask.count()) - sphere) / sphere < 0.05);
    // Zero noise: the mask is exactly the analytic ellipsoid.
    const Lesion& l = p.lesions.at(0);
    for (std::int64_t r = 0; r < p.mask.data.voxels(); ++r) {
      const Voxel q = s.grid.voxel(r);
      double acc = 0;
      for (int a = 0; a < 3; ++a) acc += std::pow((q[a] - l.centre[a]) / l.radii[a], 2);
      CHECK((acc <= 1.0) == bool(p.mask.data.values()[r]));
    }
    // Intensity: background + contrast inside, background outside.
    CHECK(p.volume.data.values().maxCoeff() == doctest::Approx(2.0));
    CHECK(p.volume.data.values().minCoeff() == doctest::Approx(1.0));
  }
  SUBCASE("noisy phantoms are deterministic and match the membership oracle") {
    PhantomSpec s;
    s.max_lesions = 2;
    s.seed = 11;
    const Phantom a = generate_phantom(s), b = generate_phantom(s);
    CHECK(a.volume.data == b.volume.data);
    CHECK(a.mask.data == b.mask.data);
    s.seed = 12;
    CHECK_FALSE(generate_phantom(s).mask.data == a.mask.data);
    for (std::int64_t r = 0; r < a.mask.data.voxels(); r += 7) {
      const Voxel q = s.grid.voxel(r);
      bool inside = false;
      for (const auto& l : a.lesions) inside = inside || lesion_contains(l, 0.15, q[0], q[1], q[2]);
      CHECK(inside == bool(a.mask.data.values()[r]));
    }
  }
  SUBCASE("lesion larger than the grid is infeasible") {
    PhantomSpec s;
    s.grid = cube(16);
    s.min_radius = s.max_radius = 12;
    CHECK_THROWS_AS(generate_phantom(s), SpecError);
  }
}
