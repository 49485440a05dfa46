#include <doctest.h>

#include <filesystem>
#include <random>
#include <set>

#include "sat3d/netblocks/model.hpp"

using namespace sat3d;
using namespace sat3d::netblocks;

namespace {

// Narrow network with the default topology (4 stages, patch 2, window 4).
ModelConfig small_config(int side) {
  ModelConfig c;
  c.crop = cube(side);
  c.encoder.embed_dim = 8;
  c.encoder.depths = {2, 1, 1, 2};
  c.encoder.heads = {1, 2, 2, 4};
  c.decoder.mlp_dim = 64;
  c.critic.channels = {4, 8};
  c.seed = 5;
  return c;
}

Volume random_volume(Extent3 e, unsigned seed) {
  Volume v;
  v.data = ScalarGrid(e);
  std::mt19937 rng{seed};
  std::normal_distribution<float> n;
  for (auto& x : v.data.values()) x = n(rng);
  return v;
}

bool finite(const nn::Matrix& m) { return m.allFinite(); }

}  // namespace

TEST_CASE("encoder shape arithmetic for the default configuration") {
  EncoderConfig cfg;
  CHECK(cfg.embed_dim == 48);
  CHECK(cfg.output_channels() == 384);
  CHECK(cfg.output_extent(cube(128)) == cube(8));
  for (int s = 0; s < 4; ++s) CHECK(cfg.stage_channels(s) == 48 << s);
  CHECK_NOTHROW(cfg.validate(cube(128)));
  CHECK_NOTHROW(cfg.validate(cube(64)));
  CHECK_THROWS_AS(cfg.validate(cube(120)), ConfigError);
  CHECK_THROWS_AS(cfg.validate(cube(48)), ConfigError);  // stage-2 grid of 6 vs window 4
}

TEST_CASE("window layout is a permutation and regions split shifted windows") {
  const Extent3 g{8, 8, 4};
  const WindowLayout plain = make_window_layout(g, 4, false);
  CHECK(plain.tokens == 64);
  CHECK_FALSE(plain.regions);
  const WindowLayout sh = make_window_layout(g, 4, true);
  std::vector<int> seen(g.count(), 0);
  for (int r : *sh.order) seen[r]++;
  for (int s : seen) CHECK(s == 1);
  for (std::size_t r = 0; r < sh.order->size(); ++r) CHECK((*sh.inverse)[(*sh.order)[r]] == int(r));
  // d equals the window, so that axis is neither shifted nor split.
  CHECK(sh.shift == Voxel{2, 2, 0});
  // The last window along h and w mixes wrapped and unwrapped rows.
  const int last = (2 * 2 * 1 - 1) * 64;
  std::set<int> ids((*sh.regions).begin() + last, (*sh.regions).begin() + last + 64);
  CHECK(ids.size() == 4);
  // Window-wise identical ids for the first window (no wrap).
  std::set<int> first((*sh.regions).begin(), (*sh.regions).begin() + 64);
  CHECK(first.size() == 1);
}

TEST_CASE("encoder stages double channels and final shape matches") {
  Sat3dNet net(small_config(32));
  const auto st = net.encoder_stages(random_volume(cube(32), 1));
  REQUIRE(st.size() == 4);
  for (int s = 0; s < 4; ++s) {
    CHECK(st[s].channels() == 8 << s);
    CHECK(st[s].extent == cube(16 >> s));
  }
}

TEST_CASE("encoder is deterministic and finite on zeros") {
  Sat3dNet net(small_config(32));
  nn::NoGradGuard g;
  const Volume v = random_volume(cube(32), 2);
  CHECK(net.encode_image(v).features.value() == net.encode_image(v).features.value());
  Volume z;
  z.data = ScalarGrid(cube(32));
  CHECK(finite(net.encode_image(z).features.value()));
  // Same seed, separate instance: identical parameters.
  Sat3dNet twin(small_config(32));
  CHECK(twin.params().hash() == net.params().hash());
}

TEST_CASE("prompt encoder contracts") {
  Sat3dNet net(small_config(32));
  nn::NoGradGuard g;
  const LabelGrid blank(cube(32), 0);
  SUBCASE("first iteration uses the no-mask embedding") {
    const PromptEmbedding p = net.encode_prompts({}, blank, blank);
    CHECK(p.points == 0);
    CHECK_FALSE(p.sparse.defined());
    const auto& nm = net.params().get("prompt.no_mask_embed").value();
    REQUIRE(p.dense.rows() == 8);
    for (int r = 0; r < p.dense.rows(); ++r) CHECK(p.dense.value().row(r) == nm);
  }
  SUBCASE("one token per point") {
    std::vector<PointPrompt> pts;
    for (int i = 0; i < 5; ++i) pts.push_back({{i, 2 * i, 31 - i}, i % 2});
    const PromptEmbedding p = net.encode_prompts(pts, blank, blank);
    CHECK(p.sparse.rows() == 5);
    CHECK(p.sparse.cols() == 64);
  }
  SUBCASE("label flip changes the token") {
    const auto a = net.encode_prompts({{{3, 4, 5}, 1}}, blank, blank).sparse.value();
    const auto b = net.encode_prompts({{{3, 4, 5}, 0}}, blank, blank).sparse.value();
    CHECK((a - b).norm() > 0.0f);
  }
  SUBCASE("token order is equivariant") {
    const PointPrompt p1{{1, 2, 3}, 1}, p2{{20, 10, 5}, 0};
    const auto a = net.encode_prompts({p1, p2}, blank, blank).sparse.value();
    const auto b = net.encode_prompts({p2, p1}, blank, blank).sparse.value();
    CHECK(a.row(0) == b.row(1));
    CHECK(a.row(1) == b.row(0));
  }
  SUBCASE("out-of-bounds points are rejected") {
    CHECK_THROWS_AS(net.encode_prompts({{{32, 0, 0}, 1}}, blank, blank), PromptBoundsError);
    CHECK_THROWS_AS(net.encode_prompts({{{0, -1, 0}, 1}}, blank, blank), PromptBoundsError);
  }
  SUBCASE("dense prompts leave the blank path") {
    LabelGrid m(cube(32), 0);
    m(0, 10, 10, 10) = 1;
    const PromptEmbedding p = net.encode_prompts({}, m, blank);
    CHECK(p.dense.rows() == 8);
    CHECK(p.dense.cols() == 64);
    const auto& nm = net.params().get("prompt.no_mask_embed").value();
    CHECK((p.dense.value().row(0) - nm).norm() > 0.0f);
  }
}

TEST_CASE("decoder returns full-resolution logits sensitive to prompts") {
  Sat3dNet net(small_config(32));
  nn::NoGradGuard g;
  const Volume v = random_volume(cube(32), 3);
  const LabelGrid blank(cube(32), 0);
  const ImageEmbedding img = net.encode_image(v);
  const nn::Matrix a =
      net.decode_mask(img, net.encode_prompts({{{5, 5, 5}, 1}}, blank, blank)).value();
  const nn::Matrix b =
      net.decode_mask(img, net.encode_prompts({{{25, 20, 5}, 1}}, blank, blank)).value();
  CHECK(a.rows() == 32 * 32 * 32);
  CHECK(a.cols() == 1);
  CHECK(finite(a));
  CHECK((a - b).cwiseAbs().maxCoeff() > 0.0f);

  Volume z;
  z.data = ScalarGrid(cube(32));
  const nn::Matrix c = net.decode_mask(net.encode_image(z), net.encode_prompts({}, blank, blank)).value();
  CHECK(finite(c));
}

TEST_CASE("shape pipeline at 128 cubed") {
  ModelConfig c = small_config(128);
  c.encoder.embed_dim = 4;
  c.encoder.depths = {1, 1, 1, 1};
  c.encoder.heads = {1, 1, 2, 2};
  c.decoder.heads = 4;
  Sat3dNet net(c);
  CHECK(c.embedding_extent() == cube(8));
  const ScalarGrid out =
      net.predict_logits(random_volume(cube(128), 4), {{{64, 64, 64}, 1}}, {}, {});
  CHECK(out.channels() == 1);
  CHECK(out.extent() == cube(128));
}

TEST_CASE("critic codomain, determinism and constant interior") {
  Sat3dNet net(small_config(32));
  ScalarGrid p(cube(32));
  std::mt19937 rng{7};
  std::uniform_real_distribution<float> u;
  for (auto& x : p.values()) x = u(rng);
  const ConfidenceMap c = net.critic_map(p);
  CHECK(c.values().minCoeff() >= 0.0f);
  CHECK(c.values().maxCoeff() <= 1.0f);
  CHECK(net.critic_map(p) == c);

  const ConfidenceMap k = net.critic_map(ScalarGrid(cube(32), 0.6f));
  // Voxels at least 10 from every face never see zero padding.
  double mean = 0;
  std::vector<float> interior, border;
  for (std::int64_t r = 0; r < k.voxels(); ++r) {
    const Voxel v = cube(32).voxel(r);
    int dist = 32;
    for (int a = 0; a < 3; ++a) dist = std::min({dist, v[a], 31 - v[a]});
    (dist >= 10 ? interior : border).push_back(k.values()[r]);
  }
  auto variance = [&](const std::vector<float>& xs) {
    mean = 0;
    for (float x : xs) mean += x;
    mean /= double(xs.size());
    double s = 0;
    for (float x : xs) s += (x - mean) * (x - mean);
    return s / double(xs.size());
  };
  const double vi = variance(interior), vb = variance(border);
  CHECK(vi < 1e-10);
  CHECK(vi < vb);
}

TEST_CASE("binarize_confidence rules") {
  ConfidenceMap c(cube(4), 0.9f);
  CHECK(binarize_confidence(c).count() == 64);
  c.values().setConstant(0.3f);
  CHECK(binarize_confidence(c).count() == 0);
  for (std::int64_t r = 0; r < 64; ++r) {
    const Voxel v = cube(4).voxel(r);
    c.values()[r] = (v[0] + v[1] + v[2]) % 2 ? 0.4f : 0.2f;
  }
  const BinaryMask b = binarize_confidence(c, 0.3);
  for (std::int64_t r = 0; r < 64; ++r) CHECK(b.data.values()[r] == (c.values()[r] > 0.3f ? 1 : 0));
  CHECK_THROWS_AS(binarize_confidence(c, 0.0), ConfigError);
  CHECK_THROWS_AS(binarize_confidence(c, 1.0), ConfigError);
}

TEST_CASE("checkpoint round trip restores every tensor") {
  const auto dir = std::filesystem::temp_directory_path() / "sat3d_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.ckpt";
  ModelConfig cfg = small_config(32);
  Sat3dNet a(cfg);
  a.params().get("decoder.mask_token").mutable_value().setConstant(0.25f);
  save_model(path, a, {{"note", "x"}});
  auto b = load_model(path);
  CHECK(b->params().hash() == a.params().hash());
  CHECK(read_archive(path).config.at("note") == "x");
  CHECK(b->params().get("decoder.mask_token").value()(0, 3) == 0.25f);
  // Truncation is detected.
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 4);
  CHECK_THROWS_AS(load_model(path), CheckpointError);
  std::filesystem::remove_all(dir);
}
