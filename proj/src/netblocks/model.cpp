#include "sat3d/netblocks/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "sat3d/errors.hpp"

namespace sat3d::netblocks {

using nn::Matrix;
using nn::Var;

static_assert(std::endian::native == std::endian::little, "archive IO assumes little-endian");

Sat3dNet::Sat3dNet(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  encoder_ = ImageEncoder(store_, cfg_.encoder, cfg_.seed);
  prompt_ = PromptEncoder(store_, cfg_);
  decoder_ = MaskDecoder(store_, cfg_);
  critic_ = Critic(store_, cfg_.critic, cfg_.seed);
}

Var to_var(const ScalarGrid& g, bool requires_grad) {
  return Var(Matrix(Eigen::Map<const Matrix>(g.data(), g.size(), 1)), requires_grad);
}

ScalarGrid to_grid(const Matrix& column, const Extent3& extent) {
  if (column.size() != extent.count()) throw ShapeError("column does not match extent");
  ScalarGrid g(extent);
  std::memcpy(g.data(), column.data(), sizeof(float) * std::size_t(column.size()));
  return g;
}

ImageEmbedding Sat3dNet::encode_image(const Volume& v) const {
  if (v.data.channels() != 1) throw ShapeError("encoder expects a single-channel volume");
  if (v.data.extent() != cfg_.crop) throw ShapeError("volume does not match the crop extent");
  ImageEmbedding e = encoder_(to_var(v.data), v.data.extent());
  e.source_spacing = v.spacing;
  return e;
}

ImageEmbedding Sat3dNet::encode_image(const Var& image) const { return encoder_(image, cfg_.crop); }

std::vector<ImageEmbedding> Sat3dNet::encoder_stages(const Volume& v) const {
  return encoder_.stages(to_var(v.data), v.data.extent());
}

PromptEmbedding Sat3dNet::encode_prompts(const std::vector<PointPrompt>& points,
                                         const LabelGrid& prev_mask,
                                         const LabelGrid& prev_conf) const {
  return prompt_(points, prev_mask, prev_conf);
}

Var Sat3dNet::decode_mask(const ImageEmbedding& image, const PromptEmbedding& prompts) const {
  return decoder_(image, prompts, prompt_.image_positional());
}

Var Sat3dNet::critic_forward(const Var& prob) const { return critic_(prob, cfg_.crop); }

ScalarGrid Sat3dNet::predict_logits(const Volume& v, const std::vector<PointPrompt>& points,
                                    const LabelGrid& prev_mask, const LabelGrid& prev_conf) const {
  nn::NoGradGuard guard;
  const Var logits = decode_mask(encode_image(v), encode_prompts(points, prev_mask, prev_conf));
  return to_grid(logits.value(), cfg_.crop);
}

ConfidenceMap Sat3dNet::critic_map(const ScalarGrid& prob) const {
  nn::NoGradGuard guard;
  return to_grid(critic_forward(to_var(prob)).value(), cfg_.crop);
}

// --- checkpoint archive ----------------------------------------------------

namespace {
constexpr char kMagic[] = "SAT3DCKPT1\n";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;
}  // namespace

const Matrix* Archive::find(const std::string& name) const {
  for (const auto& [n, m] : tensors)
    if (n == name) return &m;
  return nullptr;
}

void write_archive(const std::filesystem::path& path, const nlohmann::json& config,
                   const std::vector<std::pair<std::string, const Matrix*>>& tensors) {
  nlohmann::json index = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : tensors) {
    index.push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}, {"offset", offset}});
    offset += sizeof(float) * std::uint64_t(m->size());
  }
  const std::string header = nlohmann::json{{"config", config}, {"tensors", index}}.dump();
  const std::uint64_t len = header.size();

  // Write-then-rename so a crash never leaves a truncated archive in place.
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    out.write(kMagic, kMagicLen);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(header.data(), std::streamsize(header.size()));
    for (const auto& t : tensors)
      out.write(reinterpret_cast<const char*>(t.second->data()),
                std::streamsize(sizeof(float) * t.second->size()));
    out.flush();
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[kMagicLen];
  in.read(magic, kMagicLen);
  if (!in || std::memcmp(magic, kMagic, kMagicLen) != 0)
    throw CheckpointError(path.string() + " is not a checkpoint archive");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (std::uint64_t(1) << 32)) throw CheckpointError("bad checkpoint header length");
  std::string header(len, '\0');
  in.read(header.data(), std::streamsize(len));
  if (!in) throw CheckpointError("truncated checkpoint header");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header: ") + e.what());
  }
  Archive a;
  a.config = j.value("config", nlohmann::json::object());
  const std::streamoff base = in.tellg();
  for (const auto& t : j.at("tensors")) {
    Matrix m(t.at("rows").get<nn::Index>(), t.at("cols").get<nn::Index>());
    in.seekg(base + std::streamoff(t.at("offset").get<std::uint64_t>()));
    in.read(reinterpret_cast<char*>(m.data()), std::streamsize(sizeof(float) * m.size()));
    if (!in) throw CheckpointError("truncated tensor " + t.at("name").get<std::string>());
    a.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
  }
  return a;
}

void save_model(const std::filesystem::path& path, const Sat3dNet& net,
                const nlohmann::json& extra) {
  nlohmann::json config = extra;
  config["model"] = net.config();
  std::vector<std::pair<std::string, const Matrix*>> tensors;
  for (const auto& p : net.params().items()) tensors.emplace_back(p.name, &p.var.value());
  write_archive(path, config, tensors);
}

void load_parameters(const Archive& archive, nn::ParameterStore& store) {
  for (const auto& p : store.items()) {
    const Matrix* m = archive.find(p.name);
    if (!m) throw CheckpointError("checkpoint lacks parameter " + p.name);
    if (m->rows() != p.var.rows() || m->cols() != p.var.cols())
      throw CheckpointError("shape mismatch for " + p.name);
    Var v = p.var;
    v.mutable_value() = *m;
  }
}

std::unique_ptr<Sat3dNet> load_model(const std::filesystem::path& path) {
  const Archive a = read_archive(path);
  if (!a.config.contains("model")) throw CheckpointError("checkpoint has no model config");
  auto net = std::make_unique<Sat3dNet>(a.config.at("model").get<ModelConfig>());
  load_parameters(a, net->params());
  return net;
}

}  // namespace sat3d::netblocks
