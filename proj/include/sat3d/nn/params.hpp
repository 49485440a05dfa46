#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sat3d/nn/tensor.hpp"

namespace sat3d::nn {

struct NamedParam {
  std::string name;
  Var var;
};

// Ordered registry of trainable leaves. Names are dotted paths such as
// "encoder.stage0.block1.attn.qkv.weight" and are stable across versions.
class ParameterStore {
 public:
  Var add(const std::string& name, Matrix init);
  // Non-trainable constant stored alongside the parameters (e.g. a fixed
  // Fourier frequency matrix); saved in checkpoints but never optimised.
  Var add_buffer(const std::string& name, Matrix value);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Var get(const std::string& name) const;
  bool is_buffer(const std::string& name) const;

  const std::vector<NamedParam>& items() const { return items_; }
  std::vector<NamedParam> trainable(const std::string& prefix = "") const;

  void zero_grad(const std::string& prefix = "");
  void set_trainable(const std::string& prefix, bool trainable);
  std::size_t count(const std::string& prefix = "") const;  // scalar count
  // FNV-1a over the raw values of every entry under `prefix`.
  std::uint64_t hash(const std::string& prefix = "") const;
  void copy_values_from(const ParameterStore& other);

 private:
  std::vector<NamedParam> items_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, bool> buffers_;
};

// Deterministic initialisers: the stream depends only on (seed, name).
Matrix truncated_normal(Index rows, Index cols, float stddev, std::uint64_t seed,
                        const std::string& name);
Matrix uniform_init(Index rows, Index cols, float bound, std::uint64_t seed,
                    const std::string& name);
std::uint64_t name_seed(std::uint64_t seed, const std::string& name);

}  // namespace sat3d::nn
