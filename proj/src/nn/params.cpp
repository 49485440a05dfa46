#include "sat3d/nn/params.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "sat3d/errors.hpp"

namespace sat3d::nn {

namespace {

bool has_prefix(const std::string& s, const std::string& prefix) {
  return s.compare(0, prefix.size(), prefix) == 0;
}

double unit(std::mt19937_64& rng) { return double(rng() >> 11) * 0x1.0p-53; }

}  // namespace

std::uint64_t name_seed(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 1469598103934665603ull ^ seed;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

Matrix truncated_normal(Index rows, Index cols, float stddev, std::uint64_t seed,
                        const std::string& name) {
  std::mt19937_64 rng(name_seed(seed, name));
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) {
    double z;
    do {
      const double u1 = std::max(unit(rng), 1e-300);
      const double u2 = unit(rng);
      z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    } while (std::abs(z) > 2.0);
    m.data()[i] = float(z * stddev);
  }
  return m;
}

Matrix uniform_init(Index rows, Index cols, float bound, std::uint64_t seed,
                    const std::string& name) {
  std::mt19937_64 rng(name_seed(seed, name));
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = float((2.0 * unit(rng) - 1.0) * bound);
  return m;
}

Var ParameterStore::add(const std::string& name, Matrix init) {
  if (contains(name)) throw ConfigError("duplicate parameter name " + name);
  Var v(std::move(init), true);
  index_[name] = items_.size();
  items_.push_back({name, v});
  return v;
}

Var ParameterStore::add_buffer(const std::string& name, Matrix value) {
  if (contains(name)) throw ConfigError("duplicate parameter name " + name);
  Var v(std::move(value), false);
  index_[name] = items_.size();
  items_.push_back({name, v});
  buffers_[name] = true;
  return v;
}

Var ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + name);
  return items_[it->second].var;
}

bool ParameterStore::is_buffer(const std::string& name) const { return buffers_.count(name) != 0; }

std::vector<NamedParam> ParameterStore::trainable(const std::string& prefix) const {
  std::vector<NamedParam> out;
  for (const auto& p : items_)
    if (!is_buffer(p.name) && has_prefix(p.name, prefix)) out.push_back(p);
  return out;
}

void ParameterStore::zero_grad(const std::string& prefix) {
  for (auto& p : items_)
    if (has_prefix(p.name, prefix)) p.var.zero_grad();
}

void ParameterStore::set_trainable(const std::string& prefix, bool trainable) {
  for (auto& p : items_)
    if (!is_buffer(p.name) && has_prefix(p.name, prefix)) p.var.set_requires_grad(trainable);
}

std::size_t ParameterStore::count(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& p : items_)
    if (!is_buffer(p.name) && has_prefix(p.name, prefix)) n += std::size_t(p.var.value().size());
  return n;
}

std::uint64_t ParameterStore::hash(const std::string& prefix) const {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& p : items_) {
    if (!has_prefix(p.name, prefix)) continue;
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.var.value().data());
    const std::size_t n = std::size_t(p.var.value().size()) * sizeof(float);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

void ParameterStore::copy_values_from(const ParameterStore& other) {
  for (auto& p : items_) {
    const Var src = other.get(p.name);
    if (src.rows() != p.var.rows() || src.cols() != p.var.cols())
      throw ShapeError("parameter shape mismatch for " + p.name);
    p.var.mutable_value() = src.value();
  }
}

}  // namespace sat3d::nn
