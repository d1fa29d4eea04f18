#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "depthot/io.hpp"
#include "depthot/tape.hpp"
#include "depthot/tensor.hpp"

namespace depthot {

/// Ordered collection of named parameter tensors.
class ParamSet {
 public:
  void add(std::string name, Tensor t) {
    if (find(name)) throw std::invalid_argument("duplicate parameter " + name);
    names_.push_back(std::move(name));
    tensors_.push_back(std::move(t));
  }

  const Tensor& operator[](std::string_view name) const { return tensors_[index(name)]; }
  Tensor& operator[](std::string_view name) { return tensors_[index(name)]; }

  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const Tensor& tensor(std::size_t i) const { return tensors_[i]; }
  Tensor& tensor(std::size_t i) { return tensors_[i]; }

  bool all_finite() const {
    for (const Tensor& t : tensors_) {
      if (!t.all_finite()) return false;
    }
    return true;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    return a.names_ == b.names_ && a.tensors_ == b.tensors_;
  }

 private:
  const Tensor* find(std::string_view name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return &tensors_[i];
    }
    return nullptr;
  }
  std::size_t index(std::string_view name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return i;
    }
    throw std::out_of_range("no parameter named " + std::string(name));
  }

  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

/// The same parameters recorded on a tape, in ParamSet order.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ParamSet& set, bool trainable) {
    for (std::size_t i = 0; i < set.size(); ++i) {
      names_.push_back(set.name(i));
      vars_.push_back(trainable ? tape.param(set.tensor(i)) : tape.constant(set.tensor(i)));
    }
  }

  /// Names `set` onto already recorded variables (one per parameter, in order).
  static BoundParams wrap(const ParamSet& set, std::vector<Var> vars) {
    if (vars.size() != set.size()) throw std::invalid_argument("BoundParams::wrap: count mismatch");
    BoundParams b;
    for (std::size_t i = 0; i < set.size(); ++i) b.names_.push_back(set.name(i));
    b.vars_ = std::move(vars);
    return b;
  }

  Var operator[](std::string_view name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return vars_[i];
    }
    throw std::out_of_range("no parameter named " + std::string(name));
  }

  const std::vector<Var>& vars() const { return vars_; }

  /// Gradients gathered from the tape after backward, in ParamSet order.
  std::vector<Tensor> grads() const {
    std::vector<Tensor> out;
    for (const Var& v : vars_) out.push_back(v.tape()->grad(v));
    return out;
  }

 private:
  BoundParams() = default;

  std::vector<std::string> names_;
  std::vector<Var> vars_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
template <class Rng>
Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform(std::move(shape), -bound, bound, rng);
}

// Directory format: one DTEN file per tensor plus manifest.txt with lines
// "<name> <e0>x<e1>x..." in parameter order.

inline void save_params(const std::filesystem::path& dir, const ParamSet& set) {
  std::filesystem::create_directories(dir);
  std::string manifest;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Shape& s = set.tensor(i).shape();
    manifest += set.name(i) + ' ';
    for (std::size_t k = 0; k < s.size(); ++k) manifest += (k ? "x" : "") + std::to_string(s[k]);
    manifest += '\n';
    write_dten(dir / (set.name(i) + ".dten"), set.tensor(i));
  }
  write_file_atomic(dir / "manifest.txt", manifest);
}

inline ParamSet load_params(const std::filesystem::path& dir) {
  std::istringstream manifest(read_file(dir / "manifest.txt"));
  ParamSet set;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string name, dims;
    if (!(fields >> name >> dims)) throw std::runtime_error("bad manifest line: " + line);
    Shape shape;
    std::istringstream ds(dims);
    std::string tok;
    while (std::getline(ds, tok, 'x')) shape.push_back(std::stoul(tok));
    Tensor t = read_dten(dir / (name + ".dten"));
    if (t.shape() != shape) detail::shape_fail("manifest shape for " + name, shape, t.shape());
    set.add(name, std::move(t));
  }
  return set;
}

/// Adam with bias correction.
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-6;
  };

  explicit Adam(Options opt) : opt_(opt) {}

  void step(ParamSet& params, const std::vector<Tensor>& grads) {
    if (m_.empty()) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_.emplace_back(params.tensor(i).size(), 0.0);
        v_.emplace_back(params.tensor(i).size(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params.tensor(i).data();
      auto g = grads[i].data();
      for (std::size_t k = 0; k < p.size(); ++k) {
        m_[i][k] = opt_.beta1 * m_[i][k] + (1 - opt_.beta1) * g[k];
        v_[i][k] = opt_.beta2 * v_[i][k] + (1 - opt_.beta2) * g[k] * g[k];
        p[k] -= opt_.lr * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + opt_.eps);
      }
    }
  }

 private:
  Options opt_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Plain gradient descent with a fixed step.
inline void sgd_step(ParamSet& params, const std::vector<Tensor>& grads, double lr) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params.tensor(i).data();
    auto g = grads[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr * g[k];
  }
}

}  // namespace depthot
