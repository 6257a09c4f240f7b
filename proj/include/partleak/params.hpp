#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "partleak/tensor.hpp"

namespace partleak {

/// A named, persistent parameter array. `group` selects the optimizer
/// learning-rate group; parameters in a frozen group are never updated.
struct Parameter {
  std::string name;
  ad::Shape shape;
  std::vector<double> value;
  std::string group;
};

/// Parameters bound onto one tape for a forward/backward pass.
class BoundParams {
 public:
  const ad::Tensor& operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  void set(const std::string& name, ad::Tensor t) { tensors_[name] = t; }

 private:
  std::map<std::string, ad::Tensor> tensors_;
};

/// Ordered parameter collection. Insertion order is the serialisation and
/// optimizer order.
class ParamStore {
 public:
  Parameter& add(std::string name, ad::Shape shape, std::vector<double> value, std::string group);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }
  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  std::size_t num_values() const;

  /// Leaves for every parameter. With `trainable` false nothing requires a
  /// gradient; otherwise only parameters in `frozen_groups` are excluded.
  BoundParams bind(ad::Tape& tape, bool trainable, const std::vector<std::string>& frozen_groups = {}) const;
  /// Gradients after tape.backward(), in parameter order (zeros when a
  /// parameter was not reached).
  std::vector<std::vector<double>> gradients(const ad::Tape& tape, const BoundParams& bound) const;

  /// Copies every parameter of `other` under `prefix + name`.
  void merge(const ParamStore& other, const std::string& prefix, const std::string& group);

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

/// Checkpoint = `<base>.bin` (concatenated little-endian float64 arrays)
/// and `<base>.idx` (text lines "name shape byte_offset").
void save_checkpoint(const ParamStore& store, const std::filesystem::path& base);
ParamStore load_checkpoint(const std::filesystem::path& base, const std::string& group = "default");

}  // namespace partleak
