#include "partleak/params.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace partleak {
namespace {

constexpr const char* kIndexHeader = "partleak-checkpoint 1";

std::uint64_t to_little_endian(std::uint64_t x) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((x >> (8 * i)) & 0xFF) << (8 * (7 - i));
    return r;
  }
  return x;
}

std::string shape_token(const ad::Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

ad::Shape parse_shape_token(const std::string& tok) {
  ad::Shape s;
  std::stringstream ss(tok);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    if (part.empty()) throw ValidationError("checkpoint: bad shape '" + tok + "'");
    std::size_t pos = 0;
    unsigned long v = std::stoul(part, &pos);
    if (pos != part.size() || v == 0) throw ValidationError("checkpoint: bad shape '" + tok + "'");
    s.push_back(v);
  }
  if (s.empty()) throw ValidationError("checkpoint: empty shape");
  return s;
}

}  // namespace

const ad::Tensor& BoundParams::operator[](const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return it->second;
}

Parameter& ParamStore::add(std::string name, ad::Shape shape, std::vector<double> value, std::string group) {
  if (contains(name)) throw ValidationError("duplicate parameter '" + name + "'");
  if (ad::numel(shape) != value.size()) throw ValidationError("parameter '" + name + "': size mismatch");
  index_[name] = params_.size();
  params_.push_back(Parameter{std::move(name), std::move(shape), std::move(value), std::move(group)});
  return params_.back();
}

Parameter& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return params_[it->second];
}

const Parameter& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return params_[it->second];
}

std::size_t ParamStore::num_values() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

BoundParams ParamStore::bind(ad::Tape& tape, bool trainable, const std::vector<std::string>& frozen_groups) const {
  BoundParams b;
  for (const auto& p : params_) {
    bool req = trainable;
    for (const auto& g : frozen_groups) req = req && p.group != g;
    b.set(p.name, tape.leaf(p.shape, p.value, req));
  }
  return b;
}

std::vector<std::vector<double>> ParamStore::gradients(const ad::Tape& tape, const BoundParams& bound) const {
  std::vector<std::vector<double>> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(tape.grad(bound[p.name]));
  return out;
}

void ParamStore::merge(const ParamStore& other, const std::string& prefix, const std::string& group) {
  for (const auto& p : other.params_) add(prefix + p.name, p.shape, p.value, group);
}

void save_checkpoint(const ParamStore& store, const std::filesystem::path& base) {
  auto bin_path = base;
  bin_path += ".bin";
  auto idx_path = base;
  idx_path += ".idx";
  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  std::ofstream idx(idx_path, std::ios::trunc);
  if (!bin || !idx) throw ValidationError("cannot write checkpoint at " + base.string());
  idx << kIndexHeader << '\n';
  std::uint64_t offset = 0;
  for (const auto& p : store.all()) {
    idx << p.name << ' ' << shape_token(p.shape) << ' ' << offset << '\n';
    for (double v : p.value) {
      std::uint64_t bits = to_little_endian(std::bit_cast<std::uint64_t>(v));
      bin.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
    offset += p.value.size() * sizeof(double);
  }
  if (!bin || !idx) throw ValidationError("checkpoint write failed at " + base.string());
}

ParamStore load_checkpoint(const std::filesystem::path& base, const std::string& group) {
  auto bin_path = base;
  bin_path += ".bin";
  auto idx_path = base;
  idx_path += ".idx";
  std::ifstream idx(idx_path);
  std::ifstream bin(bin_path, std::ios::binary);
  if (!idx || !bin) throw ValidationError("cannot open checkpoint at " + base.string());
  std::string line;
  if (!std::getline(idx, line) || line != kIndexHeader) throw ValidationError("checkpoint: bad index header");
  bin.seekg(0, std::ios::end);
  const auto bin_size = static_cast<std::uint64_t>(bin.tellg());
  ParamStore store;
  std::uint64_t expected_offset = 0;
  while (std::getline(idx, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, shape_tok;
    std::uint64_t offset = 0;
    if (!(ls >> name >> shape_tok >> offset)) throw ValidationError("checkpoint: malformed index line '" + line + "'");
    auto shape = parse_shape_token(shape_tok);
    const std::uint64_t n = ad::numel(shape);
    if (offset != expected_offset || offset + n * 8 > bin_size) {
      throw ValidationError("checkpoint: offset mismatch for '" + name + "'");
    }
    std::vector<double> values(n);
    bin.seekg(static_cast<std::streamoff>(offset));
    for (auto& v : values) {
      std::uint64_t bits = 0;
      bin.read(reinterpret_cast<char*>(&bits), sizeof bits);
      v = std::bit_cast<double>(to_little_endian(bits));
    }
    if (!bin) throw ValidationError("checkpoint: truncated data for '" + name + "'");
    store.add(name, std::move(shape), std::move(values), group);
    expected_offset = offset + n * 8;
  }
  if (expected_offset != bin_size) throw ValidationError("checkpoint: trailing bytes in " + bin_path.string());
  return store;
}

}  // namespace partleak
