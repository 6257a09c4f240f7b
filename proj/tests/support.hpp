#pragma once

// Shared helpers for the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "partleak/ops.hpp"
#include "partleak/rng.hpp"

namespace partleak::testing {

inline std::vector<double> random_vec(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, scale);
  return v;
}

struct LeafSpec {
  ad::Shape shape;
  std::vector<double> value;
};

/// Builds a scalar from leaves recorded on `tape` (in the order given).
using ScalarFn = std::function<ad::Tensor(ad::Tape&, const std::vector<ad::Tensor>&)>;

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Central finite differences against reverse mode for every leaf entry.
/// Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheck gradcheck(const ScalarFn& f, const std::vector<LeafSpec>& leaves, double h = 1e-5,
                           double floor = 1e-4) {
  auto eval = [&](const std::vector<LeafSpec>& ls) {
    ad::Tape t;
    std::vector<ad::Tensor> xs;
    for (const auto& l : ls) xs.push_back(t.leaf(l.shape, l.value, false));
    return f(t, xs).item();
  };
  ad::Tape tape;
  std::vector<ad::Tensor> xs;
  for (const auto& l : leaves) xs.push_back(tape.leaf(l.shape, l.value, true));
  ad::Tensor y = f(tape, xs);
  tape.backward(y);
  GradCheck r;
  std::vector<LeafSpec> work = leaves;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    const auto g = tape.grad(xs[i]);
    for (std::size_t j = 0; j < leaves[i].value.size(); ++j) {
      const double x0 = work[i].value[j];
      work[i].value[j] = x0 + h;
      const double fp = eval(work);
      work[i].value[j] = x0 - h;
      const double fm = eval(work);
      work[i].value[j] = x0;
      const double num = (fp - fm) / (2.0 * h);
      const double err = std::fabs(g[j] - num) / std::max({std::fabs(g[j]), std::fabs(num), floor});
      r.max_rel_error = std::max(r.max_rel_error, err);
      ++r.checked;
    }
  }
  return r;
}

/// sum(x * w) with a fixed random weight, so every output entry gets a
/// distinct cotangent.
inline ad::Tensor random_projection(const ad::Tensor& x, std::uint64_t seed = 77) {
  Rng rng(seed, 5);
  return ad::sum(ad::mul(x, x.tape().constant(x.shape(), random_vec(rng, x.size()))));
}

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() / ("partleak-" + tag + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

/// Every regular file under `dir` (relative path -> bytes).
inline std::map<std::string, std::string> read_tree(const std::filesystem::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream f(e.path(), std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    out[std::filesystem::relative(e.path(), dir).string()] = ss.str();
  }
  return out;
}

}  // namespace partleak::testing
