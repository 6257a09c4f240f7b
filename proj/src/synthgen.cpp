#include "partleak/synthgen.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "partleak/rng.hpp"

namespace partleak::synth {

using nlohmann::json;

void DatasetSpec::validate() const {
  if (parts < 2) throw ValidationError("DatasetSpec: need at least 2 parts");
  if (colors < 2) throw ValidationError("DatasetSpec: need at least 2 colors");
  if (!(rho >= 0.0 && rho <= 1.0)) throw ValidationError("DatasetSpec: rho must lie in [0, 1]");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw ValidationError("DatasetSpec: noise_std must be >= 0");
  if (n_train == 0) throw ValidationError("DatasetSpec: n_train must be positive");
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw ValidationError("DatasetSpec: image_size must be a positive multiple of patch_size");
  }
  (void)regions();
}

std::vector<Region> DatasetSpec::regions() const {
  std::size_t cols = 1;
  while (cols * cols < parts) ++cols;
  const std::size_t rows = (parts + cols - 1) / cols;
  if (image_size % (cols * patch_size) != 0 || image_size % (rows * patch_size) != 0) {
    throw ValidationError("DatasetSpec: region grid does not align with the patch grid");
  }
  if (margin % patch_size != 0) throw ValidationError("DatasetSpec: margin must be a multiple of patch_size");
  const std::size_t cw = image_size / cols, ch = image_size / rows;
  if (2 * margin >= cw || 2 * margin >= ch) throw ValidationError("DatasetSpec: regions cannot fit the image");
  std::vector<Region> out;
  for (std::size_t g = 0; g < parts; ++g) {
    const std::size_t r = g / cols, c = g % cols;
    out.push_back({r * ch + margin, c * cw + margin, ch - 2 * margin, cw - 2 * margin});
  }
  return out;
}

std::vector<std::array<double, 3>> make_palette(std::size_t colors) {
  const double s = 0.8, v = 0.9;
  std::vector<std::array<double, 3>> out;
  for (std::size_t i = 0; i < colors; ++i) {
    const double h = 6.0 * static_cast<double>(i) / static_cast<double>(colors);
    const int sector = static_cast<int>(std::floor(h)) % 6;
    const double f = h - std::floor(h);
    const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (sector) {
      case 0: out.push_back({v, t, p}); break;
      case 1: out.push_back({q, v, p}); break;
      case 2: out.push_back({p, v, t}); break;
      case 3: out.push_back({p, q, v}); break;
      case 4: out.push_back({t, p, v}); break;
      default: out.push_back({v, p, q}); break;
    }
  }
  return out;
}

namespace {

Split make_split(const DatasetSpec& spec, const std::vector<std::array<double, 3>>& palette, std::size_t n,
                 std::uint64_t stream) {
  const std::size_t S = spec.image_size, G = spec.parts, C = spec.colors;
  const auto regions = spec.regions();
  Rng rng(spec.seed, stream);
  Split sp;
  sp.n = n;
  sp.images.resize(n * 3 * S * S);
  sp.attributes.assign(n * G * C, 0);
  sp.masks.assign(n * G * S * S, 0);
  sp.keypoints.resize(n * G * 2);
  sp.colors.resize(n * G);
  std::vector<int> owner(S * S, -1);
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        if (regions[g].contains(y, x)) owner[y * S + x] = static_cast<int>(g);
      }
  for (std::size_t i = 0; i < n; ++i) {
    const bool shared = rng.bernoulli(spec.rho);
    const auto common = static_cast<std::int32_t>(rng.below(C));
    for (std::size_t g = 0; g < G; ++g) {
      const auto c = shared ? common : static_cast<std::int32_t>(rng.below(C));
      sp.colors[i * G + g] = c;
      sp.attributes[(i * G + g) * C + static_cast<std::size_t>(c)] = 1;
      const Region& r = regions[g];
      sp.keypoints[(i * G + g) * 2] = static_cast<std::int32_t>(r.top + rng.below(r.height));
      sp.keypoints[(i * G + g) * 2 + 1] = static_cast<std::int32_t>(r.left + rng.below(r.width));
      for (std::size_t p = 0; p < S * S; ++p) sp.masks[(i * G + g) * S * S + p] = owner[p] == static_cast<int>(g);
    }
    double* img = sp.images.data() + i * 3 * S * S;
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t p = 0; p < S * S; ++p) {
        const int g = owner[p];
        const double base =
            g < 0 ? spec.background : palette[static_cast<std::size_t>(sp.colors[i * G + static_cast<std::size_t>(g)])][ch];
        img[ch * S * S + p] = base + rng.normal(0.0, spec.noise_std);
      }
  }
  return sp;
}

}  // namespace

Dataset generate(const DatasetSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  ds.palette = make_palette(spec.colors);
  ds.train = make_split(spec, ds.palette, spec.n_train, 1);
  ds.val = make_split(spec, ds.palette, spec.n_val, 2);
  ds.test = make_split(spec, ds.palette, spec.n_test, 3);
  return ds;
}

leak::AttributeSpec Dataset::attribute_spec() const {
  leak::AttributeSpec a;
  a.groups = spec.parts;
  for (std::size_t g = 0; g < spec.parts; ++g)
    for (std::size_t c = 0; c < spec.colors; ++c) {
      a.names.push_back("part" + std::to_string(g) + "_color" + std::to_string(c));
      a.group_of.push_back(g);
    }
  return a;
}

const Split& Dataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw ValidationError("unknown split '" + name + "'");
}

std::vector<double> patch_masks(const Split& s, const DatasetSpec& spec) {
  const std::size_t S = spec.image_size, p = spec.patch_size, n = S / p, G = spec.parts;
  std::vector<double> out(s.n * G * n * n, 0.0);
  for (std::size_t i = 0; i < s.n; ++i)
    for (std::size_t g = 0; g < G; ++g) {
      const std::uint8_t* m = s.masks.data() + (i * G + g) * S * S;
      double* o = out.data() + (i * G + g) * n * n;
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
          if (m[y * S + x]) o[(y / p) * n + x / p] = 1.0;
        }
    }
  return out;
}

leak::KeypointSet patch_keypoints(const Split& s, const DatasetSpec& spec) {
  const std::size_t G = spec.parts;
  const auto p = static_cast<int>(spec.patch_size);
  leak::KeypointSet kp;
  kp.samples = s.n;
  kp.parts = G;
  kp.row.resize(s.n * G);
  kp.col.resize(s.n * G);
  kp.visible.assign(s.n * G, 1);
  for (std::size_t i = 0; i < s.n * G; ++i) {
    kp.row[i] = s.keypoints[i * 2] / p;
    kp.col[i] = s.keypoints[i * 2 + 1] / p;
  }
  return kp;
}

// ---- serialisation ---------------------------------------------------------

namespace {

std::string encode_f64(const double* v, std::size_t n) {
  std::string out(n * 8, '\0');
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v[i]);
    for (int b = 0; b < 8; ++b) out[i * 8 + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  return out;
}

std::vector<double> decode_f64(const std::string& bytes) {
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i * 8 + b])) << (8 * b);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

std::uint32_t crc32_of(const std::string& bytes) {
  uLong c = crc32(0L, Z_NULL, 0);
  c = crc32(c, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(c);
}

void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw ValidationError("cannot write " + p.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ValidationError("write failed for " + p.string());
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw ValidationError("cannot read " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

json spec_json(const DatasetSpec& s) {
  return json{{"parts", s.parts},         {"colors", s.colors},         {"rho", s.rho},
              {"n_train", s.n_train},     {"n_val", s.n_val},           {"n_test", s.n_test},
              {"image_size", s.image_size}, {"patch_size", s.patch_size}, {"margin", s.margin},
              {"noise_std", s.noise_std}, {"background", s.background}, {"seed", s.seed}};
}

DatasetSpec spec_from(const json& j) {
  if (!j.is_object()) throw ValidationError("dataset spec must be a JSON object");
  DatasetSpec s;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const json& v = it.value();
    try {
      if (k == "parts") s.parts = v.get<std::size_t>();
      else if (k == "colors") s.colors = v.get<std::size_t>();
      else if (k == "rho") s.rho = v.get<double>();
      else if (k == "n_train") s.n_train = v.get<std::size_t>();
      else if (k == "n_val") s.n_val = v.get<std::size_t>();
      else if (k == "n_test") s.n_test = v.get<std::size_t>();
      else if (k == "image_size") s.image_size = v.get<std::size_t>();
      else if (k == "patch_size") s.patch_size = v.get<std::size_t>();
      else if (k == "margin") s.margin = v.get<std::size_t>();
      else if (k == "noise_std") s.noise_std = v.get<double>();
      else if (k == "background") s.background = v.get<double>();
      else if (k == "seed") s.seed = v.get<std::uint64_t>();
      else throw ValidationError("unknown dataset spec key '" + k + "'");
    } catch (const json::exception& e) {
      throw ValidationError("dataset spec key '" + k + "': " + e.what());
    }
  }
  return s;
}

struct ArrayEntry {
  std::string name;
  std::string dtype;
  std::vector<std::size_t> shape;
};

std::size_t count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

}  // namespace

DatasetSpec spec_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("dataset spec: ") + e.what());
  }
  return spec_from(j);
}

std::string spec_to_json(const DatasetSpec& spec) { return spec_json(spec).dump(2); }

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& s = ds.spec;
  const std::size_t S = s.image_size, G = s.parts, A = s.attributes();
  json arrays = json::array();
  auto put = [&](const std::string& name, const std::string& bytes, const std::string& dtype,
                 const std::vector<std::size_t>& shape) {
    const std::string file = name + (dtype == "float64" ? ".f64" : ".u8");
    write_file(dir / file, bytes);
    arrays.push_back({{"name", name}, {"file", file}, {"dtype", dtype}, {"shape", shape}, {"crc32", crc32_of(bytes)}});
  };
  for (const char* split : {"train", "val", "test"}) {
    const Split& sp = ds.split(split);
    const std::string pre = split;
    put(pre + "_images", encode_f64(sp.images.data(), sp.images.size()), "float64", {sp.n, 3, S, S});
    put(pre + "_attributes", std::string(sp.attributes.begin(), sp.attributes.end()), "uint8", {sp.n, A});
    put(pre + "_masks", std::string(sp.masks.begin(), sp.masks.end()), "uint8", {sp.n, G, S, S});
    std::vector<double> kp(sp.keypoints.begin(), sp.keypoints.end());
    put(pre + "_keypoints", encode_f64(kp.data(), kp.size()), "float64", {sp.n, G, 2});
    std::vector<double> col(sp.colors.begin(), sp.colors.end());
    put(pre + "_colors", encode_f64(col.data(), col.size()), "float64", {sp.n, G});
  }
  const auto attrs = ds.attribute_spec();
  json palette = json::array();
  for (const auto& c : ds.palette) palette.push_back({c[0], c[1], c[2]});
  json manifest{{"format", "partleak-dataset"},
                {"version", 1},
                {"spec", spec_json(s)},
                {"attributes", attrs.names},
                {"group_of", attrs.group_of},
                {"palette", palette},
                {"palette_model", "hsv hues evenly spaced, s=0.8, v=0.9"},
                {"arrays", arrays}};
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset read_dataset(const std::filesystem::path& dir) {
  json m;
  try {
    m = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed manifest: ") + e.what());
  }
  Dataset ds;
  try {
    if (m.at("format") != "partleak-dataset" || m.at("version") != 1) {
      throw ValidationError("manifest: unsupported format or version");
    }
    ds.spec = spec_from(m.at("spec"));
    ds.spec.validate();
    ds.palette = make_palette(ds.spec.colors);
    const auto stored = m.at("palette");
    if (stored.size() != ds.palette.size()) throw ValidationError("manifest: palette size mismatch");
    const std::size_t S = ds.spec.image_size, G = ds.spec.parts, A = ds.spec.attributes();
    std::map<std::string, json> entries;
    for (const auto& e : m.at("arrays")) entries[e.at("name").get<std::string>()] = e;
    auto load = [&](const std::string& name, const std::string& dtype, const std::vector<std::size_t>& shape) {
      auto it = entries.find(name);
      if (it == entries.end()) throw ValidationError("manifest: missing array " + name);
      const json& e = it->second;
      if (e.at("dtype") != dtype) throw ValidationError("manifest: wrong dtype for " + name);
      if (e.at("shape").get<std::vector<std::size_t>>() != shape) throw ValidationError("manifest: wrong shape for " + name);
      const std::string file = e.at("file").get<std::string>();
      if (file.find('/') != std::string::npos || file.find("..") != std::string::npos) {
        throw ValidationError("manifest: array file must be a plain name");
      }
      std::string bytes = read_file(dir / file);
      const std::size_t width = dtype == "float64" ? 8 : 1;
      if (bytes.size() != count(shape) * width) throw ValidationError("array " + name + " is truncated or oversized");
      if (crc32_of(bytes) != e.at("crc32").get<std::uint32_t>()) throw ValidationError("checksum mismatch for " + name);
      return bytes;
    };
    for (const char* split : {"train", "val", "test"}) {
      const std::string pre = split;
      Split sp;
      sp.n = pre == "train" ? ds.spec.n_train : pre == "val" ? ds.spec.n_val : ds.spec.n_test;
      sp.images = decode_f64(load(pre + "_images", "float64", {sp.n, 3, S, S}));
      auto at = load(pre + "_attributes", "uint8", {sp.n, A});
      sp.attributes.assign(at.begin(), at.end());
      auto mk = load(pre + "_masks", "uint8", {sp.n, G, S, S});
      sp.masks.assign(mk.begin(), mk.end());
      for (double v : decode_f64(load(pre + "_keypoints", "float64", {sp.n, G, 2}))) {
        sp.keypoints.push_back(static_cast<std::int32_t>(v));
      }
      for (double v : decode_f64(load(pre + "_colors", "float64", {sp.n, G}))) {
        sp.colors.push_back(static_cast<std::int32_t>(v));
      }
      (pre == "train" ? ds.train : pre == "val" ? ds.val : ds.test) = std::move(sp);
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed manifest: ") + e.what());
  }
  return ds;
}

}  // namespace partleak::synth
