#include "lmunet/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "binio.hpp"
#include "lmunet/config_io.hpp"

namespace lmunet::data {

namespace {

constexpr char kTensorMagic[4] = {'L', 'M', 'T', 'X'};
constexpr std::uint32_t kTensorVersion = 1;

template <typename T>
Tensor<T> read_payload(binio::Reader& r, Shape shape) {
  const std::size_t n = shape_numel(shape);
  if (n > SIZE_MAX / sizeof(T)) throw LoadError(r.path() + ": absurd extents " + shape_str(shape));
  const auto* src = r.take(n * sizeof(T));
  Tensor<T> t(std::move(shape));
  std::memcpy(t.ptr(), src, n * sizeof(T));
  return t;
}

// Strides of a row-major shape.
std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Linear resample of one axis with half-pixel alignment and edge clamping.
template <typename T>
Tensor<T> resample_axis(const Tensor<T>& x, std::size_t axis, std::size_t out_len) {
  const std::size_t in_len = x.dim(axis);
  if (in_len == out_len) return x;
  Shape os = x.shape();
  os[axis] = out_len;
  Tensor<T> y(os);
  const auto ist = strides_of(x.shape());
  const std::size_t inner = ist[axis];
  const std::size_t outer = x.numel() / (in_len * inner);
  const double scale = double(in_len) / double(out_len);
  std::vector<std::size_t> lo(out_len), hi(out_len);
  std::vector<T> w(out_len);
  for (std::size_t d = 0; d < out_len; ++d) {
    double src = (double(d) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, double(in_len - 1));
    lo[d] = static_cast<std::size_t>(std::floor(src));
    hi[d] = std::min(lo[d] + 1, in_len - 1);
    w[d] = static_cast<T>(src - double(lo[d]));
  }
  for (std::size_t o = 0; o < outer; ++o) {
    const T* xs = x.ptr() + o * in_len * inner;
    T* ys = y.ptr() + o * out_len * inner;
    for (std::size_t d = 0; d < out_len; ++d)
      for (std::size_t i = 0; i < inner; ++i)
        ys[d * inner + i] = (T(1) - w[d]) * xs[lo[d] * inner + i] + w[d] * xs[hi[d] * inner + i];
  }
  return y;
}

void check_extents(const Shape& extents) {
  for (auto e : extents)
    if (e == 0) throw ParameterError("resize: target extents must be >= 1, got " + shape_str(extents));
}

}  // namespace

template <typename T>
void save_tensor(const Tensor<T>& t, const std::filesystem::path& path) {
  if (t.rank() > kMaxTensorRank) throw DimensionError("save_tensor: rank " + std::to_string(t.rank()) + " > 8");
  binio::Writer w;
  w.bytes(kTensorMagic, 4);
  w.pod<std::uint32_t>(kTensorVersion);
  w.pod<std::uint8_t>(static_cast<std::uint8_t>(dtype_of<T>()));
  w.pod<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) w.pod<std::uint64_t>(e);
  w.bytes(t.ptr(), t.numel() * sizeof(T));
  w.save(path);
}

AnyTensor load_tensor_any(const std::filesystem::path& path) {
  binio::Reader r(path);
  const auto* magic = r.take(4);
  if (!std::equal(magic, magic + 4, kTensorMagic)) throw LoadError(r.path() + ": not a tensor file (bad magic)");
  const auto version = r.pod<std::uint32_t>();
  if (version != kTensorVersion) throw LoadError(r.path() + ": unsupported tensor format version " + std::to_string(version));
  const auto dtype = r.pod<std::uint8_t>();
  const auto rank = r.pod<std::uint8_t>();
  if (rank > kMaxTensorRank) throw LoadError(r.path() + ": rank " + std::to_string(rank) + " exceeds 8");
  Shape shape(rank);
  for (auto& e : shape) e = r.pod<std::uint64_t>();
  AnyTensor out;
  switch (dtype) {
    case static_cast<std::uint8_t>(DType::F32):
      out = read_payload<float>(r, shape);
      break;
    case static_cast<std::uint8_t>(DType::F64):
      out = read_payload<double>(r, shape);
      break;
    case static_cast<std::uint8_t>(DType::U16):
      out = read_payload<std::uint16_t>(r, shape);
      break;
    default:
      throw LoadError(r.path() + ": unknown dtype tag " + std::to_string(dtype));
  }
  if (!r.at_end()) throw LoadError(r.path() + ": trailing bytes after payload");
  return out;
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  auto any = load_tensor_any(path);
  if (auto* t = std::get_if<Tensor<T>>(&any)) return std::move(*t);
  throw LoadError(path.string() + ": stored dtype does not match the requested one");
}

template <typename T>
Tensor<T> znorm(const Tensor<T>& image) {
  Tensor<T> out(image.shape(), T(0));
  const std::size_t n = image.numel();
  if (n == 0) return out;
  double mean = 0;
  for (auto v : image.data()) mean += v;
  mean /= double(n);
  double var = 0;
  for (auto v : image.data()) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / double(n));
  if (sd == 0) return out;  // constant image; NaN falls through and propagates
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>((image[i] - mean) / sd);
  return out;
}

template <typename T>
Tensor<T> resize_image(const Tensor<T>& image, const Shape& extents) {
  check_extents(extents);
  if (image.rank() != extents.size() + 1) {
    throw DimensionError("resize_image: " + shape_str(image.shape()) + " vs target " + shape_str(extents));
  }
  Tensor<T> cur = image;
  for (std::size_t a = 0; a < extents.size(); ++a) cur = resample_axis(cur, a + 1, extents[a]);
  return cur;
}

LabelMap resize_mask(const LabelMap& mask, const Shape& extents) {
  check_extents(extents);
  if (mask.rank() != extents.size()) {
    throw DimensionError("resize_mask: " + shape_str(mask.shape()) + " vs target " + shape_str(extents));
  }
  const std::size_t r = extents.size();
  std::vector<std::vector<std::size_t>> src(r);
  for (std::size_t a = 0; a < r; ++a) {
    const std::size_t in = mask.dim(a), out = extents[a];
    src[a].resize(out);
    for (std::size_t d = 0; d < out; ++d)
      src[a][d] = std::min(in - 1, static_cast<std::size_t>((double(d) + 0.5) * double(in) / double(out)));
  }
  LabelMap y(extents);
  const auto ist = strides_of(mask.shape());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < y.numel(); ++o) {
    std::size_t s = 0;
    for (std::size_t a = 0; a < r; ++a) s += src[a][idx[a]] * ist[a];
    y[o] = mask[s];
    for (std::size_t a = r; a-- > 0;) {
      if (++idx[a] < extents[a]) break;
      idx[a] = 0;
    }
  }
  return y;
}

void DatasetManifest::validate(bool check_files) const {
  if (rank != 2 && rank != 3) throw DataError("manifest: rank must be 2 or 3");
  if (num_classes < 2) throw DataError("manifest: num_classes must be >= 2");
  std::set<std::string> ids;
  for (const auto& e : entries) {
    if (e.id.empty() || e.image.empty() || e.mask.empty()) throw DataError("manifest: entry with an empty field");
    if (!ids.insert(e.id).second) throw DataError("manifest: duplicate id '" + e.id + "'");
    if (check_files) {
      for (const auto& f : {e.image, e.mask})
        if (!std::filesystem::exists(root / f)) throw DataError("manifest: missing file " + (root / f).string());
    }
  }
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  cfgio::json samples = cfgio::json::array();
  for (const auto& e : m.entries) samples.push_back({{"id", e.id}, {"image", e.image}, {"mask", e.mask}});
  cfgio::write_json_file(path, {{"version", m.version},
                                {"rank", m.rank},
                                {"num_classes", m.num_classes},
                                {"class_names", m.class_names},
                                {"split", m.split},
                                {"samples", samples}});
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  cfgio::json j;
  try {
    j = cfgio::read_json_file(path);
  } catch (const ConfigError& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  DatasetManifest m;
  try {
    m.version = j.at("version").get<int>();
    m.rank = j.at("rank").get<int>();
    m.num_classes = j.at("num_classes").get<std::size_t>();
    m.class_names = j.value("class_names", std::vector<std::string>{});
    m.split = j.value("split", std::string("all"));
    for (const auto& s : j.at("samples"))
      m.entries.push_back({s.at("id").get<std::string>(), s.at("image").get<std::string>(), s.at("mask").get<std::string>()});
  } catch (const cfgio::json::exception& e) {
    throw DataError(path.string() + ": malformed manifest: " + e.what());
  }
  if (m.version != 1) throw DataError(path.string() + ": unsupported manifest version " + std::to_string(m.version));
  m.root = path.parent_path();
  m.validate(true);
  return m;
}

std::vector<train::Sample> load_dataset(const DatasetManifest& m) {
  m.validate(true);
  std::vector<train::Sample> out;
  for (const auto& e : m.entries) {
    train::Sample s;
    s.id = e.id;
    try {
      s.image = znorm(load_tensor<float>(m.root / e.image));
      s.mask = load_tensor<std::uint16_t>(m.root / e.mask);
    } catch (const LoadError& err) {
      throw DataError(std::string("sample '") + e.id + "': " + err.what());
    }
    if (s.image.rank() != static_cast<std::size_t>(m.rank) + 1 || spatial_of(s.image) != s.mask.shape()) {
      throw DataError("sample '" + e.id + "': image " + shape_str(s.image.shape()) + " and mask " +
                      shape_str(s.mask.shape()) + " disagree");
    }
    for (auto v : s.mask.data())
      if (v >= m.num_classes) throw DataError("sample '" + e.id + "': label " + std::to_string(v) + " out of range");
    out.push_back(std::move(s));
  }
  return out;
}

SynthSample synth_sample(std::uint64_t seed, std::size_t index, const Shape& extents, std::size_t num_classes) {
  if (extents.size() != 2 && extents.size() != 3) throw DimensionError("synth: rank must be 2 or 3");
  for (auto e : extents)
    if (e == 0 || e % 8 != 0) throw DimensionError("synth: extents must be positive multiples of 8, got " + shape_str(extents));
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(std::uint64_t(index) >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t r = extents.size();

  // smooth background: coarse Gaussian grid, linearly upsampled
  Shape coarse{1};
  for (auto e : extents) coarse.push_back(e / 8);
  Tensor<double> grid(coarse);
  for (auto& v : grid.data()) v = 0.3 * gauss(rng);
  auto background = resize_image(grid, extents);

  std::vector<double> oc(r), oax(r);
  for (std::size_t a = 0; a < r; ++a) {
    oc[a] = (0.4 + 0.2 * u(rng)) * double(extents[a]);
    oax[a] = (0.2 + 0.12 * u(rng)) * double(extents[a]);
  }
  struct Ball {
    std::vector<double> c;
    double rad;
  };
  std::vector<Ball> tumours;
  const std::size_t n_tumours = num_classes > 2 ? static_cast<std::size_t>(rng() % 3) : 0;
  for (std::size_t t = 0; t < n_tumours; ++t) {
    Ball b{std::vector<double>(r), 0};
    // centre within half the organ's normalized radius
    std::vector<double> dir(r);
    double norm = 0;
    for (auto& d : dir) {
      d = gauss(rng);
      norm += d * d;
    }
    norm = std::sqrt(norm);
    const double rho = 0.5 * u(rng);
    for (std::size_t a = 0; a < r; ++a) b.c[a] = oc[a] + oax[a] * rho * dir[a] / norm;
    const double min_extent = double(*std::min_element(extents.begin(), extents.end()));
    b.rad = (0.05 + 0.05 * u(rng)) * min_extent;
    tumours.push_back(std::move(b));
  }

  SynthSample s{Tensor<float>(Shape{1}), LabelMap(extents, 0)};
  Shape ishape{1};
  ishape.insert(ishape.end(), extents.begin(), extents.end());
  s.image = Tensor<float>(ishape);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t i = 0; i < s.mask.numel(); ++i) {
    double q = 0;
    for (std::size_t a = 0; a < r; ++a) {
      const double d = (double(idx[a]) + 0.5 - oc[a]) / oax[a];
      q += d * d;
    }
    double v = background[i] + 0.05 * gauss(rng);
    std::uint16_t label = 0;
    if (q <= 1.0) {
      label = 1;
      v += 1.0;
      for (const auto& b : tumours) {
        double dd = 0;
        for (std::size_t a = 0; a < r; ++a) dd += std::pow(double(idx[a]) + 0.5 - b.c[a], 2);
        if (dd <= b.rad * b.rad) {
          label = 2;
          v += 1.5;
          break;
        }
      }
    }
    s.mask[i] = label;
    s.image[i] = static_cast<float>(v);
    for (std::size_t a = r; a-- > 0;) {
      if (++idx[a] < extents[a]) break;
      idx[a] = 0;
    }
  }
  return s;
}

DatasetManifest synth_generate(std::uint64_t seed, std::size_t n, int rank, const Shape& extents,
                               const std::filesystem::path& dir, std::size_t num_classes) {
  if (extents.size() != static_cast<std::size_t>(rank)) throw DimensionError("synth: extents do not match rank");
  if (num_classes < 2 || num_classes > 3) throw ConfigError("invalid config field 'num_classes': synthetic data has 2 or 3 classes");
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.rank = rank;
  m.num_classes = num_classes;
  m.class_names = {"background", "organ"};
  if (num_classes == 3) m.class_names.push_back("tumour");
  m.root = dir;
  for (std::size_t i = 0; i < n; ++i) {
    auto s = synth_sample(seed, i, extents, num_classes);
    char id[32];
    std::snprintf(id, sizeof id, "case_%04zu", i);
    ManifestEntry e{id, std::string(id) + "_image.lmtx", std::string(id) + "_mask.lmtx"};
    save_tensor(s.image, dir / e.image);
    save_tensor(s.mask, dir / e.mask);
    m.entries.push_back(std::move(e));
  }
  save_manifest(m, dir / "manifest.json");
  return m;
}

Split split(const DatasetManifest& m, std::array<double, 3> ratios, std::uint64_t seed) {
  const std::size_t n = m.entries.size();
  if (n < 3) throw DataError("split: " + std::to_string(n) + " samples cannot fill 3 parts");
  double total = 0;
  for (auto r : ratios) {
    if (!(r > 0)) throw ParameterError("split: ratios must be positive");
    total += r;
  }
  std::array<std::size_t, 3> size{};
  std::array<double, 3> frac{};
  std::size_t used = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = double(n) * ratios[i] / total;
    size[i] = static_cast<std::size_t>(std::floor(exact));
    frac[i] = exact - double(size[i]);
    used += size[i];
  }
  std::array<int, 3> by_frac{0, 1, 2};
  std::stable_sort(by_frac.begin(), by_frac.end(), [&](int a, int b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; used < n; ++k, ++used) ++size[by_frac[k]];
  // every part non-empty: borrow from the largest
  for (int i = 0; i < 3; ++i) {
    if (size[i] == 0) {
      auto big = std::max_element(size.begin(), size.end());
      --*big;
      ++size[i];
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  Split out{m, m, m};
  DatasetManifest* parts[3] = {&out.train, &out.val, &out.test};
  const char* tags[3] = {"train", "val", "test"};
  std::size_t pos = 0;
  for (int i = 0; i < 3; ++i) {
    parts[i]->entries.clear();
    parts[i]->split = tags[i];
    for (std::size_t k = 0; k < size[i]; ++k) parts[i]->entries.push_back(m.entries[order[pos++]]);
  }
  return out;
}

template void save_tensor(const Tensor<float>&, const std::filesystem::path&);
template void save_tensor(const Tensor<double>&, const std::filesystem::path&);
template void save_tensor(const LabelMap&, const std::filesystem::path&);
template Tensor<float> load_tensor(const std::filesystem::path&);
template Tensor<double> load_tensor(const std::filesystem::path&);
template LabelMap load_tensor(const std::filesystem::path&);
template Tensor<float> znorm(const Tensor<float>&);
template Tensor<double> znorm(const Tensor<double>&);
template Tensor<float> resize_image(const Tensor<float>&, const Shape&);
template Tensor<double> resize_image(const Tensor<double>&, const Shape&);

}  // namespace lmunet::data
