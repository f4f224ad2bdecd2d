#include "sliceprop/volume.hpp"

#include "sliceprop/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace sliceprop {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(const Shape3& s) {
  std::ostringstream os;
  os << "(" << s.depth << "," << s.height << "," << s.width << ")";
  return os.str();
}

std::size_t MaskVolume::slice_area(int z) const {
  const auto s = slice(z);
  return static_cast<std::size_t>((s >= 0.5f).count());
}

namespace {

void check_shape(const Shape3& s, const std::string& what) {
  if (s.depth < 2 || s.height < 8 || s.width < 8)
    throw InvariantError(what + " shape " + to_string(s) + " violates D >= 2, H >= 8, W >= 8");
}

}  // namespace

void validate(const Volume& v) {
  check_shape(v.shape, "volume");
  if (v.data.size() != v.shape.size())
    throw ShapeError("volume data size " + std::to_string(v.data.size()) + " does not match shape " +
                     to_string(v.shape));
  for (std::size_t i = 0; i < v.data.size(); ++i)
    if (!std::isfinite(v.data[i]))
      throw InvariantError("volume '" + v.id + "' has a non-finite value at flat index " +
                           std::to_string(i));
  for (double s : v.spacing)
    if (!(s > 0.0)) throw InvariantError("volume spacing must be positive");
}

void validate(const MaskVolume& m) {
  check_shape(m.shape, "mask");
  if (m.data.size() != m.shape.size())
    throw ShapeError("mask data size does not match shape " + to_string(m.shape));
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    const float v = m.data[i];
    if (!(v >= 0.0f && v <= 1.0f))
      throw InvariantError("mask value outside [0,1] at flat index " + std::to_string(i));
    if (m.kind == MaskKind::binary && v != 0.0f && v != 1.0f)
      throw InvariantError("binary mask holds non-binary value at flat index " + std::to_string(i));
  }
}

void validate_pair(const Volume& volume, const MaskVolume& mask) {
  if (volume.shape != mask.shape)
    throw ShapeError("mask shape " + to_string(mask.shape) + " differs from volume shape " +
                     to_string(volume.shape));
}

MaskVolume binarize(const MaskVolume& mask, double threshold) {
  MaskVolume out(mask.shape, MaskKind::binary, mask.id);
  out.spacing = mask.spacing;
  const auto t = static_cast<float>(threshold);
  std::transform(mask.data.begin(), mask.data.end(), out.data.begin(),
                 [t](float v) { return v >= t ? 1.0f : 0.0f; });
  return out;
}

// ---- persistence -------------------------------------------------------

fs::path header_path(const fs::path& stem) {
  fs::path p = stem;
  if (p.extension() == ".json" || p.extension() == ".raw") p.replace_extension();
  p += ".json";
  return p;
}

fs::path payload_path(const fs::path& stem) {
  fs::path p = stem;
  if (p.extension() == ".json" || p.extension() == ".raw") p.replace_extension();
  p += ".raw";
  return p;
}

namespace {

enum class DType { f32, u8 };

std::string kind_name(MaskKind k) { return k == MaskKind::binary ? "binary_mask" : "soft_mask"; }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PersistenceError(path.string(), "cannot open for writing");
  out << text;
  if (!out) throw PersistenceError(path.string(), "write failed");
}

void write_bytes(const fs::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PersistenceError(path.string(), "cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw PersistenceError(path.string(), "write failed");
}

std::vector<char> encode_f32(const std::vector<float>& values) {
  std::vector<char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
  return bytes;
}

std::vector<float> decode_f32(const std::vector<char>& bytes) {
  std::vector<float> values(bytes.size() / 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= std::uint32_t(static_cast<unsigned char>(bytes[4 * i + b])) << (8 * b);
    values[i] = std::bit_cast<float>(bits);
  }
  return values;
}

json make_header(const Shape3& s, DType dtype, const std::array<double, 3>& spacing,
                 const std::string& kind, const std::string& id) {
  return json{{"shape", {s.depth, s.height, s.width}},
              {"dtype", dtype == DType::f32 ? "f32" : "u8"},
              {"spacing", {spacing[0], spacing[1], spacing[2]}},
              {"kind", kind},
              {"id", id}};
}

void write_pair(const fs::path& stem, const json& header, const std::vector<char>& payload) {
  const auto hp = header_path(stem);
  const auto parent = hp.parent_path();
  if (!parent.empty() && !fs::is_directory(parent))
    throw PersistenceError(hp.string(), "parent directory does not exist");
  write_text(hp, header.dump(2) + "\n");
  write_bytes(payload_path(stem), payload);
}

struct RawFile {
  Shape3 shape;
  DType dtype = DType::f32;
  std::array<double, 3> spacing{};
  std::string kind;
  std::string id;
  std::vector<char> payload;
};

RawFile read_pair(const fs::path& stem) {
  const auto hp = header_path(stem);
  std::ifstream hin(hp, std::ios::binary);
  if (!hin) throw PersistenceError(hp.string(), "cannot open header");
  json h;
  try {
    h = json::parse(hin);
  } catch (const json::parse_error& e) {
    throw FormatError("<header>", std::string("not valid JSON: ") + e.what());
  }
  if (!h.is_object()) throw FormatError("<header>", "header must be a JSON object");

  RawFile f;
  if (!h.contains("shape") || !h["shape"].is_array() || h["shape"].size() != 3)
    throw FormatError("shape", "expected an array of three integers");
  for (const auto& v : h["shape"])
    if (!v.is_number_integer() || v.get<long long>() <= 0)
      throw FormatError("shape", "entries must be positive integers");
  f.shape = {h["shape"][0].get<int>(), h["shape"][1].get<int>(), h["shape"][2].get<int>()};

  if (!h.contains("dtype") || !h["dtype"].is_string()) throw FormatError("dtype", "missing");
  const auto dtype = h["dtype"].get<std::string>();
  if (dtype == "f32")
    f.dtype = DType::f32;
  else if (dtype == "u8")
    f.dtype = DType::u8;
  else
    throw FormatError("dtype", "unsupported value '" + dtype + "'");

  if (!h.contains("spacing") || !h["spacing"].is_array() || h["spacing"].size() != 3)
    throw FormatError("spacing", "expected an array of three numbers");
  for (int i = 0; i < 3; ++i) {
    if (!h["spacing"][i].is_number()) throw FormatError("spacing", "entries must be numbers");
    f.spacing[i] = h["spacing"][i].get<double>();
    if (!(f.spacing[i] > 0.0)) throw FormatError("spacing", "entries must be positive");
  }

  if (!h.contains("kind") || !h["kind"].is_string()) throw FormatError("kind", "missing");
  f.kind = h["kind"].get<std::string>();
  if (f.kind != "intensity" && f.kind != "soft_mask" && f.kind != "binary_mask")
    throw FormatError("kind", "unsupported value '" + f.kind + "'");
  if (!h.contains("id") || !h["id"].is_string()) throw FormatError("id", "missing");
  f.id = h["id"].get<std::string>();

  const auto pp = payload_path(stem);
  std::ifstream pin(pp, std::ios::binary);
  if (!pin) throw PersistenceError(pp.string(), "cannot open payload");
  f.payload.assign(std::istreambuf_iterator<char>(pin), std::istreambuf_iterator<char>());
  const std::size_t expected = f.shape.size() * (f.dtype == DType::f32 ? 4 : 1);
  if (f.payload.size() != expected) throw TruncationError(pp.string(), expected, f.payload.size());
  return f;
}

}  // namespace

void save_volume(const Volume& volume, const fs::path& path) {
  validate(volume);
  write_pair(path, make_header(volume.shape, DType::f32, volume.spacing, "intensity", volume.id),
             encode_f32(volume.data));
}

Volume load_volume(const fs::path& path) {
  auto f = read_pair(path);
  if (f.kind != "intensity") throw FormatError("kind", "expected 'intensity', found '" + f.kind + "'");
  if (f.dtype != DType::f32) throw FormatError("dtype", "intensity volumes must be f32");
  Volume v;
  v.shape = f.shape;
  v.data = decode_f32(f.payload);
  v.spacing = f.spacing;
  v.id = f.id;
  try {
    validate(v);
  } catch (const InvariantError& e) {
    throw FormatError("<payload>", e.what());
  }
  return v;
}

void save_mask(const MaskVolume& mask, const fs::path& path) {
  validate(mask);
  if (mask.kind == MaskKind::binary) {
    std::vector<char> bytes(mask.data.size());
    std::transform(mask.data.begin(), mask.data.end(), bytes.begin(),
                   [](float v) { return static_cast<char>(v != 0.0f ? 1 : 0); });
    write_pair(path, make_header(mask.shape, DType::u8, mask.spacing, kind_name(mask.kind), mask.id),
               bytes);
  } else {
    write_pair(path, make_header(mask.shape, DType::f32, mask.spacing, kind_name(mask.kind), mask.id),
               encode_f32(mask.data));
  }
}

MaskVolume load_mask(const fs::path& path) {
  auto f = read_pair(path);
  MaskVolume m;
  if (f.kind == "binary_mask")
    m.kind = MaskKind::binary;
  else if (f.kind == "soft_mask")
    m.kind = MaskKind::soft;
  else
    throw FormatError("kind", "expected a mask kind, found '" + f.kind + "'");
  m.shape = f.shape;
  m.spacing = f.spacing;
  m.id = f.id;
  if (f.dtype == DType::u8) {
    m.data.resize(f.payload.size());
    for (std::size_t i = 0; i < f.payload.size(); ++i)
      m.data[i] = static_cast<float>(static_cast<unsigned char>(f.payload[i]));
  } else {
    m.data = decode_f32(f.payload);
  }
  try {
    validate(m);
  } catch (const InvariantError& e) {
    throw FormatError("kind", e.what());
  }
  return m;
}

// ---- annotated-slice protocol -----------------------------------------

int largest_gt_slice_index(const MaskVolume& mask) {
  int best = -1;
  std::size_t best_area = 0;
  for (int z = 0; z < mask.shape.depth; ++z) {
    const auto area = mask.slice_area(z);
    if (area > best_area) {
      best_area = area;
      best = z;
    }
  }
  if (best < 0) throw EmptyMaskError("mask '" + mask.id + "' is empty on every slice");
  return best;
}

int pick_annotated_slice(const MaskVolume& mask, std::uint64_t seed) {
  const int c = largest_gt_slice_index(mask);
  std::vector<int> candidates;
  for (int z = std::max(0, c - 3); z <= std::min(mask.shape.depth - 1, c + 3); ++z)
    if (!mask.slice_empty(z)) candidates.push_back(z);
  if (candidates.empty()) throw EmptyMaskError("no nonempty slice within 3 of the largest slice");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  return candidates[pick(rng)];
}

}  // namespace sliceprop
