#include "sliceprop/digest.hpp"
#include "sliceprop/encoder.hpp"
#include "sliceprop/errors.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <fstream>

namespace sliceprop {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json config_to_json(const EncoderConfig& c) {
  return json{{"in_channels", c.in_channels}, {"hidden_channels", c.hidden_channels},
              {"feature_dim", c.feature_dim}, {"kernel_size", c.kernel_size},
              {"nonlinearity", "relu"},       {"l2_normalize", c.l2_normalize},
              {"seed", c.seed}};
}

EncoderConfig config_from_json(const json& j) {
  EncoderConfig c;
  try {
    c.in_channels = j.at("in_channels").get<int>();
    c.hidden_channels = j.at("hidden_channels").get<std::vector<int>>();
    c.feature_dim = j.at("feature_dim").get<int>();
    c.kernel_size = j.at("kernel_size").get<int>();
    if (j.at("nonlinearity").get<std::string>() != "relu") throw FormatError("config.nonlinearity", "unsupported");
    c.l2_normalize = j.at("l2_normalize").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw FormatError("config", e.what());
  }
  c.validate();
  return c;
}

fs::path with_ext(const fs::path& stem, const char* ext) {
  fs::path p = stem;
  if (p.extension() == ".json" || p.extension() == ".bin") p.replace_extension();
  p += ext;
  return p;
}

}  // namespace

std::string encoder_config_json(const EncoderConfig& cfg) { return config_to_json(cfg).dump(); }

EncoderConfig encoder_config_from_json(const std::string& text) { return config_from_json(json::parse(text)); }

void save_checkpoint(const Checkpoint& ckpt, const fs::path& stem) {
  if (!ckpt.params.all_finite()) throw NumericError("refusing to save non-finite encoder parameters");
  const Vector<double> flat = ckpt.params.flatten();
  std::vector<std::byte> payload(std::size_t(flat.size()) * 8);
  for (Index i = 0; i < flat.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(flat[i]);
    for (int b = 0; b < 8; ++b) payload[8 * i + b] = static_cast<std::byte>((bits >> (8 * b)) & 0xFF);
  }
  json header{{"config", config_to_json(ckpt.params.config)},
              {"format", "f64"},
              {"sha", sha256_hex(payload)},
              {"meta", json::parse(ckpt.meta_json)}};
  const auto hp = with_ext(stem, ".json");
  std::ofstream h(hp, std::ios::binary | std::ios::trunc);
  if (!h) throw PersistenceError(hp.string(), "cannot open for writing");
  h << header.dump(2) << "\n";
  const auto bp = with_ext(stem, ".bin");
  std::ofstream b(bp, std::ios::binary | std::ios::trunc);
  if (!b) throw PersistenceError(bp.string(), "cannot open for writing");
  b.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!h || !b) throw PersistenceError(stem.string(), "checkpoint write failed");
}

Checkpoint load_checkpoint(const fs::path& stem) {
  const auto hp = with_ext(stem, ".json");
  std::ifstream h(hp, std::ios::binary);
  if (!h) throw PersistenceError(hp.string(), "cannot open checkpoint header");
  json header;
  try {
    header = json::parse(h);
  } catch (const json::parse_error& e) {
    throw FormatError("<header>", e.what());
  }
  if (!header.contains("format") || header["format"] != "f64") throw FormatError("format", "expected 'f64'");
  if (!header.contains("sha") || !header["sha"].is_string()) throw FormatError("sha", "missing");
  if (!header.contains("config")) throw FormatError("config", "missing");
  Checkpoint ckpt;
  ckpt.params = init_encoder<double>(config_from_json(header["config"]));
  ckpt.meta_json = header.value("meta", json::object()).dump();

  const auto bp = with_ext(stem, ".bin");
  std::ifstream b(bp, std::ios::binary);
  if (!b) throw PersistenceError(bp.string(), "cannot open checkpoint payload");
  std::vector<char> raw((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  const std::size_t expected = ckpt.params.size() * 8;
  if (raw.size() != expected) throw TruncationError(bp.string(), expected, raw.size());
  std::span<const std::byte> bytes(reinterpret_cast<const std::byte*>(raw.data()), raw.size());
  if (sha256_hex(bytes) != header["sha"].get<std::string>())
    throw FormatError("sha", "payload digest does not match header");
  Vector<double> flat(Index(ckpt.params.size()));
  for (Index i = 0; i < flat.size(); ++i) {
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) bits |= std::uint64_t(static_cast<unsigned char>(raw[8 * i + k])) << (8 * k);
    flat[i] = std::bit_cast<double>(bits);
  }
  ckpt.params.assign(flat);
  return ckpt;
}

}  // namespace sliceprop
