#pragma once

#include <array>
#include <bit>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sbs/costmodel.hpp"
#include "sbs/model.hpp"
#include "sbs/tensor.hpp"
#include "sbs/trainer.hpp"

namespace sbs {

// ---- deterministic text formatting ----

// Shortest round-trip decimal form, locale independent: the same double
// always prints the same bytes, which the determinism contract relies on.
inline std::string format_double(double v) {
  std::array<char, 32> buf;
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (res.ec != std::errc()) {
    throw std::runtime_error("format_double: value does not fit");
  }
  return std::string(buf.data(), res.ptr);
}

// ---- SHA-1 ----

// Compact left-to-right implementation of RFC 3174; the content hash for run
// manifests and checkpoint blobs. Not for security, only for change detection.
class Sha1 {
 public:
  void update(const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    total_ += n;
    while (n > 0) {
      const std::size_t take = std::min(n, std::size_t{64} - fill_);
      std::memcpy(block_.data() + fill_, bytes, take);
      fill_ += take;
      bytes += take;
      n -= take;
      if (fill_ == 64) {
        process();
        fill_ = 0;
      }
    }
  }

  std::string hex_digest() {
    Sha1 copy = *this;
    copy.pad();
    std::string out;
    out.reserve(40);
    for (std::uint32_t word : copy.h_) {
      for (int shift = 28; shift >= 0; shift -= 4) {
        out.push_back("0123456789abcdef"[(word >> shift) & 0xF]);
      }
    }
    return out;
  }

  static std::string of(const std::string& text) {
    Sha1 s;
    s.update(text.data(), text.size());
    return s.hex_digest();
  }

 private:
  void pad() {
    const std::uint64_t bits = total_ * 8;
    const unsigned char one = 0x80;
    update(&one, 1);
    const unsigned char zero = 0x00;
    while (fill_ != 56) update(&zero, 1);
    unsigned char len[8];
    for (int i = 0; i < 8; ++i) len[i] = static_cast<unsigned char>(bits >> (56 - 8 * i));
    // Length bytes complete the final block; total_ bookkeeping no longer matters.
    update(len, 8);
  }

  void process() {
    std::uint32_t w[80];
    for (int t = 0; t < 16; ++t) {
      w[t] = (std::uint32_t{block_[4 * t]} << 24) | (std::uint32_t{block_[4 * t + 1]} << 16) |
             (std::uint32_t{block_[4 * t + 2]} << 8) | std::uint32_t{block_[4 * t + 3]};
    }
    for (int t = 16; t < 80; ++t) {
      w[t] = std::rotl(w[t - 3] ^ w[t - 8] ^ w[t - 14] ^ w[t - 16], 1);
    }
    std::uint32_t a = h_[0], b = h_[1], c = h_[2], d = h_[3], e = h_[4];
    for (int t = 0; t < 80; ++t) {
      std::uint32_t f, k;
      if (t < 20) {
        f = (b & c) | (~b & d);
        k = 0x5A827999;
      } else if (t < 40) {
        f = b ^ c ^ d;
        k = 0x6ED9EBA1;
      } else if (t < 60) {
        f = (b & c) | (b & d) | (c & d);
        k = 0x8F1BBCDC;
      } else {
        f = b ^ c ^ d;
        k = 0xCA62C1D6;
      }
      const std::uint32_t tmp = std::rotl(a, 5) + f + e + k + w[t];
      e = d;
      d = c;
      c = std::rotl(b, 30);
      b = a;
      a = tmp;
    }
    h_[0] += a;
    h_[1] += b;
    h_[2] += c;
    h_[3] += d;
    h_[4] += e;
  }

  std::array<std::uint32_t, 5> h_ = {0x67452301, 0xEFCDAB89, 0x98BADCFE, 0x10325476,
                                     0xC3D2E1F0};
  std::array<unsigned char, 64> block_ = {};
  std::size_t fill_ = 0;
  std::uint64_t total_ = 0;
};

// ---- files ----

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("read_file: cannot open " + path.string());
  }
  std::string out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return out;
}

// Write-to-temp then rename: a crashed run leaves no half-written artifact
// under the final name.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw std::runtime_error("write_file_atomic: cannot open " + tmp.string());
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      throw std::runtime_error("write_file_atomic: short write to " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

// ---- CSV (RFC 4180) ----

// CRLF line endings, fields quoted only when they contain a comma, a quote,
// or a line break, quotes doubled inside quoted fields.
class CsvWriter {
 public:
  explicit CsvWriter(const std::vector<std::string>& header) : columns_(header.size()) {
    if (header.empty()) {
      throw std::invalid_argument("CsvWriter: empty header");
    }
    append(header);
  }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != columns_) {
      throw std::invalid_argument("CsvWriter: row has " + std::to_string(cells.size()) +
                                  " cells, header has " + std::to_string(columns_));
    }
    append(cells);
  }

  const std::string& str() const { return out_; }

 private:
  static std::string escape(const std::string& field) {
    if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
    std::string quoted = "\"";
    for (char c : field) {
      if (c == '"') quoted += "\"\"";
      else quoted += c;
    }
    quoted += '"';
    return quoted;
  }

  void append(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i > 0) out_ += ',';
      out_ += escape(cells[i]);
    }
    out_ += "\r\n";
  }

  std::string out_;
  std::size_t columns_;
};

// ---- checkpoints: JSON manifest plus little-endian f64 blob ----

inline std::string family_name(ParamFamily f) {
  switch (f) {
    case ParamFamily::shared: return "shared";
    case ParamFamily::weights: return "weights";
    case ParamFamily::activations: return "activations";
  }
  throw std::logic_error("family_name: unknown family");
}

namespace detail {

inline void append_f64_le(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline double read_f64_le(const std::string& in, std::size_t offset) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) {
    bits = (bits << 8) |
           static_cast<unsigned char>(in[offset + static_cast<std::size_t>(i)]);
  }
  return std::bit_cast<double>(bits);
}

}  // namespace detail

// Writes checkpoint.json and checkpoint.bin into dir. The manifest carries
// every parameter's name, family, shape, and blob offset, plus the blob hash.
inline void save_checkpoint(const QuantMlp& model, const std::filesystem::path& dir) {
  std::string blob;
  nlohmann::json params = nlohmann::json::array();
  for (const Param& p : model.params()) {
    nlohmann::json entry;
    entry["name"] = p.name;
    entry["family"] = family_name(p.family);
    entry["shape"] = p.value.shape();
    entry["offset"] = blob.size() / 8;
    entry["count"] = p.value.size();
    params.push_back(std::move(entry));
    for (std::size_t i = 0; i < p.value.size(); ++i) detail::append_f64_le(blob, p.value[i]);
  }
  nlohmann::json manifest;
  manifest["format"] = "sbs-checkpoint-v1";
  manifest["blob"] = "checkpoint.bin";
  manifest["blob_bytes"] = blob.size();
  manifest["blob_sha1"] = Sha1::of(blob);
  manifest["params"] = std::move(params);
  write_file_atomic(dir / "checkpoint.bin", blob);
  write_file_atomic(dir / "checkpoint.json", manifest.dump(2) + "\n");
}

// Restores parameter values in place. The checkpoint must describe exactly
// the parameters the model has, with matching shapes, and an intact blob.
inline void load_checkpoint(QuantMlp& model, const std::filesystem::path& dir) {
  const nlohmann::json manifest = nlohmann::json::parse(read_file(dir / "checkpoint.json"));
  if (manifest.value("format", "") != "sbs-checkpoint-v1") {
    throw std::runtime_error("load_checkpoint: unrecognized format");
  }
  const std::string blob = read_file(dir / manifest.at("blob").get<std::string>());
  if (blob.size() != manifest.at("blob_bytes").get<std::size_t>() ||
      Sha1::of(blob) != manifest.at("blob_sha1").get<std::string>()) {
    throw std::runtime_error("load_checkpoint: blob does not match its manifest");
  }
  const nlohmann::json& params = manifest.at("params");
  if (params.size() != model.params().size()) {
    throw std::runtime_error("load_checkpoint: checkpoint has " +
                             std::to_string(params.size()) + " params, model has " +
                             std::to_string(model.params().size()));
  }
  for (const nlohmann::json& entry : params) {
    Param& p = model.param(entry.at("name").get<std::string>());
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    if (shape != p.value.shape()) {
      throw std::runtime_error("load_checkpoint: shape mismatch for " + p.name);
    }
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    const std::size_t count = entry.at("count").get<std::size_t>();
    if (count != p.value.size() || 8 * (offset + count) > blob.size()) {
      throw std::runtime_error("load_checkpoint: bad extent for " + p.name);
    }
    for (std::size_t i = 0; i < count; ++i) {
      p.value[i] = detail::read_f64_le(blob, 8 * (offset + i));
    }
  }
}

// ---- JSON views of domain records ----

inline nlohmann::json to_json(const CompressionConfig& cfg) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerConfig& lc : cfg.layers) {
    nlohmann::json layer;
    layer["name"] = lc.name;
    layer["w_bits"] = lc.w_bits;
    layer["a_bits"] = lc.a_bits;
    layer["kept_groups"] = lc.kept_groups;
    layers.push_back(std::move(layer));
  }
  return nlohmann::json{{"layers", std::move(layers)}};
}

inline nlohmann::json to_json(const MlpSpec& spec) {
  nlohmann::json out;
  out["dims"] = spec.dims;
  out["group_size"] = spec.group_size;
  out["ladder"] = spec.ladder.bits();
  if (spec.head_bits) {
    out["head_bits"] = *spec.head_bits;
  } else {
    out["head_bits"] = nullptr;
  }
  out["weight_normalization"] = spec.weight_normalization;
  return out;
}

// ---- CSV views of metric and oracle records ----

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  CsvWriter csv({"epoch", "phase", "ce_loss", "resource", "bops", "gates"});
  for (const MetricsRow& r : rows) {
    csv.row({std::to_string(r.epoch), r.phase, format_double(r.ce_loss),
             format_double(r.resource), format_double(r.bops), r.gate_summary});
  }
  return csv.str();
}

inline std::string report_csv(const CostReport& report) {
  CsvWriter csv({"layer", "w_bits", "a_bits", "pruning_rate", "bops", "memory_kb"});
  for (const LayerCostRow& r : report.per_layer) {
    csv.row({r.name, std::to_string(r.w_bits), std::to_string(r.a_bits),
             format_double(r.pruning_rate), format_double(r.bops),
             format_double(r.memory_kb)});
  }
  csv.row({"total", "", "", "", format_double(report.bops),
           format_double(report.memory_kb)});
  csv.row({"ratio_vs_float32", "", "", "", format_double(report.bop_ratio),
           format_double(report.memory_ratio)});
  return csv.str();
}

}  // namespace sbs
