#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gsrw/detail/binary_io.hpp"

namespace gsrw {

/// One labeled embedding: an identity label, an optional camera label and a
/// d-dimensional feature vector. All features in a set share the same d.
struct EmbeddingRecord {
  std::string id;
  std::optional<std::string> cam;
  Eigen::VectorXd feature;

  bool operator==(const EmbeddingRecord& o) const {
    return id == o.id && cam == o.cam && feature.size() == o.feature.size() &&
           feature == o.feature;
  }
};

/// A probe plus an ordered gallery. Gallery order is significant and is
/// preserved through every downstream operation.
struct EmbeddingSet {
  EmbeddingRecord probe;
  std::vector<EmbeddingRecord> gallery;

  Eigen::Index d() const { return probe.feature.size(); }
  int n() const { return static_cast<int>(gallery.size()); }
};

enum class FileFormat { csv, binary };

inline FileFormat parse_format(const std::string& s) {
  if (s == "csv") return FileFormat::csv;
  if (s == "binary" || s == "bin") return FileFormat::binary;
  throw std::invalid_argument("unknown format '" + s + "' (expected csv or binary)");
}

namespace detail {

inline bool parse_double(const std::string& field, double& out) {
  const char* begin = field.data();
  const char* end = begin + field.size();
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(cur);
  for (auto& f : fields) {
    const auto b = f.find_first_not_of(" \t");
    const auto e = f.find_last_not_of(" \t");
    f = (b == std::string::npos) ? std::string() : f.substr(b, e - b + 1);
  }
  return fields;
}

// Parses `id[,cam],f1,...,fd`. The second field is a camera label when it
// does not parse as a number.
inline bool parse_csv_record(const std::string& line, EmbeddingRecord& rec) {
  const auto fields = split_csv_line(line);
  if (fields.size() < 2) return false;
  rec.id = fields[0];
  std::size_t first_feature = 1;
  double probe_val = 0.0;
  if (!parse_double(fields[1], probe_val)) {
    if (fields.size() < 3) return false;
    rec.cam = fields[1];
    first_feature = 2;
  } else {
    rec.cam.reset();
  }
  const std::size_t d = fields.size() - first_feature;
  rec.feature.resize(static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < d; ++i) {
    double v = 0.0;
    if (!parse_double(fields[first_feature + i], v)) return false;
    rec.feature[static_cast<Eigen::Index>(i)] = v;
  }
  return true;
}

constexpr char kEmbeddingMagic[4] = {'G', 'S', 'R', 'W'};
constexpr std::uint8_t kEmbeddingVersion = 1;

}  // namespace detail

/// Reads an embedding file. Records come back in file order; d is inferred
/// from the first record and every later record must match it.
inline std::vector<EmbeddingRecord> load_embeddings(const std::string& path,
                                                    FileFormat format) {
  if (format == FileFormat::csv) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open file: " + path);
    std::vector<EmbeddingRecord> records;
    std::string line;
    std::size_t line_no = 0;
    bool first_data_line = true;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      EmbeddingRecord rec;
      if (!detail::parse_csv_record(line, rec)) {
        if (first_data_line) {
          // optional header line: fields where the numbers should be
          first_data_line = false;
          continue;
        }
        throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                 ": unparsable record");
      }
      first_data_line = false;
      if (!records.empty() && rec.feature.size() != records.front().feature.size())
        throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                 ": feature dimension mismatch (" +
                                 std::to_string(rec.feature.size()) + " vs " +
                                 std::to_string(records.front().feature.size()) + ")");
      if (rec.feature.size() == 0)
        throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                 ": record has no feature values");
      records.push_back(std::move(rec));
    }
    if (records.empty()) throw std::runtime_error(path + ": no records found");
    return records;
  }

  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, detail::kEmbeddingMagic, 4) != 0)
    throw std::runtime_error(path + ": not a GSRW embedding file");
  const auto version = gsrw::detail::read_u8(in);
  if (version != detail::kEmbeddingVersion)
    throw std::runtime_error(path + ": unsupported version " + std::to_string(version));
  const std::uint32_t count = gsrw::detail::read_u32le(in);
  const std::uint32_t d = gsrw::detail::read_u32le(in);
  const bool has_cam = gsrw::detail::read_u8(in) != 0;
  if (count == 0) throw std::runtime_error(path + ": no records found");
  if (d == 0) throw std::runtime_error(path + ": feature dimension is zero");
  std::vector<EmbeddingRecord> records;
  records.reserve(count);
  for (std::uint32_t r = 0; r < count; ++r) {
    EmbeddingRecord rec;
    rec.id = gsrw::detail::read_string(in);
    if (has_cam) rec.cam = gsrw::detail::read_string(in);
    rec.feature.resize(d);
    for (std::uint32_t i = 0; i < d; ++i)
      rec.feature[i] = gsrw::detail::read_f64le(in);
    records.push_back(std::move(rec));
  }
  return records;
}

/// Writes records so that load_embeddings reproduces them: bit-exact for
/// binary, within 1e-9 for csv (max_digits10 formatting makes csv exact too).
inline void save_embeddings(const std::vector<EmbeddingRecord>& records,
                            const std::string& path, FileFormat format) {
  if (records.empty())
    throw std::invalid_argument("save_embeddings: empty record list");
  const Eigen::Index d = records.front().feature.size();
  if (d == 0) throw std::invalid_argument("save_embeddings: zero feature dimension");
  const bool has_cam = records.front().cam.has_value();
  for (const auto& rec : records) {
    if (rec.feature.size() != d)
      throw std::invalid_argument("save_embeddings: inconsistent feature dimensions");
    if (format == FileFormat::binary && rec.cam.has_value() != has_cam)
      throw std::invalid_argument(
          "save_embeddings: mixed camera-label presence cannot be stored in binary");
  }

  if (format == FileFormat::csv) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open file for writing: " + path);
    out.precision(std::numeric_limits<double>::max_digits10);
    for (const auto& rec : records) {
      out << rec.id;
      if (rec.cam) out << ',' << *rec.cam;
      for (Eigen::Index i = 0; i < d; ++i) out << ',' << rec.feature[i];
      out << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + path);
    return;
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open file for writing: " + path);
  out.write(detail::kEmbeddingMagic, 4);
  gsrw::detail::write_u8(out, detail::kEmbeddingVersion);
  gsrw::detail::write_u32le(out, static_cast<std::uint32_t>(records.size()));
  gsrw::detail::write_u32le(out, static_cast<std::uint32_t>(d));
  gsrw::detail::write_u8(out, has_cam ? 1 : 0);
  for (const auto& rec : records) {
    gsrw::detail::write_string(out, rec.id);
    if (has_cam) gsrw::detail::write_string(out, *rec.cam);
    for (Eigen::Index i = 0; i < d; ++i) gsrw::detail::write_f64le(out, rec.feature[i]);
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

/// Configuration for the synthetic identity-cluster generator. Identity
/// centers are Gaussian with spread center_spread; each image is its center
/// plus Gaussian noise with spread cluster_spread.
struct SynthConfig {
  int num_identities = 8;
  int images_per_identity = 4;
  int d = 16;
  double cluster_spread = 0.1;
  double center_spread = 1.0;
  std::uint64_t seed = 0;
  int num_cams = 0;  // 0: no camera labels

  void validate() const {
    if (num_identities <= 0) throw std::invalid_argument("num_identities must be positive");
    if (images_per_identity <= 0)
      throw std::invalid_argument("images_per_identity must be positive");
    if (d <= 0) throw std::invalid_argument("feature dimension must be positive");
    if (cluster_spread < 0) throw std::invalid_argument("cluster_spread must be nonnegative");
    if (center_spread <= 0) throw std::invalid_argument("center_spread must be positive");
    if (num_cams < 0) throw std::invalid_argument("num_cams must be nonnegative");
  }

  std::vector<std::string> warnings() const {
    std::vector<std::string> w;
    if (cluster_spread >= center_spread)
      w.push_back("cluster_spread >= center_spread: identity clusters will overlap heavily");
    return w;
  }
};

/// Deterministic for a fixed seed. Records are emitted identity-major, image
/// order within an identity preserved; ids are "p0", "p1", ... and camera
/// labels (when num_cams > 0) cycle "c0".."c<num_cams-1>" over images.
inline std::vector<EmbeddingRecord> generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> center_dist(0.0, cfg.center_spread);
  std::normal_distribution<double> noise_dist(0.0, 1.0);

  std::vector<EmbeddingRecord> records;
  records.reserve(static_cast<std::size_t>(cfg.num_identities) * cfg.images_per_identity);
  for (int p = 0; p < cfg.num_identities; ++p) {
    Eigen::VectorXd center(cfg.d);
    for (int i = 0; i < cfg.d; ++i) center[i] = center_dist(rng);
    for (int q = 0; q < cfg.images_per_identity; ++q) {
      EmbeddingRecord rec;
      rec.id = "p" + std::to_string(p);
      if (cfg.num_cams > 0) rec.cam = "c" + std::to_string(q % cfg.num_cams);
      rec.feature.resize(cfg.d);
      for (int i = 0; i < cfg.d; ++i)
        rec.feature[i] = center[i] + cfg.cluster_spread * noise_dist(rng);
      records.push_back(std::move(rec));
    }
  }
  return records;
}

}  // namespace gsrw
