#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "slashlab/rank_metrics.hpp"
#include "slashlab/rope.hpp"
#include "slashlab/slash_analysis.hpp"

namespace slashlab {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

/// Named row-major tensor of f32 or f64 values.
struct Tensor {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::variant<std::vector<float>, std::vector<double>> data;

  DType dtype() const noexcept;
  std::uint64_t element_count() const noexcept;
  /// Values widened to double, row-major.
  std::vector<double> values() const;
  /// 2-D tensors as rows x cols; 1-D tensors as a column.
  MatrixXd to_matrix() const;
  VectorXd to_vector() const;

  static Tensor from_matrix(std::string name, const MatrixXd& m, DType dtype = DType::F64);
  static Tensor from_vector(std::string name, const VectorXd& v, DType dtype = DType::F64);
};

/// Provenance stored next to the binary file as JSON.
struct Manifest {
  std::string model;
  int layer = 0;
  int head = 0;
  std::int64_t context_len = 0;
  bool rope_applied = false;  // Q/K already rotated; never rotate twice
  double logit_scale_hint = 1.0;
  double freq_base = 10000.0;
  /// Optional: length of the cone band of a stored `freqs` tensor.
  std::optional<std::uint64_t> cone_band_len;
};

struct TensorDump {
  Manifest manifest;
  std::vector<Tensor> tensors;

  const Tensor* find(const std::string& name) const;
};

inline constexpr std::uint32_t kSdhaVersion = 1;

/// SDHA layout, all integers little-endian:
///   "SDHA" | u32 version | u32 count |
///   count x (u32 name_len | name | u8 dtype | u8 ndim | ndim x u64 | payload) |
///   u32 CRC-32 of every byte after the magic.
std::vector<std::uint8_t> encode_tensors(const std::vector<Tensor>& tensors);
std::vector<Tensor> decode_tensors(const std::vector<std::uint8_t>& bytes);

/// Sidecar path for a dump: "<path>.json".
std::filesystem::path manifest_path(const std::filesystem::path& dump);

std::string manifest_to_json(const Manifest& m);
Manifest manifest_from_json(const std::string& text);

void write_dump(const std::vector<Tensor>& tensors, const Manifest& manifest,
                const std::filesystem::path& path);
TensorDump read_dump(const std::filesystem::path& path);

/// Reports for one head. Tensors are grouped by the suffix after the first
/// '.' in their name ("Q.h7", "K.h7", ...); the roles are Q, K, H, W_Q, W_K,
/// b_Q and b_K. A global 1-D "freqs" tensor overrides manifest.freq_base.
struct HeadAnalysis {
  std::string tag;
  std::optional<SlashReport> slash;
  std::optional<SpectralReport> q_spectrum;
  std::optional<SpectralReport> k_spectrum;
  std::optional<SpectralReport> h_spectrum;
  std::vector<AlignmentReport> q_alignment;  // one per row of H
  std::vector<AlignmentReport> k_alignment;
};

struct DumpAnalysis {
  std::vector<HeadAnalysis> heads;  // sorted by tag
};

DumpAnalysis analyze_dump(const TensorDump& dump, const SlashConfig& config, double tau);

/// Frequencies used for a dump: the stored "freqs" tensor when present,
/// otherwise classic frequencies of the given head dimension.
FrequencySequence dump_frequencies(const TensorDump& dump, std::size_t head_dim);

}  // namespace slashlab
