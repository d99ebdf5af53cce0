#include "slashlab/ingest.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>
#include <zlib.h>

#include "slashlab/errors.hpp"
#include "slashlab/shallow_model.hpp"

namespace slashlab {

namespace {

constexpr char kMagic[4] = {'S', 'D', 'H', 'A'};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T get_le(const std::uint8_t* p) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t len) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in chunks.
  while (len > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(len, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    len -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void validate_name(const std::string& name) {
  if (name.empty()) throw InvalidArgument("tensor name must be non-empty");
  if (name.find('/') != std::string::npos || name.find('\\') != std::string::npos) {
    throw InvalidArgument("tensor name '" + name + "' contains a path separator");
  }
  if (name.find('\0') != std::string::npos) {
    throw InvalidArgument("tensor name contains a NUL byte");
  }
  // Well-formed UTF-8 (structure only).
  std::size_t i = 0;
  while (i < name.size()) {
    const auto c = static_cast<unsigned char>(name[i]);
    std::size_t extra = 0;
    if (c >= 0x80) {
      if ((c >> 5) == 0x6) extra = 1;
      else if ((c >> 4) == 0xe) extra = 2;
      else if ((c >> 3) == 0x1e) extra = 3;
      else throw InvalidArgument("tensor name is not valid UTF-8");
    }
    for (std::size_t k = 1; k <= extra; ++k) {
      if (i + k >= name.size() || (static_cast<unsigned char>(name[i + k]) >> 6) != 0x2) {
        throw InvalidArgument("tensor name is not valid UTF-8");
      }
    }
    i += extra + 1;
  }
}

bool checked_count(const std::vector<std::uint64_t>& shape, std::uint64_t elem_size,
                   std::uint64_t& bytes) {
  std::uint64_t n = 1;
  for (std::uint64_t d : shape) {
    if (d != 0 && n > UINT64_MAX / d) return false;
    n *= d;
  }
  if (n != 0 && n > UINT64_MAX / elem_size) return false;
  bytes = n * elem_size;
  return true;
}

}  // namespace

DType Tensor::dtype() const noexcept {
  return std::holds_alternative<std::vector<float>>(data) ? DType::F32 : DType::F64;
}

std::uint64_t Tensor::element_count() const noexcept {
  return std::visit([](const auto& v) { return static_cast<std::uint64_t>(v.size()); }, data);
}

std::vector<double> Tensor::values() const {
  return std::visit(
      [](const auto& v) { return std::vector<double>(v.begin(), v.end()); }, data);
}

MatrixXd Tensor::to_matrix() const {
  if (shape.size() == 1) return to_vector();
  if (shape.size() != 2) {
    throw InvalidArgument("tensor '" + name + "' is not 1-D or 2-D");
  }
  const auto rows = static_cast<Eigen::Index>(shape[0]);
  const auto cols = static_cast<Eigen::Index>(shape[1]);
  const std::vector<double> v = values();
  MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = v[static_cast<std::size_t>(r * cols + c)];
  }
  return m;
}

VectorXd Tensor::to_vector() const {
  const std::vector<double> v = values();
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Tensor Tensor::from_matrix(std::string name, const MatrixXd& m, DType dtype) {
  Tensor t;
  t.name = std::move(name);
  t.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) v.push_back(m(r, c));
  }
  if (dtype == DType::F32) {
    t.data = std::vector<float>(v.begin(), v.end());
  } else {
    t.data = std::move(v);
  }
  return t;
}

Tensor Tensor::from_vector(std::string name, const VectorXd& v, DType dtype) {
  Tensor t;
  t.name = std::move(name);
  t.shape = {static_cast<std::uint64_t>(v.size())};
  std::vector<double> vals(v.data(), v.data() + v.size());
  if (dtype == DType::F32) {
    t.data = std::vector<float>(vals.begin(), vals.end());
  } else {
    t.data = std::move(vals);
  }
  return t;
}

const Tensor* TensorDump::find(const std::string& name) const {
  for (const Tensor& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::vector<std::uint8_t> encode_tensors(const std::vector<Tensor>& tensors) {
  std::set<std::string> seen;
  for (const Tensor& t : tensors) {
    validate_name(t.name);
    if (!seen.insert(t.name).second) {
      throw InvalidArgument("duplicate tensor name '" + t.name + "'");
    }
    if (t.shape.size() > 255) throw InvalidArgument("tensor '" + t.name + "' has too many dims");
    std::uint64_t bytes = 0;
    const std::uint64_t esize = t.dtype() == DType::F32 ? 4 : 8;
    if (!checked_count(t.shape, esize, bytes) || bytes != t.element_count() * esize) {
      throw InvalidArgument("tensor '" + t.name + "': shape does not match payload");
    }
  }
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_le<std::uint32_t>(out, kSdhaVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const Tensor& t : tensors) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    out.push_back(static_cast<std::uint8_t>(t.dtype()));
    out.push_back(static_cast<std::uint8_t>(t.shape.size()));
    for (std::uint64_t d : t.shape) put_le<std::uint64_t>(out, d);
    std::visit([&](const auto& v) { for (auto x : v) put_le(out, x); }, t.data);
  }
  put_le<std::uint32_t>(out, crc32_of(out.data() + 4, out.size() - 4));
  return out;
}

std::vector<Tensor> decode_tensors(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("bad magic, expected \"SDHA\"", 0);
  }
  if (bytes.size() < 16) throw FormatError("file too short for an SDHA header", bytes.size());
  const std::uint32_t version = get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kSdhaVersion) {
    throw FormatError("unsupported SDHA version " + std::to_string(version), 4);
  }
  const std::uint32_t count = get_le<std::uint32_t>(bytes.data() + 8);
  const std::size_t end = bytes.size() - 4;  // trailing CRC
  std::size_t pos = 12;

  std::vector<Tensor> tensors;
  for (std::uint32_t idx = 0; idx < count; ++idx) {
    std::string label = "#" + std::to_string(idx);
    auto need = [&](std::size_t n) {
      if (pos > end || end - pos < n) throw CorruptError("truncated data", label);
    };
    need(4);
    const std::uint32_t name_len = get_le<std::uint32_t>(bytes.data() + pos);
    pos += 4;
    need(name_len);
    Tensor t;
    t.name.assign(reinterpret_cast<const char*>(bytes.data() + pos), name_len);
    label = t.name;
    pos += name_len;
    need(2);
    const std::uint8_t dtype = bytes[pos];
    const std::uint8_t ndim = bytes[pos + 1];
    if (dtype > 1) throw FormatError("unknown dtype code " + std::to_string(dtype), pos);
    pos += 2;
    need(static_cast<std::size_t>(ndim) * 8);
    for (std::uint8_t d = 0; d < ndim; ++d) {
      t.shape.push_back(get_le<std::uint64_t>(bytes.data() + pos));
      pos += 8;
    }
    const std::uint64_t esize = dtype == 0 ? 4 : 8;
    std::uint64_t payload = 0;
    if (!checked_count(t.shape, esize, payload)) {
      throw CorruptError("shape overflows the payload size", label);
    }
    need(payload);
    const std::size_t n = static_cast<std::size_t>(payload / esize);
    if (dtype == 0) {
      std::vector<float> v(n);
      for (std::size_t i = 0; i < n; ++i) v[i] = get_le<float>(bytes.data() + pos + 4 * i);
      t.data = std::move(v);
    } else {
      std::vector<double> v(n);
      for (std::size_t i = 0; i < n; ++i) v[i] = get_le<double>(bytes.data() + pos + 8 * i);
      t.data = std::move(v);
    }
    pos += payload;
    tensors.push_back(std::move(t));
  }
  if (pos != end) throw FormatError("unexpected bytes after the last tensor", pos);
  const std::uint32_t stored = get_le<std::uint32_t>(bytes.data() + end);
  if (stored != crc32_of(bytes.data() + 4, end - 4)) {
    throw FormatError("checksum mismatch", end);
  }
  return tensors;
}

std::filesystem::path manifest_path(const std::filesystem::path& dump) {
  std::filesystem::path p = dump;
  p += ".json";
  return p;
}

std::string manifest_to_json(const Manifest& m) {
  nlohmann::ordered_json j;
  j["model"] = m.model;
  j["layer"] = m.layer;
  j["head"] = m.head;
  j["context_len"] = m.context_len;
  j["rope_applied"] = m.rope_applied;
  j["logit_scale_hint"] = m.logit_scale_hint;
  j["freq_base"] = m.freq_base;
  if (m.cone_band_len) j["cone_band_len"] = *m.cone_band_len;
  return j.dump(2) + "\n";
}

Manifest manifest_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!j.contains("rope_applied") || !j["rope_applied"].is_boolean()) {
    throw Error("manifest lacks the boolean 'rope_applied' flag");
  }
  Manifest m;
  try {
    m.model = j.value("model", std::string{});
    m.layer = j.value("layer", 0);
    m.head = j.value("head", 0);
    m.context_len = j.value("context_len", std::int64_t{0});
    m.rope_applied = j["rope_applied"].get<bool>();
    m.logit_scale_hint = j.value("logit_scale_hint", 1.0);
    m.freq_base = j.value("freq_base", 10000.0);
    if (j.contains("cone_band_len")) m.cone_band_len = j["cone_band_len"].get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("manifest field has the wrong type: ") + e.what());
  }
  return m;
}

void write_dump(const std::vector<Tensor>& tensors, const Manifest& manifest,
                const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = encode_tensors(tensors);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing '" + path.string() + "'");
  }
  std::ofstream side(manifest_path(path), std::ios::trunc);
  if (!side) throw Error("cannot write manifest for '" + path.string() + "'");
  side << manifest_to_json(manifest);
}

TensorDump read_dump(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open dump '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  TensorDump dump;
  dump.tensors = decode_tensors(bytes);
  std::ifstream side(manifest_path(path));
  if (!side) throw Error("missing manifest '" + manifest_path(path).string() + "'");
  const std::string text((std::istreambuf_iterator<char>(side)), std::istreambuf_iterator<char>());
  dump.manifest = manifest_from_json(text);
  return dump;
}

FrequencySequence dump_frequencies(const TensorDump& dump, std::size_t head_dim) {
  if (const Tensor* f = dump.find("freqs")) {
    FrequencySequence seq;
    seq.values = f->values();
    seq.cone_band_len = dump.manifest.cone_band_len.value_or(seq.values.size());
    seq.validate();
    if (seq.dim() != head_dim) {
      throw InvalidArgument("stored freqs cover dimension " + std::to_string(seq.dim()) +
                            ", tensors have " + std::to_string(head_dim));
    }
    return seq;
  }
  return classic_frequencies(static_cast<int>(head_dim), dump.manifest.freq_base);
}

DumpAnalysis analyze_dump(const TensorDump& dump, const SlashConfig& config, double tau) {
  config.validate();
  std::map<std::string, std::map<std::string, const Tensor*>> groups;
  static const std::set<std::string> roles = {"Q", "K", "H", "W_Q", "W_K", "b_Q", "b_K"};
  for (const Tensor& t : dump.tensors) {
    const auto dot = t.name.find('.');
    const std::string role = t.name.substr(0, dot);
    const std::string tag = dot == std::string::npos ? std::string{} : t.name.substr(dot + 1);
    if (roles.count(role)) groups[tag][role] = &t;
  }
  if (groups.empty()) throw MissingTensorError("dump contains no Q/K/H/W_Q/W_K tensors");

  DumpAnalysis out;
  for (const auto& [tag, g] : groups) {
    auto get = [&](const char* role) -> const Tensor* {
      auto it = g.find(role);
      return it == g.end() ? nullptr : it->second;
    };
    const std::string where = tag.empty() ? std::string("untagged head") : "head '" + tag + "'";
    HeadAnalysis h;
    h.tag = tag;
    const Tensor* q = get("Q");
    const Tensor* k = get("K");
    const Tensor* hs = get("H");
    const Tensor* wq = get("W_Q");
    const Tensor* wk = get("W_K");
    if ((q == nullptr) != (k == nullptr)) {
      throw MissingTensorError(where + ": Q and K must be provided together");
    }
    if ((wq || wk) && !hs) throw MissingTensorError(where + ": W_Q/W_K need hidden states H");
    if (!q && !(hs && (wq || wk))) {
      throw MissingTensorError(where + ": need Q and K, or H with W_Q/W_K");
    }
    if (q) {
      const MatrixXd qm = q->to_matrix();
      const MatrixXd km = k->to_matrix();
      if (qm.rows() != km.rows() || qm.cols() != km.cols()) {
        throw InvalidArgument(where + ": Q and K shapes differ");
      }
      MatrixXd s;
      if (dump.manifest.rope_applied) {
        s = causal_softmax(config.logit_scale * (qm * km.transpose()));
      } else {
        s = attention_from_qk(qm, km, dump_frequencies(dump, static_cast<std::size_t>(qm.cols())),
                              config);
      }
      SlashConfig usable = config;
      usable.lags.erase(std::remove_if(usable.lags.begin(), usable.lags.end(),
                                       [&](int lag) { return lag >= s.rows(); }),
                        usable.lags.end());
      h.slash = detect_sdh({s}, usable);
      h.q_spectrum = spectral_report(qm, tau);
      h.k_spectrum = spectral_report(km, tau);
    }
    if (hs) {
      const MatrixXd hm = hs->to_matrix();
      h.h_spectrum = spectral_report(hm, tau);
      auto align = [&](const Tensor* w, const Tensor* b, std::vector<AlignmentReport>& dst) {
        if (!w) return;
        const MatrixXd wm = w->to_matrix();
        if (wm.rows() != hm.cols()) throw InvalidArgument(where + ": W and H widths differ");
        std::optional<VectorXd> bias;
        if (b) {
          bias = b->to_vector();
          if (bias->size() != wm.cols()) throw InvalidArgument(where + ": bias width");
        }
        const Svd svd = thin_svd(wm);
        for (Eigen::Index r = 0; r < hm.rows(); ++r) {
          dst.push_back(aligned_report(hm.row(r).transpose(), svd, bias, tau));
        }
      };
      align(wq, get("b_Q"), h.q_alignment);
      align(wk, get("b_K"), h.k_alignment);
    }
    out.heads.push_back(std::move(h));
  }
  return out;
}

}  // namespace slashlab
