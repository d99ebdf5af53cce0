#include <doctest.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "slashlab/errors.hpp"
#include "slashlab/ingest.hpp"
#include "slashlab/training.hpp"

using namespace slashlab;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir() {
  fs::path p(SLASHLAB_TEST_TMP);
  fs::create_directories(p);
  return p;
}

// Bitwise CRC-32 (reflected, polynomial 0xEDB88320).
std::uint32_t crc32_ref(const std::uint8_t* p, std::size_t n) {
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) {
    c ^= p[i];
    for (int k = 0; k < 8; ++k) c = (c >> 1) ^ (0xEDB88320u & (0u - (c & 1u)));
  }
  return ~c;
}

void le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

Tensor random_tensor(Rng& r, std::string name, std::vector<std::uint64_t> shape, DType dt) {
  Tensor t;
  t.name = std::move(name);
  t.shape = std::move(shape);
  std::uint64_t n = 1;
  for (auto d : t.shape) n *= d;
  if (dt == DType::F32) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(r.normal());
    t.data = v;
  } else {
    std::vector<double> v(n);
    for (auto& x : v) x = r.normal();
    t.data = v;
  }
  return t;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  if (a.name != b.name || a.shape != b.shape || a.dtype() != b.dtype()) return false;
  return std::visit(
      [&](const auto& va) {
        using V = std::decay_t<decltype(va)>;
        const V& vb = std::get<V>(b.data);
        return va.size() == vb.size() &&
               std::memcmp(va.data(), vb.data(), va.size() * sizeof(typename V::value_type)) == 0;
      },
      a.data);
}

}  // namespace

TEST_CASE("byte layout of a small file") {
  Tensor t;
  t.name = "ab";
  t.shape = {2};
  t.data = std::vector<float>{1.0f, -2.0f};
  const auto bytes = encode_tensors({t});

  std::vector<std::uint8_t> expect{'S', 'D', 'H', 'A'};
  le(expect, 1, 4);
  le(expect, 1, 4);
  le(expect, 2, 4);
  expect.push_back('a');
  expect.push_back('b');
  expect.push_back(0);
  expect.push_back(1);
  le(expect, 2, 8);
  std::uint32_t f;
  float one = 1.0f, minus_two = -2.0f;
  std::memcpy(&f, &one, 4);
  le(expect, f, 4);
  std::memcpy(&f, &minus_two, 4);
  le(expect, f, 4);
  le(expect, crc32_ref(expect.data() + 4, expect.size() - 4), 4);
  CHECK(bytes == expect);
}

TEST_CASE("round trip is bit-identical") {
  Rng r(1);
  std::vector<Tensor> ts{
      random_tensor(r, "Q.h0", {17, 8}, DType::F32), random_tensor(r, "K.h0", {17, 8}, DType::F64),
      random_tensor(r, "scalar", {}, DType::F64), random_tensor(r, "empty", {0, 4}, DType::F32),
      random_tensor(r, "cube", {2, 3, 4}, DType::F64), random_tensor(r, "名前", {3}, DType::F32)};
  Manifest m;
  m.model = "toy";
  m.layer = 3;
  m.head = 7;
  m.context_len = 17;
  m.rope_applied = true;
  m.logit_scale_hint = 0.125;
  m.freq_base = 500000.0;
  const fs::path p = tmp_dir() / "round.sdha";
  write_dump(ts, m, p);
  const TensorDump d = read_dump(p);
  REQUIRE(d.tensors.size() == ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) CHECK(same_bits(ts[i], d.tensors[i]));
  CHECK(d.manifest.model == "toy");
  CHECK(d.manifest.layer == 3);
  CHECK(d.manifest.head == 7);
  CHECK(d.manifest.context_len == 17);
  CHECK(d.manifest.rope_applied);
  CHECK(d.manifest.logit_scale_hint == 0.125);
  CHECK(d.manifest.freq_base == 500000.0);
  CHECK_FALSE(d.manifest.cone_band_len.has_value());
  CHECK(fs::exists(manifest_path(p)));
}

TEST_CASE("writes are deterministic") {
  Rng r(2);
  const std::vector<Tensor> ts{random_tensor(r, "a", {5, 5}, DType::F64)};
  const fs::path a = tmp_dir() / "det_a.sdha", b = tmp_dir() / "det_b.sdha";
  write_dump(ts, Manifest{}, a);
  write_dump(ts, Manifest{}, b);
  CHECK(read_bytes(a) == read_bytes(b));
  CHECK(read_bytes(manifest_path(a)) == read_bytes(manifest_path(b)));
}

TEST_CASE("empty tensor list") {
  const fs::path p = tmp_dir() / "empty.sdha";
  write_dump({}, Manifest{}, p);
  CHECK(read_bytes(p).size() == 16);
  CHECK(read_dump(p).tensors.empty());
}

TEST_CASE("f32 payloads widen exactly") {
  Tensor t;
  t.name = "x";
  t.shape = {3};
  const std::vector<float> v{0.1f, 1.0f / 3.0f, -7.25e-20f};
  t.data = v;
  const auto back = decode_tensors(encode_tensors({t}));
  const VectorXd w = back[0].to_vector();
  for (int i = 0; i < 3; ++i) CHECK(w(i) == static_cast<double>(v[i]));
}

TEST_CASE("invalid names are rejected") {
  Tensor t = Tensor::from_vector("a/b", VectorXd::Ones(2));
  CHECK_THROWS_AS(encode_tensors({t}), InvalidArgument);
  t.name = "a\\b";
  CHECK_THROWS_AS(encode_tensors({t}), InvalidArgument);
  t.name = "";
  CHECK_THROWS_AS(encode_tensors({t}), InvalidArgument);
  t.name = std::string("\xff\xfe");
  CHECK_THROWS_AS(encode_tensors({t}), InvalidArgument);
  t.name = "dup";
  CHECK_THROWS_AS(encode_tensors({t, t}), InvalidArgument);
  Tensor bad = Tensor::from_vector("bad", VectorXd::Ones(3));
  bad.shape = {4};
  CHECK_THROWS_AS(encode_tensors({bad}), InvalidArgument);
}

TEST_CASE("structural errors carry offsets") {
  Rng r(3);
  const auto good = encode_tensors({random_tensor(r, "Q", {4, 4}, DType::F64)});

  auto magic = good;
  magic[0] = 'X';
  try {
    decode_tensors(magic);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 0);
  }

  auto version = good;
  version[4] = 2;
  try {
    decode_tensors(version);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 4);
  }

  auto flipped = good;
  flipped[40] ^= 0x01;
  try {
    decode_tensors(flipped);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() == good.size() - 4);
  }

  auto truncated = good;
  truncated.resize(good.size() - 20);
  try {
    decode_tensors(truncated);
    FAIL("expected a corrupt error");
  } catch (const CorruptError& e) {
    CHECK(e.tensor() == "Q");
  }

  CHECK_THROWS_AS(decode_tensors({}), FormatError);
}

TEST_CASE("truncated file on disk names the tensor") {
  Rng r(4);
  const fs::path p = tmp_dir() / "trunc.sdha";
  write_dump({random_tensor(r, "first", {2}, DType::F64), random_tensor(r, "second", {64}, DType::F32)},
             Manifest{}, p);
  auto bytes = read_bytes(p);
  bytes.resize(bytes.size() - 100);
  write_bytes(p, bytes);
  try {
    read_dump(p);
    FAIL("expected a corrupt error");
  } catch (const CorruptError& e) {
    CHECK(e.tensor() == "second");
  }
}

TEST_CASE("manifest must carry rope_applied") {
  CHECK_THROWS_AS(manifest_from_json(R"({"model": "x"})"), Error);
  CHECK_THROWS_AS(manifest_from_json("not json"), Error);
  const Manifest m = manifest_from_json(R"({"rope_applied": false, "cone_band_len": 3})");
  CHECK_FALSE(m.rope_applied);
  CHECK(m.cone_band_len == 3u);
}

TEST_CASE("analysis of simulator tensors matches in-process reports") {
  const DataConfig c = DataConfig::make(4, 16, 4, 68);
  const auto f = FrequencySequence::concat(pulse_frequencies(34, 33), low_frequencies(3, 1.0 / (33.0 * 33.0)));
  TrainConfig t;
  t.seed = 2;
  t.tau2 = 0;
  const TrainResult res = two_stage_gd(t, c, f);
  const auto [q, k] = layer1_qk(res.params, c);

  Manifest m;
  m.rope_applied = false;
  m.cone_band_len = f.cone_band_len;
  const std::vector<Tensor> ts{
      Tensor::from_matrix("Q.sim", q), Tensor::from_matrix("K.sim", k),
      Tensor::from_vector("freqs", Eigen::Map<const VectorXd>(f.values.data(), static_cast<Eigen::Index>(f.size())))};
  const fs::path p = tmp_dir() / "sim.sdha";
  write_dump(ts, m, p);
  const TensorDump d = read_dump(p);
  const SlashConfig cfg;
  const DumpAnalysis a = analyze_dump(d, cfg, 0.95);
  REQUIRE(a.heads.size() == 1);
  CHECK(a.heads[0].tag == "sim");

  const SlashReport direct = detect_sdh({attention_from_qk(q, k, f, cfg)}, cfg);
  REQUIRE(a.heads[0].slash.has_value());
  for (std::size_t i = 0; i < direct.scores.size(); ++i) {
    CHECK(std::abs(a.heads[0].slash->scores[i] - direct.scores[i]) <= 1e-12);
    CHECK(a.heads[0].slash->detected[i] == direct.detected[i]);
  }
  const SpectralReport sq = spectral_report(q, 0.95);
  for (std::size_t i = 0; i < sq.power_ratios.size(); ++i) {
    CHECK(std::abs(a.heads[0].q_spectrum->power_ratios[i] - sq.power_ratios[i]) <= 1e-12);
  }
  CHECK(a.heads[0].q_spectrum->effective_rank == sq.effective_rank);
  // Queries of the reduced model are identical rows: rank one.
  CHECK(a.heads[0].q_spectrum->power_ratios[0] >= 1.0 - 1e-10);

  SUBCASE("tensor order does not matter") {
    const std::vector<Tensor> shuffled{ts[2], ts[1], ts[0]};
    TensorDump d2{m, shuffled};
    const DumpAnalysis b = analyze_dump(d2, cfg, 0.95);
    CHECK(b.heads[0].slash->scores == a.heads[0].slash->scores);
  }
}

TEST_CASE("rank-one queries, alignment and rope handling") {
  Rng r(5);
  const int n = 12, dh = 8;
  VectorXd u(n), v(dh);
  for (int i = 0; i < n; ++i) u(i) = r.normal();
  for (int i = 0; i < dh; ++i) v(i) = r.normal();
  MatrixXd q = u * v.transpose();
  MatrixXd k(n, dh);
  for (Eigen::Index i = 0; i < k.size(); ++i) k(i) = r.normal();
  MatrixXd h(n, 6), wq(6, dh);
  for (Eigen::Index i = 0; i < h.size(); ++i) h(i) = r.normal();
  for (Eigen::Index i = 0; i < wq.size(); ++i) wq(i) = r.normal();
  VectorXd bq(dh);
  for (int i = 0; i < dh; ++i) bq(i) = r.normal();

  Manifest m;
  m.freq_base = 100.0;
  TensorDump d{m, {Tensor::from_matrix("Q", q), Tensor::from_matrix("K", k), Tensor::from_matrix("H", h),
                   Tensor::from_matrix("W_Q", wq), Tensor::from_vector("b_Q", bq)}};
  const DumpAnalysis a = analyze_dump(d, SlashConfig{}, 0.9);
  REQUIRE(a.heads.size() == 1);
  CHECK(a.heads[0].q_spectrum->power_ratios[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(a.heads[0].q_spectrum->effective_rank == 1);
  REQUIRE(a.heads[0].q_alignment.size() == static_cast<std::size_t>(n));
  const AlignmentReport ref = aligned_report(h.row(3).transpose(), wq, bq, 0.9);
  CHECK(a.heads[0].q_alignment[3].aligned_ratios == ref.aligned_ratios);
  CHECK(a.heads[0].q_alignment[3].order[0] == kBiasSlot);

  // Pre-rotated tensors with rope_applied = true give the same attention.
  const FrequencySequence f = classic_frequencies(dh, 100.0);
  MatrixXd qr(n, dh), kr(n, dh);
  for (int i = 0; i < n; ++i) {
    qr.row(i) = apply_rope(q.row(i).transpose(), i, f).transpose();
    kr.row(i) = apply_rope(k.row(i).transpose(), i, f).transpose();
  }
  Manifest rotated = m;
  rotated.rope_applied = true;
  TensorDump d2{rotated, {Tensor::from_matrix("Q", qr), Tensor::from_matrix("K", kr)}};
  const DumpAnalysis a2 = analyze_dump(d2, SlashConfig{}, 0.9);
  for (std::size_t i = 0; i < a.heads[0].slash->scores.size(); ++i) {
    CHECK(a2.heads[0].slash->scores[i] == doctest::Approx(a.heads[0].slash->scores[i]).epsilon(1e-12));
  }
}

TEST_CASE("missing tensors are reported") {
  const MatrixXd q = MatrixXd::Ones(4, 4);
  CHECK_THROWS_AS(analyze_dump(TensorDump{Manifest{}, {Tensor::from_matrix("Q", q)}}, SlashConfig{}, 0.9),
                  MissingTensorError);
  CHECK_THROWS_AS(analyze_dump(TensorDump{Manifest{}, {}}, SlashConfig{}, 0.9), MissingTensorError);
  CHECK_THROWS_AS(analyze_dump(TensorDump{Manifest{}, {Tensor::from_matrix("W_Q", q)}}, SlashConfig{}, 0.9),
                  MissingTensorError);
}

TEST_CASE("external head fixture") {
  // SLASHLAB_EXTERNAL_HEAD_DUMP: SDHA dump of Qwen2.5 layer 18 head 7 (tensors Q and
  // K, rope not applied). Reference values are given to three decimals.
  const char* path = std::getenv("SLASHLAB_EXTERNAL_HEAD_DUMP");
  if (path == nullptr) {
    MESSAGE("no external head dump configured; skipping");
    return;
  }
  const TensorDump d = read_dump(path);
  SlashConfig cfg;
  cfg.lags = {0};
  cfg.excluded_prefix = 4;
  cfg.logit_scale = d.manifest.logit_scale_hint;
  const DumpAnalysis a = analyze_dump(d, cfg, 0.95);
  REQUIRE_FALSE(a.heads.empty());
  const HeadAnalysis& h = a.heads[0];
  CHECK(std::abs(h.slash->scores[0] - 1.000) <= 5e-4);
  CHECK(std::abs(h.q_spectrum->power_ratios[0] - 0.986) <= 5e-4);
  CHECK(h.q_spectrum->effective_rank == 1);
  CHECK(std::abs(h.k_spectrum->power_ratios[0] - 0.703) <= 5e-4);
  CHECK(h.k_spectrum->effective_rank == 26);
}
