#include "slashlab/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "slashlab/errors.hpp"
#include "slashlab/ingest.hpp"
#include "slashlab/parallel.hpp"
#include "slashlab/shallow_model.hpp"
#include "slashlab/version.hpp"

namespace slashlab::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw InvalidArgument("config field '" + path_ + "' must be an object");
  }

  bool has(const std::string& key) {
    used_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  const json& raw(const std::string& key) { used_.insert(key); return j_.at(key); }

  std::string field(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  template <typename T>
  std::optional<T> opt(const std::string& key) {
    if (!has(key)) return std::nullopt;
    return convert<T>(j_.at(key), field(key));
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    return opt<T>(key).value_or(fallback);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.count(key)) throw InvalidArgument("unknown config field '" + field(key) + "'");
    }
  }

  template <typename T>
  static T convert(const json& v, const std::string& name) {
    auto bad = [&](const char* what) {
      return InvalidArgument("config field '" + name + "': expected " + what);
    };
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw bad("a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw bad("a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw bad("a number");
      return v.get<double>();
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_unsigned()) throw bad("a non-negative integer");
      return v.get<std::uint64_t>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw bad("an integer");
      const auto x = v.get<std::int64_t>();
      if (x < std::numeric_limits<T>::min() || x > std::numeric_limits<T>::max()) {
        throw bad("an integer in range");
      }
      return static_cast<T>(x);
    } else {
      if (!v.is_array()) throw bad("an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(convert<typename T::value_type>(v[i], name + "[" + std::to_string(i) + "]"));
      }
      return out;
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

ordered_json tool_json() {
  ordered_json t;
  t["name"] = kToolName;
  t["version"] = kToolVersion;
  return t;
}

ordered_json slash_config_json(const SlashConfig& s) {
  ordered_json j;
  j["lags"] = s.lags;
  j["kappa"] = s.kappa;
  j["excluded_prefix"] = s.excluded_prefix;
  j["logit_scale"] = s.logit_scale;
  return j;
}

ordered_json slash_report_json(const SlashReport& r) {
  ordered_json j;
  j["lags"] = r.lags;
  j["scores"] = r.scores;
  j["detected"] = r.detected;
  j["intermediate_regime"] = r.intermediate_regime;
  j["samples"] = r.samples;
  j["kappa"] = r.kappa;
  j["excluded_prefix"] = r.excluded_prefix;
  j["logit_scale"] = r.logit_scale;
  return j;
}

ordered_json spectral_json(const SpectralReport& r) {
  ordered_json j;
  j["singular_values"] = r.singular_values;
  j["power_ratios"] = r.power_ratios;
  j["effective_rank"] = r.effective_rank;
  j["tau"] = r.tau;
  return j;
}

ordered_json alignment_json(const AlignmentReport& r) {
  ordered_json j;
  j["aligned_ratios"] = r.aligned_ratios;
  j["aligned_rank"] = r.aligned_rank;
  j["order"] = r.order;
  j["has_bias"] = r.has_bias;
  return j;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

std::string csv_header_comment(const ordered_json& config) {
  return std::string("# ") + kToolName + " " + kToolVersion + "\n# config: " + config.dump() + "\n";
}

std::string join_csv(const std::vector<std::string>& cells) {
  std::string line;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) line += ',';
    line += cells[i];
  }
  return line + "\n";
}

std::string trajectory_csv(const std::vector<DynamicsSnapshot>& snaps, int k,
                           const ordered_json& config) {
  std::string out = csv_header_comment(config);
  std::vector<std::string> head{"t", "stage", "min_prev_score", "logit_gap", "slash_score_d1",
                                "loss_estimate"};
  for (int i = 1; i <= k; ++i) head.push_back("feature_score_" + std::to_string(i));
  for (int i = 1; i <= k; ++i) head.push_back("feature_match_error_" + std::to_string(i));
  for (int i = 1; i <= k; ++i) head.push_back("feature_logit_mean_" + std::to_string(i));
  out += join_csv(head);
  for (const DynamicsSnapshot& s : snaps) {
    std::vector<std::string> row{std::to_string(s.t), std::to_string(s.stage),
                                 format_double(s.min_prev_score), format_double(s.logit_gap),
                                 format_double(s.slash_score_d1), format_double(s.loss_estimate)};
    for (double v : s.feature_scores) row.push_back(format_double(v));
    for (double v : s.feature_match_error) row.push_back(format_double(v));
    for (double v : s.feature_logit_means) row.push_back(format_double(v));
    out += join_csv(row);
  }
  return out;
}

ordered_json trajectory_json(const std::vector<DynamicsSnapshot>& snaps) {
  ordered_json arr = ordered_json::array();
  for (const DynamicsSnapshot& s : snaps) {
    ordered_json j;
    j["t"] = s.t;
    j["stage"] = s.stage;
    j["min_prev_score"] = s.min_prev_score;
    j["logit_gap"] = s.logit_gap;
    j["slash_score_d1"] = s.slash_score_d1;
    j["loss_estimate"] = s.loss_estimate;
    j["feature_scores"] = s.feature_scores;
    j["feature_match_error"] = s.feature_match_error;
    j["feature_logit_means"] = s.feature_logit_means;
    arr.push_back(std::move(j));
  }
  return arr;
}

// Emits a report either to stdout or, when out_dir is set, to <out_dir>/<stem>.<fmt>.
void emit(const ordered_json& report, const std::string& csv, const std::string& format,
          const std::optional<std::string>& out_dir, const std::string& stem, std::ostream& out) {
  const std::string text = format == "csv" ? csv : report.dump(2) + "\n";
  if (out_dir) {
    write_text(fs::path(*out_dir) / (stem + "." + format), text);
  } else {
    out << text;
  }
}

std::string optional_ratio(const std::optional<double>& r) {
  return r ? format_double(*r) : std::string("nan");
}

struct Common {
  std::optional<std::string> config_path;
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::string format;
};

void add_common(CLI::App* cmd, Common& c, const std::string& default_format) {
  c.format = default_format;
  cmd->add_option("--out", c.out_dir, "Output directory");
  cmd->add_option("--seed", c.seed, "Random seed");
  cmd->add_option("--threads", c.threads, "Worker threads (default: SLASHLAB_THREADS or 1)")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--format", c.format, "Report format")->check(CLI::IsMember({"csv", "json"}));
}

// ---- train ----

int cmd_train(const Common& c, std::ostream& out, std::ostream& err) {
  const std::string text = read_text(*c.config_path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg = ExperimentConfig::from_json(j);
  if (c.seed) cfg.train.seed = *c.seed;
  if (c.out_dir) cfg.out_dir = *c.out_dir;
  if (c.threads) {
    cfg.train.threads = *c.threads;
  } else if (!cfg.threads_set) {
    cfg.train.threads = resolve_threads(std::nullopt);
  }
  cfg.validate();

  const FrequencySequence freqs = cfg.freqs.build(cfg.data);
  const ordered_json config_json = cfg.to_json();
  const TrainResult res = two_stage_gd(cfg.train, cfg.data, freqs);
  for (const std::string& w : res.warnings) err << "warning: " << w << "\n";

  const fs::path dir(cfg.out_dir);
  fs::create_directories(dir);
  for (const std::string& f : cfg.formats) {
    if (f == "csv") {
      write_text(dir / "trajectory.csv",
                 trajectory_csv(res.snapshots, cfg.data.num_features, config_json));
    } else {
      ordered_json tj;
      tj["tool"] = tool_json();
      tj["config"] = config_json;
      tj["snapshots"] = trajectory_json(res.snapshots);
      write_text(dir / "trajectory.json", tj.dump(2) + "\n");
    }
  }

  const auto [q, k] = layer1_qk(res.params, cfg.data);
  Manifest manifest;
  manifest.model = "slashlab-simulator";
  manifest.layer = 1;
  manifest.head = 0;
  manifest.context_len = cfg.data.prompt_len();
  manifest.rope_applied = false;
  manifest.logit_scale_hint = 1.0;
  manifest.freq_base = cfg.freqs.mode == "classic" ? cfg.freqs.base : 0.0;
  manifest.cone_band_len = freqs.cone_band_len;
  write_dump({Tensor::from_matrix("W1", res.params.w1), Tensor::from_matrix("W2", res.params.w2),
              Tensor::from_matrix("Q.layer1", q), Tensor::from_matrix("K.layer1", k),
              Tensor::from_vector("freqs", Eigen::Map<const VectorXd>(
                                               freqs.values.data(),
                                               static_cast<Eigen::Index>(freqs.values.size())))},
             manifest, dir / "params.sdha");

  const MatrixXd s1 = causal_softmax(layer1_logits(res.params, cfg.data, freqs));
  SlashConfig usable = cfg.slash;
  std::erase_if(usable.lags, [&](int lag) { return lag >= s1.rows(); });
  const SlashReport slash = detect_sdh({s1}, usable);
  const Layer1Summary l1 = layer1_summary(res.params, cfg.data, freqs);
  const DynamicsSnapshot& last = res.snapshots.back();

  ordered_json summary;
  summary["tool"] = tool_json();
  summary["config"] = config_json;
  summary["stage1_steps"] = res.stage1_steps;
  summary["stage2_steps"] = res.stage2_steps;
  summary["min_prev_score"] = l1.min_prev_score;
  summary["logit_gap"] = l1.logit_gap;
  summary["slash"] = slash_report_json(slash);
  summary["feature_scores"] = last.feature_scores;
  summary["feature_match_error"] = last.feature_match_error;
  summary["stage2_start_loss"] = res.stage2_start_loss;
  summary["loss"] = res.final_loss;
  summary["warnings"] = res.warnings;
  if (cfg.ood) {
    const OodReport o = ood_evaluation(res.params, cfg.data, freqs,
                                       Rng::derive_seed(cfg.train.seed, "ood", 0), cfg.ood->scale,
                                       cfg.ood->prompts, cfg.train.threads);
    ordered_json oj;
    oj["scale"] = o.scale;
    oj["prompts"] = o.prompts;
    oj["slash_in"] = o.slash_in;
    oj["slash_ood"] = o.slash_ood;
    oj["slash_ratio_d1"] = o.slash_ratio_d1;
    oj["mae_in"] = o.mae_in;
    oj["mae_ood"] = o.mae_ood;
    summary["ood"] = oj;
  }

  bool passed = true;
  ordered_json checks = ordered_json::array();
  auto check = [&](const char* name, double value, double bound, bool at_least) {
    const bool ok = at_least ? value >= bound : value <= bound;
    passed = passed && ok;
    ordered_json cj;
    cj["name"] = name;
    cj["value"] = value;
    cj["bound"] = bound;
    cj["passed"] = ok;
    checks.push_back(std::move(cj));
  };
  if (cfg.thresholds.min_prev_score) {
    check("min_prev_score", l1.min_prev_score, *cfg.thresholds.min_prev_score, true);
  }
  if (cfg.thresholds.max_loss) check("loss", res.final_loss, *cfg.thresholds.max_loss, false);
  if (cfg.thresholds.max_feature_error) {
    double worst = 0.0;
    for (double e : last.feature_match_error) worst = std::max(worst, e);
    check("feature_match_error", worst, *cfg.thresholds.max_feature_error, false);
  }
  summary["thresholds"] = {{"checks", checks}, {"passed", passed}};
  write_text(dir / "summary.json", summary.dump(2) + "\n");

  if (c.format == "json") {
    out << summary.dump(2) << "\n";
  } else {
    out << csv_header_comment(config_json) << "metric,value\n"
        << "min_prev_score," << format_double(l1.min_prev_score) << "\n"
        << "loss," << format_double(res.final_loss) << "\n"
        << "stage1_steps," << res.stage1_steps << "\n"
        << "stage2_steps," << res.stage2_steps << "\n";
  }
  return passed ? kOk : kThresholdFailure;
}

// ---- check-freq ----

struct CheckFreqArgs {
  std::string mode = "pulse";
  int m = 130;
  int d = 32;
  double base = 10000.0;
  long horizon = 0;
  double tol = 1e-6;
};

int cmd_check_freq(const CheckFreqArgs& a, const Common& c, std::ostream& out) {
  const FrequencySequence freqs =
      a.mode == "pulse" ? pulse_frequencies(a.m, a.horizon) : classic_frequencies(a.d, a.base);
  const PulseCheckResult r = pulse_check(freqs, a.horizon, a.tol);
  ordered_json cfg;
  cfg["mode"] = a.mode;
  if (a.mode == "pulse") {
    cfg["m"] = a.m;
  } else {
    cfg["d"] = a.d;
    cfg["base"] = a.base;
  }
  cfg["horizon"] = a.horizon;
  cfg["tolerance"] = a.tol;
  ordered_json j;
  j["tool"] = tool_json();
  j["config"] = cfg;
  j["c1"] = r.c1;
  j["c2"] = r.c2;
  j["eps_fn"] = r.eps_fn;
  j["horizon"] = r.horizon;
  j["tolerance"] = r.tolerance;
  j["passed"] = r.passed;
  const std::string csv = csv_header_comment(cfg) + "c1,c2,eps_fn,horizon,tolerance,passed\n" +
                          join_csv({format_double(r.c1), format_double(r.c2),
                                    format_double(r.eps_fn), std::to_string(r.horizon),
                                    format_double(r.tolerance), r.passed ? "1" : "0"});
  emit(j, csv, c.format, c.out_dir, "check_freq", out);
  return r.passed ? kOk : kThresholdFailure;
}

// ---- analyze ----

struct SlashArgs {
  std::vector<int> lags{0, 1, 2, 3, 4};
  double kappa = 0.1;
  int excluded_prefix = 4;  // attention sinks in LLM dumps
  std::optional<double> logit_scale;
};

void add_slash_flags(CLI::App* cmd, SlashArgs& s) {
  cmd->add_option("--lags", s.lags, "Lags to score")->delimiter(',');
  cmd->add_option("--kappa", s.kappa, "Detection threshold");
  cmd->add_option("--excluded-prefix", s.excluded_prefix, "Leading positions to ignore");
  cmd->add_option("--logit-scale", s.logit_scale, "Logit scale (default: manifest hint)");
}

SlashConfig slash_from(const SlashArgs& s, const Manifest& m) {
  SlashConfig cfg;
  cfg.lags = s.lags;
  cfg.kappa = s.kappa;
  cfg.excluded_prefix = s.excluded_prefix;
  cfg.logit_scale = s.logit_scale.value_or(m.logit_scale_hint);
  cfg.validate();
  return cfg;
}

ordered_json manifest_json(const Manifest& m) { return ordered_json::parse(manifest_to_json(m)); }

int cmd_analyze(const std::string& path, const SlashArgs& s, double tau, const Common& c,
                std::ostream& out) {
  if (!fs::exists(path)) throw Error("dump '" + path + "' does not exist");
  const TensorDump dump = read_dump(path);
  const SlashConfig cfg = slash_from(s, dump.manifest);
  const DumpAnalysis a = analyze_dump(dump, cfg, tau);

  ordered_json config;
  config["dump"] = path;
  config["manifest"] = manifest_json(dump.manifest);
  config["slash"] = slash_config_json(cfg);
  config["tau"] = tau;

  ordered_json j;
  j["tool"] = tool_json();
  j["config"] = config;
  ordered_json heads = ordered_json::array();
  std::string csv = csv_header_comment(config) + "head,lag,score,detected\n";
  for (const HeadAnalysis& h : a.heads) {
    ordered_json hj;
    hj["tag"] = h.tag;
    if (h.slash) {
      hj["slash"] = slash_report_json(*h.slash);
      for (std::size_t i = 0; i < h.slash->lags.size(); ++i) {
        csv += join_csv({h.tag, std::to_string(h.slash->lags[i]),
                         format_double(h.slash->scores[i]), h.slash->detected[i] ? "1" : "0"});
      }
    }
    if (h.q_spectrum) hj["q_spectrum"] = spectral_json(*h.q_spectrum);
    if (h.k_spectrum) hj["k_spectrum"] = spectral_json(*h.k_spectrum);
    if (h.h_spectrum) hj["h_spectrum"] = spectral_json(*h.h_spectrum);
    auto aligned = [](const std::vector<AlignmentReport>& v) {
      ordered_json arr = ordered_json::array();
      for (const AlignmentReport& r : v) arr.push_back(alignment_json(r));
      return arr;
    };
    if (!h.q_alignment.empty()) hj["q_alignment"] = aligned(h.q_alignment);
    if (!h.k_alignment.empty()) hj["k_alignment"] = aligned(h.k_alignment);
    heads.push_back(std::move(hj));
  }
  j["heads"] = heads;
  emit(j, csv, c.format, c.out_dir, "analyze", out);
  return kOk;
}

// ---- ablate ----

std::set<std::size_t> parse_band(const std::string& band, const FrequencySequence& freqs) {
  std::set<std::size_t> out;
  if (band == "none" || band.empty()) return out;
  if (band == "cone" || band == "semantic") {
    const std::size_t lo = band == "cone" ? 0 : freqs.cone_band_len;
    const std::size_t hi = band == "cone" ? freqs.cone_band_len : freqs.size();
    for (std::size_t b = lo; b < hi; ++b) out.insert(b);
    return out;
  }
  if (band == "high" || band == "medium" || band == "low") {
    const FrequencyBands t = frequency_thirds(freqs.size());
    const auto& v = band == "high" ? t.high : band == "medium" ? t.medium : t.low;
    return {v.begin(), v.end()};
  }
  std::stringstream ss(band);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    unsigned long long b = 0;
    try {
      b = std::stoull(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != item.size()) {
      throw InvalidArgument("band must be none, cone, semantic, high, medium, low or a block list; got '" +
                            band + "'");
    }
    if (b >= freqs.size()) throw InvalidArgument("band block " + item + " out of range");
    out.insert(static_cast<std::size_t>(b));
  }
  return out;
}

int cmd_ablate(const std::string& path, const std::string& band, const std::string& head,
               const SlashArgs& s, const Common& c, std::ostream& out) {
  if (!fs::exists(path)) throw Error("dump '" + path + "' does not exist");
  const TensorDump dump = read_dump(path);
  if (dump.manifest.rope_applied) {
    throw InvalidArgument("ablation needs pre-rotation Q/K (manifest has rope_applied = true)");
  }
  const SlashConfig cfg = slash_from(s, dump.manifest);
  std::string tag = head;
  if (tag.empty()) {
    std::set<std::string> tags;
    for (const Tensor& t : dump.tensors) {
      if (t.name == "Q") tags.insert("");
      if (t.name.rfind("Q.", 0) == 0) tags.insert(t.name.substr(2));
    }
    if (tags.empty()) throw MissingTensorError("dump has no Q tensor");
    tag = *tags.begin();
  }
  const std::string suffix = tag.empty() ? "" : "." + tag;
  const Tensor* qt = dump.find("Q" + suffix);
  const Tensor* kt = dump.find("K" + suffix);
  if (!qt || !kt) throw MissingTensorError("dump lacks Q" + suffix + "/K" + suffix);
  const MatrixXd q = qt->to_matrix();
  const MatrixXd k = kt->to_matrix();
  const FrequencySequence freqs = dump_frequencies(dump, static_cast<std::size_t>(q.cols()));
  const std::set<std::size_t> removed = parse_band(band, freqs);
  std::vector<int> lags = cfg.lags;
  std::erase_if(lags, [&](int lag) { return lag >= q.rows(); });
  const AblationReport r = band_ablation(q, k, freqs, removed, lags, cfg);

  ordered_json config;
  config["dump"] = path;
  config["manifest"] = manifest_json(dump.manifest);
  config["head"] = tag;
  config["band"] = band;
  config["slash"] = slash_config_json(cfg);
  ordered_json j;
  j["tool"] = tool_json();
  j["config"] = config;
  j["removed"] = r.removed;
  j["lags"] = r.lags;
  j["baseline"] = r.baseline;
  j["ablated"] = r.ablated;
  ordered_json ratios = ordered_json::array();
  std::string csv = csv_header_comment(config) + "lag,baseline,ablated,ratio\n";
  for (std::size_t i = 0; i < r.lags.size(); ++i) {
    ratios.push_back(r.ratio[i] ? ordered_json(*r.ratio[i]) : ordered_json(nullptr));
    csv += join_csv({std::to_string(r.lags[i]), format_double(r.baseline[i]),
                     format_double(r.ablated[i]), optional_ratio(r.ratio[i])});
  }
  j["ratio"] = ratios;
  emit(j, csv, c.format, c.out_dir, "ablate", out);
  return kOk;
}

// ---- gradcheck ----

int cmd_gradcheck(GradCheckConfig g, double bound, const Common& c, std::ostream& out) {
  if (c.seed) g.seed = *c.seed;
  const GradCheckReport r = gradient_check(g, resolve_threads(c.threads));
  ordered_json config;
  config["n_in"] = g.num_examples;
  config["k"] = g.num_features;
  config["d_b"] = g.cone_dim;
  config["d_x"] = g.feature_dim;
  config["batch"] = g.batch_size;
  config["points"] = g.points;
  config["seed"] = g.seed;
  config["h"] = g.h;
  config["param_scale"] = g.param_scale;
  config["bound"] = bound;
  const bool passed = r.max_error <= bound;
  ordered_json j;
  j["tool"] = tool_json();
  j["config"] = config;
  j["errors_w1"] = r.errors_w1;
  j["errors_w2"] = r.errors_w2;
  j["max_error"] = r.max_error;
  j["passed"] = passed;
  std::string csv = csv_header_comment(config) + "point,error_w1,error_w2\n";
  for (std::size_t i = 0; i < r.errors_w1.size(); ++i) {
    csv += join_csv({std::to_string(i), format_double(r.errors_w1[i]),
                     format_double(r.errors_w2[i])});
  }
  emit(j, csv, c.format, c.out_dir, "gradcheck", out);
  return passed ? kOk : kThresholdFailure;
}

}  // namespace

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

unsigned resolve_threads(std::optional<unsigned> explicit_threads) {
  if (explicit_threads && *explicit_threads > 0) return *explicit_threads;
  return threads_from_env(1);
}

int FreqSpec::resolved_cone_dim() const { return mode == "pulse" ? 2 * m : cone_dim; }

FrequencySequence FreqSpec::build(const DataConfig& data) const {
  const int n = data.prompt_len();
  FrequencySequence cone =
      mode == "pulse" ? pulse_frequencies(m, n) : classic_frequencies(cone_dim, base);
  const double ceiling = semantic_ceiling.value_or(1.0 / (static_cast<double>(n) * n));
  return FrequencySequence::concat(
      cone, low_frequencies(static_cast<std::size_t>(data.semantic_dim() / 2), ceiling,
                            semantic_base));
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig cfg;
  Section root(j, "");

  FreqSpec f;
  if (root.has("freqs")) {
    Section s(root.raw("freqs"), "freqs");
    f.mode = s.get<std::string>("mode", f.mode);
    if (f.mode != "pulse" && f.mode != "classic") {
      throw InvalidArgument("config field 'freqs.mode': expected pulse or classic");
    }
    f.m = s.get<int>("m", f.m);
    f.cone_dim = s.get<int>("d_b", f.cone_dim);
    f.base = s.get<double>("base", f.base);
    f.semantic_ceiling = s.opt<double>("semantic_ceiling");
    f.semantic_base = s.get<double>("semantic_base", f.semantic_base);
    s.finish();
  }
  if (f.mode == "pulse" && f.m < 1) throw InvalidArgument("config field 'freqs.m' must be >= 1");
  cfg.freqs = f;

  int k = 4, n_in = 64, d_x = 4;
  std::optional<std::vector<double>> probs;
  if (root.has("data")) {
    Section s(root.raw("data"), "data");
    k = s.get<int>("K", k);
    n_in = s.get<int>("N_in", n_in);
    d_x = s.get<int>("d_X", d_x);
    probs = s.opt<std::vector<double>>("feature_probs");
    s.finish();
  }
  if (k < 1) throw InvalidArgument("config field 'data.K' must be >= 1");
  if (n_in < 1) throw InvalidArgument("config field 'data.N_in' must be >= 1");
  if (d_x < 1) throw InvalidArgument("config field 'data.d_X' must be >= 1");
  if (f.resolved_cone_dim() < 2) throw InvalidArgument("config field 'freqs.d_b' must be >= 2");
  cfg.data = DataConfig::make(k, n_in, d_x, f.resolved_cone_dim());
  if (probs) cfg.data.feature_probs = *probs;

  if (root.has("train")) {
    Section s(root.raw("train"), "train");
    TrainConfig& t = cfg.train;
    t.eta1 = s.get<double>("eta1", t.eta1);
    t.eta2 = s.get<double>("eta2", t.eta2);
    t.tau1 = s.get<long>("tau1", t.tau1);
    t.tau2 = s.get<long>("tau2", t.tau2);
    t.batch_size = static_cast<std::size_t>(s.get<std::uint64_t>("B", t.batch_size));
    t.seed = s.get<std::uint64_t>("seed", t.seed);
    t.snapshot_every = s.get<long>("snapshot_every", t.snapshot_every);
    t.eps1 = s.opt<double>("eps1");
    t.eps2 = s.opt<double>("eps2");
    t.early_stop = s.get<bool>("early_stop", t.early_stop);
    t.probes_per_feature = s.get<int>("probes_per_feature", t.probes_per_feature);
    t.probe_question_feature = s.get<int>("probe_question_feature", t.probe_question_feature);
    if (auto th = s.opt<std::uint64_t>("threads")) {
      if (*th == 0) throw InvalidArgument("config field 'train.threads' must be >= 1");
      t.threads = static_cast<unsigned>(*th);
      cfg.threads_set = true;
    }
    s.finish();
  }

  if (root.has("slash")) {
    Section s(root.raw("slash"), "slash");
    cfg.slash.lags = s.get<std::vector<int>>("lags", cfg.slash.lags);
    cfg.slash.kappa = s.get<double>("kappa", cfg.slash.kappa);
    cfg.slash.excluded_prefix = s.get<int>("excluded_prefix", cfg.slash.excluded_prefix);
    cfg.slash.logit_scale = s.get<double>("logit_scale", cfg.slash.logit_scale);
    s.finish();
  }

  if (root.has("ood")) {
    Section s(root.raw("ood"), "ood");
    OodSpec o;
    o.scale = s.get<double>("scale", o.scale);
    o.prompts = static_cast<std::size_t>(s.get<std::uint64_t>("prompts", o.prompts));
    s.finish();
    cfg.ood = o;
  }

  if (root.has("thresholds")) {
    Section s(root.raw("thresholds"), "thresholds");
    cfg.thresholds.min_prev_score = s.opt<double>("min_prev_score");
    cfg.thresholds.max_loss = s.opt<double>("max_loss");
    cfg.thresholds.max_feature_error = s.opt<double>("max_feature_error");
    s.finish();
  }

  if (root.has("output")) {
    Section s(root.raw("output"), "output");
    cfg.out_dir = s.get<std::string>("dir", cfg.out_dir);
    cfg.formats = s.get<std::vector<std::string>>("formats", cfg.formats);
    s.finish();
  }
  root.finish();
  cfg.validate();
  return cfg;
}

void ExperimentConfig::validate() const {
  data.validate();
  const int n = data.prompt_len();
  train.validate(n);
  slash.validate();
  if (freqs.mode == "pulse" && 2 * freqs.m + 1 <= 2 * n) {
    throw InvalidArgument("config field 'freqs.m': need 2m+1 > 2N (N = " + std::to_string(n) + ")");
  }
  if (freqs.mode == "classic" && (freqs.cone_dim < 2 || freqs.cone_dim % 2 != 0)) {
    throw InvalidArgument("config field 'freqs.d_b' must be even and >= 2");
  }
  if (freqs.mode == "classic" && !(freqs.base > 1.0)) {
    throw InvalidArgument("config field 'freqs.base' must be > 1");
  }
  if (freqs.semantic_ceiling && !(*freqs.semantic_ceiling > 0.0)) {
    throw InvalidArgument("config field 'freqs.semantic_ceiling' must be positive");
  }
  if (!(freqs.semantic_base > 1.0)) {
    throw InvalidArgument("config field 'freqs.semantic_base' must be > 1");
  }
  if (data.semantic_dim() % 2 != 0) {
    throw InvalidArgument("config field 'data.d_X' must be even");
  }
  if (ood && !(ood->scale > 1.0)) throw InvalidArgument("config field 'ood.scale' must be > 1");
  if (ood && ood->prompts < 1) throw InvalidArgument("config field 'ood.prompts' must be >= 1");
  if (out_dir.empty()) throw InvalidArgument("config field 'output.dir' must be non-empty");
  if (formats.empty()) throw InvalidArgument("config field 'output.formats' must be non-empty");
  for (const std::string& fmt : formats) {
    if (fmt != "csv" && fmt != "json") {
      throw InvalidArgument("config field 'output.formats': unknown format '" + fmt + "'");
    }
  }
}

ordered_json ExperimentConfig::to_json() const {
  const int n = data.prompt_len();
  ordered_json j;
  ordered_json d;
  d["K"] = data.num_features;
  d["N_in"] = data.num_examples;
  d["d_X"] = data.feature_dim;
  d["d_b"] = data.cone_dim;
  d["N"] = n;
  d["feature_probs"] = data.feature_probs;
  j["data"] = d;

  ordered_json f;
  f["mode"] = freqs.mode;
  if (freqs.mode == "pulse") {
    f["m"] = freqs.m;
  } else {
    f["d_b"] = freqs.cone_dim;
    f["base"] = freqs.base;
  }
  f["semantic_ceiling"] = freqs.semantic_ceiling.value_or(1.0 / (static_cast<double>(n) * n));
  f["semantic_base"] = freqs.semantic_base;
  j["freqs"] = f;

  ordered_json t;
  t["eta1"] = train.eta1;
  t["eta2"] = train.eta2;
  t["tau1"] = train.tau1;
  t["tau2"] = train.tau2;
  t["B"] = train.batch_size;
  t["seed"] = train.seed;
  t["snapshot_every"] = train.snapshot_every;
  t["eps1"] = train.resolved_eps1(n);
  t["eps2"] = train.resolved_eps2(n);
  t["early_stop"] = train.early_stop;
  t["probes_per_feature"] = train.probes_per_feature;
  t["probe_question_feature"] = train.probe_question_feature;
  t["threads"] = train.threads;
  j["train"] = t;

  j["slash"] = slash_config_json(slash);
  if (ood) j["ood"] = {{"scale", ood->scale}, {"prompts", ood->prompts}};
  ordered_json th = ordered_json::object();
  if (thresholds.min_prev_score) th["min_prev_score"] = *thresholds.min_prev_score;
  if (thresholds.max_loss) th["max_loss"] = *thresholds.max_loss;
  if (thresholds.max_feature_error) th["max_feature_error"] = *thresholds.max_feature_error;
  j["thresholds"] = th;
  j["output"] = {{"dir", out_dir}, {"formats", formats}};
  return j;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Slash-dominant attention head toolkit", kToolName};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  Common train_c, freq_c, analyze_c, ablate_c, grad_c;

  auto* train = app.add_subcommand("train", "Run two-stage training from a JSON config");
  train->add_option("--config", train_c.config_path, "Experiment config (JSON)")->required();
  add_common(train, train_c, "json");

  CheckFreqArgs freq_a;
  auto* check = app.add_subcommand("check-freq", "Check the pulse condition of a frequency set");
  check->add_option("--mode", freq_a.mode)->check(CLI::IsMember({"pulse", "classic"}));
  check->add_option("--m", freq_a.m, "Pulse blocks")->check(CLI::PositiveNumber);
  check->add_option("--d", freq_a.d, "Classic dimension")->check(CLI::PositiveNumber);
  check->add_option("--base", freq_a.base, "Classic base");
  check->add_option("--horizon,-N", freq_a.horizon, "Horizon N")
      ->required()
      ->check(CLI::PositiveNumber);
  check->add_option("--tol", freq_a.tol, "Tolerance on eps_fn");
  add_common(check, freq_c, "json");

  std::string analyze_path;
  SlashArgs analyze_s;
  double tau = 0.95;
  auto* analyze = app.add_subcommand("analyze", "Slash, spectral and alignment reports for a dump");
  analyze->add_option("dump", analyze_path, "SDHA file")->required();
  analyze->add_option("--tau", tau, "Energy threshold for effective rank");
  add_slash_flags(analyze, analyze_s);
  add_common(analyze, analyze_c, "json");

  std::string ablate_path, band = "cone", head;
  SlashArgs ablate_s;
  ablate_s.lags = {1};
  auto* ablate = app.add_subcommand("ablate", "Slash-score ratios with frequency blocks removed");
  ablate->add_option("dump", ablate_path, "SDHA file (e.g. params.sdha from train)")->required();
  ablate->add_option("--band", band,
                     "none | cone | semantic | high | medium | low | comma-separated blocks");
  ablate->add_option("--head", head, "Head tag (default: first)");
  add_slash_flags(ablate, ablate_s);
  add_common(ablate, ablate_c, "json");

  GradCheckConfig g;
  double bound = 1e-5;
  auto* grad = app.add_subcommand("gradcheck", "Closed-form gradients against finite differences");
  grad->add_option("--n-in", g.num_examples);
  grad->add_option("--k", g.num_features);
  grad->add_option("--d-b", g.cone_dim);
  grad->add_option("--d-x", g.feature_dim);
  grad->add_option("--batch", g.batch_size);
  grad->add_option("--points", g.points);
  grad->add_option("--fd-step", g.h, "Finite-difference step");
  grad->add_option("--bound", bound, "Pass threshold on the max relative error");
  add_common(grad, grad_c, "json");

  std::vector<const char*> argv;
  argv.push_back(kToolName);
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(train_c, out, err);
    if (*check) return cmd_check_freq(freq_a, freq_c, out);
    if (*analyze) return cmd_analyze(analyze_path, analyze_s, tau, analyze_c, out);
    if (*ablate) return cmd_ablate(ablate_path, band, head, ablate_s, ablate_c, out);
    if (*grad) return cmd_gradcheck(g, bound, grad_c, out);
  } catch (const DivergedError& e) {
    err << "error: " << e.what() << "\n";
    return kDiverged;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  }
  return kUsage;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace slashlab::cli
