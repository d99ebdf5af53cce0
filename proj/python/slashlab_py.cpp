#include <sstream>

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "slashlab/cli.hpp"
#include "slashlab/errors.hpp"
#include "slashlab/ingest.hpp"
#include "slashlab/rank_metrics.hpp"
#include "slashlab/rope.hpp"
#include "slashlab/slash_analysis.hpp"
#include "slashlab/training.hpp"
#include "slashlab/version.hpp"

namespace py = pybind11;
using namespace slashlab;

namespace {

py::array tensor_to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  return std::visit(
      [&](const auto& v) -> py::array {
        using T = typename std::decay_t<decltype(v)>::value_type;
        py::array_t<T> a(shape);
        std::copy(v.begin(), v.end(), a.mutable_data());
        return a;
      },
      t.data);
}

Tensor array_to_tensor(const std::string& name, const py::array& a) {
  Tensor t;
  t.name = name;
  for (py::ssize_t i = 0; i < a.ndim(); ++i) t.shape.push_back(static_cast<std::uint64_t>(a.shape(i)));
  if (a.dtype().is(py::dtype::of<float>())) {
    auto c = py::array_t<float, py::array::c_style | py::array::forcecast>::ensure(a);
    t.data = std::vector<float>(c.data(), c.data() + c.size());
  } else {
    auto c = py::array_t<double, py::array::c_style | py::array::forcecast>::ensure(a);
    if (!c) throw InvalidArgument("tensor '" + name + "' is not convertible to float64");
    t.data = std::vector<double>(c.data(), c.data() + c.size());
  }
  return t;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Slash-dominant attention head analysis and simulation";
  m.attr("__version__") = kToolVersion;

  auto error = py::register_exception<Error>(m, "Error");
  py::register_exception<InvalidArgument>(m, "InvalidArgument", error);
  py::register_exception<DegenerateError>(m, "DegenerateError", error);
  py::register_exception<AliasingError>(m, "AliasingError", error);
  py::register_exception<DivergedError>(m, "DivergedError", error);
  py::register_exception<FormatError>(m, "FormatError", error);
  py::register_exception<CorruptError>(m, "CorruptError", error);
  py::register_exception<MissingTensorError>(m, "MissingTensorError", error);

  // ---- rope ----
  py::class_<FrequencySequence>(m, "FrequencySequence")
      .def(py::init([](std::vector<double> values, std::size_t cone_band_len) {
             FrequencySequence f{std::move(values), cone_band_len};
             f.validate();
             return f;
           }),
           py::arg("values"), py::arg("cone_band_len"))
      .def_readonly("values", &FrequencySequence::values)
      .def_readonly("cone_band_len", &FrequencySequence::cone_band_len)
      .def("__len__", &FrequencySequence::size)
      .def("cone_band", &FrequencySequence::cone_band)
      .def("semantic_band", &FrequencySequence::semantic_band)
      .def("with_removed", &FrequencySequence::with_removed)
      .def_static("concat", &FrequencySequence::concat);

  py::class_<PulseCheckResult>(m, "PulseCheckResult")
      .def_readonly("c1", &PulseCheckResult::c1)
      .def_readonly("c2", &PulseCheckResult::c2)
      .def_readonly("eps_fn", &PulseCheckResult::eps_fn)
      .def_readonly("horizon", &PulseCheckResult::horizon)
      .def_readonly("passed", &PulseCheckResult::passed);

  py::class_<InPDecomposition>(m, "InPDecomposition")
      .def_readonly("contributions", &InPDecomposition::contributions)
      .def_readonly("amplitudes", &InPDecomposition::amplitudes)
      .def_readonly("phases", &InPDecomposition::phases)
      .def_readonly("total", &InPDecomposition::total);

  m.def("classic_frequencies", &classic_frequencies, py::arg("d"), py::arg("base") = 10000.0);
  m.def("pulse_frequencies", &pulse_frequencies, py::arg("m"), py::arg("horizon"));
  m.def("low_frequencies", &low_frequencies, py::arg("count"), py::arg("ceiling"),
        py::arg("base") = 10000.0);
  m.def("apply_rope", [](const VectorXd& v, long pos, const FrequencySequence& f) { return apply_rope(v, pos, f); },
        py::arg("v"), py::arg("pos"), py::arg("freqs"));
  m.def("relative_logit",
        [](const VectorXd& q, const VectorXd& k, long i, long j, const FrequencySequence& f) {
          return relative_logit(q, k, i, j, f);
        },
        py::arg("q"), py::arg("k"), py::arg("i"), py::arg("j"), py::arg("freqs"));
  m.def("pulse_check", &pulse_check, py::arg("freqs"), py::arg("horizon"), py::arg("tolerance") = 1e-6);
  m.def("inp_decompose",
        [](const VectorXd& q, const VectorXd& k, long i, long j, const FrequencySequence& f) {
          return inp_decompose(q, k, i, j, f);
        },
        py::arg("q"), py::arg("k"), py::arg("i"), py::arg("j"), py::arg("freqs"));

  // ---- rank metrics ----
  py::class_<SpectralReport>(m, "SpectralReport")
      .def_readonly("singular_values", &SpectralReport::singular_values)
      .def_readonly("power_ratios", &SpectralReport::power_ratios)
      .def_readonly("effective_rank", &SpectralReport::effective_rank)
      .def_readonly("tau", &SpectralReport::tau);
  py::class_<AlignmentReport>(m, "AlignmentReport")
      .def_readonly("aligned_ratios", &AlignmentReport::aligned_ratios)
      .def_readonly("aligned_rank", &AlignmentReport::aligned_rank)
      .def_readonly("order", &AlignmentReport::order)
      .def_readonly("has_bias", &AlignmentReport::has_bias);
  m.attr("BIAS_SLOT") = kBiasSlot;

  m.def("spectral_report", &spectral_report, py::arg("x"), py::arg("tau") = 0.95);
  m.def("aligned_report",
        py::overload_cast<const VectorXd&, const MatrixXd&, const std::optional<VectorXd>&, double>(
            &aligned_report),
        py::arg("x"), py::arg("w"), py::arg("bias") = py::none(), py::arg("tau") = 0.95);
  m.def("rmsn", &rmsn, py::arg("x"), py::arg("eps") = kRmsnEps);
  m.def("relative_variation",
        py::overload_cast<const VectorXd&, std::span<const VectorXd>>(&relative_variation),
        py::arg("direction"), py::arg("tokens"));

  // ---- data, training ----
  py::class_<DataConfig>(m, "DataConfig")
      .def(py::init(&DataConfig::make), py::arg("K"), py::arg("N_in"), py::arg("d_X"), py::arg("d_b"))
      .def_readonly("num_features", &DataConfig::num_features)
      .def_readonly("num_examples", &DataConfig::num_examples)
      .def_readonly("feature_dim", &DataConfig::feature_dim)
      .def_readonly("cone_dim", &DataConfig::cone_dim)
      .def_readwrite("feature_probs", &DataConfig::feature_probs)
      .def_property_readonly("prompt_len", &DataConfig::prompt_len)
      .def_property_readonly("semantic_dim", &DataConfig::semantic_dim);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("eta1", &TrainConfig::eta1)
      .def_readwrite("eta2", &TrainConfig::eta2)
      .def_readwrite("tau1", &TrainConfig::tau1)
      .def_readwrite("tau2", &TrainConfig::tau2)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("snapshot_every", &TrainConfig::snapshot_every)
      .def_readwrite("eps1", &TrainConfig::eps1)
      .def_readwrite("eps2", &TrainConfig::eps2)
      .def_readwrite("early_stop", &TrainConfig::early_stop)
      .def_readwrite("probes_per_feature", &TrainConfig::probes_per_feature)
      .def_readwrite("threads", &TrainConfig::threads);

  py::class_<ReducedParams>(m, "ReducedParams")
      .def_readonly("w1", &ReducedParams::w1)
      .def_readonly("w2", &ReducedParams::w2);

  py::class_<DynamicsSnapshot>(m, "DynamicsSnapshot")
      .def_readonly("t", &DynamicsSnapshot::t)
      .def_readonly("stage", &DynamicsSnapshot::stage)
      .def_readonly("min_prev_score", &DynamicsSnapshot::min_prev_score)
      .def_readonly("logit_gap", &DynamicsSnapshot::logit_gap)
      .def_readonly("slash_score_d1", &DynamicsSnapshot::slash_score_d1)
      .def_readonly("loss_estimate", &DynamicsSnapshot::loss_estimate)
      .def_readonly("feature_scores", &DynamicsSnapshot::feature_scores)
      .def_readonly("feature_match_error", &DynamicsSnapshot::feature_match_error)
      .def_readonly("feature_logit_means", &DynamicsSnapshot::feature_logit_means);

  py::class_<TrainResult>(m, "TrainResult")
      .def_readonly("params", &TrainResult::params)
      .def_readonly("snapshots", &TrainResult::snapshots)
      .def_readonly("stage1_steps", &TrainResult::stage1_steps)
      .def_readonly("stage2_steps", &TrainResult::stage2_steps)
      .def_readonly("stage2_start_loss", &TrainResult::stage2_start_loss)
      .def_readonly("final_loss", &TrainResult::final_loss)
      .def_readonly("warnings", &TrainResult::warnings);

  m.def("two_stage_gd",
        [](const TrainConfig& t, const DataConfig& d, const FrequencySequence& f) {
          py::gil_scoped_release release;
          return two_stage_gd(t, d, f);
        },
        py::arg("train"), py::arg("data"), py::arg("freqs"));
  m.def("layer1_attention",
        [](const ReducedParams& p, const DataConfig& d, const FrequencySequence& f) {
          return causal_softmax(layer1_logits(p, d, f));
        },
        py::arg("params"), py::arg("data"), py::arg("freqs"));
  m.def("layer1_qk", &layer1_qk, py::arg("params"), py::arg("data"));

  py::class_<GradCheckConfig>(m, "GradCheckConfig")
      .def(py::init<>())
      .def_readwrite("num_examples", &GradCheckConfig::num_examples)
      .def_readwrite("num_features", &GradCheckConfig::num_features)
      .def_readwrite("cone_dim", &GradCheckConfig::cone_dim)
      .def_readwrite("feature_dim", &GradCheckConfig::feature_dim)
      .def_readwrite("batch_size", &GradCheckConfig::batch_size)
      .def_readwrite("points", &GradCheckConfig::points)
      .def_readwrite("seed", &GradCheckConfig::seed)
      .def_readwrite("h", &GradCheckConfig::h);
  py::class_<GradCheckReport>(m, "GradCheckReport")
      .def_readonly("errors_w1", &GradCheckReport::errors_w1)
      .def_readonly("errors_w2", &GradCheckReport::errors_w2)
      .def_readonly("max_error", &GradCheckReport::max_error);
  m.def("gradient_check", &gradient_check, py::arg("config") = GradCheckConfig{}, py::arg("threads") = 1u,
        py::call_guard<py::gil_scoped_release>());

  // ---- slash analysis ----
  py::class_<SlashConfig>(m, "SlashConfig")
      .def(py::init<>())
      .def_readwrite("lags", &SlashConfig::lags)
      .def_readwrite("kappa", &SlashConfig::kappa)
      .def_readwrite("excluded_prefix", &SlashConfig::excluded_prefix)
      .def_readwrite("logit_scale", &SlashConfig::logit_scale);
  py::class_<SlashReport>(m, "SlashReport")
      .def_readonly("lags", &SlashReport::lags)
      .def_readonly("scores", &SlashReport::scores)
      .def_readonly("detected", &SlashReport::detected)
      .def_readonly("samples", &SlashReport::samples);
  py::class_<AblationReport>(m, "AblationReport")
      .def_readonly("lags", &AblationReport::lags)
      .def_readonly("baseline", &AblationReport::baseline)
      .def_readonly("ablated", &AblationReport::ablated)
      .def_readonly("ratio", &AblationReport::ratio)
      .def_readonly("removed", &AblationReport::removed);
  py::class_<OodReport>(m, "OodReport")
      .def_readonly("slash_in", &OodReport::slash_in)
      .def_readonly("slash_ood", &OodReport::slash_ood)
      .def_readonly("slash_ratio_d1", &OodReport::slash_ratio_d1)
      .def_readonly("mae_in", &OodReport::mae_in)
      .def_readonly("mae_ood", &OodReport::mae_ood);

  m.def("attention_from_qk", &attention_from_qk, py::arg("q"), py::arg("k"), py::arg("freqs"),
        py::arg("config") = SlashConfig{});
  m.def("average_slash_score", &average_slash_score, py::arg("s"), py::arg("lag"),
        py::arg("excluded_prefix") = 0);
  m.def("detect_sdh", &detect_sdh, py::arg("batch"), py::arg("config") = SlashConfig{});
  m.def("band_ablation", &band_ablation, py::arg("q"), py::arg("k"), py::arg("freqs"), py::arg("removed"),
        py::arg("lags"), py::arg("config") = SlashConfig{});
  m.def("ood_evaluation", &ood_evaluation, py::arg("params"), py::arg("data"), py::arg("freqs"),
        py::arg("seed"), py::arg("scale"), py::arg("prompts") = 1000, py::arg("threads") = 1u,
        py::call_guard<py::gil_scoped_release>());

  // ---- ingest ----
  py::class_<Manifest>(m, "Manifest")
      .def(py::init<>())
      .def_readwrite("model", &Manifest::model)
      .def_readwrite("layer", &Manifest::layer)
      .def_readwrite("head", &Manifest::head)
      .def_readwrite("context_len", &Manifest::context_len)
      .def_readwrite("rope_applied", &Manifest::rope_applied)
      .def_readwrite("logit_scale_hint", &Manifest::logit_scale_hint)
      .def_readwrite("freq_base", &Manifest::freq_base)
      .def_readwrite("cone_band_len", &Manifest::cone_band_len);

  m.def("write_dump",
        [](const std::vector<std::pair<std::string, py::array>>& tensors, const Manifest& manifest,
           const std::filesystem::path& path) {
          std::vector<Tensor> ts;
          for (const auto& [name, a] : tensors) ts.push_back(array_to_tensor(name, a));
          write_dump(ts, manifest, path);
        },
        py::arg("tensors"), py::arg("manifest"), py::arg("path"),
        "Writes (name, array) pairs in order; float32 arrays stay float32.");
  m.def("read_dump",
        [](const std::filesystem::path& path) {
          const TensorDump d = read_dump(path);
          std::vector<std::pair<std::string, py::array>> out;
          for (const Tensor& t : d.tensors) out.emplace_back(t.name, tensor_to_array(t));
          return py::make_tuple(d.manifest, out);
        },
        py::arg("path"), "Returns (manifest, [(name, array), ...]).");

  py::class_<HeadAnalysis>(m, "HeadAnalysis")
      .def_readonly("tag", &HeadAnalysis::tag)
      .def_readonly("slash", &HeadAnalysis::slash)
      .def_readonly("q_spectrum", &HeadAnalysis::q_spectrum)
      .def_readonly("k_spectrum", &HeadAnalysis::k_spectrum)
      .def_readonly("h_spectrum", &HeadAnalysis::h_spectrum)
      .def_readonly("q_alignment", &HeadAnalysis::q_alignment)
      .def_readonly("k_alignment", &HeadAnalysis::k_alignment);
  m.def("analyze_dump",
        [](const std::filesystem::path& path, const SlashConfig& cfg, double tau) {
          return analyze_dump(read_dump(path), cfg, tau).heads;
        },
        py::arg("path"), py::arg("config") = SlashConfig{}, py::arg("tau") = 0.95);

  m.def("run_cli",
        [](const std::vector<std::string>& args) {
          std::ostringstream out, err;
          int code;
          {
            py::gil_scoped_release release;
            code = cli::run(args, out, err);
          }
          return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs the command-line tool in process; returns (exit_code, stdout, stderr).");
}
