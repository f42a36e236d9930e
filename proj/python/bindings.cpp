#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "m2s/cli.hpp"
#include "m2s/errors.hpp"
#include "m2s/evaluation.hpp"
#include "m2s/model.hpp"
#include "m2s/visualization.hpp"

namespace py = pybind11;
using namespace m2s;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

// [T] -> mono, [2, T] -> stereo.
Waveform to_waveform(const Array& a, double sr) {
  if (a.ndim() == 1) return Waveform::mono(std::vector<double>(a.data(), a.data() + a.size()), sr);
  if (a.ndim() == 2 && a.shape(0) == 2) {
    const auto T = static_cast<std::size_t>(a.shape(1));
    return Waveform::stereo(std::span<const double>(a.data(), T), std::span<const double>(a.data() + T, T), sr);
  }
  throw ShapeError("expected a [T] or [2, T] array");
}

Array from_waveform(const Waveform& w) {
  if (w.channels == 1) {
    Array out(static_cast<py::ssize_t>(w.length()));
    std::copy(w.samples.begin(), w.samples.end(), out.mutable_data());
    return out;
  }
  Array out({static_cast<py::ssize_t>(w.channels), static_cast<py::ssize_t>(w.length())});
  std::copy(w.samples.begin(), w.samples.end(), out.mutable_data());
  return out;
}

struct PyDetector {
  M2SAdd model;
  std::vector<ConditioningTrack> pool;

  double score(const Array& mono, double sr, std::uint64_t seed, bool ablation) {
    if (pool.empty()) throw ValidationError("no conditioning pool loaded; call load_conditioning first");
    NoGradGuard guard;
    return logit_scores(model.forward(to_waveform(mono, sr), pool, seed, ablation))[0];
  }
};

struct PyConverter {
  std::shared_ptr<Binauralizer> model;
  std::vector<ConditioningTrack> pool;

  Array convert(const Array& mono, std::uint64_t seed) const {
    if (pool.empty()) throw ValidationError("no conditioning pool loaded; call load_conditioning first");
    return from_waveform(binauralize_utterance(to_waveform(mono, model->config().sample_rate), pool, *model, seed));
  }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Mono-to-stereo audio deepfake detection core";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<TrainingAborted>(m, "TrainingAborted", PyExc_RuntimeError);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run an m2s-add subcommand in-process; returns (exit_code, stdout, stderr).");

  m.def(
      "read_wav",
      [](const std::filesystem::path& p) {
        const Waveform w = read_wav(p);
        return py::make_tuple(from_waveform(w), w.sample_rate);
      },
      py::arg("path"), "Returns (samples, sample_rate); samples are [T] for mono and [2, T] for stereo.");
  m.def(
      "write_wav", [](const std::filesystem::path& p, const Array& a, double sr) { write_wav(p, to_waveform(a, sr)); },
      py::arg("path"), py::arg("samples"), py::arg("sample_rate"));

  m.def(
      "compute_eer",
      [](const std::vector<double>& bona, const std::vector<double>& spoof) {
        const EerResult r = compute_eer(bona, spoof);
        return py::make_tuple(r.eer, r.threshold);
      },
      py::arg("bonafide"), py::arg("spoof"), "Returns (eer, threshold).");

  m.def(
      "enforce_warp", [](const std::vector<double>& raw) { return enforce_warp(raw); }, py::arg("raw"),
      "Monotone, causal read positions.");

  m.def(
      "log_spectrogram",
      [](const Array& x, double sr, double window_s, double hop_s) {
        if (x.ndim() != 1) throw ShapeError("log_spectrogram expects a 1-D signal");
        const Spectrogram s =
            log_spectrogram(std::span<const double>(x.data(), static_cast<std::size_t>(x.size())), sr, window_s, hop_s);
        Array out({static_cast<py::ssize_t>(s.n_frames), static_cast<py::ssize_t>(s.n_bins)});
        std::copy(s.db.begin(), s.db.end(), out.mutable_data());
        return out;
      },
      py::arg("x"), py::arg("sample_rate"), py::arg("window_s") = 0.025, py::arg("hop_s") = 0.010,
      "Hann STFT magnitude in dB, shaped [frames, bins].");

  m.def(
      "full_shapes",
      [](std::uint64_t seed) {
        M2SAdd model(DetectorConfig::full(), std::make_shared<Binauralizer>(BinauralizerConfig{}, seed), seed);
        Rng rng(seed);
        std::vector<double> v(2 * 64600);
        for (double& x : v) x = rng.uniform(-1.0, 1.0);
        ShapeTrace trace;
        {
          py::gil_scoped_release release;
          NoGradGuard guard;
          model.forward_stereo(Tensor({1, 2, 64600}, std::move(v)), false, &trace);
        }
        py::dict out;
        for (const auto& [name, shape] : trace.entries) out[py::str(name)] = py::tuple(py::cast(shape));
        return out;
      },
      py::arg("seed") = 1234, "Intermediate shapes (batch axis dropped) for one 64600-sample input.");

  py::class_<PyConverter>(m, "Converter")
      .def_static(
          "load",
          [](const std::filesystem::path& p) {
            PyConverter c;
            c.model = std::make_shared<Binauralizer>(load_binauralizer(p));
            c.model->set_frozen(true);
            return c;
          },
          py::arg("path"))
      .def(
          "load_conditioning",
          [](PyConverter& c, const std::filesystem::path& dir) {
            c.pool = load_conditioning_pool(dir, c.model->config().sample_rate);
            return c.pool.size();
          },
          py::arg("directory"))
      .def_property_readonly("sample_rate", [](const PyConverter& c) { return c.model->config().sample_rate; })
      .def("convert", &PyConverter::convert, py::arg("mono"), py::arg("seed") = 1234,
           "Mono [T] -> stereo [2, T].");

  py::class_<PyDetector>(m, "Detector")
      .def_static(
          "load", [](const std::filesystem::path& p) { return PyDetector{load_detector(p), {}}; }, py::arg("path"))
      .def(
          "load_conditioning",
          [](PyDetector& d, const std::filesystem::path& dir) {
            d.pool = load_conditioning_pool(dir, d.model.converter().config().sample_rate);
            return d.pool.size();
          },
          py::arg("directory"))
      .def_property_readonly("parameter_count", [](PyDetector& d) { return d.model.parameter_count(); })
      .def_property_readonly("sample_rate",
                             [](PyDetector& d) { return d.model.converter().config().sample_rate; })
      .def("score", &PyDetector::score, py::arg("mono"), py::arg("sample_rate"), py::arg("seed") = 1234,
           py::arg("ablation") = false, "Bonafide logit minus spoof logit, averaged over segments.");
}
