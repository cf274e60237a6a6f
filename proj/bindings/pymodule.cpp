#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "delia/datasynth.hpp"
#include "delia/evalharness.hpp"
#include "delia/experiment.hpp"
#include "delia/model.hpp"
#include "delia/probes.hpp"
#include "delia/runio.hpp"
#include "delia/sample.hpp"
#include "delia/util.hpp"
#include "delia/vocab.hpp"

namespace py = pybind11;
using namespace delia;

namespace {

// decoded model output is raw bytes; byte-fallback tokens need not form
// valid utf-8, so lossy conversion keeps the python surface total
py::str lossy_str(const std::string& bytes) {
  PyObject* obj = PyUnicode_DecodeUTF8(bytes.data(), static_cast<Py_ssize_t>(bytes.size()),
                                       "replace");
  if (!obj) throw py::error_already_set();
  return py::reinterpret_steal<py::str>(obj);
}

datasynth::MixPlan mix_plan(int64_t r, const std::string& mode, uint64_t seed) {
  datasynth::MixPlan plan;
  plan.r = r;
  plan.mode = datasynth::parse_mix_mode(mode);
  plan.seed = seed;
  return plan;
}

experiment::ExperimentConfig config_from_text(const std::string& text) {
  return experiment::ExperimentConfig::parse(text);
}

// checkpoint + vocab pair loaded together so the hash check cannot be skipped
struct LoadedModel {
  model::ModelState m;
  vocab::Vocabulary v;
};

LoadedModel load_model(const std::string& checkpoint_path, const std::string& vocab_path) {
  auto ck = runio::read_checkpoint(checkpoint_path);
  auto v = vocab::Vocabulary::from_json(read_file(vocab_path));
  if (ck.vocab_hash != v.hash())
    throw std::runtime_error("checkpoint was trained against a different vocabulary");
  return LoadedModel{runio::restore_model(ck), std::move(v)};
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "diverse-data interleaving experiments: synthesis, training, probes, eval";
  m.attr("__version__") = "0.1.0";

  py::class_<data::Sample>(m, "Sample")
      .def(py::init<>())
      .def_readwrite("id", &data::Sample::id)
      .def_readwrite("instruction", &data::Sample::instruction)
      .def_readwrite("response", &data::Sample::response)
      .def_property(
          "source", [](const data::Sample& s) { return data::source_name(s.source); },
          [](data::Sample& s, const std::string& name) { s.source = data::parse_source(name); })
      .def("__repr__", [](const data::Sample& s) {
        return "Sample(id=" + s.id + ", source=" + data::source_name(s.source) + ")";
      });

  m.def("sample_to_json", &datasynth::sample_to_json, py::arg("sample"));
  m.def("sample_from_json", &datasynth::sample_from_json, py::arg("text"));
  m.def("read_jsonl", &datasynth::read_jsonl, py::arg("path"));
  m.def("write_jsonl", &datasynth::write_jsonl, py::arg("path"), py::arg("samples"));

  m.def("generate_downstream", &datasynth::generate_downstream_formatted, py::arg("n"),
        py::arg("seed"), "formatted downstream tasks: json responses with a 'thought' key");
  m.def(
      "diversify",
      [](const std::vector<data::Sample>& samples, int64_t intensity, uint64_t seed) {
        datasynth::DiversifierSpec spec;
        spec.intensity = intensity;
        spec.seed = seed;
        return datasynth::diversify_instructions(samples, spec);
      },
      py::arg("samples"), py::arg("intensity"), py::arg("seed"),
      "template-paraphrased instruction variants, intensity per input sample");
  m.def(
      "sample_diverse",
      [](int64_t n, uint64_t seed) { return datasynth::sample_diverse_qa(n, seed); },
      py::arg("n"), py::arg("seed"));
  m.def(
      "interleave",
      [](const std::vector<data::Sample>& downstream, const std::vector<data::Sample>& diverse,
         int64_t r, const std::string& mode, uint64_t seed) {
        return datasynth::interleave(downstream, diverse, mix_plan(r, mode, seed));
      },
      py::arg("downstream"), py::arg("diverse"), py::arg("r"),
      py::arg("mode") = "strict-interleave", py::arg("seed") = 0,
      "r diverse samples after every downstream sample; mode strict-interleave|global-shuffle");

  py::class_<vocab::Vocabulary>(m, "Vocabulary")
      .def_static(
          "build",
          [](const std::vector<std::string>& corpus, const std::vector<std::string>& specials) {
            return vocab::build_vocab(corpus, specials);
          },
          py::arg("corpus"), py::arg("specials"))
      .def_static(
          "from_json",
          [](const std::string& text) { return vocab::Vocabulary::from_json(text); },
          py::arg("text"))
      .def("to_json", &vocab::Vocabulary::to_json)
      .def("encode", &vocab::Vocabulary::encode, py::arg("text"))
      .def("decode", &vocab::Vocabulary::decode, py::arg("ids"))
      .def("size", &vocab::Vocabulary::size)
      .def("base_size", &vocab::Vocabulary::base_size)
      .def("has_special", &vocab::Vocabulary::has_special, py::arg("name"))
      .def("special_id", &vocab::Vocabulary::special_id, py::arg("name"))
      .def("token_of", &vocab::Vocabulary::token_of, py::arg("id"))
      .def("id_of", &vocab::Vocabulary::id_of, py::arg("token"))
      .def("hash", &vocab::Vocabulary::hash);

  py::class_<evalharness::ExtractionResult>(m, "ExtractionResult")
      .def_property_readonly("status",
                             [](const evalharness::ExtractionResult& r) {
                               return evalharness::status_name(r.status);
                             })
      .def_readonly("span_begin", &evalharness::ExtractionResult::span_begin)
      .def_readonly("span_end", &evalharness::ExtractionResult::span_end)
      .def_readonly("repaired", &evalharness::ExtractionResult::repaired)
      .def_readonly("keys", &evalharness::ExtractionResult::keys)
      .def("valid", &evalharness::ExtractionResult::valid)
      .def("has_key", &evalharness::ExtractionResult::has_key, py::arg("key"))
      .def("__repr__", [](const evalharness::ExtractionResult& r) {
        return "ExtractionResult(status=" + evalharness::status_name(r.status) + ")";
      });

  m.def("extract_json", &evalharness::extract_json, py::arg("text"),
        "earliest balanced json object in arbitrary text, with bounded repairs");

  py::class_<LoadedModel>(m, "Model")
      .def_static("load", &load_model, py::arg("checkpoint"), py::arg("vocab"))
      .def_property_readonly("vocab", [](const LoadedModel& lm) { return lm.v; })
      .def(
          "generate",
          [](const LoadedModel& lm, const std::string& instruction, int64_t max_new) {
            std::vector<int> prompt{lm.v.special_id("<bos>")};
            for (int id : lm.v.encode(instruction)) prompt.push_back(id);
            prompt.push_back(lm.v.special_id("<resp>"));
            model::GenOptions opts;
            opts.max_new = max_new;
            auto ids = model::generate(lm.m, lm.v, prompt, opts);
            ids.erase(ids.begin(), ids.begin() + static_cast<int64_t>(prompt.size()));
            if (!ids.empty() && ids.back() == lm.v.special_id("<eos>")) ids.pop_back();
            return lm.v.decode(ids);
          },
          py::arg("instruction"), py::arg("max_new") = 96,
          "greedy continuation of the instruction prompt, decoded without the prompt")
      .def(
          "accuracy",
          [](const LoadedModel& lm, const std::vector<data::Sample>& samples, int64_t max_new) {
            evalharness::EvalSet set;
            set.samples = samples;
            auto rep = evalharness::formatted_accuracy(lm.m, lm.v, set, max_new);
            py::dict out;
            out["accuracy"] = rep.accuracy;
            out["hits"] = rep.hits;
            out["total"] = rep.total;
            return out;
          },
          py::arg("samples"), py::arg("max_new") = 96);

  py::class_<experiment::ExperimentConfig>(m, "Config")
      .def_static("parse", &config_from_text, py::arg("text"))
      .def_static("load", &experiment::ExperimentConfig::load, py::arg("path"))
      .def_static("defaults", []() { return config_from_text(""); })
      .def_readonly("hash", &experiment::ExperimentConfig::hash)
      .def("snapshot", &experiment::ExperimentConfig::snapshot)
      .def("get", &experiment::ExperimentConfig::gets, py::arg("key"));

  py::class_<experiment::StageResult>(m, "StageResult")
      .def_readonly("name", &experiment::StageResult::name)
      .def_readonly("ok", &experiment::StageResult::ok)
      .def_readonly("skipped", &experiment::StageResult::skipped)
      .def_readonly("error", &experiment::StageResult::error)
      .def("__repr__", [](const experiment::StageResult& r) {
        std::string state = r.ok ? (r.skipped ? "skipped" : "ok") : "failed";
        return "StageResult(" + r.name + ": " + state + ")";
      });

  m.def(
      "run_experiment",
      [](const experiment::ExperimentConfig& cfg, const std::string& dir,
         const std::vector<std::string>& stages) {
        auto res = experiment::run_experiment(cfg, dir, stages);
        py::dict out;
        out["dir"] = res.dir;
        out["all_ok"] = res.all_ok;
        out["stages"] = res.stages;
        return out;
      },
      py::arg("config"), py::arg("dir"), py::arg("stages") = std::vector<std::string>{},
      "resumable staged pipeline; empty stage list runs everything");

  m.def("write_report", &experiment::write_report, py::arg("experiment_dirs"),
        py::arg("out_dir"));

  m.def(
      "theory_report",
      [](uint64_t seed, int64_t worlds, int64_t world_size, double eps,
         const std::vector<double>& kl_targets) {
        return experiment::theory_report(seed, worlds, world_size, eps, kl_targets).str();
      },
      py::arg("seed") = 51, py::arg("worlds") = 20, py::arg("world_size") = 32,
      py::arg("eps") = 1e-3, py::arg("kl_targets") = std::vector<double>{1e-4, 1e-2, 1.0},
      "categorical-world verification sweep as csv text");
}
