#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "tilelm/alloc_compare.hpp"
#include "tilelm/errors.hpp"
#include "tilelm/kernels.hpp"
#include "tilelm/kv_tile_manager.hpp"
#include "tilelm/metrics.hpp"
#include "tilelm/model.hpp"
#include "tilelm/scheduler.hpp"
#include "tilelm/trace.hpp"

namespace py = pybind11;
using namespace tilelm;

namespace {

py::array_t<float> to_numpy(const Matrix& m) {
  py::array_t<float> out({m.rows, m.cols});
  std::copy(m.data.begin(), m.data.end(), out.mutable_data());
  return out;
}

Matrix from_numpy(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw ShapeMismatch("expected a 2-d array");
  const auto rows = static_cast<std::size_t>(a.shape(0)), cols = static_cast<std::size_t>(a.shape(1));
  return Matrix(rows, cols, std::vector<float>(a.data(), a.data() + rows * cols));
}

py::dict report_dict(const ThroughputReport& r) {
  py::dict d;
  d["processed_tokens"] = r.processed_tokens;
  d["generated_tokens"] = r.generated_tokens;
  d["request_count"] = r.request_count;
  d["wall_time_s"] = r.wall_time_s;
  d["processed_tok_per_s"] = r.processed_tok_per_s;
  d["generated_tok_per_s"] = r.generated_tok_per_s;
  return d;
}

py::dict alloc_dict(const AllocSimResult& r) {
  py::dict d;
  d["mode"] = to_string(r.mode);
  d["first_step_admissions"] = r.first_step_admissions;
  d["peak_concurrent"] = r.peak_concurrent;
  d["mean_concurrent"] = r.mean_concurrent;
  d["steps"] = r.steps;
  d["preemptions"] = r.preemptions;
  d["peak_waste_slots"] = r.peak_waste_slots;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Tiled KV-cache inference engine";

  auto base = py::register_exception<Error>(m, "TilelmError", PyExc_RuntimeError);
  py::register_exception<InvalidConfig>(m, "InvalidConfig", base.ptr());
  py::register_exception<OutOfTiles>(m, "OutOfTiles", base.ptr());
  py::register_exception<DuplicateSequence>(m, "DuplicateSequence", base.ptr());
  py::register_exception<UnknownSequence>(m, "UnknownSequence", base.ptr());
  py::register_exception<PositionOutOfRange>(m, "PositionOutOfRange", base.ptr());
  py::register_exception<ShapeMismatch>(m, "ShapeMismatch", base.ptr());
  py::register_exception<PromptTooLong>(m, "PromptTooLong", base.ptr());
  py::register_exception<CorruptFile>(m, "CorruptFile", base.ptr());
  py::register_exception<MalformedTrace>(m, "MalformedTrace", base.ptr());

  py::class_<ModelConfig>(m, "ModelConfig")
      .def_readonly("vocab_size", &ModelConfig::vocab_size)
      .def_readonly("d_model", &ModelConfig::d_model)
      .def_readonly("n_layers", &ModelConfig::n_layers)
      .def_readonly("n_heads", &ModelConfig::n_heads)
      .def_readonly("head_dim", &ModelConfig::head_dim)
      .def_readonly("d_ff", &ModelConfig::d_ff)
      .def_readonly("max_seq_len", &ModelConfig::max_seq_len)
      .def_readonly("eos_token", &ModelConfig::eos_token);

  py::class_<Model, std::shared_ptr<Model>>(m, "Model")
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def_property(
          "backend", [](const Model& self) { return std::string(to_string(self.backend())); },
          [](Model& self, const std::string& name) { self.set_backend(parse_backend(name)); })
      .def("same_weights", &Model::same_weights);

  m.def(
      "gen_random_model",
      [](const std::string& preset, std::uint64_t seed) {
        return std::make_shared<Model>(gen_random_model(parse_preset(preset), seed));
      },
      py::arg("preset") = "tiny", py::arg("seed") = 7);
  m.def(
      "load_model", [](const std::string& path) { return std::make_shared<Model>(load_model(path)); },
      py::arg("path"));
  m.def(
      "save_model", [](const Model& model, const std::string& path) { save_model(model, path); },
      py::arg("model"), py::arg("path"));

  m.def("encode", [](const std::string& text) { return encode(text); });
  m.def("decode", [](const std::vector<TokenId>& tokens) { return py::bytes(decode(tokens)); });
  m.def(
      "reference_forward",
      [](const Model& model, const std::vector<TokenId>& tokens) {
        return to_numpy(reference_forward(model, tokens));
      },
      py::arg("model"), py::arg("tokens"));

  // Greedy generation through the batching engine on a private tile pool.
  m.def(
      "generate",
      [](std::shared_ptr<Model> model, const std::vector<std::string>& prompts,
         std::size_t max_new_tokens, std::size_t tiles, std::size_t tile_size,
         std::size_t max_batch, bool ignore_eos) {
        EngineConfig cfg;
        cfg.max_batch = max_batch;
        cfg.ignore_eos = ignore_eos;
        std::vector<Request> trace;
        for (const auto& p : prompts) trace.push_back(Request{p, max_new_tokens, 0});
        TraceRun run;
        {
          py::gil_scoped_release release;
          Engine engine(model, TilePool(pool_config_for(model->config(), tiles, tile_size)), cfg);
          run = run_trace(engine, trace, ClockMode::Simulated);
        }
        py::list out;
        for (const auto& c : run.completions) {
          py::dict d;
          d["text"] = py::bytes(c.text);
          d["generated"] = c.generated;
          d["prompt_tokens"] = c.prompt_tokens;
          d["finish_reason"] = to_string(c.finish_reason);
          d["preemptions"] = c.preemptions;
          out.append(d);
        }
        return out;
      },
      py::arg("model"), py::arg("prompts"), py::arg("max_new_tokens") = 16,
      py::arg("tiles") = 1024, py::arg("tile_size") = 16, py::arg("max_batch") = 64,
      py::arg("ignore_eos") = false);

  py::class_<TilePool>(m, "TilePool")
      .def(py::init([](std::size_t total_tiles, std::size_t tile_size, const std::string& mode) {
             TilePoolConfig c;
             c.total_tiles = total_tiles;
             c.tile_size = tile_size;
             if (mode == "contiguous") c.mode = AllocMode::ContiguousReservation;
             else if (mode != "tiled") throw InvalidConfig("unknown allocation mode '" + mode + "'");
             return TilePool(c);
           }),
           py::arg("total_tiles"), py::arg("tile_size") = 16, py::arg("mode") = "tiled")
      .def_property_readonly("tile_size", &TilePool::tile_size)
      .def_property_readonly("free_tiles", &TilePool::free_tile_count)
      .def_property_readonly("used_tiles", &TilePool::used_tile_count)
      .def("can_admit", &TilePool::can_admit, py::arg("prompt_len"), py::arg("decode_reserve") = 0,
           py::arg("max_new_tokens") = 0)
      .def(
          "allocate_sequence",
          [](TilePool& p, SeqId seq, std::size_t prompt_len, std::size_t max_new) {
            return p.allocate_sequence(seq, prompt_len, max_new).tiles;
          },
          py::arg("seq"), py::arg("prompt_len"), py::arg("max_new_tokens") = 0)
      .def("append_slot",
           [](TilePool& p, SeqId seq) {
             const SlotRef s = p.append_slot(seq);
             return py::make_tuple(s.tile_id, s.offset);
           })
      .def("free_sequence", &TilePool::free_sequence)
      .def("contains", &TilePool::contains)
      .def("tiles", [](const TilePool& p, SeqId seq) { return p.table(seq).tiles; })
      .def("token_count", [](const TilePool& p, SeqId seq) { return p.table(seq).token_count; })
      .def("stats", [](const TilePool& p) {
        const PoolStats s = p.stats();
        py::dict d;
        d["total_tiles"] = s.total_tiles;
        d["free_tiles"] = s.free_tiles;
        d["used_tiles"] = s.used_tiles;
        d["live_sequences"] = s.live_sequences;
        d["live_tokens"] = s.live_tokens;
        d["internal_waste_slots"] = s.internal_waste_slots;
        return d;
      });

  m.def(
      "gemm",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& a,
         const py::array_t<float, py::array::c_style | py::array::forcecast>& b,
         const std::string& backend) { return to_numpy(gemm(from_numpy(a), from_numpy(b), {}, parse_backend(backend))); },
      py::arg("a"), py::arg("b"), py::arg("backend") = "blocked");

  m.def(
      "compare_alloc",
      [](std::uint64_t seed, std::size_t tiles, std::size_t tile_size) {
        const auto reqs = alloc_requests_from_trace(generate_trace(skewed_alloc_trace_spec(), seed));
        py::dict d;
        d["tiled"] = alloc_dict(simulate_allocation(reqs, tiles, tile_size, AllocMode::Tiled));
        d["contiguous"] =
            alloc_dict(simulate_allocation(reqs, tiles, tile_size, AllocMode::ContiguousReservation));
        return d;
      },
      py::arg("seed") = 1, py::arg("tiles") = 512, py::arg("tile_size") = 16);

  m.def(
      "aggregate",
      [](const std::vector<std::tuple<std::uint64_t, std::uint64_t, std::uint64_t, double>>& workers) {
        std::vector<ThroughputReport> reports;
        for (const auto& [p, g, n, wall] : workers) reports.push_back(ThroughputReport::make(p, g, n, wall));
        return report_dict(aggregate(reports).aggregate);
      },
      py::arg("workers"),
      "Each worker is (processed_tokens, generated_tokens, requests, wall_time_s).");
}
