#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cmath>
#include <string>
#include <vector>

#include "rrt/checkpoint.hpp"
#include "rrt/convert.hpp"
#include "rrt/exit_loss.hpp"
#include "rrt/model.hpp"
#include "rrt/records.hpp"
#include "rrt/rng.hpp"
#include "rrt/sim.hpp"
#include "rrt/tensor.hpp"

namespace py = pybind11;

namespace {

rrt::Tensor to_tensor(const std::vector<std::vector<float>>& rows) {
    if (rows.empty()) throw rrt::ArgumentError("logit matrix must not be empty");
    const int64_t n_cols = static_cast<int64_t>(rows[0].size());
    rrt::Tensor t({static_cast<int64_t>(rows.size()), n_cols});
    for (size_t i = 0; i < rows.size(); ++i) {
        if (static_cast<int64_t>(rows[i].size()) != n_cols)
            throw rrt::ArgumentError("logit matrix rows have unequal lengths");
        for (int64_t j = 0; j < n_cols; ++j) t.at(static_cast<int64_t>(i), j) = rows[i][j];
    }
    return t;
}

std::vector<std::vector<float>> to_rows(const rrt::Tensor& t) {
    std::vector<std::vector<float>> rows(static_cast<size_t>(t.rows()));
    for (int64_t i = 0; i < t.rows(); ++i) {
        rows[static_cast<size_t>(i)].resize(static_cast<size_t>(t.cols()));
        for (int64_t j = 0; j < t.cols(); ++j) rows[static_cast<size_t>(i)][static_cast<size_t>(j)] = t.at(i, j);
    }
    return rows;
}

std::vector<rrt::Tensor> to_stack(const std::vector<std::vector<std::vector<float>>>& stack) {
    std::vector<rrt::Tensor> out;
    out.reserve(stack.size());
    for (const auto& rows : stack) out.push_back(to_tensor(rows));
    return out;
}

rrt::ConvertOptions make_options(int64_t blocks, const std::string& init,
                                 const std::string& norm_mode, const std::string& lora_init,
                                 int64_t lora_rank, uint64_t seed) {
    rrt::ConvertOptions opts;
    opts.n_blocks = blocks;
    opts.init = rrt::parse_block_init(init);
    opts.norm_mode = rrt::parse_norm_mode(norm_mode);
    opts.lora_init = rrt::parse_lora_init(lora_init);
    opts.lora_rank = lora_rank;
    opts.seed = seed;
    return opts;
}

void make_toy_checkpoint(const std::string& path, int64_t n_layers, int64_t d_model,
                         int64_t n_heads, int64_t n_kv_heads, int64_t d_ffn, int64_t vocab_size,
                         uint64_t seed) {
    rrt::ModelConfig config;
    config.n_layers = n_layers;
    config.d_model = d_model;
    config.n_heads = n_heads;
    config.n_kv_heads = n_kv_heads;
    config.head_dim = d_model / n_heads;
    config.ffn_dim = d_ffn;
    config.vocab_size = vocab_size;
    config.norm_eps = 1e-5f;
    config.n_blocks = 1;
    config.lora_rank = 0;

    rrt::Checkpoint ckpt;
    ckpt.config = config;
    rrt::GaussianRng rng(seed);
    for (const auto& [name, shape] : rrt::expected_tensor_shapes(config)) {
        rrt::Tensor t(shape);
        if (name.find(".gamma") != std::string::npos) {
            for (float& x : t.data) x = 1.0f + static_cast<float>(rng.next(0.05));
        } else {
            const double stddev = 1.0 / std::sqrt(static_cast<double>(shape.back()));
            for (float& x : t.data) x = static_cast<float>(rng.next(stddev));
        }
        ckpt.tensors.emplace(name, std::move(t));
    }
    rrt::write_checkpoint(path, ckpt);
}

py::dict config_dict(const rrt::ModelConfig& c) {
    py::dict d;
    d["n_layers"] = c.n_layers;
    d["d_model"] = c.d_model;
    d["n_heads"] = c.n_heads;
    d["n_kv_heads"] = c.n_kv_heads;
    d["head_dim"] = c.head_dim;
    d["ffn_dim"] = c.ffn_dim;
    d["vocab_size"] = c.vocab_size;
    d["norm_eps"] = c.norm_eps;
    d["n_blocks"] = c.n_blocks;
    d["lora_rank"] = c.lora_rank;
    return d;
}

py::dict report_dict(const rrt::SimReport& r) {
    py::dict d;
    d["mode"] = rrt::to_string(r.mode);
    d["n_samples"] = r.n_samples;
    d["total_tokens"] = r.total_tokens;
    d["n_steps"] = r.n_steps;
    d["total_time"] = r.total_time;
    d["throughput"] = r.throughput;
    d["peak_occupancy"] = r.peak_occupancy;
    d["mean_occupancy"] = r.mean_occupancy;
    d["stage_utilization"] = r.stage_utilization;
    return d;
}

// Thin handle so scripts can load once and run many prompts.
class Model {
  public:
    explicit Model(const std::string& path) : model_(rrt::read_checkpoint(path)) {}

    std::vector<std::vector<std::vector<float>>> forward(const std::vector<int32_t>& tokens) const {
        std::vector<std::vector<std::vector<float>>> out;
        for (const rrt::Tensor& t : model_.forward(tokens)) out.push_back(to_rows(t));
        return out;
    }

    py::dict decode_greedy(const std::vector<int32_t>& prompt, int64_t n_new) const {
        const auto result = model_.decode_greedy(prompt, n_new);
        std::vector<std::vector<int64_t>> exits;
        for (const auto& per_loop : result.step_logits)
            exits.push_back(rrt::oracle_exits(per_loop));
        py::dict d;
        d["generated"] = result.generated;
        std::vector<int64_t> flat;
        for (const auto& e : exits) flat.push_back(e.empty() ? 0 : e[0]);
        d["exit_loops"] = flat;
        return d;
    }

    py::dict config() const { return config_dict(model_.config()); }

  private:
    rrt::RecursiveModel model_;
};

}  // namespace

PYBIND11_MODULE(rrtkit, m) {
    m.doc() = "Convert vanilla transformer checkpoints into looped-block models with "
              "per-loop low-rank adapters, run toy inference with per-loop exits, and "
              "simulate serving throughput.";

    // Base first: translators run newest-first, so the specific ones win, and
    // both specific types subclass Error on the python side.
    auto base = py::register_exception<rrt::Error>(m, "Error");
    py::register_exception<rrt::IoError>(m, "IoError", base.ptr());
    py::register_exception<rrt::ValidationError>(m, "ValidationError", base.ptr());

    m.def("make_toy_checkpoint", &make_toy_checkpoint, py::arg("path"), py::arg("n_layers") = 4,
          py::arg("d_model") = 16, py::arg("n_heads") = 4, py::arg("n_kv_heads") = 2,
          py::arg("d_ffn") = 24, py::arg("vocab_size") = 31, py::arg("seed") = 0,
          "Write a random vanilla checkpoint for experiments.");

    m.def(
        "convert_checkpoint",
        [](const std::string& input, const std::string& output, int64_t blocks,
           const std::string& init, const std::string& norm_mode, const std::string& lora_init,
           int64_t lora_rank, uint64_t seed) {
            const rrt::Checkpoint vanilla = rrt::read_checkpoint(input);
            const rrt::Checkpoint rec = rrt::convert(
                vanilla, make_options(blocks, init, norm_mode, lora_init, lora_rank, seed));
            rrt::write_checkpoint(output, rec);
            return config_dict(rec.config);
        },
        py::arg("input"), py::arg("output"), py::arg("blocks"), py::arg("init") = "stepwise",
        py::arg("norm_mode") = "choice", py::arg("lora_init") = "svd", py::arg("lora_rank") = 0,
        py::arg("seed") = 0,
        "Convert a vanilla checkpoint into a looped-block one; returns the new config.");

    m.def(
        "inspect_checkpoint",
        [](const std::string& path) {
            const rrt::Checkpoint ckpt = rrt::read_checkpoint(path);
            py::dict d = config_dict(ckpt.config);
            py::list tensors;
            for (const auto& [name, tensor] : ckpt.tensors)
                tensors.append(py::make_tuple(name, tensor.shape));
            d["tensors"] = tensors;
            return d;
        },
        py::arg("path"), "Config fields plus (name, shape) for every stored tensor.");

    py::class_<Model>(m, "Model")
        .def(py::init<const std::string&>(), py::arg("path"))
        .def("forward", &Model::forward, py::arg("tokens"),
             "Per-loop logits for the prompt, each a [len x vocab] nested list.")
        .def("decode_greedy", &Model::decode_greedy, py::arg("prompt"), py::arg("n_new"),
             "Greedy generation; returns generated ids and per-token oracle exit loops.")
        .def_property_readonly("config", &Model::config);

    m.def("stepwise_indices", &rrt::stepwise_indices, py::arg("n_layers"), py::arg("slots"));

    m.def(
        "oracle_exits",
        [](const std::vector<std::vector<std::vector<float>>>& per_loop_logits) {
            return rrt::oracle_exits(to_stack(per_loop_logits));
        },
        py::arg("per_loop_logits"),
        "Earliest loop whose argmax matches the final loop, per position.");

    m.def(
        "exit_coefficients",
        [](const std::string& scheme, int64_t n_loops, double aggressive_coeff) {
            return rrt::exit_coefficients(rrt::parse_coeff_scheme(scheme), n_loops,
                                          aggressive_coeff);
        },
        py::arg("scheme"), py::arg("n_loops"), py::arg("aggressive_coeff") = 0.1);

    m.def(
        "kd_divergence",
        [](const std::vector<std::vector<float>>& teacher,
           const std::vector<std::vector<float>>& student, const std::string& kind) {
            return rrt::kd_divergence(to_tensor(teacher), to_tensor(student),
                                      rrt::parse_divergence(kind));
        },
        py::arg("teacher_logits"), py::arg("student_logits"), py::arg("kind") = "fkl");

    m.def(
        "early_exit_loss",
        [](const std::vector<std::vector<std::vector<float>>>& per_loop_logits,
           const std::vector<int32_t>& targets, const std::string& scheme,
           double aggressive_coeff, bool self_distill) {
            const auto breakdown = rrt::early_exit_loss(to_stack(per_loop_logits), targets,
                                                        rrt::parse_coeff_scheme(scheme),
                                                        aggressive_coeff, self_distill);
            py::dict d;
            d["total"] = breakdown.total;
            d["per_loop"] = breakdown.per_loop;
            d["coefficients"] = breakdown.coefficients;
            return d;
        },
        py::arg("per_loop_logits"), py::arg("targets"), py::arg("scheme") = "weighted",
        py::arg("aggressive_coeff") = 0.1, py::arg("self_distill") = false);

    m.def(
        "simulate",
        [](const std::vector<std::tuple<int64_t, int64_t, std::vector<int64_t>>>& workload,
           const std::string& mode, int64_t n_loops, int64_t max_batch,
           const std::vector<std::pair<int64_t, double>>& timing_table) {
            std::vector<rrt::SimSample> samples;
            for (const auto& [prompt_len, n_tokens, exits] : workload)
                samples.push_back({prompt_len, n_tokens, exits});
            rrt::TimingTable table;
            table.entries = timing_table;
            const auto result =
                rrt::simulate(samples, rrt::parse_sim_mode(mode), n_loops, max_batch, table);
            return report_dict(result.report);
        },
        py::arg("workload"), py::arg("mode"), py::arg("n_loops"), py::arg("max_batch"),
        py::arg("timing_table"),
        "Stage-step serving simulation. workload entries are (prompt_len, n_tokens, exits); "
        "timing_table maps batch size to per-token seconds for a full forward.");
}
