#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rrt/checkpoint.hpp"
#include "rrt/convert.hpp"
#include "rrt/exit_loss.hpp"
#include "rrt/model.hpp"
#include "rrt/records.hpp"
#include "rrt/sim.hpp"

namespace {

using json = nlohmann::ordered_json;

std::string fmt(double value) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", value);
    return buf;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw rrt::IoError("cannot open '" + path + "' for writing");
    return out;
}

// ---- convert ---------------------------------------------------------------

struct ConvertArgs {
    std::string input;
    std::string out;
    int64_t blocks = 1;
    std::string init = "stepwise";
    std::string norm_mode = "choice";
    std::string lora_init = "svd";
    int64_t lora_rank = 0;
    uint64_t seed = 0;
};

int run_convert(const ConvertArgs& args) {
    rrt::ConvertOptions opts;
    opts.n_blocks = args.blocks;
    opts.init = rrt::parse_block_init(args.init);
    opts.norm_mode = rrt::parse_norm_mode(args.norm_mode);
    opts.lora_init = rrt::parse_lora_init(args.lora_init);
    opts.lora_rank = args.lora_rank;
    opts.seed = args.seed;

    const rrt::Checkpoint vanilla = rrt::read_checkpoint(args.input);
    const rrt::Checkpoint converted = rrt::convert(vanilla, opts);
    rrt::write_checkpoint(args.out, converted);

    int64_t block_params = 0, lora_params = 0;
    for (const auto& [name, tensor] : converted.tensors) {
        if (name.rfind("block.", 0) == 0) block_params += tensor.numel();
        if (name.rfind("lora.", 0) == 0) lora_params += tensor.numel();
    }
    std::cout << "converted " << args.input << " -> " << args.out << "\n"
              << "loops " << opts.n_blocks << ", slots " << converted.config.slots() << ", init "
              << rrt::to_string(opts.init) << ", adapter rank " << opts.lora_rank << " ("
              << rrt::to_string(opts.lora_init) << ")\n"
              << "block parameters " << block_params << ", adapter parameters " << lora_params
              << "\n";
    return 0;
}

// ---- forward ---------------------------------------------------------------

struct ForwardArgs {
    std::string ckpt;
    std::string prompts;
    std::string out;
    std::string compare;
};

int run_forward(const ForwardArgs& args) {
    const rrt::RecursiveModel model(rrt::read_checkpoint(args.ckpt));
    const auto prompts = rrt::read_prompts(args.prompts);

    std::optional<rrt::RecursiveModel> other;
    if (!args.compare.empty()) other.emplace(rrt::read_checkpoint(args.compare));

    std::ofstream file;
    if (!args.out.empty()) file = open_out(args.out);
    std::ostream& sink = args.out.empty() ? std::cout : file;

    double worst = 0.0;
    for (size_t i = 0; i < prompts.size(); ++i) {
        const auto per_loop = model.forward(prompts[i]);
        rrt::write_logit_records(sink, static_cast<int64_t>(i), per_loop);
        if (other) {
            const auto per_loop_other = other->forward(prompts[i]);
            worst = std::max(worst, rrt::max_abs_diff(per_loop.back(), per_loop_other.back()));
        }
    }
    if (!args.out.empty()) {
        sink.flush();
        if (!file) throw rrt::IoError("short write to '" + args.out + "'");
    }
    if (other)
        std::cout << "max final-loop logit diff vs " << args.compare << ": " << fmt(worst) << "\n";
    return 0;
}

// ---- oracle-trace ----------------------------------------------------------

struct TraceArgs {
    std::string ckpt;
    std::string prompts;
    std::string out;
    int64_t n_new = 8;
};

int run_trace(const TraceArgs& args) {
    if (args.n_new < 1) throw rrt::ArgumentError("--n-new must be >= 1");
    const rrt::RecursiveModel model(rrt::read_checkpoint(args.ckpt));
    const auto prompts = rrt::read_prompts(args.prompts);
    const int64_t n_loops = model.config().n_blocks;

    std::vector<std::vector<int64_t>> trajectories;
    trajectories.reserve(prompts.size());
    for (const auto& prompt : prompts) {
        const auto decoded = model.decode_greedy(prompt, args.n_new);
        // Stack each loop's per-step rows into [n_new x vocab] and read off the
        // earliest loop that already agrees with the final prediction.
        std::vector<rrt::Tensor> per_loop;
        per_loop.reserve(static_cast<size_t>(n_loops));
        for (int64_t b = 0; b < n_loops; ++b) {
            rrt::Tensor stacked({args.n_new, model.config().vocab_size});
            for (int64_t t = 0; t < args.n_new; ++t) {
                const rrt::Tensor& row = decoded.step_logits[static_cast<size_t>(t)][static_cast<size_t>(b)];
                for (int64_t j = 0; j < model.config().vocab_size; ++j)
                    stacked.at(t, j) = row.at(0, j);
            }
            per_loop.push_back(std::move(stacked));
        }
        trajectories.push_back(rrt::oracle_exits(per_loop));
    }
    rrt::write_trajectories(args.out, trajectories);

    int64_t total = 0, sum = 0;
    for (const auto& t : trajectories) {
        total += static_cast<int64_t>(t.size());
        for (int64_t e : t) sum += e;
    }
    std::cout << "wrote " << trajectories.size() << " trajectories (" << total << " tokens) to "
              << args.out << "\n"
              << "mean exit loop " << fmt(static_cast<double>(sum) / static_cast<double>(total))
              << " of " << n_loops << "\n";
    return 0;
}

// ---- simulate --------------------------------------------------------------

struct SimulateArgs {
    std::string workload;
    std::string trajectories;
    std::string prompts;
    std::string timing;
    std::string out;
    std::string events;
    int64_t blocks = 0;
    int64_t max_batch = 0;
    std::vector<std::string> modes;
};

json report_to_json(const rrt::SimReport& r, const rrt::DeltaRow& deltas) {
    json j;
    j["mode"] = rrt::to_string(r.mode);
    j["n_samples"] = r.n_samples;
    j["total_tokens"] = r.total_tokens;
    j["n_steps"] = r.n_steps;
    j["total_time"] = r.total_time;
    j["throughput"] = r.throughput;
    j["peak_occupancy"] = r.peak_occupancy;
    j["mean_occupancy"] = r.mean_occupancy;
    j["stage_utilization"] = r.stage_utilization;
    if (deltas.delta_v) j["delta_v"] = *deltas.delta_v;
    if (deltas.delta_seq) j["delta_seq"] = *deltas.delta_seq;
    return j;
}

int run_simulate(const SimulateArgs& args) {
    std::vector<rrt::SimSample> workload;
    if (!args.workload.empty()) {
        if (!args.trajectories.empty() || !args.prompts.empty())
            throw rrt::ArgumentError("pass either --workload or --trajectories with --prompts");
        workload = rrt::read_workload(args.workload);
    } else {
        if (args.trajectories.empty() || args.prompts.empty())
            throw rrt::ArgumentError("pass either --workload or --trajectories with --prompts");
        const auto exits = rrt::read_trajectories(args.trajectories);
        const auto prompts = rrt::read_prompts(args.prompts);
        if (prompts.size() != exits.size())
            throw rrt::ArgumentError("trajectory file has " + std::to_string(exits.size()) +
                                     " samples but prompt file has " + std::to_string(prompts.size()));
        for (size_t i = 0; i < exits.size(); ++i) {
            rrt::SimSample s;
            s.prompt_len = static_cast<int64_t>(prompts[i].size());
            s.n_tokens = static_cast<int64_t>(exits[i].size());
            s.exits = exits[i];
            workload.push_back(std::move(s));
        }
    }

    const rrt::TimingTable timing = rrt::read_timing_table(args.timing);
    std::vector<std::string> modes = args.modes;
    if (modes.empty()) modes = {"vanilla", "csb", "cdb"};

    std::vector<rrt::SimResult> results;
    std::vector<rrt::SimReport> reports;
    for (const auto& name : modes) {
        results.push_back(rrt::simulate(workload, rrt::parse_sim_mode(name), args.blocks,
                                        args.max_batch, timing, !args.events.empty()));
        reports.push_back(results.back().report);
    }
    const auto deltas = rrt::summarize(reports);

    std::printf("%-8s %8s %8s %14s %14s %6s %8s %9s %9s\n", "mode", "tokens", "steps", "time_s",
                "tokens_per_s", "peak", "mean", "delta_v", "delta_seq");
    for (size_t i = 0; i < reports.size(); ++i) {
        const rrt::SimReport& r = reports[i];
        std::printf("%-8s %8lld %8lld %14s %14s %6lld %8.3f %9s %9s\n",
                    rrt::to_string(r.mode).c_str(), static_cast<long long>(r.total_tokens),
                    static_cast<long long>(r.n_steps), fmt(r.total_time).c_str(),
                    fmt(r.throughput).c_str(), static_cast<long long>(r.peak_occupancy),
                    r.mean_occupancy, deltas[i].delta_v ? fmt(*deltas[i].delta_v).c_str() : "-",
                    deltas[i].delta_seq ? fmt(*deltas[i].delta_seq).c_str() : "-");
    }
    std::cout << "note: exited tokens are not charged for later-loop KV cache reads/writes; "
                 "reported speedups cover block compute only\n";

    if (!args.out.empty()) {
        auto out = open_out(args.out);
        for (size_t i = 0; i < reports.size(); ++i) out << report_to_json(reports[i], deltas[i]).dump() << "\n";
        out.flush();
        if (!out) throw rrt::IoError("short write to '" + args.out + "'");
    }
    if (!args.events.empty()) {
        auto out = open_out(args.events);
        for (size_t i = 0; i < results.size(); ++i) {
            for (const rrt::SimEvent& e : results[i].events) {
                json j;
                j["mode"] = rrt::to_string(reports[i].mode);
                switch (e.kind) {
                    case rrt::SimEvent::Kind::admit: j["kind"] = "admit"; break;
                    case rrt::SimEvent::Kind::advance: j["kind"] = "advance"; break;
                    case rrt::SimEvent::Kind::token_exit: j["kind"] = "token_exit"; break;
                    case rrt::SimEvent::Kind::sample_done: j["kind"] = "sample_done"; break;
                }
                j["step"] = e.step;
                j["sample"] = e.sample;
                if (e.kind != rrt::SimEvent::Kind::admit) {
                    j["token"] = e.token;
                    j["loop"] = e.loop;
                } else {
                    j["freed_step"] = e.freed_step;
                    j["first_compute_step"] = e.first_compute_step;
                }
                out << j.dump() << "\n";
            }
        }
        out.flush();
        if (!out) throw rrt::IoError("short write to '" + args.events + "'");
    }
    return 0;
}

// ---- loss-eval -------------------------------------------------------------

struct LossArgs {
    std::string ckpt;
    std::string prompts;
    std::string out;
    std::string scheme = "weighted";
    double coeff = 0.1;
    bool self_distill = false;
    std::string divergence;
};

int run_loss(const LossArgs& args) {
    const rrt::RecursiveModel model(rrt::read_checkpoint(args.ckpt));
    const auto prompts = rrt::read_prompts(args.prompts);
    const rrt::CoeffScheme scheme = rrt::parse_coeff_scheme(args.scheme);
    const int64_t n_loops = model.config().n_blocks;

    std::ofstream file;
    if (!args.out.empty()) file = open_out(args.out);

    std::vector<double> total_per_loop(static_cast<size_t>(n_loops), 0.0);
    std::vector<double> div_per_loop(static_cast<size_t>(n_loops), 0.0);
    double total = 0.0;
    for (size_t i = 0; i < prompts.size(); ++i) {
        const auto& prompt = prompts[i];
        if (prompt.size() < 2)
            throw rrt::ArgumentError("prompt " + std::to_string(i) +
                                     " needs at least 2 tokens for next-token targets");
        auto per_loop = model.forward(prompt);
        // Next-token objective: position t predicts token t+1.
        const std::vector<int32_t> targets(prompt.begin() + 1, prompt.end());
        for (auto& logits : per_loop) {
            rrt::Tensor trimmed({logits.rows() - 1, logits.cols()});
            std::copy(logits.data.begin(),
                      logits.data.begin() + trimmed.numel(), trimmed.data.begin());
            logits = std::move(trimmed);
        }
        const auto breakdown =
            rrt::early_exit_loss(per_loop, targets, scheme, args.coeff, args.self_distill);
        total += breakdown.total;
        for (size_t b = 0; b < breakdown.per_loop.size(); ++b)
            total_per_loop[b] += breakdown.per_loop[b];
        if (!args.divergence.empty()) {
            const rrt::Divergence kind = rrt::parse_divergence(args.divergence);
            for (int64_t b = 0; b < n_loops; ++b)
                div_per_loop[static_cast<size_t>(b)] += rrt::kd_divergence(
                    per_loop.back(), per_loop[static_cast<size_t>(b)], kind);
        }
        if (!args.out.empty()) {
            json j;
            j["sample"] = i;
            j["total"] = breakdown.total;
            j["per_loop"] = breakdown.per_loop;
            j["coefficients"] = breakdown.coefficients;
            file << j.dump() << "\n";
        }
    }
    const double n = static_cast<double>(prompts.size());
    const auto alphas = rrt::exit_coefficients(scheme, n_loops, args.coeff);
    std::cout << "scheme " << rrt::to_string(scheme) << (args.self_distill ? " + self-distill" : "")
              << " over " << prompts.size() << " prompts\n";
    for (int64_t b = 0; b < n_loops; ++b) {
        std::cout << "loop " << (b + 1) << ": alpha " << fmt(alphas[static_cast<size_t>(b)])
                  << "  mean loss " << fmt(total_per_loop[static_cast<size_t>(b)] / n);
        if (!args.divergence.empty())
            std::cout << "  mean " << args.divergence << " vs final "
                      << fmt(div_per_loop[static_cast<size_t>(b)] / n);
        std::cout << "\n";
    }
    std::cout << "mean weighted total " << fmt(total / n) << "\n";
    if (!args.out.empty()) {
        file.flush();
        if (!file) throw rrt::IoError("short write to '" + args.out + "'");
    }
    return 0;
}

// ---- inspect ---------------------------------------------------------------

int run_inspect(const std::string& path) {
    const rrt::Checkpoint ckpt = rrt::read_checkpoint(path);
    const auto& c = ckpt.config;
    json j;
    j["n_layers"] = c.n_layers;
    j["d_model"] = c.d_model;
    j["n_heads"] = c.n_heads;
    j["n_kv_heads"] = c.n_kv_heads;
    j["head_dim"] = c.head_dim;
    j["ffn_dim"] = c.ffn_dim;
    j["vocab_size"] = c.vocab_size;
    j["n_blocks"] = c.n_blocks;
    j["lora_rank"] = c.lora_rank;
    j["norm_eps"] = c.norm_eps;
    std::cout << "config " << j.dump() << "\n";
    int64_t total = 0;
    for (const auto& [name, tensor] : ckpt.tensors) {
        std::string shape;
        for (size_t i = 0; i < tensor.shape.size(); ++i)
            shape += (i ? "x" : "") + std::to_string(tensor.shape[i]);
        std::printf("%-32s %-12s %10lld\n", name.c_str(), shape.c_str(),
                    static_cast<long long>(tensor.numel()));
        total += tensor.numel();
    }
    std::cout << "total parameters " << total << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"convert, run, and profile looped-block transformer checkpoints"};
    app.require_subcommand(1);

    ConvertArgs convert_args;
    auto* convert = app.add_subcommand("convert", "convert a vanilla checkpoint to a looped one");
    convert->add_option("input", convert_args.input, "vanilla checkpoint")->required();
    convert->add_option("--out", convert_args.out, "output checkpoint")->required();
    convert->add_option("--blocks", convert_args.blocks, "number of loops over the shared block")
        ->required();
    convert->add_option("--init", convert_args.init, "stepwise|average|lower|random");
    convert->add_option("--norm-mode", convert_args.norm_mode, "avg|choice|zero (Average init)");
    convert->add_option("--lora-init", convert_args.lora_init, "svd|zero");
    convert->add_option("--lora-rank", convert_args.lora_rank, "adapter rank, 0 disables");
    convert->add_option("--seed", convert_args.seed, "seed for any random draws");

    ForwardArgs forward_args;
    auto* forward = app.add_subcommand("forward", "emit per-loop logits for a prompt file");
    forward->add_option("ckpt", forward_args.ckpt, "checkpoint")->required();
    forward->add_option("--prompts", forward_args.prompts, "token-id file, one prompt per line")
        ->required();
    forward->add_option("--out", forward_args.out, "logit record file (stdout when omitted)");
    forward->add_option("--compare", forward_args.compare,
                        "second checkpoint; reports max final-loop logit difference");

    TraceArgs trace_args;
    auto* trace = app.add_subcommand("oracle-trace", "greedy-decode and record oracle exit loops");
    trace->add_option("ckpt", trace_args.ckpt, "checkpoint")->required();
    trace->add_option("--prompts", trace_args.prompts, "token-id file")->required();
    trace->add_option("--n-new", trace_args.n_new, "tokens to generate per prompt");
    trace->add_option("--out", trace_args.out, "trajectory record file")->required();

    SimulateArgs sim_args;
    auto* simulate = app.add_subcommand("simulate", "replay exit trajectories through the "
                                                    "stage-step batching simulator");
    simulate->add_option("--workload", sim_args.workload, "workload record file");
    simulate->add_option("--trajectories", sim_args.trajectories, "trajectory record file");
    simulate->add_option("--prompts", sim_args.prompts, "prompt file matching --trajectories");
    simulate->add_option("--timing-table", sim_args.timing, "batch-size -> seconds table")
        ->required();
    simulate->add_option("--blocks", sim_args.blocks, "loop count of the simulated model")
        ->required();
    simulate->add_option("--max-batch", sim_args.max_batch, "batch capacity")->required();
    simulate->add_option("--mode", sim_args.modes, "vanilla|csb|cdb (repeatable; default all)");
    simulate->add_option("--out", sim_args.out, "machine-readable report file (JSON lines)");
    simulate->add_option("--events", sim_args.events, "event log file (JSON lines)");

    LossArgs loss_args;
    auto* loss = app.add_subcommand("loss-eval", "evaluate per-loop training objectives");
    loss->add_option("ckpt", loss_args.ckpt, "checkpoint")->required();
    loss->add_option("--prompts", loss_args.prompts, "token-id file")->required();
    loss->add_option("--scheme", loss_args.scheme, "weighted|aggressive");
    loss->add_option("--coeff", loss_args.coeff, "aggressive scheme coefficient");
    loss->add_flag("--self-distill", loss_args.self_distill,
                   "distill intermediate loops from the final loop");
    loss->add_option("--divergence", loss_args.divergence,
                     "also report fkl|rkl|jsd|tvd of each loop vs the final one");
    loss->add_option("--out", loss_args.out, "per-sample breakdown file (JSON lines)");

    std::string inspect_path;
    auto* inspect = app.add_subcommand("inspect", "print checkpoint config and tensor table");
    inspect->add_option("ckpt", inspect_path, "checkpoint")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 2;
    }

    try {
        if (*convert) return run_convert(convert_args);
        if (*forward) return run_forward(forward_args);
        if (*trace) return run_trace(trace_args);
        if (*simulate) return run_simulate(sim_args);
        if (*loss) return run_loss(loss_args);
        if (*inspect) return run_inspect(inspect_path);
    } catch (const rrt::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const rrt::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
