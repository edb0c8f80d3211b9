#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rrt/error.hpp"

namespace rrt {

// One queued request: a prompt of prompt_len tokens (bookkeeping only — the
// timing table already amortizes prefix cost) followed by n_tokens decode
// steps whose per-token exit loops are given by `exits` (1-based, one per
// token, each <= the simulated loop count).
struct SimSample {
    int64_t prompt_len = 0;
    int64_t n_tokens = 0;
    std::vector<int64_t> exits;
};

// batch size -> per-token seconds for a full forward across all loops.
// Lookup rounds the queried occupancy UP to the nearest tabulated size, so the
// listed sizes must reach max_batch.
struct TimingTable {
    std::vector<std::pair<int64_t, double>> entries;  // ascending unique sizes

    void validate(int64_t max_batch) const;
    double per_token_seconds(int64_t batch) const;
};

enum class SimMode { vanilla, csb, cdb };

SimMode parse_sim_mode(const std::string& s);
std::string to_string(SimMode mode);

struct SimEvent {
    enum class Kind { admit, advance, token_exit, sample_done };
    Kind kind;
    int64_t step = 0;    // 1-based stage-step the event belongs to
    int64_t sample = 0;  // workload index
    int64_t token = 0;   // 0-based token within the sample (-1 for admit)
    int64_t loop = 0;    // 1-based loop depth (0 when not applicable)
    // For admit events: the step whose completion freed the slot (0 for a cold
    // slot) and the first step the sample actually computes. Recorded so the
    // same-step (continuous depth-wise) vs next-step (continuous sequence-wise)
    // refill conventions stay auditable.
    int64_t freed_step = 0;
    int64_t first_compute_step = 0;
};

struct SimReport {
    SimMode mode = SimMode::vanilla;
    int64_t n_samples = 0;
    int64_t total_tokens = 0;
    int64_t n_steps = 0;
    double total_time = 0.0;
    double throughput = 0.0;       // tokens per second
    int64_t peak_occupancy = 0;    // widest per-step kernel
    double mean_occupancy = 0.0;
    std::vector<double> stage_utilization;  // per loop depth, fraction of max_batch
};

struct SimResult {
    SimReport report;
    std::vector<int64_t> occupancy;  // per stage-step kernel width
    std::vector<SimEvent> events;
};

// Discrete stage-step simulation of serving a looped model with n_loops
// stages. Time advances one stage-step at a time; each step advances every
// live (sample, token, loop) tuple one loop and costs
// per_token_seconds(step occupancy) / n_loops, where a step's occupancy is its
// widest same-depth group (never above max_batch, asserted).
//
// All samples are queued up front, admitted FIFO:
//   vanilla — one batch at a time; every token runs all n_loops stages (exits
//             ignored); the next batch is admitted only after the whole batch
//             finishes. Finished samples stop computing but their slots are
//             not refilled.
//   csb     — lockstep like vanilla, but a slot freed by a finished sample is
//             refilled from the queue on the following stage-step (always a
//             cycle boundary).
//   cdb     — tuples at different loop depths share a step; a token completes
//             at its exit loop, the sample's next token enters at loop 1 on
//             the next step, and an exhausted sample frees capacity the same
//             step so a queued sample can compute on the very next one. Each
//             depth group is capped at max_batch.
SimResult simulate(const std::vector<SimSample>& workload, SimMode mode, int64_t n_loops,
                   int64_t max_batch, const TimingTable& timing, bool record_events = false);

// Speedups over the two baselines: delta_v = throughput / vanilla throughput,
// delta_seq = throughput / csb throughput. A delta is absent when its
// baseline mode is not among the reports. All reports must describe the same
// workload (sample and token counts).
struct DeltaRow {
    SimMode mode;
    double throughput = 0.0;
    std::optional<double> delta_v;
    std::optional<double> delta_seq;
};

std::vector<DeltaRow> summarize(const std::vector<SimReport>& reports);

}  // namespace rrt
