#include "rrt/sim.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

namespace rrt {

void TimingTable::validate(int64_t max_batch) const {
    if (entries.empty()) throw ValidationError("timing_table", "no entries");
    int64_t prev = 0;
    for (const auto& [size, seconds] : entries) {
        if (size <= prev)
            throw ValidationError("timing_table",
                                  "batch sizes must be positive and strictly ascending");
        if (!(seconds > 0.0) || !std::isfinite(seconds))
            throw ValidationError("timing_table", "per-token seconds must be finite and > 0");
        prev = size;
    }
    if (entries.back().first < max_batch)
        throw ValidationError("timing_table",
                              "largest listed batch size " + std::to_string(entries.back().first) +
                                  " does not cover max_batch " + std::to_string(max_batch));
}

double TimingTable::per_token_seconds(int64_t batch) const {
    // Round the occupancy up to the nearest tabulated size.
    for (const auto& [size, seconds] : entries)
        if (size >= batch) return seconds;
    throw ArgumentError("timing table does not cover batch size " + std::to_string(batch));
}

SimMode parse_sim_mode(const std::string& s) {
    if (s == "vanilla") return SimMode::vanilla;
    if (s == "csb") return SimMode::csb;
    if (s == "cdb") return SimMode::cdb;
    throw ArgumentError("unknown simulation mode '" + s + "'");
}

std::string to_string(SimMode mode) {
    switch (mode) {
        case SimMode::vanilla: return "vanilla";
        case SimMode::csb: return "csb";
        case SimMode::cdb: return "cdb";
    }
    return "?";
}

namespace {

void validate_workload(const std::vector<SimSample>& workload, int64_t n_loops) {
    if (workload.empty()) throw ArgumentError("simulate: empty workload");
    for (size_t i = 0; i < workload.size(); ++i) {
        const SimSample& s = workload[i];
        const std::string where = "workload[" + std::to_string(i) + "]";
        if (s.prompt_len < 0) throw ValidationError(where + ".prompt_len", "must be >= 0");
        if (s.n_tokens < 1) throw ValidationError(where + ".n_tokens", "must be >= 1");
        if (static_cast<int64_t>(s.exits.size()) != s.n_tokens)
            throw ValidationError(where + ".exits", "trajectory length " +
                                                        std::to_string(s.exits.size()) +
                                                        " != n_tokens " + std::to_string(s.n_tokens));
        for (int64_t e : s.exits)
            if (e < 1 || e > n_loops)
                throw ValidationError(where + ".exits",
                                      "exit loop " + std::to_string(e) + " outside [1, " +
                                          std::to_string(n_loops) + "]");
    }
}

// Shared bookkeeping for one simulation run.
struct Run {
    SimResult result;
    std::vector<double> depth_width_sum;  // per 1-based depth
    double time = 0.0;
    int64_t step = 0;

    explicit Run(int64_t n_loops) : depth_width_sum(static_cast<size_t>(n_loops) + 1, 0.0) {}

    void emit(SimEvent event, bool record) {
        if (record) result.events.push_back(event);
    }

    // Charges one stage-step whose per-depth widths are given; occupancy is
    // the widest same-depth kernel.
    void charge(const std::vector<int64_t>& widths, int64_t max_batch, int64_t n_loops,
                const TimingTable& timing) {
        int64_t occ = 0;
        for (size_t d = 1; d < widths.size(); ++d) {
            if (widths[d] > max_batch)
                throw Error("internal: stage occupancy " + std::to_string(widths[d]) +
                            " exceeds max_batch " + std::to_string(max_batch));
            depth_width_sum[d] += static_cast<double>(widths[d]);
            occ = std::max(occ, widths[d]);
        }
        result.occupancy.push_back(occ);
        time += timing.per_token_seconds(occ) / static_cast<double>(n_loops);
    }

    SimResult finish(SimMode mode, const std::vector<SimSample>& workload, int64_t n_loops,
                     int64_t max_batch) {
        SimReport& r = result.report;
        r.mode = mode;
        r.n_samples = static_cast<int64_t>(workload.size());
        r.total_tokens = 0;
        for (const SimSample& s : workload) r.total_tokens += s.n_tokens;
        r.n_steps = step;
        r.total_time = time;
        r.throughput = time > 0.0 ? static_cast<double>(r.total_tokens) / time : 0.0;
        int64_t peak = 0;
        double sum = 0.0;
        for (int64_t occ : result.occupancy) {
            peak = std::max(peak, occ);
            sum += static_cast<double>(occ);
        }
        r.peak_occupancy = peak;
        r.mean_occupancy = step > 0 ? sum / static_cast<double>(step) : 0.0;
        r.stage_utilization.resize(static_cast<size_t>(n_loops));
        for (int64_t d = 1; d <= n_loops; ++d)
            r.stage_utilization[static_cast<size_t>(d - 1)] =
                step > 0 ? depth_width_sum[static_cast<size_t>(d)] /
                               (static_cast<double>(step) * static_cast<double>(max_batch))
                         : 0.0;
        return std::move(result);
    }
};

// vanilla and csb: all occupants advance through the n_loops stages in
// lockstep; they differ only in when freed slots are refilled.
SimResult simulate_lockstep(const std::vector<SimSample>& workload, SimMode mode, int64_t n_loops,
                            int64_t max_batch, const TimingTable& timing, bool record) {
    Run run(n_loops);
    struct Slot {
        int64_t sample;
        int64_t tokens_done;
    };
    std::vector<Slot> active;
    std::deque<int64_t> freed_steps;
    size_t next_sample = 0;

    const auto admit = [&]() {
        while (static_cast<int64_t>(active.size()) < max_batch && next_sample < workload.size()) {
            const int64_t sample = static_cast<int64_t>(next_sample++);
            active.push_back({sample, 0});
            int64_t freed = 0;
            if (!freed_steps.empty()) {
                freed = freed_steps.front();
                freed_steps.pop_front();
            }
            run.emit({SimEvent::Kind::admit, run.step + 1, sample, -1, 0, freed, run.step + 1},
                     record);
        }
    };

    while (!active.empty() || next_sample < workload.size()) {
        if (mode == SimMode::csb || active.empty()) admit();

        // One decode cycle: every active sample's current token runs all stages.
        const int64_t occ = static_cast<int64_t>(active.size());
        for (int64_t depth = 1; depth <= n_loops; ++depth) {
            ++run.step;
            std::vector<int64_t> widths(static_cast<size_t>(n_loops) + 1, 0);
            widths[static_cast<size_t>(depth)] = occ;
            run.charge(widths, max_batch, n_loops, timing);
            for (const Slot& slot : active)
                run.emit({SimEvent::Kind::advance, run.step, slot.sample, slot.tokens_done, depth,
                          0, 0},
                         record);
        }

        std::vector<Slot> still_active;
        for (Slot& slot : active) {
            run.emit({SimEvent::Kind::token_exit, run.step, slot.sample, slot.tokens_done, n_loops,
                      0, 0},
                     record);
            ++slot.tokens_done;
            if (slot.tokens_done == workload[static_cast<size_t>(slot.sample)].n_tokens) {
                run.emit({SimEvent::Kind::sample_done, run.step, slot.sample, slot.tokens_done - 1,
                          n_loops, 0, 0},
                         record);
                freed_steps.push_back(run.step);
            } else {
                still_active.push_back(slot);
            }
        }
        active = std::move(still_active);
    }
    return run.finish(mode, workload, n_loops, max_batch);
}

SimResult simulate_cdb(const std::vector<SimSample>& workload, int64_t n_loops, int64_t max_batch,
                       const TimingTable& timing, bool record) {
    Run run(n_loops);
    struct Tuple {
        int64_t sample;
        int64_t token;
        int64_t loop;
    };
    std::vector<Tuple> active;
    // Next tokens of in-flight samples waiting for loop-1 capacity; they beat
    // queue admissions to it.
    std::deque<Tuple> rollover;
    std::deque<int64_t> freed_steps;
    size_t next_sample = 0;

    while (!active.empty() || !rollover.empty() || next_sample < workload.size()) {
        ++run.step;

        // Fill loop-1 capacity: rolled-over tokens first, then fresh samples.
        int64_t width1 = 0;
        for (const Tuple& t : active) width1 += t.loop == 1 ? 1 : 0;
        while (!rollover.empty() && width1 < max_batch) {
            active.push_back(rollover.front());
            rollover.pop_front();
            ++width1;
        }
        while (next_sample < workload.size() && width1 < max_batch) {
            const int64_t sample = static_cast<int64_t>(next_sample++);
            active.push_back({sample, 0, 1});
            ++width1;
            int64_t freed = 0;
            if (!freed_steps.empty()) {
                freed = freed_steps.front();
                freed_steps.pop_front();
            }
            run.emit({SimEvent::Kind::admit, run.step, sample, -1, 0, freed, run.step}, record);
        }

        std::vector<int64_t> widths(static_cast<size_t>(n_loops) + 1, 0);
        for (const Tuple& t : active) ++widths[static_cast<size_t>(t.loop)];
        run.charge(widths, max_batch, n_loops, timing);

        std::vector<Tuple> still_active;
        for (const Tuple& t : active) {
            run.emit({SimEvent::Kind::advance, run.step, t.sample, t.token, t.loop, 0, 0}, record);
            const SimSample& s = workload[static_cast<size_t>(t.sample)];
            if (t.loop == s.exits[static_cast<size_t>(t.token)]) {
                run.emit({SimEvent::Kind::token_exit, run.step, t.sample, t.token, t.loop, 0, 0},
                         record);
                if (t.token + 1 < s.n_tokens) {
                    rollover.push_back({t.sample, t.token + 1, 1});
                } else {
                    run.emit({SimEvent::Kind::sample_done, run.step, t.sample, t.token, t.loop, 0,
                              0},
                             record);
                    freed_steps.push_back(run.step);
                }
            } else {
                still_active.push_back({t.sample, t.token, t.loop + 1});
            }
        }
        active = std::move(still_active);
    }
    return run.finish(SimMode::cdb, workload, n_loops, max_batch);
}

}  // namespace

SimResult simulate(const std::vector<SimSample>& workload, SimMode mode, int64_t n_loops,
                   int64_t max_batch, const TimingTable& timing, bool record_events) {
    if (n_loops < 1) throw ArgumentError("simulate: n_loops must be >= 1");
    if (max_batch < 1) throw ArgumentError("simulate: max_batch must be >= 1");
    timing.validate(max_batch);
    validate_workload(workload, n_loops);
    if (mode == SimMode::cdb)
        return simulate_cdb(workload, n_loops, max_batch, timing, record_events);
    return simulate_lockstep(workload, mode, n_loops, max_batch, timing, record_events);
}

std::vector<DeltaRow> summarize(const std::vector<SimReport>& reports) {
    if (reports.empty()) throw ArgumentError("summarize: no reports");
    for (const SimReport& r : reports)
        if (r.n_samples != reports.front().n_samples ||
            r.total_tokens != reports.front().total_tokens)
            throw ArgumentError("summarize: reports describe different workloads");

    std::optional<double> vanilla, csb;
    for (const SimReport& r : reports) {
        if (r.mode == SimMode::vanilla) vanilla = r.throughput;
        if (r.mode == SimMode::csb) csb = r.throughput;
    }
    std::vector<DeltaRow> rows;
    rows.reserve(reports.size());
    for (const SimReport& r : reports) {
        DeltaRow row;
        row.mode = r.mode;
        row.throughput = r.throughput;
        if (vanilla && *vanilla > 0.0) row.delta_v = r.throughput / *vanilla;
        if (csb && *csb > 0.0) row.delta_seq = r.throughput / *csb;
        rows.push_back(row);
    }
    return rows;
}

}  // namespace rrt
