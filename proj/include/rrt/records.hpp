#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "rrt/sim.hpp"
#include "rrt/tensor.hpp"

namespace rrt {

// Line-delimited text formats. All parsers skip blank lines, reject anything
// else malformed with a ValidationError naming the line, and raise IoError
// for filesystem failures. All writers emit deterministic bytes for equal
// inputs.

// Prompt file: one prompt per line, whitespace-separated token ids.
std::vector<std::vector<int32_t>> read_prompts(const std::string& path);

// Trajectory records: `sample_id token_index exit_loop` per line, written
// sample-major with token_index ascending from 0. The reader accepts any line
// order but requires every sample 0..S-1 to carry a complete 0..n-1 token
// range.
void write_trajectories(const std::string& path,
                        const std::vector<std::vector<int64_t>>& exits_per_sample);
std::vector<std::vector<int64_t>> read_trajectories(const std::string& path);

// Timing table: `batch_size per_token_seconds` per line, sizes ascending.
TimingTable read_timing_table(const std::string& path);
void write_timing_table(const std::string& path, const TimingTable& table);

// Workload: `prompt_len n_tokens exit_1 .. exit_n` per line.
std::vector<SimSample> read_workload(const std::string& path);
void write_workload(const std::string& path, const std::vector<SimSample>& workload);

// Logit records: `sample_id loop token_index v_0 .. v_{vocab-1}` per line,
// one line per (loop, position), loops 1-based, positions 0-based.
void write_logit_records(std::ostream& out, int64_t sample_id,
                         const std::vector<Tensor>& per_loop_logits);

}  // namespace rrt
