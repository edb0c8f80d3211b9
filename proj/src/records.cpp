#include "rrt/records.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace rrt {

namespace {

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

bool blank(const std::string& line) {
    return line.find_first_not_of(" \t\r") == std::string::npos;
}

ValidationError bad_line(const std::string& path, size_t lineno, const std::string& what) {
    return ValidationError(path + ":" + std::to_string(lineno), what);
}

// Parses every whitespace-separated field of `line` as int64.
std::vector<int64_t> parse_ints(const std::string& path, size_t lineno, const std::string& line) {
    std::istringstream ss(line);
    std::vector<int64_t> out;
    std::string field;
    while (ss >> field) {
        try {
            size_t used = 0;
            out.push_back(std::stoll(field, &used));
            if (used != field.size()) throw std::invalid_argument(field);
        } catch (const std::exception&) {
            throw bad_line(path, lineno, "expected integer, got '" + field + "'");
        }
    }
    return out;
}

std::string fmt_double(double value) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    return buf;
}

}  // namespace

std::vector<std::vector<int32_t>> read_prompts(const std::string& path) {
    std::vector<std::vector<int32_t>> prompts;
    const auto lines = read_lines(path);
    for (size_t i = 0; i < lines.size(); ++i) {
        if (blank(lines[i])) continue;
        const auto ids = parse_ints(path, i + 1, lines[i]);
        if (ids.empty()) continue;
        std::vector<int32_t> prompt;
        prompt.reserve(ids.size());
        for (int64_t id : ids) {
            if (id < 0 || id > INT32_MAX)
                throw bad_line(path, i + 1, "token id " + std::to_string(id) + " out of range");
            prompt.push_back(static_cast<int32_t>(id));
        }
        prompts.push_back(std::move(prompt));
    }
    if (prompts.empty()) throw ValidationError(path, "no prompts found");
    return prompts;
}

void write_trajectories(const std::string& path,
                        const std::vector<std::vector<int64_t>>& exits_per_sample) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    for (size_t sample = 0; sample < exits_per_sample.size(); ++sample)
        for (size_t token = 0; token < exits_per_sample[sample].size(); ++token)
            out << sample << ' ' << token << ' ' << exits_per_sample[sample][token] << '\n';
    out.flush();
    if (!out) throw IoError("short write to '" + path + "'");
}

std::vector<std::vector<int64_t>> read_trajectories(const std::string& path) {
    std::map<int64_t, std::map<int64_t, int64_t>> by_sample;
    const auto lines = read_lines(path);
    for (size_t i = 0; i < lines.size(); ++i) {
        if (blank(lines[i])) continue;
        const auto fields = parse_ints(path, i + 1, lines[i]);
        if (fields.size() != 3)
            throw bad_line(path, i + 1, "expected `sample token exit_loop`");
        const int64_t sample = fields[0], token = fields[1], exit_loop = fields[2];
        if (sample < 0 || token < 0 || exit_loop < 1)
            throw bad_line(path, i + 1, "negative id or exit loop < 1");
        if (!by_sample[sample].emplace(token, exit_loop).second)
            throw bad_line(path, i + 1, "duplicate (sample, token) pair");
    }
    if (by_sample.empty()) throw ValidationError(path, "no trajectory records found");

    std::vector<std::vector<int64_t>> out;
    out.reserve(by_sample.size());
    int64_t expect_sample = 0;
    for (const auto& [sample, tokens] : by_sample) {
        if (sample != expect_sample++)
            throw ValidationError(path, "sample ids must cover 0..S-1, missing " +
                                            std::to_string(expect_sample - 1));
        std::vector<int64_t> exits;
        exits.reserve(tokens.size());
        int64_t expect_token = 0;
        for (const auto& [token, exit_loop] : tokens) {
            if (token != expect_token++)
                throw ValidationError(path, "sample " + std::to_string(sample) +
                                                " is missing token " +
                                                std::to_string(expect_token - 1));
            exits.push_back(exit_loop);
        }
        out.push_back(std::move(exits));
    }
    return out;
}

TimingTable read_timing_table(const std::string& path) {
    TimingTable table;
    const auto lines = read_lines(path);
    for (size_t i = 0; i < lines.size(); ++i) {
        if (blank(lines[i])) continue;
        std::istringstream ss(lines[i]);
        int64_t size = 0;
        double seconds = 0.0;
        if (!(ss >> size >> seconds))
            throw bad_line(path, i + 1, "expected `batch_size per_token_seconds`");
        std::string rest;
        if (ss >> rest) throw bad_line(path, i + 1, "trailing fields after `" + rest + "'");
        table.entries.emplace_back(size, seconds);
    }
    if (table.entries.empty()) throw ValidationError(path, "no timing entries found");
    return table;
}

void write_timing_table(const std::string& path, const TimingTable& table) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    for (const auto& [size, seconds] : table.entries)
        out << size << ' ' << fmt_double(seconds) << '\n';
    out.flush();
    if (!out) throw IoError("short write to '" + path + "'");
}

std::vector<SimSample> read_workload(const std::string& path) {
    std::vector<SimSample> workload;
    const auto lines = read_lines(path);
    for (size_t i = 0; i < lines.size(); ++i) {
        if (blank(lines[i])) continue;
        const auto fields = parse_ints(path, i + 1, lines[i]);
        if (fields.size() < 2)
            throw bad_line(path, i + 1, "expected `prompt_len n_tokens exit_1 .. exit_n`");
        SimSample s;
        s.prompt_len = fields[0];
        s.n_tokens = fields[1];
        if (static_cast<int64_t>(fields.size()) - 2 != s.n_tokens)
            throw bad_line(path, i + 1,
                           "expected " + std::to_string(s.n_tokens) + " exit loops, got " +
                               std::to_string(fields.size() - 2));
        s.exits.assign(fields.begin() + 2, fields.end());
        workload.push_back(std::move(s));
    }
    if (workload.empty()) throw ValidationError(path, "no workload samples found");
    return workload;
}

void write_workload(const std::string& path, const std::vector<SimSample>& workload) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    for (const SimSample& s : workload) {
        out << s.prompt_len << ' ' << s.n_tokens;
        for (int64_t e : s.exits) out << ' ' << e;
        out << '\n';
    }
    out.flush();
    if (!out) throw IoError("short write to '" + path + "'");
}

void write_logit_records(std::ostream& out, int64_t sample_id,
                         const std::vector<Tensor>& per_loop_logits) {
    char buf[64];
    for (size_t b = 0; b < per_loop_logits.size(); ++b) {
        const Tensor& logits = per_loop_logits[b];
        for (int64_t t = 0; t < logits.rows(); ++t) {
            out << sample_id << ' ' << (b + 1) << ' ' << t;
            for (int64_t j = 0; j < logits.cols(); ++j) {
                std::snprintf(buf, sizeof(buf), "%.8e", static_cast<double>(logits.at(t, j)));
                out << ' ' << buf;
            }
            out << '\n';
        }
    }
}

}  // namespace rrt
