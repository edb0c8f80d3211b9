#include "rrt/model.hpp"

#include <cmath>

namespace rrt {

Tensor attention(const Tensor& q, const Tensor& keys, const Tensor& values, int64_t n_heads,
                 int64_t n_kv_heads, int64_t head_dim, int64_t causal_from) {
    const int64_t q_len = q.rows();
    const int64_t seen = keys.rows();
    if (q.cols() != n_heads * head_dim)
        throw ShapeError("attention: q width " + std::to_string(q.cols()) + " != n_heads*head_dim");
    if (keys.cols() != n_kv_heads * head_dim || !keys.same_shape(values))
        throw ShapeError("attention: key/value width != n_kv_heads*head_dim");
    if (causal_from + q_len > seen)
        throw ShapeError("attention: cache holds " + std::to_string(seen) +
                         " positions, queries end at " + std::to_string(causal_from + q_len));

    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    const float sentinel = neg_inf_sentinel();
    const int64_t kv_width = n_kv_heads * head_dim;
    Tensor out({q_len, n_heads * head_dim});

    for (int64_t h = 0; h < n_heads; ++h) {
        const int64_t group = h * n_kv_heads / n_heads;
        Tensor scores({q_len, seen});
        for (int64_t i = 0; i < q_len; ++i) {
            const float* qrow = q.data.data() + i * q.cols() + h * head_dim;
            const int64_t last_visible = causal_from + i;
            for (int64_t t = 0; t < seen; ++t) {
                if (t > last_visible) {
                    scores.data[i * seen + t] = sentinel;
                    continue;
                }
                const float* krow = keys.data.data() + t * kv_width + group * head_dim;
                double acc = 0.0;
                for (int64_t c = 0; c < head_dim; ++c)
                    acc += static_cast<double>(qrow[c]) * static_cast<double>(krow[c]);
                scores.data[i * seen + t] = static_cast<float>(acc * inv_scale);
            }
        }
        const Tensor probs = softmax_rows(scores);
        for (int64_t i = 0; i < q_len; ++i) {
            for (int64_t c = 0; c < head_dim; ++c) {
                double acc = 0.0;
                for (int64_t t = 0; t <= causal_from + i && t < seen; ++t)
                    acc += static_cast<double>(probs.data[i * seen + t]) *
                           static_cast<double>(values.data[t * kv_width + group * head_dim + c]);
                out.data[i * out.cols() + h * head_dim + c] = static_cast<float>(acc);
            }
        }
    }
    return out;
}

RecursiveModel::RecursiveModel(Checkpoint ckpt) {
    validate_checkpoint(ckpt);
    config_ = ckpt.config;
    embed_ = ckpt.tensors.at("embed.weight");
    final_norm_ = ckpt.tensors.at("final_norm.gamma");
    head_t_ = transpose(ckpt.tensors.at("head.weight"));

    const int64_t slots = config_.slots();
    const auto& projs = projection_names();
    slots_.resize(static_cast<size_t>(slots));
    for (int64_t k = 1; k <= slots; ++k) {
        SlotWeights& sw = slots_[static_cast<size_t>(k - 1)];
        sw.wt.reserve(projs.size());
        for (const auto& proj : projs)
            sw.wt.push_back(transpose(ckpt.tensors.at(block_weight_name(k, proj))));
        sw.norm_attn = ckpt.tensors.at(block_norm_name(k, "attn"));
        sw.norm_ffn = ckpt.tensors.at(block_norm_name(k, "ffn"));
    }
    if (config_.lora_rank > 0) {
        adapters_.resize(static_cast<size_t>(config_.n_blocks * slots));
        for (int64_t b = 1; b <= config_.n_blocks; ++b) {
            for (int64_t k = 1; k <= slots; ++k) {
                LoopAdapters& la = adapters_[static_cast<size_t>((b - 1) * slots + (k - 1))];
                la.at.reserve(projs.size());
                la.bt.reserve(projs.size());
                for (const auto& proj : projs) {
                    la.at.push_back(transpose(ckpt.tensors.at(lora_name(b, k, proj, 'a'))));
                    la.bt.push_back(transpose(ckpt.tensors.at(lora_name(b, k, proj, 'b'))));
                }
            }
        }
    }
}

KvCache RecursiveModel::make_cache() const {
    KvCache cache;
    cache.entries.resize(static_cast<size_t>(config_.n_blocks * config_.slots()));
    return cache;
}

Tensor RecursiveModel::project(const Tensor& x, int64_t loop, int64_t slot, size_t proj) const {
    const SlotWeights& sw = slots_[static_cast<size_t>(slot - 1)];
    Tensor y = matmul(x, sw.wt[proj]);
    if (config_.lora_rank > 0) {
        const LoopAdapters& la =
            adapters_[static_cast<size_t>((loop - 1) * config_.slots() + (slot - 1))];
        y = add(y, matmul(matmul(x, la.at[proj]), la.bt[proj]));
    }
    return y;
}

Tensor RecursiveModel::layer_forward(Tensor h, int64_t loop, int64_t slot, KvCache::Entry& entry,
                                     int64_t causal_from) const {
    enum { kQ, kK, kV, kO, kGate, kUp, kDown };
    const SlotWeights& sw = slots_[static_cast<size_t>(slot - 1)];
    const int64_t kv_width = config_.n_kv_heads * config_.head_dim;

    Tensor x = rms_norm(h, sw.norm_attn, config_.norm_eps);
    Tensor q = project(x, loop, slot, kQ);
    Tensor k_new = project(x, loop, slot, kK);
    Tensor v_new = project(x, loop, slot, kV);
    entry.keys.insert(entry.keys.end(), k_new.data.begin(), k_new.data.end());
    entry.values.insert(entry.values.end(), v_new.data.begin(), v_new.data.end());

    const int64_t seen = static_cast<int64_t>(entry.keys.size()) / kv_width;
    Tensor keys({seen, kv_width}, entry.keys);
    Tensor values({seen, kv_width}, entry.values);
    Tensor att = attention(q, keys, values, config_.n_heads, config_.n_kv_heads, config_.head_dim,
                           causal_from);
    h = add(h, project(att, loop, slot, kO));

    Tensor y = rms_norm(h, sw.norm_ffn, config_.norm_eps);
    Tensor gated = gelu(project(y, loop, slot, kGate));
    Tensor up = project(y, loop, slot, kUp);
    for (size_t i = 0; i < gated.data.size(); ++i) gated.data[i] *= up.data[i];
    h = add(h, project(gated, loop, slot, kDown));
    return h;
}

Tensor RecursiveModel::exit_logits(const Tensor& h) const {
    return matmul(rms_norm(h, final_norm_, config_.norm_eps), head_t_);
}

std::vector<Tensor> RecursiveModel::forward(const std::vector<int32_t>& tokens,
                                            KvCache& cache) const {
    if (tokens.empty()) throw ArgumentError("forward: empty token sequence");
    const int64_t expected_entries = config_.n_blocks * config_.slots();
    if (static_cast<int64_t>(cache.entries.size()) != expected_entries)
        throw ArgumentError("forward: cache has " + std::to_string(cache.entries.size()) +
                            " entries, model needs " + std::to_string(expected_entries));
    const int64_t kv_width = config_.n_kv_heads * config_.head_dim;
    for (const auto& entry : cache.entries)
        if (static_cast<int64_t>(entry.keys.size()) != cache.seen * kv_width ||
            static_cast<int64_t>(entry.values.size()) != cache.seen * kv_width)
            throw ArgumentError("forward: cache entries disagree on seen length");

    const int64_t seq = static_cast<int64_t>(tokens.size());
    Tensor h({seq, config_.d_model});
    for (int64_t i = 0; i < seq; ++i) {
        const int32_t id = tokens[static_cast<size_t>(i)];
        if (id < 0 || id >= config_.vocab_size)
            throw ArgumentError("forward: token id " + std::to_string(id) + " outside vocab of " +
                                std::to_string(config_.vocab_size));
        for (int64_t j = 0; j < config_.d_model; ++j)
            h.data[i * config_.d_model + j] = embed_.data[id * config_.d_model + j];
    }

    const int64_t causal_from = cache.seen;
    std::vector<Tensor> per_loop;
    per_loop.reserve(static_cast<size_t>(config_.n_blocks));
    for (int64_t b = 1; b <= config_.n_blocks; ++b) {
        for (int64_t k = 1; k <= config_.slots(); ++k) {
            KvCache::Entry& entry =
                cache.entries[static_cast<size_t>((b - 1) * config_.slots() + (k - 1))];
            h = layer_forward(std::move(h), b, k, entry, causal_from);
        }
        per_loop.push_back(exit_logits(h));
    }
    cache.seen += seq;
    return per_loop;
}

std::vector<Tensor> RecursiveModel::forward(const std::vector<int32_t>& tokens) const {
    KvCache cache = make_cache();
    return forward(tokens, cache);
}

RecursiveModel::DecodeResult RecursiveModel::decode_greedy(const std::vector<int32_t>& prompt,
                                                           int64_t n_new) const {
    if (n_new < 0) throw ArgumentError("decode_greedy: n_new must be >= 0");
    DecodeResult result;
    result.cache = make_cache();
    result.prompt_logits = forward(prompt, result.cache);

    const int64_t n_loops = config_.n_blocks;
    auto last_row = [&](const Tensor& logits) {
        Tensor row({1, config_.vocab_size});
        const int64_t last = logits.rows() - 1;
        for (int64_t j = 0; j < config_.vocab_size; ++j)
            row.data[static_cast<size_t>(j)] = logits.at(last, j);
        return row;
    };

    std::vector<Tensor> current;  // per-loop logits at the newest position
    current.reserve(static_cast<size_t>(n_loops));
    for (const Tensor& logits : result.prompt_logits) current.push_back(last_row(logits));

    for (int64_t i = 0; i < n_new; ++i) {
        const int32_t next =
            static_cast<int32_t>(row_argmax(current[static_cast<size_t>(n_loops - 1)], 0));
        result.generated.push_back(next);
        result.step_logits.push_back(current);
        if (i + 1 < n_new) {
            const std::vector<Tensor> step = forward({next}, result.cache);
            current.clear();
            for (const Tensor& logits : step) current.push_back(last_row(logits));
        }
    }
    return result;
}

}  // namespace rrt
