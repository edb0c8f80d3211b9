#pragma once

#include <cstdint>
#include <vector>

#include "rrt/checkpoint.hpp"

namespace rrt {

// Per-(loop, slot) key/value history. Each entry stores `seen` rows of width
// n_kv_heads * head_dim, appended as positions are processed; every entry
// always holds exactly `seen` rows.
struct KvCache {
    struct Entry {
        std::vector<float> keys;
        std::vector<float> values;
    };
    int64_t seen = 0;
    std::vector<Entry> entries;  // n_blocks * slots of them, loop-major
};

// Grouped-query causal attention on already-projected inputs.
//   q:            [q_len x n_heads*head_dim]
//   keys, values: [seen x n_kv_heads*head_dim]
//   causal_from:  absolute position of q's first row; row i may attend
//                 key positions 0 .. causal_from+i only.
// Head h reads KV group floor(h * n_kv_heads / n_heads); scores are scaled by
// 1/sqrt(head_dim), masked positions get the -inf sentinel, each row is
// softmaxed, and the result is the probability-weighted value sum, laid out
// [q_len x n_heads*head_dim].
Tensor attention(const Tensor& q, const Tensor& keys, const Tensor& values, int64_t n_heads,
                 int64_t n_kv_heads, int64_t head_dim, int64_t causal_from);

// A looped-block decoder. One logical forward runs the K shared slots
// n_blocks times; every projection adds its per-loop low-rank delta
// B(A(x)) when lora_rank > 0; exit logits for loop b come from applying the
// shared final norm + head after the b-th pass. Token positions carry no
// positional encoding; order enters only through the causal mask.
class RecursiveModel {
  public:
    explicit RecursiveModel(Checkpoint ckpt);  // validates the checkpoint

    const ModelConfig& config() const { return config_; }

    KvCache make_cache() const;

    // Runs `tokens` through the model on top of the cache state, appending
    // their keys/values. Returns per-loop logits for the new positions, each
    // [tokens.size() x vocab]; element n_blocks-1 is the final exit.
    std::vector<Tensor> forward(const std::vector<int32_t>& tokens, KvCache& cache) const;

    // Fresh-cache convenience overload.
    std::vector<Tensor> forward(const std::vector<int32_t>& tokens) const;

    struct DecodeResult {
        std::vector<int32_t> generated;
        // Per-loop logits over the prompt positions, each [prompt_len x vocab].
        std::vector<Tensor> prompt_logits;
        // step_logits[i][b] is the [1 x vocab] loop-(b+1) logit row that
        // predicted generated[i].
        std::vector<std::vector<Tensor>> step_logits;
        KvCache cache;
    };

    // Greedy decoding (argmax of the final loop's logits, lowest index on
    // ties). n_new == 0 yields prompt logits only. The returned cache covers
    // the prompt plus all generated tokens except the last (which was never
    // fed back).
    DecodeResult decode_greedy(const std::vector<int32_t>& prompt, int64_t n_new) const;

  private:
    struct SlotWeights {
        std::vector<Tensor> wt;  // transposed projection weights, [in x out]
        Tensor norm_attn;
        Tensor norm_ffn;
    };
    struct LoopAdapters {
        std::vector<Tensor> at;  // [in x r]
        std::vector<Tensor> bt;  // [r x out]
    };

    Tensor project(const Tensor& x, int64_t loop, int64_t slot, size_t proj) const;
    Tensor layer_forward(Tensor h, int64_t loop, int64_t slot, KvCache::Entry& entry,
                         int64_t causal_from) const;
    Tensor exit_logits(const Tensor& h) const;

    ModelConfig config_;
    Tensor embed_;                        // [vocab x d_model]
    Tensor final_norm_;                   // [d_model]
    Tensor head_t_;                       // [d_model x vocab]
    std::vector<SlotWeights> slots_;      // k-1
    std::vector<LoopAdapters> adapters_;  // (b-1)*slots + (k-1), empty if rank 0
};

}  // namespace rrt
