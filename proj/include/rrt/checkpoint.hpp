#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rrt/tensor.hpp"

namespace rrt {

// Geometry and looping structure of a model. A vanilla checkpoint is the
// special case n_blocks == 1 (every layer is its own slot and lora_rank == 0).
struct ModelConfig {
    int64_t n_layers = 0;    // total logical depth L = n_blocks * slots
    int64_t d_model = 0;
    int64_t n_heads = 0;
    int64_t n_kv_heads = 0;  // GQA groups; n_heads == n_kv_heads is plain MHA
    int64_t head_dim = 0;
    int64_t ffn_dim = 0;
    int64_t vocab_size = 0;
    int64_t n_blocks = 0;    // loops B over the shared block
    int64_t lora_rank = 0;   // per-loop adapter rank r; 0 = no adapters
    float norm_eps = 1e-6f;

    int64_t slots() const { return n_blocks > 0 ? n_layers / n_blocks : 0; }

    // Throws ValidationError naming the offending field.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

// In-memory checkpoint: a config plus named tensors. std::map keeps iteration
// (and therefore serialization) in deterministic name order.
struct Checkpoint {
    ModelConfig config;
    std::map<std::string, Tensor> tensors;
};

// The seven weight matrices of one layer, in their fixed file order.
const std::vector<std::string>& projection_names();

// (out, in) extents of a projection's weight for this geometry.
std::pair<int64_t, int64_t> projection_dims(const ModelConfig& config, const std::string& proj);

// Tensor-name builders for the naming contract:
//   embed.weight                     [vocab x d_model]
//   block.{k}.attn.{q,k,v,o}.weight  1-based slot k
//   block.{k}.ffn.{gate,up,down}.weight
//   block.{k}.norm_attn.gamma, block.{k}.norm_ffn.gamma
//   lora.{b}.{k}.{p}.a [r x in], lora.{b}.{k}.{p}.b [out x r]   1-based loop b
//   final_norm.gamma                 [d_model]
//   head.weight                      [vocab x d_model]
std::string block_weight_name(int64_t slot, const std::string& proj);
std::string block_norm_name(int64_t slot, const std::string& which);  // "attn" | "ffn"
std::string lora_name(int64_t loop, int64_t slot, const std::string& proj, char factor);

// Full name -> shape map a valid checkpoint with this config must contain.
std::map<std::string, std::vector<int64_t>> expected_tensor_shapes(const ModelConfig& config);

// Checks config validity, tensor-set completeness (no missing or stray
// names), and every shape; throws ValidationError naming the tensor or field.
void validate_checkpoint(const Checkpoint& ckpt);

// Container layout (all integers little-endian):
//   bytes 0..7    magic "RRTCKPT1"
//   bytes 8..11   uint32 version = 1
//   uint64 config length, then config JSON (UTF-8)
//   uint64 manifest length, then manifest JSON: array of
//          {"name": str, "shape": [int...], "offset": int}
//   zero padding to the next 64-byte boundary = payload start
//   raw float32 tensor data; each offset is relative to payload start and a
//   multiple of 64, regions ascending in manifest order and non-overlapping.
void write_checkpoint(const std::string& path, const Checkpoint& ckpt);

// Parses and fully validates a container. Structural problems raise
// CheckpointError with a distinct code (bad magic, bad version, truncated,
// overlapping regions, non-finite payload); semantic problems raise
// ValidationError; filesystem problems raise IoError.
Checkpoint read_checkpoint(const std::string& path);

}  // namespace rrt
