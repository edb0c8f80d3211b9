#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rrt/checkpoint.hpp"

namespace rrt {

// How the shared block's slot weights are assembled from the vanilla layers.
enum class BlockInit { stepwise, average, lower, random };

// How Average treats the RMSNorm gammas (projections are always averaged):
// avg = elementwise mean, choice = copy from the first mapped layer,
// zero = all zeros.
enum class NormMode { avg, choice, zero };

// svd = truncated-SVD of the residual W_l - W'_slot; zero = Gaussian A and
// zero B everywhere (adapters start as a no-op).
enum class LoraInit { svd, zero };

BlockInit parse_block_init(const std::string& s);
NormMode parse_norm_mode(const std::string& s);
LoraInit parse_lora_init(const std::string& s);
std::string to_string(BlockInit v);
std::string to_string(NormMode v);
std::string to_string(LoraInit v);

struct ConvertOptions {
    int64_t n_blocks = 1;
    BlockInit init = BlockInit::stepwise;
    NormMode norm_mode = NormMode::choice;
    LoraInit lora_init = LoraInit::svd;
    int64_t lora_rank = 0;
    uint64_t seed = 0;
};

// 1-based source layers for Stepwise selection: first and last layers always
// included, intermediates at even steps, ties at .5 rounded down.
// slots == 1 selects layer 1. Requires 1 <= slots <= n_layers.
std::vector<int64_t> stepwise_indices(int64_t n_layers, int64_t slots);

// Assembles the block.{k}.* tensors of a looped model with n_blocks loops
// from a vanilla (B=1, rank-0) checkpoint. Random ignores the vanilla weights
// and draws every block tensor from N(0, 0.02^2) as a pure function of seed.
std::map<std::string, Tensor> build_block(const Checkpoint& vanilla, int64_t n_blocks,
                                          BlockInit init, NormMode norm_mode, uint64_t seed);

// Builds the lora.{b}.{k}.{p}.{a,b} tensors for every loop/slot/projection.
// svd mode factors each residual W_l - W'_slot as (U_r * diag(sigma_r)) *
// V_r^T; when the residual's Frobenius norm is below 1e-8 the adapter instead
// gets a Gaussian A and zero B so it starts as an exact no-op. rank == 0
// returns an empty map. rank > min(out, in) for any projection raises
// ArgumentError naming the tensor.
std::map<std::string, Tensor> init_lora(const Checkpoint& vanilla,
                                        const std::map<std::string, Tensor>& block,
                                        int64_t n_blocks, int64_t rank, LoraInit kind,
                                        uint64_t seed);

// Full conversion: validates the vanilla input, assembles block + adapters,
// copies embedding / final norm / head, and returns a validated checkpoint
// with n_blocks and lora_rank set. Deterministic in (input, options).
Checkpoint convert(const Checkpoint& vanilla, const ConvertOptions& opts);

}  // namespace rrt
