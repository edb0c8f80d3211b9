#include "rrt/convert.hpp"

#include <cmath>

#include "rrt/rng.hpp"

namespace rrt {

namespace {

constexpr double kRandomStd = 0.02;
constexpr double kNoOpResidualThreshold = 1e-8;
// Keeps the block and adapter Gaussian streams distinct even for equal seeds.
constexpr uint64_t kLoraSeedSalt = 0x9e3779b97f4a7c15ull;

void require_vanilla(const Checkpoint& ckpt) {
    if (ckpt.config.n_blocks != 1)
        throw ValidationError("n_blocks", "conversion input must be a vanilla checkpoint (B=1), got " +
                                              std::to_string(ckpt.config.n_blocks));
    if (ckpt.config.lora_rank != 0)
        throw ValidationError("lora_rank", "conversion input must not carry adapters, got rank " +
                                               std::to_string(ckpt.config.lora_rank));
}

Tensor gaussian_tensor(std::vector<int64_t> shape, GaussianRng& rng) {
    Tensor t(std::move(shape));
    for (float& x : t.data) x = rng.next(kRandomStd);
    return t;
}

}  // namespace

BlockInit parse_block_init(const std::string& s) {
    if (s == "stepwise") return BlockInit::stepwise;
    if (s == "average") return BlockInit::average;
    if (s == "lower") return BlockInit::lower;
    if (s == "random") return BlockInit::random;
    throw ArgumentError("unknown block init '" + s + "'");
}

NormMode parse_norm_mode(const std::string& s) {
    if (s == "avg") return NormMode::avg;
    if (s == "choice") return NormMode::choice;
    if (s == "zero") return NormMode::zero;
    throw ArgumentError("unknown norm mode '" + s + "'");
}

LoraInit parse_lora_init(const std::string& s) {
    if (s == "svd") return LoraInit::svd;
    if (s == "zero") return LoraInit::zero;
    throw ArgumentError("unknown adapter init '" + s + "'");
}

std::string to_string(BlockInit v) {
    switch (v) {
        case BlockInit::stepwise: return "stepwise";
        case BlockInit::average: return "average";
        case BlockInit::lower: return "lower";
        case BlockInit::random: return "random";
    }
    return "?";
}

std::string to_string(NormMode v) {
    switch (v) {
        case NormMode::avg: return "avg";
        case NormMode::choice: return "choice";
        case NormMode::zero: return "zero";
    }
    return "?";
}

std::string to_string(LoraInit v) {
    switch (v) {
        case LoraInit::svd: return "svd";
        case LoraInit::zero: return "zero";
    }
    return "?";
}

std::vector<int64_t> stepwise_indices(int64_t n_layers, int64_t slots) {
    if (slots < 1 || slots > n_layers)
        throw ArgumentError("stepwise selection needs 1 <= slots <= n_layers, got slots=" +
                            std::to_string(slots) + " n_layers=" + std::to_string(n_layers));
    if (slots == 1) return {1};
    std::vector<int64_t> out(static_cast<size_t>(slots));
    const int64_t d = slots - 1;
    for (int64_t i = 1; i <= slots; ++i) {
        // round-half-down of 1 + (i-1)(L-1)/d, done in exact integers:
        // ceil(n/d - 1/2) == floor((2n + d - 1) / (2d)) for positive d.
        const int64_t n = d + (i - 1) * (n_layers - 1);
        out[static_cast<size_t>(i - 1)] = (2 * n + d - 1) / (2 * d);
    }
    return out;
}

std::map<std::string, Tensor> build_block(const Checkpoint& vanilla, int64_t n_blocks,
                                          BlockInit init, NormMode norm_mode, uint64_t seed) {
    require_vanilla(vanilla);
    const ModelConfig& cfg = vanilla.config;
    if (n_blocks < 1)
        throw ValidationError("n_blocks", "must be >= 1, got " + std::to_string(n_blocks));
    if (cfg.n_layers % n_blocks != 0)
        throw ValidationError("n_blocks", std::to_string(n_blocks) + " does not divide n_layers " +
                                              std::to_string(cfg.n_layers));
    const int64_t slots = cfg.n_layers / n_blocks;
    const std::vector<int64_t> stepwise = stepwise_indices(cfg.n_layers, slots);

    std::map<std::string, Tensor> block;
    GaussianRng rng(seed);

    for (int64_t k = 1; k <= slots; ++k) {
        switch (init) {
            case BlockInit::stepwise:
            case BlockInit::lower: {
                const int64_t src =
                    init == BlockInit::lower ? k : stepwise[static_cast<size_t>(k - 1)];
                for (const auto& proj : projection_names())
                    block[block_weight_name(k, proj)] = vanilla.tensors.at(block_weight_name(src, proj));
                block[block_norm_name(k, "attn")] = vanilla.tensors.at(block_norm_name(src, "attn"));
                block[block_norm_name(k, "ffn")] = vanilla.tensors.at(block_norm_name(src, "ffn"));
                break;
            }
            case BlockInit::average: {
                for (const auto& proj : projection_names()) {
                    auto [out, in] = projection_dims(cfg, proj);
                    Tensor mean({out, in});
                    std::vector<double> acc(mean.data.size(), 0.0);
                    for (int64_t b = 1; b <= n_blocks; ++b) {
                        const Tensor& src = vanilla.tensors.at(block_weight_name(k + (b - 1) * slots, proj));
                        for (size_t i = 0; i < acc.size(); ++i) acc[i] += src.data[i];
                    }
                    for (size_t i = 0; i < acc.size(); ++i)
                        mean.data[i] = static_cast<float>(acc[i] / static_cast<double>(n_blocks));
                    block[block_weight_name(k, proj)] = std::move(mean);
                }
                for (const char* which : {"attn", "ffn"}) {
                    Tensor gamma({cfg.d_model});
                    switch (norm_mode) {
                        case NormMode::avg: {
                            std::vector<double> acc(gamma.data.size(), 0.0);
                            for (int64_t b = 1; b <= n_blocks; ++b) {
                                const Tensor& src =
                                    vanilla.tensors.at(block_norm_name(k + (b - 1) * slots, which));
                                for (size_t i = 0; i < acc.size(); ++i) acc[i] += src.data[i];
                            }
                            for (size_t i = 0; i < acc.size(); ++i)
                                gamma.data[i] = static_cast<float>(acc[i] / static_cast<double>(n_blocks));
                            break;
                        }
                        case NormMode::choice:
                            gamma = vanilla.tensors.at(block_norm_name(k, which));
                            break;
                        case NormMode::zero:
                            break;  // already zero-filled
                    }
                    block[block_norm_name(k, which)] = std::move(gamma);
                }
                break;
            }
            case BlockInit::random: {
                for (const auto& proj : projection_names()) {
                    auto [out, in] = projection_dims(cfg, proj);
                    block[block_weight_name(k, proj)] = gaussian_tensor({out, in}, rng);
                }
                block[block_norm_name(k, "attn")] = gaussian_tensor({cfg.d_model}, rng);
                block[block_norm_name(k, "ffn")] = gaussian_tensor({cfg.d_model}, rng);
                break;
            }
        }
    }
    return block;
}

std::map<std::string, Tensor> init_lora(const Checkpoint& vanilla,
                                        const std::map<std::string, Tensor>& block,
                                        int64_t n_blocks, int64_t rank, LoraInit kind,
                                        uint64_t seed) {
    require_vanilla(vanilla);
    const ModelConfig& cfg = vanilla.config;
    if (rank < 0) throw ArgumentError("adapter rank must be >= 0, got " + std::to_string(rank));
    std::map<std::string, Tensor> lora;
    if (rank == 0) return lora;
    if (cfg.n_layers % n_blocks != 0)
        throw ValidationError("n_blocks", std::to_string(n_blocks) + " does not divide n_layers " +
                                              std::to_string(cfg.n_layers));
    const int64_t slots = cfg.n_layers / n_blocks;

    GaussianRng rng(seed ^ kLoraSeedSalt);
    for (int64_t b = 1; b <= n_blocks; ++b) {
        for (int64_t k = 1; k <= slots; ++k) {
            const int64_t layer = (b - 1) * slots + k;
            for (const auto& proj : projection_names()) {
                auto [out, in] = projection_dims(cfg, proj);
                if (rank > std::min(out, in))
                    throw ArgumentError("rank " + std::to_string(rank) + " exceeds min(out, in) = " +
                                        std::to_string(std::min(out, in)) + " for " +
                                        lora_name(b, k, proj, 'a'));

                const std::string a_name = lora_name(b, k, proj, 'a');
                const std::string b_name = lora_name(b, k, proj, 'b');

                bool no_op = kind == LoraInit::zero;
                if (!no_op) {
                    const Tensor residual = sub(vanilla.tensors.at(block_weight_name(layer, proj)),
                                                block.at(block_weight_name(k, proj)));
                    if (frobenius_norm(residual) < kNoOpResidualThreshold) {
                        no_op = true;
                    } else {
                        SvdFactors f = truncated_svd(residual, rank);
                        Tensor bfac({out, rank});
                        for (int64_t i = 0; i < out; ++i)
                            for (int64_t j = 0; j < rank; ++j)
                                bfac.data[i * rank + j] = static_cast<float>(
                                    static_cast<double>(f.u.data[i * rank + j]) *
                                    static_cast<double>(f.sigma.data[j]));
                        lora[a_name] = transpose(f.v);  // [rank x in]
                        lora[b_name] = std::move(bfac);
                    }
                }
                if (no_op) {
                    // Matched weights: standard zero initialization, Gaussian A and
                    // zero B, so the adapter contributes nothing until trained.
                    Tensor a({rank, in});
                    for (float& x : a.data) x = rng.next(kRandomStd);
                    lora[a_name] = std::move(a);
                    lora[b_name] = Tensor({out, rank});
                }
            }
        }
    }
    return lora;
}

Checkpoint convert(const Checkpoint& vanilla, const ConvertOptions& opts) {
    validate_checkpoint(vanilla);
    require_vanilla(vanilla);

    Checkpoint out;
    out.config = vanilla.config;
    out.config.n_blocks = opts.n_blocks;
    out.config.lora_rank = opts.lora_rank;
    out.config.validate();

    out.tensors["embed.weight"] = vanilla.tensors.at("embed.weight");
    out.tensors["final_norm.gamma"] = vanilla.tensors.at("final_norm.gamma");
    out.tensors["head.weight"] = vanilla.tensors.at("head.weight");

    auto block = build_block(vanilla, opts.n_blocks, opts.init, opts.norm_mode, opts.seed);
    auto lora = init_lora(vanilla, block, opts.n_blocks, opts.lora_rank, opts.lora_init, opts.seed);
    for (auto& [name, tensor] : block) out.tensors[name] = std::move(tensor);
    for (auto& [name, tensor] : lora) out.tensors[name] = std::move(tensor);

    validate_checkpoint(out);
    return out;
}

}  // namespace rrt
