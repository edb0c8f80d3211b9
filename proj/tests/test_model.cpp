#include <doctest.h>

#include <cmath>
#include <vector>

#include "rrt/convert.hpp"
#include "rrt/model.hpp"
#include "test_util.hpp"

using rrt::Checkpoint;
using rrt::RecursiveModel;
using rrt::Tensor;

namespace {

// Brute-force grouped-query attention: per head, per query position, explicit
// float64 softmax over the allowed key range.
Tensor ref_attention(const Tensor& q, const Tensor& keys, const Tensor& values, int64_t n_heads,
                     int64_t n_kv_heads, int64_t head_dim, int64_t causal_from) {
    const int64_t q_len = q.rows(), seen = keys.rows();
    Tensor out({q_len, n_heads * head_dim});
    for (int64_t h = 0; h < n_heads; ++h) {
        const int64_t g = h * n_kv_heads / n_heads;
        for (int64_t i = 0; i < q_len; ++i) {
            const int64_t allowed = std::min(seen, causal_from + i + 1);
            std::vector<double> scores(static_cast<size_t>(allowed));
            double max_score = -1e300;
            for (int64_t t = 0; t < allowed; ++t) {
                double dot = 0.0;
                for (int64_t d = 0; d < head_dim; ++d)
                    dot += static_cast<double>(q.at(i, h * head_dim + d)) *
                           static_cast<double>(keys.at(t, g * head_dim + d));
                scores[static_cast<size_t>(t)] = dot / std::sqrt(static_cast<double>(head_dim));
                max_score = std::max(max_score, scores[static_cast<size_t>(t)]);
            }
            double denom = 0.0;
            for (double& s : scores) {
                s = std::exp(s - max_score);
                denom += s;
            }
            for (int64_t d = 0; d < head_dim; ++d) {
                double acc = 0.0;
                for (int64_t t = 0; t < allowed; ++t)
                    acc += scores[static_cast<size_t>(t)] / denom *
                           static_cast<double>(values.at(t, g * head_dim + d));
                out.at(i, h * head_dim + d) = static_cast<float>(acc);
            }
        }
    }
    return out;
}

// Rebuilds the per-loop logits of a looped rank-0 model by unrolling its block
// into a plain depth-L checkpoint prefix (loop b -> first b*K layers).
Checkpoint unrolled_prefix(const Checkpoint& looped, int64_t loops) {
    const int64_t slots = looped.config.slots();
    Checkpoint flat;
    flat.config = looped.config;
    flat.config.n_blocks = 1;
    flat.config.n_layers = loops * slots;
    flat.config.lora_rank = 0;
    for (const char* shared : {"embed.weight", "final_norm.gamma", "head.weight"})
        flat.tensors.emplace(shared, looped.tensors.at(shared));
    for (int64_t layer = 1; layer <= loops * slots; ++layer) {
        const int64_t slot = (layer - 1) % slots + 1;
        for (const auto& proj : rrt::projection_names())
            flat.tensors.emplace(rrt::block_weight_name(layer, proj),
                                 looped.tensors.at(rrt::block_weight_name(slot, proj)));
        for (const char* which : {"attn", "ffn"})
            flat.tensors.emplace(rrt::block_norm_name(layer, which),
                                 looped.tensors.at(rrt::block_norm_name(slot, which)));
    }
    return flat;
}

const std::vector<int32_t> kPrompt = {3, 14, 1, 5, 9, 2, 6};

}  // namespace

TEST_CASE("attention matches the brute-force reference") {
    rrt::GaussianRng rng(7);
    struct Case {
        int64_t n_heads, n_kv, head_dim, q_len, seen, causal_from;
    };
    for (const Case& c : {Case{4, 4, 8, 5, 5, 0}, Case{4, 2, 4, 3, 7, 4}, Case{8, 1, 4, 1, 9, 8},
                          Case{2, 2, 16, 6, 6, 0}, Case{6, 3, 4, 2, 2, 0}}) {
        const Tensor q = testutil::random_tensor(rng, {c.q_len, c.n_heads * c.head_dim}, 0.8);
        const Tensor k = testutil::random_tensor(rng, {c.seen, c.n_kv * c.head_dim}, 0.8);
        const Tensor v = testutil::random_tensor(rng, {c.seen, c.n_kv * c.head_dim}, 0.8);
        const Tensor got =
            rrt::attention(q, k, v, c.n_heads, c.n_kv, c.head_dim, c.causal_from);
        const Tensor want =
            ref_attention(q, k, v, c.n_heads, c.n_kv, c.head_dim, c.causal_from);
        CHECK(rrt::max_abs_diff(got, want) <= 1e-5);
    }
    CHECK_THROWS_AS(rrt::attention(Tensor({2, 8}), Tensor({2, 8}), Tensor({2, 8}), 2, 2, 3, 1),
                    rrt::ShapeError);
}

TEST_CASE("single-layer forward matches a hand-wired reference") {
    const auto cfg = testutil::toy_config(1, 16, 4, 2, 24, 19);
    const Checkpoint ckpt = testutil::make_vanilla(cfg, 55);
    const RecursiveModel model(ckpt);
    const std::vector<int32_t> tokens = {4, 11, 7};

    // Embed.
    Tensor h({static_cast<int64_t>(tokens.size()), cfg.d_model});
    for (size_t i = 0; i < tokens.size(); ++i)
        for (int64_t j = 0; j < cfg.d_model; ++j)
            h.at(static_cast<int64_t>(i), j) = ckpt.tensors.at("embed.weight").at(tokens[i], j);

    auto w = [&](const char* proj) {
        return rrt::transpose(ckpt.tensors.at(rrt::block_weight_name(1, proj)));
    };
    // Pre-norm attention with residual.
    const Tensor a_in = rrt::rms_norm(h, ckpt.tensors.at("block.1.norm_attn.gamma"), cfg.norm_eps);
    const Tensor attn = ref_attention(rrt::matmul(a_in, w("q")), rrt::matmul(a_in, w("k")),
                                      rrt::matmul(a_in, w("v")), cfg.n_heads, cfg.n_kv_heads,
                                      cfg.head_dim, 0);
    h = rrt::add(h, rrt::matmul(attn, w("o")));
    // Pre-norm gated FFN with residual.
    const Tensor f_in = rrt::rms_norm(h, ckpt.tensors.at("block.1.norm_ffn.gamma"), cfg.norm_eps);
    const Tensor gate = rrt::gelu(rrt::matmul(f_in, w("gate")));
    const Tensor up = rrt::matmul(f_in, w("up"));
    Tensor gated(gate.shape);
    for (size_t i = 0; i < gated.data.size(); ++i) gated.data[i] = gate.data[i] * up.data[i];
    h = rrt::add(h, rrt::matmul(gated, w("down")));
    // Shared final norm + head.
    const Tensor want = rrt::matmul(rrt::rms_norm(h, ckpt.tensors.at("final_norm.gamma"),
                                                  cfg.norm_eps),
                                    rrt::transpose(ckpt.tensors.at("head.weight")));

    const auto got = model.forward(tokens);
    REQUIRE(got.size() == 1);
    CHECK(rrt::max_abs_diff(got[0], want) <= 1e-5);
}

TEST_CASE("looped rank-0 forward equals the unrolled clone at every exit") {
    const Checkpoint vanilla = testutil::make_vanilla(testutil::toy_config(6, 16, 4, 2, 24, 29), 8);
    rrt::ConvertOptions opts;
    opts.n_blocks = 3;
    opts.init = rrt::BlockInit::stepwise;
    const Checkpoint looped = rrt::convert(vanilla, opts);
    const RecursiveModel model(looped);
    const auto per_loop = model.forward(kPrompt);
    REQUIRE(per_loop.size() == 3);

    for (int64_t b = 1; b <= 3; ++b) {
        const RecursiveModel clone(unrolled_prefix(looped, b));
        const auto flat = clone.forward(kPrompt);
        CHECK(rrt::max_abs_diff(per_loop[static_cast<size_t>(b - 1)], flat.back()) == 0.0);
    }
}

TEST_CASE("adapters with zero B leave the forward pass bitwise untouched") {
    const Checkpoint vanilla = testutil::make_vanilla(testutil::toy_config(4, 16, 4, 2, 24, 23), 9);
    rrt::ConvertOptions plain;
    plain.n_blocks = 2;
    rrt::ConvertOptions noop = plain;
    noop.lora_rank = 3;
    noop.lora_init = rrt::LoraInit::zero;

    const auto a = RecursiveModel(rrt::convert(vanilla, plain)).forward(kPrompt);
    const auto b = RecursiveModel(rrt::convert(vanilla, noop)).forward(kPrompt);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(rrt::max_abs_diff(a[i], b[i]) == 0.0);
}

TEST_CASE("svd adapters move the logits toward the vanilla model") {
    // Norm gammas must agree across layers for exact recovery to be possible;
    // the adapters only correct the linear projections.
    const auto cfg = testutil::toy_config(4, 16, 4, 4, 16, 23);
    const Checkpoint vanilla = testutil::make_vanilla_tied_norms(cfg, 10);
    const RecursiveModel reference(vanilla);
    const auto want = reference.forward(kPrompt).back();

    rrt::ConvertOptions opts;
    opts.n_blocks = 2;
    opts.init = rrt::BlockInit::average;

    const auto rank0 = RecursiveModel(rrt::convert(vanilla, opts)).forward(kPrompt).back();
    opts.lora_rank = 16;  // full rank for every projection in this geometry
    const auto full = RecursiveModel(rrt::convert(vanilla, opts)).forward(kPrompt).back();

    CHECK(rrt::max_abs_diff(full, want) <= 1e-4);
    CHECK(rrt::max_abs_diff(rank0, want) > 1e-2);  // rank 0 genuinely differs
}

TEST_CASE("causality: a token's logits ignore everything after it") {
    const Checkpoint vanilla = testutil::make_vanilla(testutil::toy_config(4, 16, 4, 2, 24, 31), 12);
    rrt::ConvertOptions opts;
    opts.n_blocks = 2;
    const RecursiveModel model(rrt::convert(vanilla, opts));

    const std::vector<int32_t> one = {5, 9, 3, 7, 2};
    const std::vector<int32_t> two = {5, 9, 3, 30, 16};
    const auto la = model.forward(one);
    const auto lb = model.forward(two);
    for (size_t b = 0; b < la.size(); ++b)
        for (int64_t i = 0; i < 3; ++i)
            for (int64_t j = 0; j < la[b].cols(); ++j)
                CHECK(la[b].at(i, j) == lb[b].at(i, j));
}

TEST_CASE("incremental decoding through the cache matches full re-forward") {
    const Checkpoint vanilla = testutil::make_vanilla(testutil::toy_config(6, 16, 4, 2, 24, 41), 13);
    rrt::ConvertOptions opts;
    opts.n_blocks = 3;
    opts.lora_rank = 4;
    const RecursiveModel model(rrt::convert(vanilla, opts));

    rrt::KvCache cache = model.make_cache();
    CHECK(cache.entries.size() == 3 * 2);
    std::vector<Tensor> last_step;
    for (int32_t token : kPrompt) last_step = model.forward({token}, cache);
    CHECK(cache.seen == static_cast<int64_t>(kPrompt.size()));

    const auto full = model.forward(kPrompt);
    for (size_t b = 0; b < full.size(); ++b) {
        const Tensor& whole = full[b];
        for (int64_t j = 0; j < whole.cols(); ++j)
            CHECK(std::abs(last_step[b].at(0, j) - whole.at(whole.rows() - 1, j)) <= 1e-4f);
    }

    // Mixed chunk sizes agree too.
    rrt::KvCache chunked = model.make_cache();
    model.forward({kPrompt[0], kPrompt[1], kPrompt[2]}, chunked);
    const auto tail = model.forward({kPrompt[3], kPrompt[4], kPrompt[5], kPrompt[6]}, chunked);
    for (size_t b = 0; b < full.size(); ++b) {
        const Tensor& whole = full[b];
        for (int64_t i = 0; i < tail[b].rows(); ++i)
            for (int64_t j = 0; j < whole.cols(); ++j)
                CHECK(std::abs(tail[b].at(i, j) - whole.at(3 + i, j)) <= 1e-4f);
    }
}

TEST_CASE("greedy decoding picks argmax tokens and reports per-step exits") {
    const Checkpoint vanilla = testutil::make_vanilla(testutil::toy_config(4, 16, 4, 2, 24, 37), 14);
    rrt::ConvertOptions opts;
    opts.n_blocks = 2;
    const RecursiveModel model(rrt::convert(vanilla, opts));

    const std::vector<int32_t> prompt = {1, 8, 21};
    const auto out = model.decode_greedy(prompt, 4);
    REQUIRE(out.generated.size() == 4);
    REQUIRE(out.step_logits.size() == 4);
    REQUIRE(out.prompt_logits.size() == 2);
    CHECK(out.prompt_logits[0].rows() == 3);

    // First generated token = argmax of the prompt's last-position final-loop row.
    const auto prompt_logits = model.forward(prompt);
    CHECK(out.generated[0] ==
          static_cast<int32_t>(rrt::row_argmax(prompt_logits.back(), 2)));
    for (size_t b = 0; b < 2; ++b)
        for (int64_t j = 0; j < out.step_logits[0][b].cols(); ++j)
            CHECK(out.step_logits[0][b].at(0, j) == prompt_logits[b].at(2, j));

    // Every step's token is the final-loop argmax of that step's logits.
    for (size_t i = 0; i < 4; ++i)
        CHECK(out.generated[i] == static_cast<int32_t>(rrt::row_argmax(out.step_logits[i][1], 0)));

    // The cache covers prompt + generated minus the never-fed last token.
    CHECK(out.cache.seen == 3 + 4 - 1);

    // n_new = 0: prompt logits only.
    const auto none = model.decode_greedy(prompt, 0);
    CHECK(none.generated.empty());
    CHECK(none.cache.seen == 3);

    // Whole decde is deterministic.
    const auto again = model.decode_greedy(prompt, 4);
    CHECK(again.generated == out.generated);
}

TEST_CASE("forward rejects bad tokens and inconsistent caches") {
    const Checkpoint vanilla = testutil::make_vanilla(testutil::toy_config(4, 16, 4, 2, 24, 11), 15);
    rrt::ConvertOptions opts;
    opts.n_blocks = 2;
    const RecursiveModel model(rrt::convert(vanilla, opts));

    CHECK_THROWS_AS(model.forward({}), rrt::ArgumentError);
    CHECK_THROWS_AS(model.forward({11}), rrt::ArgumentError);   // vocab is 0..10
    CHECK_THROWS_AS(model.forward({-1}), rrt::ArgumentError);
    CHECK_THROWS_AS(model.decode_greedy({1}, -1), rrt::ArgumentError);

    rrt::KvCache wrong;
    wrong.entries.resize(3);
    CHECK_THROWS_AS(model.forward({1}, wrong), rrt::ArgumentError);

    rrt::Checkpoint broken = rrt::convert(vanilla, opts);
    broken.tensors.erase("block.1.attn.q.weight");
    CHECK_THROWS_AS(RecursiveModel{broken}, rrt::ValidationError);
}
