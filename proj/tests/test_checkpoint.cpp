#include <doctest.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rrt/checkpoint.hpp"
#include "test_util.hpp"

using json = nlohmann::json;
using rrt::CheckpointError;
using Code = rrt::CheckpointError::Code;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "rrt_ckpt_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    REQUIRE(out.good());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

rrt::Checkpoint tiny_checkpoint() {
    return testutil::make_vanilla(testutil::toy_config(1, 2, 1, 1, 2, 3), 7);
}

// Assembles a container byte-for-byte so malformed headers can be produced on
// purpose (the library writer refuses to emit them).
std::string craft(const std::string& config_str, const std::string& manifest_str,
                  const std::string& payload) {
    std::string out;
    out.append("RRTCKPT1", 8);
    const uint32_t version = 1;
    out.append(reinterpret_cast<const char*>(&version), 4);
    const uint64_t clen = config_str.size(), mlen = manifest_str.size();
    out.append(reinterpret_cast<const char*>(&clen), 8);
    out.append(config_str);
    out.append(reinterpret_cast<const char*>(&mlen), 8);
    out.append(manifest_str);
    out.resize((out.size() + 63) / 64 * 64, '\0');
    out.append(payload);
    return out;
}

std::string tiny_config_json() {
    const rrt::ModelConfig c = testutil::toy_config(1, 2, 1, 1, 2, 3);
    return json{{"n_layers", c.n_layers},     {"d_model", c.d_model},
                {"n_heads", c.n_heads},       {"n_kv_heads", c.n_kv_heads},
                {"head_dim", c.head_dim},     {"ffn_dim", c.ffn_dim},
                {"vocab_size", c.vocab_size}, {"n_blocks", c.n_blocks},
                {"lora_rank", c.lora_rank},   {"norm_eps", c.norm_eps}}
        .dump();
}

// Manifest + payload for the tiny config with a caller-supplied tweak applied
// to the manifest before serialization.
std::pair<std::string, std::string> tiny_manifest(
    const std::function<void(json&)>& tweak = [](json&) {}) {
    const rrt::ModelConfig c = testutil::toy_config(1, 2, 1, 1, 2, 3);
    json manifest = json::array();
    std::string payload;
    for (const auto& [name, shape] : rrt::expected_tensor_shapes(c)) {
        const uint64_t offset = (payload.size() + 63) / 64 * 64;
        payload.resize(offset, '\0');
        int64_t numel = 1;
        for (int64_t e : shape) numel *= e;
        payload.append(static_cast<size_t>(numel) * 4, '\0');
        manifest.push_back(json{{"name", name}, {"shape", shape}, {"offset", offset}});
    }
    tweak(manifest);
    return {manifest.dump(), payload};
}

}  // namespace

TEST_CASE("config validation names the offending field") {
    rrt::ModelConfig c = testutil::toy_config();
    CHECK_NOTHROW(c.validate());

    auto field_of = [](rrt::ModelConfig bad) -> std::string {
        try {
            bad.validate();
        } catch (const rrt::ValidationError& e) {
            return e.field();
        }
        return "";
    };

    rrt::ModelConfig bad = c;
    bad.d_model = 0;
    CHECK(field_of(bad) == "d_model");
    bad = c;
    bad.vocab_size = -3;
    CHECK(field_of(bad) == "vocab_size");
    bad = c;
    bad.n_blocks = 3;  // does not divide n_layers = 4
    CHECK(field_of(bad) == "n_blocks");
    bad = c;
    bad.n_kv_heads = 3;  // does not divide n_heads = 4
    CHECK(field_of(bad) == "n_kv_heads");
    bad = c;
    bad.lora_rank = -1;
    CHECK(field_of(bad) == "lora_rank");
    bad = c;
    bad.norm_eps = -1.0f;
    CHECK(field_of(bad) == "norm_eps");

    rrt::ModelConfig looped = c;
    looped.n_blocks = 2;
    CHECK(looped.slots() == 2);
    CHECK_NOTHROW(looped.validate());
}

TEST_CASE("tensor name builders follow the naming contract") {
    CHECK(rrt::block_weight_name(2, "q") == "block.2.attn.q.weight");
    CHECK(rrt::block_weight_name(1, "o") == "block.1.attn.o.weight");
    CHECK(rrt::block_weight_name(3, "gate") == "block.3.ffn.gate.weight");
    CHECK(rrt::block_weight_name(3, "down") == "block.3.ffn.down.weight");
    CHECK(rrt::block_norm_name(1, "attn") == "block.1.norm_attn.gamma");
    CHECK(rrt::block_norm_name(4, "ffn") == "block.4.norm_ffn.gamma");
    CHECK(rrt::lora_name(1, 2, "down", 'a') == "lora.1.2.down.a");
    CHECK(rrt::lora_name(3, 1, "q", 'b') == "lora.3.1.q.b");
}

TEST_CASE("expected tensor set size and key shapes") {
    rrt::ModelConfig c = testutil::toy_config(6, 16, 4, 2, 32, 37);
    auto shapes = rrt::expected_tensor_shapes(c);
    // 3 shared tensors + 9 per slot (7 projections + 2 norms), 6 slots.
    CHECK(shapes.size() == 3 + 6 * 9);
    CHECK(shapes.at("embed.weight") == std::vector<int64_t>{37, 16});
    CHECK(shapes.at("head.weight") == std::vector<int64_t>{37, 16});
    CHECK(shapes.at("final_norm.gamma") == std::vector<int64_t>{16});
    CHECK(shapes.at("block.6.attn.q.weight") == std::vector<int64_t>{16, 16});
    CHECK(shapes.at("block.1.attn.k.weight") == std::vector<int64_t>{8, 16});
    CHECK(shapes.at("block.1.ffn.gate.weight") == std::vector<int64_t>{32, 16});
    CHECK(shapes.at("block.1.ffn.down.weight") == std::vector<int64_t>{16, 32});

    c.n_blocks = 2;
    c.lora_rank = 4;
    shapes = rrt::expected_tensor_shapes(c);
    // Slots drop to 3; adapters add 2 loops * 3 slots * 7 projections * 2.
    CHECK(shapes.size() == 3 + 3 * 9 + 2 * 3 * 7 * 2);
    CHECK(shapes.at("lora.2.3.q.a") == std::vector<int64_t>{4, 16});
    CHECK(shapes.at("lora.2.3.q.b") == std::vector<int64_t>{16, 4});
    CHECK(shapes.at("lora.1.2.down.a") == std::vector<int64_t>{4, 32});
    CHECK(shapes.at("lora.1.2.down.b") == std::vector<int64_t>{16, 4});
}

TEST_CASE("validate_checkpoint catches missing, stray, misshapen, non-finite tensors") {
    rrt::Checkpoint good = tiny_checkpoint();
    CHECK_NOTHROW(rrt::validate_checkpoint(good));

    rrt::Checkpoint missing = good;
    missing.tensors.erase("head.weight");
    CHECK_THROWS_AS(rrt::validate_checkpoint(missing), rrt::ValidationError);

    rrt::Checkpoint stray = good;
    stray.tensors.emplace("extra.weight", rrt::Tensor({1}));
    CHECK_THROWS_AS(rrt::validate_checkpoint(stray), rrt::ValidationError);

    rrt::Checkpoint misshapen = good;
    misshapen.tensors.at("embed.weight") = rrt::Tensor({2, 2});
    CHECK_THROWS_AS(rrt::validate_checkpoint(misshapen), rrt::ValidationError);

    rrt::Checkpoint poisoned = good;
    poisoned.tensors.at("embed.weight").data[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(rrt::validate_checkpoint(poisoned), rrt::ValidationError);

    // Adapters present while the config says rank 0.
    rrt::Checkpoint unexpected_lora = good;
    unexpected_lora.tensors.emplace("lora.1.1.q.a", rrt::Tensor({1, 2}));
    CHECK_THROWS_AS(rrt::validate_checkpoint(unexpected_lora), rrt::ValidationError);
}

TEST_CASE("checkpoint write/read roundtrip is lossless") {
    const auto path = temp_file("roundtrip.ckpt");
    const rrt::Checkpoint original = testutil::make_vanilla(testutil::toy_config(), 42);
    rrt::write_checkpoint(path.string(), original);
    const rrt::Checkpoint loaded = rrt::read_checkpoint(path.string());

    CHECK(loaded.config == original.config);
    REQUIRE(loaded.tensors.size() == original.tensors.size());
    for (const auto& [name, tensor] : original.tensors) {
        REQUIRE(loaded.tensors.count(name) == 1);
        const rrt::Tensor& other = loaded.tensors.at(name);
        CHECK(other.shape == tensor.shape);
        CHECK(std::memcmp(other.data.data(), tensor.data.data(),
                          tensor.data.size() * sizeof(float)) == 0);
    }

    // Writing the same checkpoint twice produces identical bytes.
    const auto path2 = temp_file("roundtrip2.ckpt");
    rrt::write_checkpoint(path2.string(), original);
    CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("container byte layout: magic, version, alignment, ascending regions") {
    const auto path = temp_file("layout.ckpt");
    rrt::write_checkpoint(path.string(), tiny_checkpoint());
    const std::string raw = slurp(path);

    REQUIRE(raw.size() >= 28);
    CHECK(raw.substr(0, 8) == "RRTCKPT1");
    uint32_t version;
    std::memcpy(&version, raw.data() + 8, 4);
    CHECK(version == 1);

    uint64_t config_len;
    std::memcpy(&config_len, raw.data() + 12, 8);
    const json config = json::parse(raw.substr(20, config_len));
    CHECK(config.at("d_model") == 2);
    CHECK(config.at("n_layers") == 1);

    uint64_t manifest_len;
    std::memcpy(&manifest_len, raw.data() + 20 + config_len, 8);
    const uint64_t manifest_at = 28 + config_len;
    const json manifest = json::parse(raw.substr(manifest_at, manifest_len));
    REQUIRE(manifest.is_array());
    REQUIRE(manifest.size() == 12);  // 3 shared + 9 block tensors

    const uint64_t payload_start = (manifest_at + manifest_len + 63) / 64 * 64;
    // Padding between header and payload is all zero bytes.
    for (uint64_t i = manifest_at + manifest_len; i < payload_start; ++i) CHECK(raw[i] == '\0');

    uint64_t prev_end = 0;
    bool first = true;
    for (const auto& entry : manifest) {
        const uint64_t offset = entry.at("offset").get<uint64_t>();
        CHECK(offset % 64 == 0);
        if (!first) CHECK(offset >= prev_end);
        first = false;
        int64_t numel = 1;
        for (int64_t e : entry.at("shape").get<std::vector<int64_t>>()) numel *= e;
        prev_end = offset + static_cast<uint64_t>(numel) * 4;
        CHECK(payload_start + prev_end <= raw.size());
    }
    CHECK(raw.size() == payload_start + prev_end);

    // Manifest order matches the deterministic name order of the tensor map,
    // and the first region's bytes are the first tensor's float data.
    const rrt::Checkpoint ckpt = tiny_checkpoint();
    auto it = ckpt.tensors.begin();
    CHECK(manifest[0].at("name").get<std::string>() == it->first);
    CHECK(std::memcmp(raw.data() + payload_start + manifest[0].at("offset").get<uint64_t>(),
                      it->second.data.data(), it->second.data.size() * sizeof(float)) == 0);
}

TEST_CASE("corrupt containers raise distinct error codes") {
    const auto path = temp_file("valid.ckpt");
    rrt::write_checkpoint(path.string(), tiny_checkpoint());
    const std::string raw = slurp(path);

    auto code_of = [&](const std::string& bytes) -> std::optional<Code> {
        const auto p = temp_file("corrupt.ckpt");
        spit(p, bytes);
        try {
            rrt::read_checkpoint(p.string());
        } catch (const CheckpointError& e) {
            return e.code();
        }
        return std::nullopt;
    };

    std::string bad_magic = raw;
    bad_magic[0] = 'X';
    CHECK(code_of(bad_magic) == Code::bad_magic);

    std::string bad_version = raw;
    bad_version[8] = 2;
    CHECK(code_of(bad_version) == Code::bad_version);

    std::string truncated = raw.substr(0, raw.size() - 13);
    CHECK(code_of(truncated) == Code::truncated);

    std::string header_only = raw.substr(0, 10);
    CHECK(code_of(header_only) == Code::truncated);

    std::string nan_payload = raw;
    {
        uint64_t config_len, manifest_len;
        std::memcpy(&config_len, raw.data() + 12, 8);
        std::memcpy(&manifest_len, raw.data() + 20 + config_len, 8);
        const uint64_t payload_start = (28 + config_len + manifest_len + 63) / 64 * 64;
        const uint32_t nan_bits = 0x7fc00000;
        std::memcpy(nan_payload.data() + payload_start, &nan_bits, 4);
    }
    CHECK(code_of(nan_payload) == Code::non_finite_payload);

    const std::string config_str = tiny_config_json();

    auto [good_manifest, payload] = tiny_manifest();
    CHECK(code_of(craft(config_str, good_manifest, payload)) == std::nullopt);

    auto [overlap_manifest, payload2] = tiny_manifest(
        [](json& m) { m[1]["offset"] = m[0]["offset"]; });
    CHECK(code_of(craft(config_str, overlap_manifest, payload2)) == Code::overlapping_regions);

    auto [misaligned_manifest, payload3] = tiny_manifest([](json& m) {
        m[0]["offset"] = 32;
    });
    CHECK(code_of(craft(config_str, misaligned_manifest, payload3)) == Code::bad_header);

    auto [dup_manifest, payload4] = tiny_manifest([](json& m) { m[1]["name"] = m[0]["name"]; });
    CHECK(code_of(craft(config_str, dup_manifest, payload4)) == Code::bad_header);

    auto [manifest5, payload5] = tiny_manifest();
    CHECK(code_of(craft("definitely not json", manifest5, payload5)) == Code::bad_header);
    CHECK(code_of(craft(config_str, "{\"not\": \"an array\"}", payload5)) == Code::bad_header);
}

TEST_CASE("semantic problems in a well-formed container raise ValidationError") {
    // Well-formed container whose manifest is missing a required tensor.
    const std::string config_str = tiny_config_json();
    auto [manifest_str, payload] = tiny_manifest([](json& m) { m.erase(0); });
    const auto path = temp_file("semantic.ckpt");
    spit(path, craft(config_str, manifest_str, payload));
    CHECK_THROWS_AS(rrt::read_checkpoint(path.string()), rrt::ValidationError);
}

TEST_CASE("filesystem failures raise IoError") {
    CHECK_THROWS_AS(rrt::read_checkpoint("/nonexistent/nowhere.ckpt"), rrt::IoError);
    CHECK_THROWS_AS(rrt::write_checkpoint("/nonexistent/dir/out.ckpt", tiny_checkpoint()),
                    rrt::IoError);
}
