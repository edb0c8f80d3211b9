#include "rrt/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace rrt {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

constexpr char kMagic[8] = {'R', 'R', 'T', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;
constexpr uint64_t kAlign = 64;

uint64_t align_up(uint64_t x) {
    return (x + kAlign - 1) / kAlign * kAlign;
}

void require_positive(int64_t value, const char* field) {
    if (value <= 0)
        throw ValidationError(field, "must be positive, got " + std::to_string(value));
}

using json = nlohmann::json;

json config_to_json(const ModelConfig& c) {
    return json{
        {"n_layers", c.n_layers},   {"d_model", c.d_model},
        {"n_heads", c.n_heads},     {"n_kv_heads", c.n_kv_heads},
        {"head_dim", c.head_dim},   {"ffn_dim", c.ffn_dim},
        {"vocab_size", c.vocab_size}, {"n_blocks", c.n_blocks},
        {"lora_rank", c.lora_rank}, {"norm_eps", c.norm_eps},
    };
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    auto get = [&](const char* key) -> const json& {
        auto it = j.find(key);
        if (it == j.end()) throw ValidationError(key, "missing from checkpoint config");
        return *it;
    };
    c.n_layers = get("n_layers").get<int64_t>();
    c.d_model = get("d_model").get<int64_t>();
    c.n_heads = get("n_heads").get<int64_t>();
    c.n_kv_heads = get("n_kv_heads").get<int64_t>();
    c.head_dim = get("head_dim").get<int64_t>();
    c.ffn_dim = get("ffn_dim").get<int64_t>();
    c.vocab_size = get("vocab_size").get<int64_t>();
    c.n_blocks = get("n_blocks").get<int64_t>();
    c.lora_rank = get("lora_rank").get<int64_t>();
    c.norm_eps = get("norm_eps").get<float>();
    return c;
}

}  // namespace

void ModelConfig::validate() const {
    require_positive(n_layers, "n_layers");
    require_positive(d_model, "d_model");
    require_positive(n_heads, "n_heads");
    require_positive(n_kv_heads, "n_kv_heads");
    require_positive(head_dim, "head_dim");
    require_positive(ffn_dim, "ffn_dim");
    require_positive(vocab_size, "vocab_size");
    require_positive(n_blocks, "n_blocks");
    if (lora_rank < 0)
        throw ValidationError("lora_rank", "must be >= 0, got " + std::to_string(lora_rank));
    if (n_layers % n_blocks != 0)
        throw ValidationError("n_blocks", std::to_string(n_blocks) + " does not divide n_layers " +
                                              std::to_string(n_layers));
    if (n_heads % n_kv_heads != 0)
        throw ValidationError("n_kv_heads", std::to_string(n_kv_heads) +
                                                " does not divide n_heads " + std::to_string(n_heads));
    if (!(norm_eps >= 0.0f) || !std::isfinite(norm_eps))
        throw ValidationError("norm_eps", "must be finite and >= 0");
}

const std::vector<std::string>& projection_names() {
    static const std::vector<std::string> names = {"q", "k", "v", "o", "gate", "up", "down"};
    return names;
}

std::pair<int64_t, int64_t> projection_dims(const ModelConfig& c, const std::string& proj) {
    if (proj == "q") return {c.n_heads * c.head_dim, c.d_model};
    if (proj == "k" || proj == "v") return {c.n_kv_heads * c.head_dim, c.d_model};
    if (proj == "o") return {c.d_model, c.n_heads * c.head_dim};
    if (proj == "gate" || proj == "up") return {c.ffn_dim, c.d_model};
    if (proj == "down") return {c.d_model, c.ffn_dim};
    throw ArgumentError("unknown projection '" + proj + "'");
}

std::string block_weight_name(int64_t slot, const std::string& proj) {
    const char* group = (proj == "gate" || proj == "up" || proj == "down") ? "ffn" : "attn";
    return "block." + std::to_string(slot) + "." + group + "." + proj + ".weight";
}

std::string block_norm_name(int64_t slot, const std::string& which) {
    return "block." + std::to_string(slot) + ".norm_" + which + ".gamma";
}

std::string lora_name(int64_t loop, int64_t slot, const std::string& proj, char factor) {
    return "lora." + std::to_string(loop) + "." + std::to_string(slot) + "." + proj + "." + factor;
}

std::map<std::string, std::vector<int64_t>> expected_tensor_shapes(const ModelConfig& c) {
    std::map<std::string, std::vector<int64_t>> shapes;
    shapes["embed.weight"] = {c.vocab_size, c.d_model};
    shapes["final_norm.gamma"] = {c.d_model};
    shapes["head.weight"] = {c.vocab_size, c.d_model};
    for (int64_t k = 1; k <= c.slots(); ++k) {
        for (const auto& proj : projection_names()) {
            auto [out, in] = projection_dims(c, proj);
            shapes[block_weight_name(k, proj)] = {out, in};
        }
        shapes[block_norm_name(k, "attn")] = {c.d_model};
        shapes[block_norm_name(k, "ffn")] = {c.d_model};
    }
    if (c.lora_rank > 0) {
        for (int64_t b = 1; b <= c.n_blocks; ++b) {
            for (int64_t k = 1; k <= c.slots(); ++k) {
                for (const auto& proj : projection_names()) {
                    auto [out, in] = projection_dims(c, proj);
                    shapes[lora_name(b, k, proj, 'a')] = {c.lora_rank, in};
                    shapes[lora_name(b, k, proj, 'b')] = {out, c.lora_rank};
                }
            }
        }
    }
    return shapes;
}

void validate_checkpoint(const Checkpoint& ckpt) {
    ckpt.config.validate();
    const auto expected = expected_tensor_shapes(ckpt.config);
    for (const auto& [name, shape] : expected) {
        auto it = ckpt.tensors.find(name);
        if (it == ckpt.tensors.end()) throw ValidationError(name, "missing tensor");
        if (it->second.shape != shape) {
            std::string want, got;
            for (int64_t e : shape) want += std::to_string(e) + " ";
            for (int64_t e : it->second.shape) got += std::to_string(e) + " ";
            throw ValidationError(name, "shape [ " + got + "] does not match expected [ " + want + "]");
        }
    }
    for (const auto& [name, tensor] : ckpt.tensors) {
        if (!expected.count(name))
            throw ValidationError(name, "unexpected tensor for this config");
        if (!tensor.all_finite())
            throw ValidationError(name, "contains non-finite values");
    }
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    validate_checkpoint(ckpt);

    json manifest = json::array();
    uint64_t payload_size = 0;
    for (const auto& [name, tensor] : ckpt.tensors) {
        const uint64_t offset = align_up(payload_size);
        manifest.push_back(json{{"name", name}, {"shape", tensor.shape}, {"offset", offset}});
        payload_size = offset + tensor.data.size() * sizeof(float);
    }

    const std::string config_str = config_to_json(ckpt.config).dump();
    const std::string manifest_str = manifest.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");

    auto put_u32 = [&](uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
    auto put_u64 = [&](uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); };

    out.write(kMagic, 8);
    put_u32(kVersion);
    put_u64(config_str.size());
    out.write(config_str.data(), static_cast<std::streamsize>(config_str.size()));
    put_u64(manifest_str.size());
    out.write(manifest_str.data(), static_cast<std::streamsize>(manifest_str.size()));

    const uint64_t header_end = 8 + 4 + 8 + config_str.size() + 8 + manifest_str.size();
    std::string pad(align_up(header_end) - header_end, '\0');
    out.write(pad.data(), static_cast<std::streamsize>(pad.size()));

    uint64_t written = 0;
    for (const auto& [name, tensor] : ckpt.tensors) {
        const uint64_t offset = align_up(written);
        std::string gap(offset - written, '\0');
        out.write(gap.data(), static_cast<std::streamsize>(gap.size()));
        out.write(reinterpret_cast<const char*>(tensor.data.data()),
                  static_cast<std::streamsize>(tensor.data.size() * sizeof(float)));
        written = offset + tensor.data.size() * sizeof(float);
    }
    out.flush();
    if (!out) throw IoError("short write to '" + path + "'");
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    const uint64_t size = static_cast<uint64_t>(in.tellg());
    in.seekg(0);
    std::vector<char> raw(size);
    in.read(raw.data(), static_cast<std::streamsize>(size));
    if (!in) throw IoError("short read from '" + path + "'");

    using Code = CheckpointError::Code;
    auto need = [&](uint64_t have, uint64_t want, const char* what) {
        if (want > have)
            throw CheckpointError(Code::truncated, std::string("truncated checkpoint: ") + what);
    };

    need(size, 8 + 4 + 8, "header");
    if (std::memcmp(raw.data(), kMagic, 8) != 0)
        throw CheckpointError(Code::bad_magic, "bad magic, not a checkpoint file");
    uint32_t version;
    std::memcpy(&version, raw.data() + 8, 4);
    if (version != kVersion)
        throw CheckpointError(Code::bad_version, "unsupported checkpoint version " + std::to_string(version));

    uint64_t pos = 12;
    auto take_u64 = [&](const char* what) {
        need(size, pos + 8, what);
        uint64_t v;
        std::memcpy(&v, raw.data() + pos, 8);
        pos += 8;
        return v;
    };

    const uint64_t config_len = take_u64("config length");
    need(size, pos + config_len, "config blob");
    json config_json = json::parse(raw.data() + pos, raw.data() + pos + config_len, nullptr, false);
    if (config_json.is_discarded())
        throw CheckpointError(Code::bad_header, "config blob is not valid JSON");
    pos += config_len;

    const uint64_t manifest_len = take_u64("manifest length");
    need(size, pos + manifest_len, "manifest blob");
    json manifest = json::parse(raw.data() + pos, raw.data() + pos + manifest_len, nullptr, false);
    if (manifest.is_discarded() || !manifest.is_array())
        throw CheckpointError(Code::bad_header, "manifest is not a JSON array");
    pos += manifest_len;

    const uint64_t payload_start = align_up(pos);

    Checkpoint ckpt;
    try {
        ckpt.config = config_from_json(config_json);
    } catch (const json::exception& e) {
        throw CheckpointError(Code::bad_header, std::string("malformed config: ") + e.what());
    }

    uint64_t prev_end = 0;
    bool first = true;
    for (const auto& entry : manifest) {
        std::string name;
        std::vector<int64_t> shape;
        uint64_t offset;
        try {
            name = entry.at("name").get<std::string>();
            shape = entry.at("shape").get<std::vector<int64_t>>();
            offset = entry.at("offset").get<uint64_t>();
        } catch (const json::exception& e) {
            throw CheckpointError(Code::bad_header, std::string("malformed manifest entry: ") + e.what());
        }
        if (offset % kAlign != 0)
            throw CheckpointError(Code::bad_header, "tensor '" + name + "' offset not 64-byte aligned");
        if (!first && offset < prev_end)
            throw CheckpointError(Code::overlapping_regions,
                                  "tensor '" + name + "' region overlaps the previous tensor");
        first = false;

        uint64_t count = 1;
        for (int64_t e : shape) {
            if (e < 0) throw CheckpointError(Code::bad_header, "tensor '" + name + "' has negative extent");
            count *= static_cast<uint64_t>(e);
        }
        const uint64_t bytes = count * sizeof(float);
        if (payload_start + offset + bytes > size)
            throw CheckpointError(Code::truncated,
                                  "tensor '" + name + "' data extends past end of file");
        prev_end = offset + bytes;

        Tensor t(shape);
        std::memcpy(t.data.data(), raw.data() + payload_start + offset, bytes);
        for (float x : t.data)
            if (!std::isfinite(x))
                throw CheckpointError(Code::non_finite_payload,
                                      "tensor '" + name + "' contains non-finite values");
        if (ckpt.tensors.count(name))
            throw CheckpointError(Code::bad_header, "duplicate tensor '" + name + "' in manifest");
        ckpt.tensors.emplace(name, std::move(t));
    }

    validate_checkpoint(ckpt);
    return ckpt;
}

}  // namespace rrt
