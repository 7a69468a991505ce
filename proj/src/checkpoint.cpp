#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "mmga/digest.hpp"
#include "mmga/error.hpp"
#include "mmga/harness.hpp"

namespace mmga::train {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr int kFormatVersion = 1;

std::vector<std::byte> encode_floats(const ag::Matrix& m) {
    std::vector<std::byte> out(static_cast<std::size_t>(m.size()) * 4);
    for (ag::Index i = 0; i < m.size(); ++i) {
        auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(m.data()[i]));
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
        std::memcpy(out.data() + 4 * i, &bits, 4);
    }
    return out;
}

float decode_float(const std::byte* p) {
    std::uint32_t bits;
    std::memcpy(&bits, p, 4);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    return std::bit_cast<float>(bits);
}

ordered_json shape_fields(const ModelConfig& m) {
    ordered_json j;
    j["vocab_size"] = m.vocab_size;
    j["max_tokens"] = m.max_tokens;
    j["image_channels"] = m.image.channels;
    j["image_height"] = m.image.height;
    j["image_width"] = m.image.width;
    j["stat_dim"] = m.stat_dim;
    return j;
}

}  // namespace

void save_checkpoint(const ModelState& state, const RunConfig& cfg, std::span<const HistoryRecord> history,
                     const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    ordered_json manifest;
    manifest["format_version"] = kFormatVersion;
    ordered_json config;
    for (const auto& [k, v] : to_key_values(cfg)) config[k] = v;
    manifest["config"] = config;
    manifest["data_shape"] = shape_fields(state.model);
    manifest["step"] = state.step;
    manifest["history_records"] = history.size();
    const std::string htext = history_text(history);
    manifest["history_sha256"] = sha256_hex(std::as_bytes(std::span(htext.data(), htext.size())));

    std::vector<std::byte> blob;
    ordered_json params = ordered_json::array();
    for (const auto& e : state.params.entries()) {
        const auto bytes = encode_floats(e.var.value());
        ordered_json pj;
        pj["name"] = e.name;
        pj["shape"] = {e.var.rows(), e.var.cols()};
        pj["offset"] = blob.size();
        pj["sha256"] = sha256_hex(bytes);
        params.push_back(pj);
        blob.insert(blob.end(), bytes.begin(), bytes.end());
    }
    manifest["params_sha256"] = sha256_hex(blob);
    manifest["params_bytes"] = blob.size();
    manifest["parameters"] = params;

    std::ofstream bin(dir / "params.bin", std::ios::binary | std::ios::trunc);
    bin.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    if (!bin) fail(ErrorCode::Io, "cannot write " + (dir / "params.bin").string());
    std::ofstream man(dir / "manifest.json", std::ios::trunc);
    man << manifest.dump(2) << "\n";
    if (!man) fail(ErrorCode::Io, "cannot write " + (dir / "manifest.json").string());
}

Checkpoint load_checkpoint(const std::filesystem::path& dir, const ModelConfig* expected) {
    const auto man_path = dir / "manifest.json";
    const auto bin_path = dir / "params.bin";
    for (const auto& f : {man_path, bin_path}) {
        if (!std::filesystem::exists(f)) fail(ErrorCode::Io, "missing checkpoint file: " + f.string());
    }
    ordered_json manifest;
    try {
        std::ifstream in(man_path);
        manifest = ordered_json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::Validation, man_path.string() + ": " + e.what());
    }
    std::vector<std::byte> blob(std::filesystem::file_size(bin_path));
    {
        std::ifstream in(bin_path, std::ios::binary);
        in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
        if (!in) fail(ErrorCode::Io, "cannot read " + bin_path.string());
    }
    try {
        if (manifest.at("format_version").get<int>() != kFormatVersion) {
            fail(ErrorCode::Validation, "unsupported checkpoint format version");
        }
        if (sha256_hex(blob) != manifest.at("params_sha256").get<std::string>()) {
            fail(ErrorCode::DigestMismatch, "digest mismatch: " + bin_path.string());
        }
        KeyValueMap kv;
        for (const auto& [k, v] : manifest.at("config").items()) kv[k] = v.get<std::string>();
        Checkpoint ck;
        ck.config = run_config_from(kv, man_path.string());
        const auto& shape = manifest.at("data_shape");
        ModelConfig& m = ck.config.model;
        m.vocab_size = shape.at("vocab_size").get<int>();
        m.max_tokens = shape.at("max_tokens").get<int>();
        m.image.channels = shape.at("image_channels").get<int>();
        m.image.height = shape.at("image_height").get<int>();
        m.image.width = shape.at("image_width").get<int>();
        m.stat_dim = shape.at("stat_dim").get<int>();
        validate(m);
        if (expected != nullptr && !(*expected == m)) {
            fail(ErrorCode::ShapeMismatch, "checkpoint model configuration differs from the current configuration");
        }
        const ParamStore reference = init_params(expected != nullptr ? *expected : m, 0);
        const auto& params = manifest.at("parameters");
        if (params.size() != reference.entries().size()) {
            fail(ErrorCode::ShapeMismatch, "checkpoint holds " + std::to_string(params.size()) + " arrays, model expects " +
                                               std::to_string(reference.entries().size()));
        }
        ParamStore store;
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& pj = params[i];
            const auto name = pj.at("name").get<std::string>();
            const auto rows = pj.at("shape").at(0).get<ag::Index>();
            const auto cols = pj.at("shape").at(1).get<ag::Index>();
            const auto& ref = reference.entries()[i];
            if (ref.name != name || ref.var.rows() != rows || ref.var.cols() != cols) {
                fail(ErrorCode::ShapeMismatch, "checkpoint array " + name + " (" + std::to_string(rows) + "x" +
                                                   std::to_string(cols) + ") does not match " + ref.name + " (" +
                                                   std::to_string(ref.var.rows()) + "x" +
                                                   std::to_string(ref.var.cols()) + ")");
            }
            const auto offset = pj.at("offset").get<std::size_t>();
            const auto n = static_cast<std::size_t>(rows * cols) * 4;
            if (offset + n > blob.size()) fail(ErrorCode::Validation, "checkpoint array " + name + " is truncated");
            const std::span<const std::byte> bytes(blob.data() + offset, n);
            if (sha256_hex(bytes) != pj.at("sha256").get<std::string>()) {
                fail(ErrorCode::DigestMismatch, "digest mismatch: parameter " + name);
            }
            ag::Matrix mtx(rows, cols);
            for (ag::Index k = 0; k < mtx.size(); ++k) mtx.data()[k] = decode_float(bytes.data() + 4 * k);
            store.add(name, std::move(mtx));
        }
        ck.state.model = m;
        ck.state.params = std::move(store);
        ck.state.optimizer = Optimizer(ck.config.train.optimizer, ck.config.train.learning_rate);
        ck.state.step = manifest.at("step").get<std::int64_t>();
        ck.history_digest = manifest.at("history_sha256").get<std::string>();
        return ck;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::Validation, man_path.string() + ": " + e.what());
    }
}

}  // namespace mmga::train
