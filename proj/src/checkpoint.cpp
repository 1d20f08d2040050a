#include "coupling_probe/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace cprobe {

static_assert(std::endian::native == std::endian::little, "tensor bundles assume a little-endian host");

namespace {

constexpr std::size_t kAlignment = 64;
constexpr const char* kFormat = "tensor-bundle";

[[noreturn]] void corrupt(const std::filesystem::path& path, const std::string& why) {
    throw Error(ErrorCode::CorruptCheckpoint, path.string() + ": " + why);
}

std::size_t element_size(DType dtype) { return dtype == DType::f32 ? 4 : 8; }

std::filesystem::path blob_path_for(const std::filesystem::path& manifest_path) {
    auto blob = manifest_path;
    blob.replace_extension(".bin");
    return blob;
}

}  // namespace

void write_bundle(const std::filesystem::path& manifest_path, const std::vector<NamedTensor>& tensors,
                  const nlohmann::json& extra, DType dtype) {
    const auto blob_path = blob_path_for(manifest_path);
    std::vector<char> blob;
    nlohmann::json entries = nlohmann::json::array();
    const std::size_t esize = element_size(dtype);

    for (const auto& t : tensors) {
        const std::size_t offset = (blob.size() + kAlignment - 1) / kAlignment * kAlignment;
        const std::size_t count = static_cast<std::size_t>(t.data.size());
        blob.resize(offset + count * esize, 0);
        char* dst = blob.data() + offset;
        for (Eigen::Index i = 0; i < t.data.rows(); ++i) {
            for (Eigen::Index j = 0; j < t.data.cols(); ++j) {
                if (dtype == DType::f64) {
                    const double v = t.data(i, j);
                    std::memcpy(dst, &v, 8);
                } else {
                    const float v = static_cast<float>(t.data(i, j));
                    std::memcpy(dst, &v, 4);
                }
                dst += esize;
            }
        }
        nlohmann::json shape = t.is_vector ? nlohmann::json::array({t.data.rows()})
                                           : nlohmann::json::array({t.data.rows(), t.data.cols()});
        entries.push_back({{"name", t.name},
                           {"dtype", dtype == DType::f64 ? "f64" : "f32"},
                           {"shape", shape},
                           {"offset_bytes", offset},
                           {"length_bytes", count * esize}});
    }

    nlohmann::json manifest = extra.is_object() ? extra : nlohmann::json::object();
    manifest["format"] = kFormat;
    manifest["version"] = 1;
    manifest["blob"] = blob_path.filename().string();
    manifest["tensors"] = entries;

    if (manifest_path.has_parent_path()) std::filesystem::create_directories(manifest_path.parent_path());
    {
        std::ofstream out(blob_path, std::ios::binary | std::ios::trunc);
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        if (!out) throw Error(ErrorCode::Io, "cannot write " + blob_path.string());
    }
    std::ofstream out(manifest_path, std::ios::trunc);
    out << manifest.dump(2) << '\n';
    if (!out) throw Error(ErrorCode::Io, "cannot write " + manifest_path.string());
}

Bundle read_bundle(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) corrupt(manifest_path, "cannot open manifest");
    Bundle bundle;
    try {
        bundle.manifest = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        corrupt(manifest_path, std::string("manifest is not valid JSON: ") + e.what());
    }
    const auto& m = bundle.manifest;
    if (!m.is_object() || !m.contains("tensors") || !m["tensors"].is_array()) corrupt(manifest_path, "no tensor list");

    auto blob_path = blob_path_for(manifest_path);
    if (m.contains("blob") && m["blob"].is_string()) blob_path = manifest_path.parent_path() / m["blob"].get<std::string>();
    std::ifstream blob_in(blob_path, std::ios::binary);
    if (!blob_in) corrupt(manifest_path, "missing blob " + blob_path.string());
    const std::vector<char> blob((std::istreambuf_iterator<char>(blob_in)), std::istreambuf_iterator<char>());

    for (const auto& entry : m["tensors"]) {
        try {
            NamedTensor t;
            t.name = entry.at("name").get<std::string>();
            const std::string dtype_name = entry.at("dtype").get<std::string>();
            if (dtype_name != "f32" && dtype_name != "f64") corrupt(manifest_path, t.name + ": unknown dtype " + dtype_name);
            const DType dtype = dtype_name == "f64" ? DType::f64 : DType::f32;
            const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
            const auto offset = entry.at("offset_bytes").get<std::size_t>();
            const auto length = entry.at("length_bytes").get<std::size_t>();

            if (shape.empty() || shape.size() > 2) corrupt(manifest_path, t.name + ": unsupported rank");
            for (auto s : shape) {
                if (s < 0) corrupt(manifest_path, t.name + ": negative dimension");
            }
            t.is_vector = shape.size() == 1;
            const Eigen::Index rows = shape[0];
            const Eigen::Index cols = t.is_vector ? 1 : shape[1];
            const std::size_t esize = element_size(dtype);
            if (length != static_cast<std::size_t>(rows * cols) * esize) corrupt(manifest_path, t.name + ": length disagrees with shape");
            if (offset % kAlignment != 0) corrupt(manifest_path, t.name + ": misaligned offset");
            if (offset + length > blob.size()) corrupt(manifest_path, t.name + ": blob truncated");

            t.data.resize(rows, cols);
            const char* src = blob.data() + offset;
            for (Eigen::Index i = 0; i < rows; ++i) {
                for (Eigen::Index j = 0; j < cols; ++j) {
                    if (dtype == DType::f64) {
                        double v;
                        std::memcpy(&v, src, 8);
                        t.data(i, j) = v;
                    } else {
                        float v;
                        std::memcpy(&v, src, 4);
                        t.data(i, j) = v;
                    }
                    src += esize;
                }
            }
            if (bundle.tensors.count(t.name) != 0) corrupt(manifest_path, "duplicate tensor " + t.name);
            bundle.tensors.emplace(t.name, std::move(t));
        } catch (const nlohmann::json::exception& e) {
            corrupt(manifest_path, std::string("malformed tensor entry: ") + e.what());
        }
    }
    return bundle;
}

nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers},   {"d_model", c.d_model},
            {"n_heads", c.n_heads},     {"d_ff", c.d_ff},
            {"d_vocab", c.d_vocab},     {"max_seq", c.max_seq},
            {"pos_encoding", to_string(c.pos_encoding)},
            {"ln_epsilon", c.ln_epsilon}, {"final_ln", c.final_ln}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.d_vocab = j.at("d_vocab").get<int>();
    c.max_seq = j.at("max_seq").get<int>();
    c.pos_encoding = parse_pos_encoding(j.at("pos_encoding").get<std::string>());
    c.ln_epsilon = j.value("ln_epsilon", 1e-5);
    c.final_ln = j.value("final_ln", true);
    return c;
}

void save_checkpoint(const ModelConfig& config, const ModelWeights& weights, const std::filesystem::path& path,
                     const nlohmann::json& extra, DType dtype) {
    weights.validate(config);
    std::vector<NamedTensor> tensors;
    for_each_tensor(weights, [&](const std::string& name, const auto& t) {
        using T = std::decay_t<decltype(t)>;
        tensors.push_back({name, Matrix(t), T::ColsAtCompileTime == 1});
    });
    nlohmann::json manifest = extra.is_object() ? extra : nlohmann::json::object();
    manifest["config"] = config_to_json(config);
    write_bundle(path, tensors, manifest, dtype);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    Bundle bundle = read_bundle(path);
    Checkpoint ckpt;
    ckpt.manifest = bundle.manifest;
    try {
        if (!bundle.manifest.contains("config")) corrupt(path, "manifest has no config");
        ckpt.config = config_from_json(bundle.manifest["config"]);
        ckpt.config.validate();
    } catch (const nlohmann::json::exception& e) {
        corrupt(path, std::string("bad config: ") + e.what());
    } catch (const Error& e) {
        if (e.code() == ErrorCode::CorruptCheckpoint) throw;
        corrupt(path, e.what());
    }

    ckpt.weights = zero_weights(ckpt.config);
    for_each_tensor(ckpt.weights, [&](const std::string& name, auto& t) {
        auto it = bundle.tensors.find(name);
        if (it == bundle.tensors.end()) corrupt(path, "missing tensor " + name);
        const Matrix& src = it->second.data;
        if (src.rows() != t.rows() || src.cols() != t.cols()) corrupt(path, "shape mismatch for " + name);
        t = src;
    });
    try {
        ckpt.weights.validate(ckpt.config);
    } catch (const Error& e) {
        corrupt(path, e.what());
    }
    return ckpt;
}

}  // namespace cprobe
