#include <gtest/gtest.h>

#include <fstream>

#include "coupling_probe/checkpoint.hpp"
#include "coupling_probe/trajectory.hpp"
#include "test_util.hpp"

using namespace cprobe;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "cprobe_checkpoint_test";
    fs::create_directories(dir);
    return dir / name;
}

ModelConfig cfg() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 16;
    c.d_vocab = 10;
    c.pos_encoding = PosEncoding::sinusoidal;
    return c;
}

void expect_code(ErrorCode code, const auto& fn) {
    try {
        fn();
        FAIL() << "expected " << to_string(code);
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), code) << e.what();
    }
}

}  // namespace

TEST(Checkpoint, RoundTripBitExact) {
    const ModelConfig c = cfg();
    const ModelWeights w = testutil::random_weights(c, 42);
    const fs::path p = scratch("rt.json");
    save_checkpoint(c, w, p, {{"step", 17}});
    const Checkpoint back = load_checkpoint(p);
    EXPECT_TRUE(back.config == c);
    EXPECT_TRUE(back.weights == w);
    EXPECT_EQ(back.manifest["step"], 17);

    // analysis of the reloaded model equals the in-memory one bit for bit
    const auto toks = testutil::random_tokens(6, c.d_vocab, 3);
    const auto a = forward_trace(toks, c, w);
    const auto b = forward_trace(toks, back.config, back.weights);
    for (std::size_t l = 0; l < a.X.size(); ++l) EXPECT_TRUE(a.X[l] == b.X[l]);
    EXPECT_TRUE(layer_norm_profile(a) == layer_norm_profile(b));
}

TEST(Checkpoint, ManifestLayout) {
    const ModelConfig c = cfg();
    const fs::path p = scratch("layout.json");
    save_checkpoint(c, init_weights(c, 1), p);
    std::ifstream in(p);
    const auto j = nlohmann::json::parse(in);
    EXPECT_EQ(j["format"], "tensor-bundle");
    EXPECT_EQ(j["blob"], "layout.bin");
    for (const auto& t : j["tensors"]) {
        EXPECT_EQ(t["offset_bytes"].get<std::size_t>() % 64, 0u);
        std::size_t n = 1;
        for (auto s : t["shape"]) n *= s.get<std::size_t>();
        EXPECT_EQ(t["length_bytes"].get<std::size_t>(), n * 8);
    }
    EXPECT_TRUE(fs::exists(scratch("layout.bin")));
}

TEST(Checkpoint, Float32Path) {
    const ModelConfig c = cfg();
    const ModelWeights w = init_weights(c, 5);
    const fs::path p = scratch("f32.json");
    save_checkpoint(c, w, p, nlohmann::json::object(), DType::f32);
    const Checkpoint back = load_checkpoint(p);
    EXPECT_TRUE(back.weights.token_embedding.isApprox(w.token_embedding, 1e-6));
    EXPECT_TRUE(back.weights.token_embedding == w.token_embedding.cast<float>().cast<double>());
}

TEST(Checkpoint, TruncatedBlob) {
    const ModelConfig c = cfg();
    const fs::path p = scratch("trunc.json");
    save_checkpoint(c, init_weights(c, 1), p);
    fs::resize_file(scratch("trunc.bin"), fs::file_size(scratch("trunc.bin")) / 2);
    expect_code(ErrorCode::CorruptCheckpoint, [&] { load_checkpoint(p); });
}

TEST(Checkpoint, MissingBlobAndBadJson) {
    const ModelConfig c = cfg();
    const fs::path p = scratch("missing.json");
    save_checkpoint(c, init_weights(c, 1), p);
    fs::remove(scratch("missing.bin"));
    expect_code(ErrorCode::CorruptCheckpoint, [&] { load_checkpoint(p); });
    const fs::path bad = scratch("bad.json");
    std::ofstream(bad) << "{ not json";
    expect_code(ErrorCode::CorruptCheckpoint, [&] { load_checkpoint(bad); });
}

TEST(Checkpoint, UnknownFieldsIgnored) {
    const ModelConfig c = cfg();
    const ModelWeights w = init_weights(c, 2);
    const fs::path p = scratch("unknown.json");
    save_checkpoint(c, w, p);
    nlohmann::json j;
    {
        std::ifstream in(p);
        j = nlohmann::json::parse(in);
    }
    j["future_field"] = {1, 2, 3};
    j["tensors"][0]["annotation"] = "extra";
    std::ofstream(p) << j.dump();
    EXPECT_TRUE(load_checkpoint(p).weights == w);
}

TEST(Checkpoint, ShapeDisagreement) {
    const ModelConfig c = cfg();
    const fs::path p = scratch("shape.json");
    save_checkpoint(c, init_weights(c, 2), p);
    nlohmann::json j;
    {
        std::ifstream in(p);
        j = nlohmann::json::parse(in);
    }
    j["tensors"][0]["shape"][0] = 3;
    std::ofstream(p) << j.dump();
    expect_code(ErrorCode::CorruptCheckpoint, [&] { load_checkpoint(p); });
}
