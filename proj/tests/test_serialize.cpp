#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "advlab/models.hpp"
#include "advlab/serialize.hpp"

using advlab::Tensor;
namespace fs = std::filesystem;

namespace {
fs::path temp_dir(const char* tag) {
    auto p = fs::temp_directory_path() / (std::string("advlab_test_") + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}
}  // namespace

TEST_CASE("advt header layout") {
    Tensor<float> t({2, 3}, {1, 2, 3, 4, 5, 6});
    auto buf = advlab::advt_encode(t);
    REQUIRE(buf.size() == 7 + 8 + 24);
    REQUIRE(buf[0] == 'A');
    REQUIRE(buf[1] == 'D');
    REQUIRE(buf[2] == 'V');
    REQUIRE(buf[3] == 'T');
    REQUIRE(buf[4] == 0x01);  // version
    REQUIRE(buf[5] == 0x00);  // f32
    REQUIRE(buf[6] == 2);     // ndim
    // little-endian extents 2, 3
    REQUIRE(buf[7] == 2);
    REQUIRE(buf[11] == 3);
}

TEST_CASE("advt round-trip is bit-exact") {
    advlab::Rng rng(5);
    auto t = Tensor<float>::randn({3, 4, 5}, rng, 10.f);
    t[0] = -0.0f;  // sign of zero must survive
    auto buf = advlab::advt_encode(t);
    auto back = advlab::advt_decode(buf, "test");
    REQUIRE(back.shape() == t.shape());
    REQUIRE(std::memcmp(back.data(), t.data(), static_cast<size_t>(t.numel()) * 4) == 0);
    REQUIRE(advlab::advt_encode(back) == buf);

    auto dir = temp_dir("advt");
    advlab::write_advt_file(dir / "t.advt", t);
    auto fromfile = advlab::read_advt_file(dir / "t.advt");
    REQUIRE(std::memcmp(fromfile.data(), t.data(), static_cast<size_t>(t.numel()) * 4) == 0);
}

TEST_CASE("advt decode rejects malformed input") {
    Tensor<float> t({2}, {1, 2});
    auto buf = advlab::advt_encode(t);

    auto corrupt = buf;
    corrupt[0] = 'X';
    REQUIRE_THROWS_AS(advlab::advt_decode(corrupt, "t"), advlab::IoError);

    corrupt = buf;
    corrupt[5] = 0x07;  // unknown dtype
    REQUIRE_THROWS_AS(advlab::advt_decode(corrupt, "t"), advlab::IoError);

    corrupt = buf;
    corrupt.pop_back();  // truncated payload
    REQUIRE_THROWS_AS(advlab::advt_decode(corrupt, "t"), advlab::IoError);
}

TEST_CASE("sha256 known answer") {
    std::vector<uint8_t> abc{'a', 'b', 'c'};
    REQUIRE(advlab::sha256_hex(abc) ==
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("backbone checkpoint round-trip") {
    advlab::BackboneConfig cfg;
    cfg.stage_widths = {8, 16};
    cfg.blocks_per_stage = 1;
    cfg.classes = 4;
    cfg.image_size = 16;
    cfg.tap_stages = {0, 1};

    advlab::ResidualBackbone<float> net(cfg, 99);
    // perturb some state so defaults do not mask bugs
    net.bn_layers()[0]->stats.mean[0] = 0.25f;
    auto dir = temp_dir("ckpt");
    advlab::save_backbone(dir / "net.advc", net, {{"note", "unit"}});

    auto loaded = advlab::load_backbone(dir / "net.advc");
    REQUIRE(loaded.net.config() == cfg);
    REQUIRE(loaded.header["note"] == "unit");
    auto a = net.params();
    auto b = loaded.net.params();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].first == b[i].first);
        REQUIRE(a[i].second->vec() == b[i].second->vec());
    }
    REQUIRE(loaded.net.bn_layers()[0]->stats.mean[0] == 0.25f);

    // config mismatch is an error, not a reshape
    advlab::BackboneConfig other = cfg;
    other.classes = 7;
    REQUIRE_THROWS_AS(advlab::load_backbone_expect(dir / "net.advc", other), advlab::DataError);

    // corrupting a byte in the stream is detected somewhere down the line
    auto bytes = advlab::read_file_bytes(dir / "net.advc");
    bytes[4] = 0x55;
    advlab::write_file_bytes(dir / "bad.advc", bytes);
    REQUIRE_THROWS_AS(advlab::load_backbone(dir / "bad.advc"), advlab::DataError);
}
