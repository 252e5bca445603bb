// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "flowcast/autograd.hpp"
#include "flowcast/backbone.hpp"
#include "flowcast/checkpoint.hpp"
#include "flowcast/errors.hpp"
#include "flowcast/rng.hpp"

using namespace flowcast;
namespace ag = flowcast::ag;
namespace fs = std::filesystem;

using DTensor = TensorT<double>;
using DTape = ag::TapeT<double>;
using DBackbone = BackboneT<double>;

namespace {

BackboneConfig micro_config() {
    BackboneConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.width = 8;
    cfg.ffn_width = 16;
    cfg.max_tokens = 16;
    return cfg;
}

struct TempDir {
    fs::path path;
    TempDir() {
        std::random_device rd;
        path = fs::temp_directory_path() / ("flowcast-test-" + std::to_string(rd()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("configuration validation") {
    BackboneConfig bad = micro_config();
    bad.width = 10;
    bad.n_heads = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    BackboneConfig small = BackboneConfig::gpt2_small();
    CHECK(small.n_layers == 12);
    CHECK(small.n_heads == 12);
    CHECK(small.width == 768);
    CHECK(small.ffn_width == 3072);
    CHECK(small.max_tokens == 1024);
    small.validate();
}

TEST_CASE("every base parameter is frozen at init") {
    RngStream rng(1);
    DBackbone b = DBackbone::init(micro_config(), rng);
    for (auto* p : b.parameters()) CHECK_FALSE(p->trainable);
    CHECK_FALSE(b.has_lora());
}

TEST_CASE("initialization is deterministic per seed") {
    RngStream r1(9), r2(9), r3(10);
    DBackbone a = DBackbone::init(micro_config(), r1);
    DBackbone b = DBackbone::init(micro_config(), r2);
    DBackbone c = DBackbone::init(micro_config(), r3);
    CHECK(a.blocks[0].attn.q_weight.value.max_abs_diff(b.blocks[0].attn.q_weight.value) == 0.0);
    CHECK(a.blocks[1].fc_in_weight.value.max_abs_diff(b.blocks[1].fc_in_weight.value) == 0.0);
    CHECK(a.blocks[0].attn.q_weight.value.max_abs_diff(c.blocks[0].attn.q_weight.value) > 0.0);
}

TEST_CASE("freshly attached adapters are an exact no-op") {
    RngStream rng(2);
    DBackbone plain = DBackbone::init(micro_config(), rng);
    RngStream rng2(2);
    DBackbone adapted = DBackbone::init(micro_config(), rng2);
    RngStream lora_rng(77);
    adapted.attach_lora(3, 32.0, 0.1, lora_rng);
    CHECK(adapted.has_lora());

    RngStream data(3);
    DTensor tokens = DTensor::gaussian({5, 8}, data, 1.0);
    DTape t1, t2;
    const DTensor y_plain = plain.forward(t1, t1.leaf(tokens)).val();
    const DTensor y_adapted = adapted.forward(t2, t2.leaf(tokens)).val();
    CHECK(y_plain.max_abs_diff(y_adapted) < 1e-12);
}

TEST_CASE("adapter attachment rules") {
    RngStream rng(4);
    DBackbone b = DBackbone::init(micro_config(), rng);
    RngStream lr(5);
    b.attach_lora(2, 32.0, 0.0, lr);
    CHECK_THROWS_AS(b.attach_lora(2, 32.0, 0.0, lr), ConfigError);

    DBackbone c = DBackbone::init(micro_config(), rng);
    CHECK_THROWS_AS(c.attach_lora(0, 32.0, 0.0, lr), ConfigError);
    CHECK_THROWS_AS(c.attach_lora(9, 32.0, 0.0, lr), ConfigError);  // > min(8, 8)
    CHECK_THROWS_AS(c.attach_lora(2, 32.0, 1.0, lr), ConfigError);
    CHECK_FALSE(c.has_lora());
}

TEST_CASE("adapters land on the query and key projections of every block") {
    BackboneConfig cfg = micro_config();
    cfg.n_layers = 12;
    RngStream rng(6);
    DBackbone b = DBackbone::init(cfg, rng);
    RngStream lr(7);
    b.attach_lora(2, 32.0, 0.1, lr);

    size_t down_count = 0, up_count = 0, trainable = 0;
    for (auto* p : b.parameters()) {
        if (p->name.find("lora.down") != std::string::npos) {
            ++down_count;
            CHECK(p->value.max_abs() == 0.0);  // zero-init keeps the path silent
            CHECK(p->trainable);
        }
        if (p->name.find("lora.up") != std::string::npos) {
            ++up_count;
            CHECK(p->value.max_abs() > 0.0);
            CHECK(p->trainable);
        }
        CHECK(p->name.find("v_lora") == std::string::npos);
        if (p->trainable) ++trainable;
    }
    CHECK(down_count == 24);  // q and k in each of 12 blocks
    CHECK(up_count == 24);
    CHECK(trainable == 48);
}

TEST_CASE("adapter parameter count matches the rank formula") {
    RngStream rng(8);
    auto a = LoRAAdapterT<double>::init("a", 768, 768, 4, 32.0, 0.1, rng);
    CHECK(a.down.value.numel() + a.up.value.numel() == 6144);  // 2 * 768 * 4
    CHECK(a.down.value.shape() == std::vector<size_t>{768, 4});
    CHECK(a.up.value.shape() == std::vector<size_t>{4, 768});
}

TEST_CASE("adapter path scale is alpha over rank") {
    // With identity-ish tiny matrices the extra path is (alpha/r) * h . down . up.
    DTape tape;
    ParameterT<double> w("w", DTensor::eye(2));
    ParameterT<double> bias("b", DTensor::zeros({2}));
    LoRAAdapterT<double> adapter;
    adapter.rank = 2;
    adapter.alpha = 8.0;
    adapter.dropout_p = 0.0;
    adapter.down = ParameterT<double>("d", DTensor::eye(2));
    adapter.up = ParameterT<double>("u", DTensor::eye(2));
    std::optional<LoRAAdapterT<double>> maybe(adapter);
    auto h = tape.leaf(DTensor({1, 2}, {1.0, 2.0}));
    auto y = lora_projection(tape, h, w, bias, maybe, false, nullptr);
    // base = h, path = (8/2) * h -> y = 5 * h
    CHECK(y.val()[0] == doctest::Approx(5.0));
    CHECK(y.val()[1] == doctest::Approx(10.0));
}

TEST_CASE("zero layers reduce to the final layer norm") {
    BackboneConfig cfg = micro_config();
    cfg.n_layers = 0;
    RngStream rng(9);
    DBackbone b = DBackbone::init(cfg, rng);
    RngStream data(10);
    DTensor tokens = DTensor::gaussian({4, 8}, data, 1.0);

    DTape tape;
    const DTensor y = b.forward(tape, tape.leaf(tokens)).val();
    DTape ref;
    auto gamma = ref.leaf(DTensor::full({8}, 1.0));
    auto beta = ref.leaf(DTensor::zeros({8}));
    const DTensor expected = ag::layer_norm(ref.leaf(tokens), gamma, beta, 1e-5).val();
    CHECK(y.max_abs_diff(expected) < 1e-12);
}

TEST_CASE("forward shape and capacity contracts") {
    RngStream rng(11);
    DBackbone b = DBackbone::init(micro_config(), rng);
    RngStream data(12);
    DTape tape;
    auto y = b.forward(tape, tape.leaf(DTensor::gaussian({7, 8}, data, 1.0)));
    CHECK(y.val().shape() == std::vector<size_t>{7, 8});

    CHECK_THROWS_AS((void)b.forward(tape, tape.leaf(DTensor::zeros({3, 9}))), ShapeError);
    CHECK_THROWS_AS((void)b.forward(tape, tape.leaf(DTensor::zeros({17, 8}))), CapacityError);
}

TEST_CASE("learned positional table shifts tokens by position") {
    BackboneConfig cfg = micro_config();
    cfg.n_layers = 0;
    cfg.positional = PositionalMode::learned;
    RngStream rng(13);
    DBackbone b = DBackbone::init(cfg, rng);
    REQUIRE(b.positional.has_value());
    CHECK(b.positional->value.shape() == std::vector<size_t>{16, 8});
    CHECK_FALSE(b.positional->trainable);

    RngStream data(14);
    DTensor tokens = DTensor::gaussian({2, 8}, data, 1.0);
    DTensor shifted = tokens;
    for (size_t t = 0; t < 2; ++t)
        for (size_t d = 0; d < 8; ++d) shifted.at2(t, d) += b.positional->value.at2(t, d);

    DTape tape;
    const DTensor y = b.forward(tape, tape.leaf(tokens)).val();
    DTape ref;
    auto gamma = ref.leaf(DTensor::full({8}, 1.0));
    auto beta = ref.leaf(DTensor::zeros({8}));
    const DTensor expected = ag::layer_norm(ref.leaf(shifted), gamma, beta, 1e-5).val();
    CHECK(y.max_abs_diff(expected) < 1e-12);
}

TEST_CASE("gradient reaches the zero-initialized adapter factor") {
    RngStream rng(15);
    DBackbone b = DBackbone::init(micro_config(), rng);
    RngStream lr(16);
    b.attach_lora(2, 32.0, 0.0, lr);

    RngStream data(17);
    DTensor tokens = DTensor::gaussian({4, 8}, data, 1.0);
    DTape tape;
    auto y = b.forward(tape, tape.leaf(tokens));
    tape.backward(ag::sum(ag::mul(y, y)));
    tape.accumulate_param_grads();

    auto& attn = b.blocks[0].attn;
    REQUIRE(attn.q_adapter.has_value());
    // down is zero, so up gets no gradient yet, but down itself does.
    CHECK(attn.q_adapter->down.grad.max_abs() > 0.0);
    CHECK(attn.q_adapter->up.grad.max_abs() == 0.0);
}

TEST_CASE("trainable accounting for the compact configuration") {
    RngStream rng(18);
    BackboneConfig cfg;  // 2 layers, 4 heads, width 64, ffn 256
    DBackbone b = DBackbone::init(cfg, rng);
    TrainableReport before = trainable_report(b.parameters());
    CHECK(before.total_count == 100096);
    CHECK(before.trainable_count == 0);

    RngStream lr(19);
    b.attach_lora(4, 32.0, 0.1, lr);
    TrainableReport after = trainable_report(b.parameters());
    CHECK(after.total_count == 100096 + 2048);
    CHECK(after.trainable_count == 2048);  // 2 blocks * 2 adapters * 2 * 64 * 4
    CHECK(after.fraction == doctest::Approx(2048.0 / 102144.0));
}

TEST_CASE("checkpoint round trip restores parameters bitwise") {
    TempDir tmp;
    RngStream rng(20);
    Backbone b = Backbone::init(micro_config(), rng);
    RngStream lr(21);
    b.attach_lora(2, 32.0f, 0.1, lr);

    std::vector<std::pair<std::string, const Tensor*>> named;
    for (auto* p : b.parameters()) named.emplace_back(p->name, &p->value);
    const std::string path = tmp.file("model.bin");
    save_checkpoint(path, named);

    // Mutate, then restore.
    std::vector<Tensor> snapshot;
    for (auto* p : b.parameters()) snapshot.push_back(p->value);
    for (auto* p : b.parameters()) p->value.fill(0.123f);
    std::vector<std::pair<std::string, Tensor*>> dest;
    for (auto* p : b.parameters()) dest.emplace_back(p->name, &p->value);
    load_checkpoint(path, dest);
    size_t i = 0;
    for (auto* p : b.parameters()) CHECK(p->value.max_abs_diff(snapshot[i++]) == 0.0f);
}

TEST_CASE("checkpoint loading failure modes") {
    TempDir tmp;
    RngStream rng(22);
    Backbone plain = Backbone::init(micro_config(), rng);
    std::vector<std::pair<std::string, const Tensor*>> named;
    for (auto* p : plain.parameters()) named.emplace_back(p->name, &p->value);
    const std::string path = tmp.file("plain.bin");
    save_checkpoint(path, named);

    SUBCASE("missing tensors are reported by name") {
        RngStream rng2(23);
        Backbone adapted = Backbone::init(micro_config(), rng2);
        RngStream lr(24);
        adapted.attach_lora(2, 32.0f, 0.1, lr);
        std::vector<std::pair<std::string, Tensor*>> dest;
        for (auto* p : adapted.parameters()) dest.emplace_back(p->name, &p->value);
        try {
            load_checkpoint(path, dest);
            FAIL("expected CheckpointError");
        } catch (const CheckpointError& e) {
            CHECK(std::string(e.what()).find("q_lora") != std::string::npos);
        }
    }
    SUBCASE("shape mismatches are rejected") {
        Tensor wrong = Tensor::zeros({4, 4});
        std::vector<std::pair<std::string, Tensor*>> dest{
            {"block.0.attn.q_proj.weight", &wrong}};
        CHECK_THROWS_AS(load_checkpoint(path, dest), CheckpointError);
    }
    SUBCASE("extra tensors in the file are ignored") {
        Tensor only = Tensor::zeros({8});
        std::vector<std::pair<std::string, Tensor*>> dest{{"block.0.ln1.gamma", &only}};
        load_checkpoint(path, dest);
        CHECK(only.max_abs_diff(Tensor::full({8}, 1.0f)) == 0.0f);
    }
    SUBCASE("duplicate names cannot be saved") {
        std::vector<std::pair<std::string, const Tensor*>> dup = named;
        dup.push_back(named.front());
        CHECK_THROWS_AS(save_checkpoint(tmp.file("dup.bin"), dup), CheckpointError);
    }
    SUBCASE("truncated files are rejected") {
        std::ifstream in(path, std::ios::binary);
        std::string bytes(std::istreambuf_iterator<char>(in), {});
        const std::string cut = tmp.file("cut.bin");
        std::ofstream out(cut, std::ios::binary);
        out << bytes.substr(0, bytes.size() / 2);
        out.close();
        std::vector<std::pair<std::string, Tensor*>> dest;
        for (auto* p : plain.parameters()) dest.emplace_back(p->name, &p->value);
        CHECK_THROWS((void)load_checkpoint(cut, dest));
    }
}

TEST_CASE("backbone output is invariant to row permutation without masks or positions") {
    BackboneConfig cfg = micro_config();
    cfg.attention_mask = ag::AttnMask::none;
    RngStream rng(25);
    DBackbone b = DBackbone::init(cfg, rng);
    RngStream data(26);
    DTensor tokens = DTensor::gaussian({5, 8}, data, 1.0);

    std::vector<size_t> perm{3, 0, 4, 1, 2};
    DTensor permuted({5, 8});
    for (size_t i = 0; i < 5; ++i)
        for (size_t d = 0; d < 8; ++d) permuted.at2(i, d) = tokens.at2(perm[i], d);

    DTape t1, t2;
    const DTensor y = b.forward(t1, t1.leaf(tokens)).val();
    const DTensor yp = b.forward(t2, t2.leaf(permuted)).val();
    for (size_t i = 0; i < 5; ++i)
        for (size_t d = 0; d < 8; ++d)
            CHECK(yp.at2(i, d) == doctest::Approx(y.at2(perm[i], d)).epsilon(1e-9));
}
