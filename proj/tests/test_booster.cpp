#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <random>
#include <string>
#include <vector>

#include "fb/booster.hpp"
#include "fb/checkpoint.hpp"
#include "fb/llm_block.hpp"
#include "fb/ops.hpp"

using fb::BackboneKind;
using fb::BoosterVariant;
using fb::index_t;
using fb::ModelSpec;
using fb::ParamStore;
using fb::Shape;
using fb::Tensor;

namespace {

Tensor<double> rnd(Shape shape, unsigned seed) {
  std::mt19937 gen(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.vec()) v = dist(gen);
  return t;
}

ModelSpec tiny_spec(BoosterVariant v) {
  ModelSpec spec;
  spec.backbone.kind = BackboneKind::vit2d;
  spec.backbone.d_model = 8;
  spec.backbone.depth = 1;
  spec.backbone.n_heads = 2;
  spec.backbone.patch = {4};
  spec.backbone.input = {1, 8, 8};
  spec.backbone.n_classes = 2;
  spec.variant = v;
  spec.llm.d_llm = 12;
  spec.llm.n_heads = 2;
  spec.llm.d_ffn = 10;
  spec.llm.seed = 5;
  return spec;
}

bool bitwise_equal(const Tensor<double>& a, const Tensor<double>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.numel()) * sizeof(double)) == 0;
}

void zero_param(ParamStore<double>& st, const std::string& name) {
  auto& v = st.at(name).vec();
  std::fill(v.begin(), v.end(), 0.0);
}

// The adapter pair evaluated directly from the stored weights.
Tensor<double> encode(const ParamStore<double>& st, const Tensor<double>& t) {
  return fb::linear(t, st.at("booster.encode.weight"), &st.at("booster.encode.bias"));
}
Tensor<double> decode(const ParamStore<double>& st, const Tensor<double>& t) {
  return fb::linear(t, st.at("booster.decode.weight"), &st.at("booster.decode.bias"));
}

}  // namespace

TEST_CASE("variant names parse both ways") {
  CHECK(fb::parse_booster_variant("baseline") == BoosterVariant::baseline);
  CHECK(fb::parse_booster_variant("r-llm") == BoosterVariant::r_llm);
  CHECK(fb::parse_booster_variant("out-r-llm") == BoosterVariant::out_r_llm);
  CHECK(fb::parse_booster_variant("hybrid-r-llm") == BoosterVariant::hybrid_r_llm);
  CHECK(fb::parse_booster_variant("mlp-control") == BoosterVariant::mlp_control);
  for (BoosterVariant v : {BoosterVariant::baseline, BoosterVariant::r_llm,
                           BoosterVariant::out_r_llm, BoosterVariant::hybrid_r_llm,
                           BoosterVariant::mlp_control}) {
    CHECK(fb::parse_booster_variant(fb::to_string(v)) == v);
  }
  CHECK_THROWS_WITH_AS(fb::parse_booster_variant("rllm"), doctest::Contains("r-llm"),
                       fb::ConfigError);
}

TEST_CASE("variant capability flags") {
  CHECK(!fb::variant_uses_adapters(BoosterVariant::baseline));
  CHECK(fb::variant_uses_adapters(BoosterVariant::mlp_control));
  CHECK(fb::variant_uses_llm(BoosterVariant::r_llm));
  CHECK(fb::variant_uses_llm(BoosterVariant::out_r_llm));
  CHECK(fb::variant_uses_llm(BoosterVariant::hybrid_r_llm));
  CHECK(!fb::variant_uses_llm(BoosterVariant::mlp_control));
  CHECK(!fb::variant_uses_llm(BoosterVariant::baseline));
}

TEST_CASE("unfreezing a block that does not exist is a config error") {
  ModelSpec spec = tiny_spec(BoosterVariant::mlp_control);
  spec.unfreeze_llm = true;
  CHECK_THROWS_WITH_AS(spec.validate(), doctest::Contains("unfreeze_llm"), fb::ConfigError);
  spec.variant = BoosterVariant::r_llm;
  CHECK_NOTHROW(spec.validate());
}

TEST_CASE("baseline booster passes tokens through bitwise") {
  ModelSpec spec = tiny_spec(BoosterVariant::baseline);
  ParamStore<double> st = fb::build_model<double>(spec, 1);
  Tensor<double> t = rnd({2, 5, 8}, 1);
  CHECK(bitwise_equal(fb::booster_forward(spec, st, t), t));
}

TEST_CASE("mlp-control is decode(encode(tokens))") {
  ModelSpec spec = tiny_spec(BoosterVariant::mlp_control);
  ParamStore<double> st = fb::build_model<double>(spec, 2);
  Tensor<double> t = rnd({2, 5, 8}, 2);
  Tensor<double> out = fb::booster_forward(spec, st, t);
  CHECK(bitwise_equal(out, decode(st, encode(st, t))));
}

TEST_CASE("r-llm with a zeroed block equals decode(2 * encode(tokens))") {
  ModelSpec spec = tiny_spec(BoosterVariant::r_llm);
  ParamStore<double> st = fb::build_model<double>(spec, 3);
  zero_param(st, "llm_block.0.attn.o.weight");
  zero_param(st, "llm_block.0.mlp.down.weight");
  Tensor<double> t = rnd({2, 5, 8}, 3);
  Tensor<double> out = fb::booster_forward(spec, st, t);
  Tensor<double> enc = encode(st, t);
  Tensor<double> expect = decode(st, fb::add(enc, enc));
  REQUIRE(out.shape() == expect.shape());
  for (std::size_t i = 0; i < out.vec().size(); ++i) {
    CHECK(out.vec()[i] == doctest::Approx(expect.vec()[i]).epsilon(1e-12));
  }
}

TEST_CASE("out-r-llm with a zeroed decoder returns tokens exactly") {
  ModelSpec spec = tiny_spec(BoosterVariant::out_r_llm);
  ParamStore<double> st = fb::build_model<double>(spec, 4);
  zero_param(st, "booster.decode.weight");
  zero_param(st, "booster.decode.bias");
  Tensor<double> t = rnd({2, 5, 8}, 4);
  CHECK(bitwise_equal(fb::booster_forward(spec, st, t), t));
}

TEST_CASE("out-r-llm feeds only the block output to the decoder") {
  ModelSpec spec = tiny_spec(BoosterVariant::out_r_llm);
  ParamStore<double> st = fb::build_model<double>(spec, 5);
  Tensor<double> t = rnd({1, 4, 8}, 5);
  Tensor<double> out = fb::booster_forward(spec, st, t);
  Tensor<double> enc = encode(st, t);
  Tensor<double> l = fb::llm_block_forward(spec.llm_config(), st, enc);
  Tensor<double> expect = fb::add(decode(st, l), t);
  for (std::size_t i = 0; i < out.vec().size(); ++i) {
    CHECK(out.vec()[i] == doctest::Approx(expect.vec()[i]).epsilon(1e-12));
  }
}

TEST_CASE("hybrid keeps both the inner and the outer residual") {
  ModelSpec spec = tiny_spec(BoosterVariant::hybrid_r_llm);
  ParamStore<double> st = fb::build_model<double>(spec, 6);
  Tensor<double> t = rnd({1, 4, 8}, 6);
  Tensor<double> out = fb::booster_forward(spec, st, t);
  Tensor<double> enc = encode(st, t);
  Tensor<double> l = fb::llm_block_forward(spec.llm_config(), st, enc);
  Tensor<double> expect = fb::add(decode(st, fb::add(l, enc)), t);
  for (std::size_t i = 0; i < out.vec().size(); ++i) {
    CHECK(out.vec()[i] == doctest::Approx(expect.vec()[i]).epsilon(1e-12));
  }
}

TEST_CASE("r-llm and mlp-control train the same parameter set size") {
  struct Dims {
    index_t d_model, d_llm, ffn;
  };
  for (Dims dims : {Dims{8, 12, 10}, Dims{16, 24, 7}, Dims{12, 6, 20}}) {
    ModelSpec a = tiny_spec(BoosterVariant::r_llm);
    a.backbone.d_model = dims.d_model;
    a.llm.d_llm = dims.d_llm;
    a.llm.d_ffn = dims.ffn;
    ModelSpec b = a;
    b.variant = BoosterVariant::mlp_control;

    ParamStore<double> sa, sb;
    fb::register_model(sa, a);
    fb::register_model(sb, b);
    CHECK(sa.trainable_params() == sb.trainable_params());
    CHECK(sa.frozen_params() == fb::llm_param_count(a.llm_config()));
    CHECK(sb.frozen_params() == 0);
  }
}

TEST_CASE("unfreeze flips exactly the block parameters") {
  ModelSpec frozen = tiny_spec(BoosterVariant::r_llm);
  ModelSpec open = frozen;
  open.unfreeze_llm = true;

  ParamStore<double> sf, so;
  fb::register_model(sf, frozen);
  fb::register_model(so, open);
  REQUIRE(sf.names() == so.names());
  for (const auto& name : sf.names()) {
    const bool is_llm = name.rfind("llm_block.", 0) == 0;
    CHECK(sf.trainable(name) == !is_llm);
    CHECK(so.trainable(name));
  }
  CHECK(so.trainable_params() - sf.trainable_params() ==
        fb::llm_param_count(frozen.llm_config()));
}

TEST_CASE("gradients flow to adapters and backbone but never to a frozen block") {
  ModelSpec spec = tiny_spec(BoosterVariant::r_llm);
  ParamStore<double> st = fb::build_model<double>(spec, 7);
  Tensor<double> batch = rnd({2, 1, 8, 8}, 7);

  fb::Tape<double> tape;
  {
    fb::TapeScope<double> scope(tape);
    Tensor<double> logits = fb::full_forward(spec, st, batch);
    tape.backward(fb::cross_entropy(logits, {0, 1}));
  }
  CHECK(st.at("booster.encode.weight").has_grad());
  CHECK(st.at("booster.decode.weight").has_grad());
  CHECK(st.at("backbone.patch.weight").has_grad());
  CHECK(st.at("classifier.fc2.weight").has_grad());
  for (const auto& name : st.names()) {
    if (name.rfind("llm_block.", 0) == 0) CHECK(!st.at(name).has_grad());
  }
}

TEST_CASE("unfrozen block receives gradients") {
  ModelSpec spec = tiny_spec(BoosterVariant::r_llm);
  spec.unfreeze_llm = true;
  ParamStore<double> st = fb::build_model<double>(spec, 8);
  Tensor<double> batch = rnd({2, 1, 8, 8}, 8);
  fb::Tape<double> tape;
  {
    fb::TapeScope<double> scope(tape);
    Tensor<double> logits = fb::full_forward(spec, st, batch);
    tape.backward(fb::cross_entropy(logits, {0, 1}));
  }
  CHECK(st.at("llm_block.0.attn.q.weight").has_grad());
  CHECK(st.at("llm_block.0.mlp.gate.weight").has_grad());
}

TEST_CASE("full forward produces logits for every variant") {
  Tensor<double> batch = rnd({3, 1, 8, 8}, 9);
  for (BoosterVariant v : {BoosterVariant::baseline, BoosterVariant::r_llm,
                           BoosterVariant::out_r_llm, BoosterVariant::hybrid_r_llm,
                           BoosterVariant::mlp_control}) {
    ModelSpec spec = tiny_spec(v);
    ParamStore<double> st = fb::build_model<double>(spec, 10);
    Tensor<double> logits = fb::full_forward(spec, st, batch);
    CHECK(logits.shape() == Shape{3, 2});
  }
}

TEST_CASE("model build is deterministic by seed") {
  ModelSpec spec = tiny_spec(BoosterVariant::hybrid_r_llm);
  ParamStore<double> a = fb::build_model<double>(spec, 11);
  ParamStore<double> b = fb::build_model<double>(spec, 11);
  REQUIRE(a.names() == b.names());
  for (const auto& name : a.names()) CHECK(a.at(name).vec() == b.at(name).vec());

  ParamStore<double> c = fb::build_model<double>(spec, 12);
  CHECK(a.at("backbone.patch.weight").vec() != c.at("backbone.patch.weight").vec());
  // synthetic block weights come from llm.seed, not the model seed
  CHECK(a.at("llm_block.0.attn.q.weight").vec() == c.at("llm_block.0.attn.q.weight").vec());
}

TEST_CASE("block weights load from a checkpoint and mismatches are named") {
  const std::string dir = "/tmp/fb_booster_test";
  std::remove((dir + "/llm12.rlbk").c_str());
  (void)std::system(("mkdir -p " + dir).c_str());

  fb::LlmBlockConfig src = tiny_spec(BoosterVariant::r_llm).llm;
  ParamStore<double> donor;
  fb::register_llm_params(donor, src);
  fb::init_llm_synthetic(donor, src);
  const std::string path = dir + "/llm12.rlbk";
  fb::save_checkpoint(donor, path);

  // happy path: a spec that loads instead of synthesising
  ModelSpec spec = tiny_spec(BoosterVariant::r_llm);
  spec.llm.synthetic = false;
  spec.llm.checkpoint = path;
  ParamStore<double> st = fb::build_model<double>(spec, 13);
  for (const auto& name : donor.names()) {
    CHECK(st.at(name).vec() == donor.at(name).vec());
    CHECK(!st.trainable(name));
  }

  // dimension mismatch is reported with both sizes and the path
  ModelSpec wide = spec;
  wide.llm.d_llm = 16;
  wide.llm.n_heads = 2;
  CHECK_THROWS_WITH_AS(fb::build_model<double>(wide, 13),
                       doctest::Contains("config d_llm=16"), fb::ConfigError);
  CHECK_THROWS_WITH_AS(fb::build_model<double>(wide, 13),
                       doctest::Contains("has d_llm=12"), fb::ConfigError);

  // a file without the block is an io error
  ParamStore<double> empty_store;
  empty_store.create("classifier.fc2.weight", {2, 2}, true);
  const std::string other = dir + "/no_llm.rlbk";
  fb::save_checkpoint(empty_store, other);
  ModelSpec missing = spec;
  missing.llm.checkpoint = other;
  CHECK_THROWS_AS(fb::build_model<double>(missing, 13), fb::IoError);

  // synthetic=false with no checkpoint path at all
  ModelSpec blank = spec;
  blank.llm.checkpoint = "";
  CHECK_THROWS_AS(fb::build_model<double>(blank, 13), fb::ConfigError);
}

TEST_CASE("float and double stores disagree on dtype at load time") {
  const std::string dir = "/tmp/fb_booster_test";
  (void)std::system(("mkdir -p " + dir).c_str());
  fb::LlmBlockConfig src = tiny_spec(BoosterVariant::r_llm).llm;
  ParamStore<float> donor;
  fb::register_llm_params(donor, src);
  fb::init_llm_synthetic(donor, src);
  const std::string path = dir + "/llm_f32.rlbk";
  fb::save_checkpoint(donor, path);

  ModelSpec spec = tiny_spec(BoosterVariant::r_llm);
  spec.llm.synthetic = false;
  spec.llm.checkpoint = path;
  CHECK_NOTHROW(fb::build_model<float>(spec, 1));
  CHECK_THROWS_WITH_AS(fb::build_model<double>(spec, 1), doctest::Contains("float32"),
                       fb::IoError);
}
