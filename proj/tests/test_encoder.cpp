#include <catch_amalgamated.hpp>

#include "dynpre/encoder.hpp"

using namespace dynpre;
using Catch::Approx;

namespace {

Tensor<float> random_window(std::size_t c, std::size_t l, Rng& rng) {
  Tensor<float> w({c, l});
  for (auto& x : w.data()) x = static_cast<float>(rng.normal());
  return w;
}

}  // namespace

TEST_CASE("encoder shapes for both variants", "[encoder]") {
  const auto sim = EncoderConfig::sim(10);
  CHECK(sim.flatten_dim() == 704);
  CHECK(sim.feature_channels() == 128);
  CHECK(sim.feature_length() == 12);
  const auto real = EncoderConfig::real(53);
  CHECK(real.flatten_dim() == 2400);
  CHECK(real.feature_channels() == 200);
  CHECK(real.feature_length() == 12);

  Rng rng(1);
  for (const auto& cfg : {sim, real}) {
    Rng init_rng(2);
    const auto enc = build_encoder<float>(cfg, init_rng);
    const auto out = encoder_forward(enc, cfg, random_window(cfg.in_channels, 20, rng));
    CHECK(out.z.dims() == std::vector<std::size_t>{256});
    CHECK(out.c3.dims() == std::vector<std::size_t>{cfg.feature_channels(), 12});
    CHECK(out.z.all_finite());
  }
}

TEST_CASE("encoder rejects mismatched windows", "[encoder]") {
  const auto cfg = EncoderConfig::sim(10);
  Rng rng(3);
  const auto enc = build_encoder<float>(cfg, rng);
  CHECK_THROWS_AS(encoder_forward(enc, cfg, Tensor<float>({10, 19})), ShapeError);
  CHECK_THROWS_AS(encoder_forward(enc, cfg, Tensor<float>({9, 20})), ShapeError);
  auto bad = cfg;
  bad.window_length = 8;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("zero input yields bias-only latents", "[encoder]") {
  const auto cfg = EncoderConfig::sim(10);
  Rng rng(4);
  auto enc = build_encoder<float>(cfg, rng);
  const auto zero = Tensor<float>({10, 20});
  SECTION("fresh encoder has zero biases") {
    const auto out = encoder_forward(enc, cfg, zero);
    for (float v : out.z.data()) CHECK(v == 0.0f);
    for (float v : out.c3.data()) CHECK(v == 0.0f);
  }
  SECTION("fc bias passes straight through") {
    for (std::size_t i = 0; i < cfg.latent_dim; ++i) enc.at("fc.bias").value[i] = 0.01f * static_cast<float>(i);
    const auto out = encoder_forward(enc, cfg, zero);
    for (std::size_t i = 0; i < cfg.latent_dim; ++i) CHECK(out.z[i] == Approx(0.01 * i).margin(1e-6));
  }
}

TEST_CASE("encoder init and forward are deterministic", "[encoder]") {
  const auto cfg = EncoderConfig::sim(10);
  Rng a(9), b(9), c(10);
  const auto ea = build_encoder<float>(cfg, a);
  const auto eb = build_encoder<float>(cfg, b);
  const auto ec = build_encoder<float>(cfg, c);
  CHECK(ea.same_values(eb));
  CHECK_FALSE(ea.same_values(ec));
  Rng wr(11);
  const auto w = random_window(10, 20, wr);
  CHECK(encoder_forward(ea, cfg, w).z == encoder_forward(eb, cfg, w).z);
}

TEST_CASE("feature map matches a direct recomputation", "[encoder]") {
  const auto cfg = EncoderConfig::sim(10);
  Rng rng(12);
  auto enc = build_encoder<double>(cfg, rng);
  for (std::size_t l = 1; l <= 3; ++l) {
    auto& b = enc.at(conv_name(l, "bias")).value;
    for (auto& x : b.data()) x = rng.normal(0.0, 0.1);
  }
  Tensor<double> w({10, 20});
  for (auto& x : w.data()) x = rng.normal();
  const auto out = encoder_forward(enc, cfg, w);

  // Plain loops over the first three layers.
  std::vector<std::vector<double>> h(10, std::vector<double>(20));
  for (std::size_t c = 0; c < 10; ++c)
    for (std::size_t t = 0; t < 20; ++t) h[c][t] = w.at(c, t);
  for (std::size_t l = 1; l <= 3; ++l) {
    const auto& wt = enc.at(conv_name(l, "weight")).value;
    const auto& bs = enc.at(conv_name(l, "bias")).value;
    const std::size_t c_out = wt.dims()[0], c_in = wt.dims()[1], k = wt.dims()[2];
    const std::size_t len = h[0].size() - k + 1;
    std::vector<std::vector<double>> next(c_out, std::vector<double>(len));
    for (std::size_t o = 0; o < c_out; ++o)
      for (std::size_t t = 0; t < len; ++t) {
        double s = bs[o];
        for (std::size_t i = 0; i < c_in; ++i)
          for (std::size_t j = 0; j < k; ++j) s += wt.at(o, i, j) * h[i][t + j];
        next[o][t] = std::max(0.0, s);
      }
    h = std::move(next);
  }
  REQUIRE(h.size() == 128);
  REQUIRE(h[0].size() == 12);
  for (std::size_t c = 0; c < 128; ++c)
    for (std::size_t t = 0; t < 12; ++t) CHECK(out.c3.at(c, t) == Approx(h[c][t]).margin(1e-10));
}

TEST_CASE("decoder mirrors the encoder", "[encoder]") {
  const auto cfg = EncoderConfig::sim(10);
  Rng rng(13);
  const auto dec = build_decoder<float>(cfg, rng);
  CHECK(dec.at("dec.fc.weight").value.dims() == std::vector<std::size_t>{704, 256});
  CHECK(dec.at("dec.tconv1.weight").value.dims() == std::vector<std::size_t>{64, 128, 2});
  CHECK(dec.at("dec.tconv4.weight").value.dims() == std::vector<std::size_t>{32, 10, 4});
  Tensor<float> z({256});
  for (auto& x : z.data()) x = static_cast<float>(rng.normal());
  const auto out = decoder_forward(dec, cfg, z);
  CHECK(out.dims() == std::vector<std::size_t>{10, 20});
  CHECK(out.all_finite());
  // Length chain 11 -> 12 -> 14 -> 17 -> 20.
  std::size_t len = cfg.length_after(4);
  CHECK(len == 11);
  for (std::size_t l = 4; l >= 1; --l) len += cfg.kernel_sizes[l - 1] - 1;
  CHECK(len == 20);
  CHECK_THROWS_AS(build_decoder<float>(EncoderConfig::real(53), rng), std::invalid_argument);
  CHECK_THROWS_AS(decoder_forward(dec, cfg, Tensor<float>({255})), ShapeError);
}

TEST_CASE("encoder config survives a json round trip", "[encoder]") {
  const auto cfg = EncoderConfig::real(53);
  const auto back = EncoderConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  CHECK(back.variant == EncoderVariant::real);
  CHECK_THROWS_AS(parse_variant("huge"), std::invalid_argument);
}
