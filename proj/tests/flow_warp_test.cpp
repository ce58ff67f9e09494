// Copyright 2026 The IFWM Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>
#include <random>
#include <vector>

#include "gtest/gtest.h"
#include "ifwm/flow_warp.hpp"
#include "ifwm/gradcheck.hpp"

namespace ifwm {
namespace {

using T = double;
constexpr int kSeeds = 20;
constexpr double kTol = 1e-4;

constexpr FusionVariant kWarpVariants[] = {FusionVariant::kSF, FusionVariant::kLSF,
                                           FusionVariant::kRIFW, FusionVariant::kIFWM};

void zero_conv(ConvParams<T>& p) {
  for (auto& v : p.weight.mutable_data()) v = 0;
  if (p.has_bias()) {
    for (auto& v : p.bias.mutable_data()) v = 0;
  }
}

TEST(KernelSchedule, MatchesRatios) {
  EXPECT_EQ(kernel_size_for_ratio(2), 3u);
  EXPECT_EQ(kernel_size_for_ratio(4), 7u);
  EXPECT_EQ(kernel_size_for_ratio(8), 15u);
  for (std::size_t r : {2u, 4u, 8u}) EXPECT_EQ(kernel_size_for_ratio(r), 2 * r - 1);
  EXPECT_THROW(kernel_size_for_ratio(1), ContractError);
  EXPECT_THROW(kernel_size_for_ratio(3), ContractError);
  EXPECT_THROW(kernel_size_for_ratio(16), ContractError);
}

TEST(VariantTable, StructureMatchesAblationRows) {
  std::mt19937_64 rng(1);
  for (std::size_t ratio : {2u, 4u, 8u}) {
    const std::size_t k = kernel_size_for_ratio(ratio);
    auto sf = make_warp_head<T>(FusionVariant::kSF, ratio, 8, 16, rng);
    EXPECT_FALSE(sf.pixel_conv.weight.defined());
    EXPECT_FALSE(sf.region_conv.weight.defined());
    EXPECT_EQ(sf.concat_conv.kernel(), 3u);
    EXPECT_EQ(sf.concat_conv.in_channels(), 16u);
    EXPECT_EQ(sf.concat_conv.out_channels(), 2u);

    auto lsf = make_warp_head<T>(FusionVariant::kLSF, ratio, 8, 16, rng);
    EXPECT_FALSE(lsf.pixel_conv.weight.defined());
    EXPECT_EQ(lsf.concat_conv.kernel(), k);
    EXPECT_EQ(lsf.concat_conv.padding, (k - 1) / 2);

    auto rifw = make_warp_head<T>(FusionVariant::kRIFW, ratio, 8, 16, rng);
    EXPECT_FALSE(rifw.concat_conv.weight.defined());
    EXPECT_EQ(rifw.pixel_conv.kernel(), 3u);
    EXPECT_EQ(rifw.pixel_conv.padding, 1u);
    EXPECT_EQ(rifw.region_conv.kernel(), k);
    EXPECT_EQ(rifw.region_conv.in_channels(), 16u);

    auto ifwm = make_warp_head<T>(FusionVariant::kIFWM, ratio, 8, 16, rng);
    EXPECT_FALSE(ifwm.concat_conv.weight.defined());
    EXPECT_EQ(ifwm.pixel_conv.kernel(), 1u);
    EXPECT_EQ(ifwm.pixel_conv.in_channels(), 8u);
    EXPECT_EQ(ifwm.pixel_conv.out_channels(), 2u);
    EXPECT_EQ(ifwm.region_conv.kernel(), k);
    EXPECT_EQ(ifwm.region_conv.out_channels(), 2u);
    EXPECT_EQ(ifwm.region_conv.padding, (k - 1) / 2);
    EXPECT_EQ(ifwm.channel_proj.kernel(), 1u);
    EXPECT_EQ(ifwm.channel_proj.out_channels(), 8u);
  }
  EXPECT_EQ(calc_process(FusionVariant::kIFWM), "conv+add");
  EXPECT_EQ(kernel_label(FusionVariant::kIFWM), "1x1+kxk");
  EXPECT_EQ(calc_process(FusionVariant::kSF), "concat+conv");
  EXPECT_EQ(kernel_label(FusionVariant::kRIFW), "3x3+kxk");
  EXPECT_EQ(parse_variant("lsf"), FusionVariant::kLSF);
  EXPECT_THROW(parse_variant("fam"), ConfigError);
}

TEST(WarpMap, ZeroWeightsGiveZeroFlow) {
  std::mt19937_64 rng(2);
  Tape<T> tape;
  for (FusionVariant v : kWarpVariants) {
    auto head = make_warp_head<T>(v, 2, 4, 6, rng);
    for (auto& [name, conv] : head.convs()) zero_conv(*conv);
    auto flow = compute_warp_map(tape, head, random_tensor<T>({1, 4, 8, 8}, 1, false),
                                 random_tensor<T>({1, 6, 4, 4}, 2, false));
    ASSERT_EQ(flow.shape(), (Shape{1, 2, 8, 8}));
    for (T f : flow.data()) EXPECT_EQ(f, 0.0);
  }
}

TEST(WarpMap, RegionBiasGivesConstantFlow) {
  std::mt19937_64 rng(3);
  Tape<T> tape;
  auto head = make_warp_head<T>(FusionVariant::kIFWM, 4, 4, 6, rng);
  zero_conv(head.pixel_conv);
  zero_conv(head.region_conv);
  head.region_conv.bias.mutable_data()[0] = 0.5;
  head.region_conv.bias.mutable_data()[1] = -0.25;
  auto flow = compute_warp_map(tape, head, random_tensor<T>({2, 4, 16, 16}, 1, false),
                               random_tensor<T>({2, 6, 4, 4}, 2, false));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) {
        EXPECT_EQ(flow.at(b, 0, y, x), 0.5);
        EXPECT_EQ(flow.at(b, 1, y, x), -0.25);
      }
}

TEST(WarpMap, RejectsNonIntegralRatio) {
  std::mt19937_64 rng(4);
  Tape<T> tape;
  auto head = make_warp_head<T>(FusionVariant::kIFWM, 2, 4, 6, rng);
  EXPECT_THROW(compute_warp_map(tape, head, Tensor<T>({1, 4, 9, 8}), Tensor<T>({1, 6, 4, 4})),
               GeometryError);
  EXPECT_THROW(compute_warp_map(tape, head, Tensor<T>({1, 4, 8, 8}), Tensor<T>({1, 6, 2, 2})),
               GeometryError);
}

TEST(WarpMap, GradientMatchesFiniteDifferences) {
  for (FusionVariant v : kWarpVariants) {
    for (int seed = 0; seed < kSeeds; ++seed) {
      std::mt19937_64 rng(seed);
      auto head = make_warp_head<T>(v, 2, 3, 4, rng);
      auto xs = random_tensor<T>({1, 3, 6, 6}, 50 + seed, true);
      auto xd = random_tensor<T>({1, 4, 3, 3}, 80 + seed, true);
      std::vector<Tensor<T>> inputs{xs, xd};
      for (auto& [name, conv] : head.convs()) {
        inputs.push_back(conv->weight);
        inputs.push_back(conv->bias);
      }
      LossFn<T> fn = [&](Tape<T>& t, std::vector<Tensor<T>>& in) {
        return sum(t, compute_warp_map(t, head, in[0], in[1]));
      };
      auto r = check_gradients<T>(fn, inputs);
      EXPECT_LE(r.max_rel_error, kTol) << variant_name(v) << " seed " << seed;
    }
  }
}

TEST(WarpMap, TranslationEquivariantOnInterior) {
  // Circularly rolling xs by ratio*t and xd by t must roll the flow by
  // ratio*t away from the borders.
  auto roll = [](const Tensor<T>& x, std::size_t t) {
    const Shape s = x.shape();
    Tensor<T> out(s);
    for (std::size_t b = 0; b < s.n; ++b)
      for (std::size_t c = 0; c < s.c; ++c)
        for (std::size_t y = 0; y < s.h; ++y)
          for (std::size_t xx = 0; xx < s.w; ++xx)
            out.at(b, c, (y + t) % s.h, (xx + t) % s.w) = x.at(b, c, y, xx);
    return out;
  };
  Tape<T> tape(false);
  for (FusionVariant v : kWarpVariants) {
    for (std::size_t ratio : {2u, 4u}) {
      std::mt19937_64 rng(ratio);
      const std::size_t deep = 16, shallow = deep * ratio, shift = 2;
      auto head = make_warp_head<T>(v, ratio, 3, 4, rng);
      auto xs = random_tensor<T>({1, 3, shallow, shallow}, 1, false);
      auto xd = random_tensor<T>({1, 4, deep, deep}, 2, false);
      auto f0 = compute_warp_map(tape, head, xs, xd);
      auto f1 = compute_warp_map(tape, head, roll(xs, ratio * shift), roll(xd, shift));
      const std::size_t k = kernel_size_for_ratio(ratio);
      const std::size_t margin = ratio * (k / 2 + 2) + ratio * shift;
      ASSERT_LT(2 * margin, shallow);
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t y = margin; y < shallow - margin; ++y)
          for (std::size_t x = margin; x < shallow - margin; ++x) {
            EXPECT_NEAR(f1.at(0, c, y + ratio * shift, x + ratio * shift),
                        f0.at(0, c, y, x), 1e-12)
                << variant_name(v) << " ratio " << ratio;
          }
    }
  }
}

TEST(GridSample, ZeroFlowEqualsUpsample) {
  Tape<T> tape;
  for (std::size_t ratio : {2u, 4u, 8u}) {
    for (int seed = 0; seed < 10; ++seed) {
      auto src = random_tensor<T>({2, 3, 3, 5}, seed, false, -10, 10);
      Tensor<T> flow({2, 2, 3 * ratio, 5 * ratio}, 0.0);
      auto a = grid_sample_bilinear(tape, src, flow);
      auto b = bilinear_upsample(tape, src, ratio);
      ASSERT_EQ(a.shape(), b.shape());
      for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-12);
    }
  }
}

TEST(GridSample, ConstantSourceAnyFlow) {
  Tape<T> tape;
  Tensor<T> src({1, 2, 4, 4}, -3.25);
  auto flow = random_tensor<T>({1, 2, 8, 8}, 9, false, -6, 6);
  auto out = grid_sample_bilinear(tape, src, flow);
  for (T v : out.data()) EXPECT_NEAR(v, -3.25, 1e-14);
}

TEST(GridSample, IntegerShiftMatchesIndexOracle) {
  Tape<T> tape;
  Tensor<T> ramp({1, 1, 4, 4});
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) ramp.at(0, 0, y, x) = 10.0 * y + x;
  Tensor<T> flow({1, 2, 4, 4}, 0.0);
  for (std::size_t i = 0; i < 16; ++i) flow.mutable_data()[i] = 1.0;  // dx = 1
  auto out = grid_sample_bilinear(tape, ramp, flow);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      const std::size_t src_x = std::min<std::size_t>(x + 1, 3);
      EXPECT_EQ(out.at(0, 0, y, x), ramp.at(0, 0, y, src_x));
    }
}

TEST(GridSample, WeightsAreConvexInterior) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> coord(-2.0, 9.0);
  for (int i = 0; i < 10000; ++i) {
    const double c = coord(rng);
    const auto tap = detail::sample_tap(c, 7);
    EXPECT_GE(tap.frac, 0.0);
    EXPECT_LE(tap.frac, 1.0);
    EXPECT_LE(tap.i0, tap.i1);
    EXPECT_LE(tap.i1, 6u);
    if (c >= 0.0 && c <= 6.0) {
      EXPECT_FALSE(tap.clamped);
      EXPECT_NEAR(static_cast<double>(tap.i0) + tap.frac, c, 1e-15);
    } else {
      EXPECT_TRUE(tap.clamped);
    }
  }
}

TEST(GridSample, GradientMatchesFiniteDifferences) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    for (std::size_t ratio : {1u, 2u}) {
      auto src = random_tensor<T>({2, 3, 4, 4}, 100 + seed, true);
      // Mostly in-range flows, some pushing past the border.
      auto flow = random_tensor<T>({2, 2, 4 * ratio, 4 * ratio}, 200 + seed, true, -2.5, 2.5);
      LossFn<T> fn = [](Tape<T>& t, std::vector<Tensor<T>>& in) {
        return random_projection(t, grid_sample_bilinear(t, in[0], in[1]), 17);
      };
      auto r = check_gradients<T>(fn, {src, flow});
      EXPECT_LE(r.max_rel_error, kTol) << "seed " << seed << " ratio " << ratio;
    }
  }
}

TEST(GridSample, RejectsBadFlow) {
  Tape<T> tape;
  EXPECT_THROW(grid_sample_bilinear(tape, Tensor<T>({1, 1, 2, 2}), Tensor<T>({1, 3, 4, 4})),
               ChannelError);
  EXPECT_THROW(grid_sample_bilinear(tape, Tensor<T>({2, 1, 2, 2}), Tensor<T>({1, 2, 4, 4})),
               GeometryError);
}

TEST(Fuse, ZeroFlowReducesToBaselineFusion) {
  std::mt19937_64 rng(6);
  Tape<T> tape;
  for (std::size_t ratio : {2u, 4u, 8u}) {
    for (FusionVariant v : kWarpVariants) {
      auto head = make_warp_head<T>(v, ratio, 4, 4, rng);
      for (auto& [name, conv] : head.convs()) {
        if (name != "channel_proj") zero_conv(*conv);
      }
      zero_conv(head.channel_proj);
      for (std::size_t c = 0; c < 4; ++c) head.channel_proj.weight.at(c, c, 0, 0) = 1.0;
      auto xs = random_tensor<T>({1, 4, 2 * ratio, 2 * ratio}, 1, false);
      auto xd = random_tensor<T>({1, 4, 2, 2}, 2, false);
      auto fused = ifwm_fuse(tape, head, xs, xd);
      auto want = add(tape, xs, bilinear_upsample(tape, xd, ratio));
      for (std::size_t i = 0; i < want.numel(); ++i) {
        EXPECT_NEAR(fused.data()[i], want.data()[i], 1e-12);
      }
    }
  }
}

TEST(Fuse, ZeroDeepFeatureLeavesShallowUntouched) {
  std::mt19937_64 rng(7);
  Tape<T> tape;
  for (FusionVariant v : kWarpVariants) {
    auto head = make_warp_head<T>(v, 2, 4, 8, rng);
    auto xs = random_tensor<T>({1, 4, 8, 8}, 3, false);
    auto out = ifwm_fuse(tape, head, xs, Tensor<T>({1, 8, 4, 4}, 0.0));
    ASSERT_EQ(out.shape(), xs.shape());
    for (std::size_t i = 0; i < xs.numel(); ++i) EXPECT_EQ(out.data()[i], xs.data()[i]);
  }
}

TEST(Fuse, EndToEndGradient) {
  for (FusionVariant v : kWarpVariants) {
    for (int seed = 0; seed < kSeeds; ++seed) {
      std::mt19937_64 rng(1000 + seed);
      auto head = make_warp_head<T>(v, 2, 4, 8, rng);
      auto xs = random_tensor<T>({1, 4, 8, 8}, 300 + seed, true);
      auto xd = random_tensor<T>({1, 8, 4, 4}, 400 + seed, true);
      std::vector<Tensor<T>> inputs{xs, xd};
      for (auto& [name, conv] : head.convs()) {
        inputs.push_back(conv->weight);
        inputs.push_back(conv->bias);
      }
      LossFn<T> fn = [&](Tape<T>& t, std::vector<Tensor<T>>& in) {
        return random_projection(t, ifwm_fuse(t, head, in[0], in[1]), 23);
      };
      auto r = check_gradients<T>(fn, inputs);
      EXPECT_LE(r.max_rel_error, kTol) << variant_name(v) << " seed " << seed;
    }
  }
}

TEST(Fuse, ChannelMismatch) {
  std::mt19937_64 rng(8);
  Tape<T> tape;
  auto head = make_warp_head<T>(FusionVariant::kIFWM, 2, 4, 8, rng);
  EXPECT_THROW(ifwm_fuse(tape, head, Tensor<T>({1, 5, 8, 8}), Tensor<T>({1, 8, 4, 4})),
               ChannelError);
}

}  // namespace
}  // namespace ifwm
