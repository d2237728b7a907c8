// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <gtest/gtest.h>

#include <span>

#include "rsseg/config.hpp"
#include "rsseg/nn.hpp"
#include "rsseg/random.hpp"
#include "rsseg/tensor.hpp"

namespace rsseg::testing {

template <typename S = double>
Tensor<S> random_tensor(SplitMix64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<S> t(std::move(shape));
  for (S& v : t.mutable_data()) v = static_cast<S>(rng.uniform(lo, hi));
  return t;
}

template <typename S = double>
Tensor<S> param(SplitMix64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<S> t = random_tensor<S>(rng, std::move(shape), lo, hi);
  t.set_requires_grad(true);
  return t;
}

/// Small run used by the harness tests: 16x16 images, patch 4, two blocks.
inline RunConfig toy_run_config() {
  RunConfig c;
  c.model.backbone = {16, 4, 16, 2, 2, 2.0, {0, 1}};
  c.model.local = {8, 2, 3, LocalOperator::kHighPass, false};
  c.model.sasm = {2, 8, 3, 2, 2};
  c.model.decoder = {4, 1, 10.0, true};
  c.train.iterations = 4;
  c.train.batch_size = 2;
  c.train.warmup_iters = 1;
  c.train.log_interval = 1;
  c.train.train_scenes = 8;
  c.train.eval_scenes = 4;
  c.train.dtype = DType::kF64;
  c.data.image_size = 16;
  c.data.min_shapes = 1;
  c.data.max_shapes = 2;
  return c;
}

/// Overwrites every trainable tensor with uniform(-scale, scale) draws.
template <typename S>
void randomize(ParameterStore<S>& store, SplitMix64& rng, double scale = 0.5) {
  for (auto& e : store.entries())
    if (e.trainable)
      for (S& v : e.tensor.mutable_data()) v = static_cast<S>(rng.uniform(-scale, scale));
}

template <typename A, typename B>
void expect_all_near(const A& actual, const B& expected, double tol) {
  ASSERT_EQ(static_cast<std::size_t>(std::size(actual)), static_cast<std::size_t>(std::size(expected)));
  std::size_t i = 0;
  auto it = std::begin(expected);
  for (const auto& v : actual) {
    EXPECT_NEAR(static_cast<double>(v), static_cast<double>(*it), tol) << "at flat index " << i;
    ++it;
    ++i;
  }
}

}  // namespace rsseg::testing
