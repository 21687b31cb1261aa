#include <benchmark/benchmark.h>

#include "flat/ops.hpp"
#include "flat/transforms.hpp"

namespace {

using namespace flat;

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::size_t count = 1;
  for (std::size_t d : shape) count *= d;
  std::vector<Scalar> v(count);
  for (auto& x : v) x = static_cast<Scalar>(n(rng));
  return Tensor(std::move(shape), std::move(v));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

// Forward and backward of one encoder-sized convolution: batch 32, 3x3.
void BM_Conv2d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto hw = static_cast<std::size_t>(state.range(1));
  Tensor x = random_tensor({32, c, hw, hw}, 3);
  Tensor w = random_tensor({c, c, 3, 3}, 4);
  w.set_requires_grad(true);
  for (auto _ : state) {
    w.zero_grad();
    backward(ops::sum(ops::conv2d(x, w, 1, 1)));
  }
}
BENCHMARK(BM_Conv2d)->Args({3, 32})->Args({32, 16})->Args({64, 8})->Unit(benchmark::kMillisecond);

void BM_Warp(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  Image img(3, size, size);
  Rng rng(5);
  std::uniform_real_distribution<Scalar> u(0, 1);
  for (auto& p : img.pixels) p = u(rng);
  for (auto _ : state) {
    const ProjectiveTransform t = sample_transform(rng);
    benchmark::DoNotOptimize(warp_image(img, corners_to_homography(t, size, size)));
  }
}
BENCHMARK(BM_Warp)->Arg(32)->Arg(84);

}  // namespace
