#include <benchmark/benchmark.h>

#include "flat/training.hpp"

namespace {

using namespace flat;

// One optimiser step on a default-architecture model and a 32-image batch.
void BM_PretrainStep(benchmark::State& state) {
  SyntheticShapesConfig data_config;
  data_config.examples_per_class = 8;
  const ImageDataset data = generate_synthetic(data_config);
  ModelConfig model_config;
  model_config.encoder.input_size = data.height();
  model_config.n_base_classes = data.n_base();
  FlatModel model(model_config, 1);

  std::vector<const Image*> images;
  std::vector<int> labels;
  for (std::size_t i : data.indices(Split::base_train)) {
    if (images.size() == 32) break;
    images.push_back(&data[i].image);
    labels.push_back(data[i].label);
  }
  PretrainConfig config;
  config.mode = static_cast<PretrainMode>(state.range(0));
  SgdState optimizer = initial_train_state(config).optimizer;
  Rng rng(2);
  for (auto _ : state) benchmark::DoNotOptimize(pretrain_step(model, images, labels, config, rng, optimizer));
  state.SetLabel(to_string(config.mode));
}
BENCHMARK(BM_PretrainStep)->Arg(0)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
