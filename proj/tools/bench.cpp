#include <chrono>
#include <cstdio>

#include "dfb/head.hpp"

using namespace dfb;

template <typename T>
void run(Variant v, ConvAlgo algo) {
  ModelConfig cfg;
  cfg.head.classes = 8;
  cfg.variant = v;
  auto params = init_params<T>(cfg, 1);
  Rng rng(3);
  auto clip = rng_normal<T>(rng, {3, 8, 32, 32}, 0.0, 1.0);
  const int iters = 10;
  auto t0 = std::chrono::steady_clock::now();
  double fwd = 0;
  for (int i = 0; i < iters; ++i) {
    Tape<T> tape;
    Rng d(i);
    ForwardOptions<T> o;
    o.algo = algo;
    o.dropout.mode = DropoutMode::kTrain;
    o.dropout.rng = &d;
    auto a = std::chrono::steady_clock::now();
    auto lg = model_forward(tape, clip, params, cfg, o);
    auto loss = total_loss(tape, lg, 1, v);
    fwd += std::chrono::duration<double>(std::chrono::steady_clock::now() - a).count();
    auto g = tape.backward(loss.total_var, params);
  }
  double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%s %s %s: %.2f ms/clip (fwd %.2f)\n", sizeof(T) == 4 ? "f32" : "f64", to_string(v).c_str(),
              algo == ConvAlgo::kGemm ? "gemm" : "direct", 1e3 * dt / iters, 1e3 * fwd / iters);
}

int main() {
  run<float>(Variant::kGB, ConvAlgo::kGemm);
  run<float>(Variant::kGBDFLB, ConvAlgo::kGemm);
  run<float>(Variant::kGBDFLB, ConvAlgo::kDirect);
  run<double>(Variant::kGBDFLB, ConvAlgo::kGemm);
}
