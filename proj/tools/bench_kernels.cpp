// Rough throughput probe for the hot kernels; not part of the test suite.

#include <chrono>
#include <cstdio>

#include "cpnerf/autodiff.hpp"

using namespace cpnerf;

int main(int argc, char** argv) {
  int threads = argc > 1 ? std::atoi(argv[1]) : 0;
  if (threads > 0) set_num_threads(threads);
  std::printf("threads: %d\n", num_threads());

  Rng rng(7);
  const int M = 2048, K = 128, N = 128;
  auto a = ad::Tensor::randn({M, K}, rng);
  auto b = ad::Tensor::randn({K, N}, rng);
  ad::Tensor c;

  // warmup
  for (int i = 0; i < 3; ++i) c = ad::matmul(a, b);

  const int reps = 50;
  auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) c = ad::matmul(a, b);
  auto t1 = std::chrono::steady_clock::now();
  double sec = std::chrono::duration<double>(t1 - t0).count();
  double gmac = static_cast<double>(M) * K * N * reps / 1e9;
  std::printf("matmul %dx%dx%d fwd: %.3f s for %.1f GMAC -> %.2f GMAC/s\n", M, K, N, sec,
              gmac, gmac / sec);

  // forward+backward through a 2-layer MLP shape
  auto w1 = ad::Tensor::randn({K, N}, rng, 0.1, true);
  auto w2 = ad::Tensor::randn({N, N}, rng, 0.1, true);
  auto t2 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) {
    ad::Tape tape;
    auto h = ad::relu(ad::matmul(a, w1));
    auto y = ad::matmul(h, w2);
    auto loss = ad::sum(ad::mul(y, y));
    w1.zero_grad();
    w2.zero_grad();
    tape.backward(loss);
  }
  auto t3 = std::chrono::steady_clock::now();
  sec = std::chrono::duration<double>(t3 - t2).count();
  double gmac2 = static_cast<double>(M) * K * N * 2 * 3 * reps / 1e9;
  std::printf("mlp fwd+bwd: %.3f s for ~%.1f GMAC -> %.2f GMAC/s\n", sec, gmac2,
              gmac2 / sec);

  // conv2d at completion-network scale
  auto x = ad::Tensor::randn({16, 64, 64}, rng);
  auto w = ad::Tensor::randn({16, 16, 3, 3}, rng, 0.1);
  auto bias = ad::Tensor::zeros({16});
  for (int i = 0; i < 2; ++i) c = ad::conv2d(x, w, bias, 1, 1);
  auto t4 = std::chrono::steady_clock::now();
  const int creps = 30;
  for (int i = 0; i < creps; ++i) c = ad::conv2d(x, w, bias, 1, 1);
  auto t5 = std::chrono::steady_clock::now();
  sec = std::chrono::duration<double>(t5 - t4).count();
  double gmac3 = 64.0 * 64 * 16 * 16 * 9 * creps / 1e9;
  std::printf("conv 16->16 @64x64 fwd: %.3f s for %.1f GMAC -> %.2f GMAC/s\n", sec, gmac3,
              gmac3 / sec);
  return 0;
}
