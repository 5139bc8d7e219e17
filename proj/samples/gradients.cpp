// Reverse-mode gradients, and a gradient of a gradient.
#include <cstdio>

#include "mmq/autodiff.hpp"

using namespace mmq;

int main() {
  Tape tape;
  const Tensor w = Tensor::matrix({{0.5f, -1.0f}, {2.0f, 0.25f}}, true);
  const Tensor x = Tensor::matrix({{1.0f, 2.0f}});
  const Tensor loss = sum(mul(matmul(x, w), matmul(x, w)));

  const Tensor gw = grad(loss, std::vector<Tensor>{w}, true)[0];
  std::printf("loss %g\n", loss.item());
  for (std::size_t i = 0; i < gw.numel(); ++i) std::printf("dloss/dw[%zu] = %g\n", i, gw.at(i));

  // d/dw of |dloss/dw|^2
  const Tensor gg = grad(sum(mul(gw, gw)), std::vector<Tensor>{w})[0];
  for (std::size_t i = 0; i < gg.numel(); ++i) std::printf("d|g|^2/dw[%zu] = %g\n", i, gg.at(i));
}
