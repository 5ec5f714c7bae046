// Denoiser process for the tensor protocol. Predicts the noise that maps x_t onto the
// condition latent, or fails the handshake when started with --refuse.
#include <cstdio>
#include <cstring>
#include <iostream>

#include "splitscene/denoiser.hpp"

int main(int argc, char** argv) {
  if (argc > 1 && std::strcmp(argv[1], "--refuse") == 0) return 1;
  splitscene::ConditionMockDenoiser d;
  try {
    splitscene::protocol::serve(stdin, stdout, d);
  } catch (const std::exception& e) {
    std::cerr << "mock denoiser: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
