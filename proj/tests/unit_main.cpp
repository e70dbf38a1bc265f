#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"
#include "stylediff/tensor.hpp"

int main(int argc, char** argv) {
  stylediff::pin_blas_single_thread();
  doctest::Context ctx;
  ctx.applyCommandLine(argc, argv);
  return ctx.run();
}
