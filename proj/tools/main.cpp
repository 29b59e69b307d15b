#include <iostream>

#include "capsvl/tensor.hpp"
#include "cli.hpp"

int main(int argc, char** argv) {
  capsvl::ag::retain_freed_memory();
  return capsvl::cli::run(argc, argv, std::cout, std::cerr);
}
