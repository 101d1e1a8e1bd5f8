#include "plm/autodiff.hpp"
#include "plm/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
  plm::retain_heap_memory();
  return plm::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
