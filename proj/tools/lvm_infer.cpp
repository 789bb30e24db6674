#include <iostream>

#include "lvmi/cli.hpp"

int main(int argc, char** argv) {
  return lvmi::run_cli(argc, argv, std::cout, std::cerr);
}
