#include <iostream>

#include "mitdet/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return mitdet::run_cli(args, std::cout, std::cerr);
}
