#include <iostream>
#include <string>
#include <vector>

#include "ssmcyto/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return ssmcyto::run_command(args, std::cout, std::cerr);
}
