#include <iostream>
#include <string>
#include <vector>

#include "mibci/report.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mibci::run_cli(args, std::cout, std::cerr);
}
