#include <iostream>
#include <string>
#include <vector>

#include <treegrad/treegrad.hpp>

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return treegrad::run_cli(args, std::cout, std::cerr);
}
