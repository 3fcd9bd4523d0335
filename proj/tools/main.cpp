#include <iostream>

#include "scmis/cli.hpp"

int main(int argc, char** argv) {
  return scmis::cli::dispatch(argc, argv, std::cout, std::cerr);
}
