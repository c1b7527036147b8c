#include "flat/cli.hpp"

#include <string>
#include <vector>

int main(int argc, char** argv) {
  return flat::cli::run_cli(std::vector<std::string>(argv, argv + argc));
}
