#include <string>
#include <vector>

#include "musegen/commands.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return musegen::run_command(args);
}
