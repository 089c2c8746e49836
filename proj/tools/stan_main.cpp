#include <iostream>

int main() {
  std::cout << "stan: command-line interface (subcommands pending)\n";
  return 0;
}
