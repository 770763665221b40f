#include "muie/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return muie::run_cli(argc, argv, std::cout, std::cerr); }
