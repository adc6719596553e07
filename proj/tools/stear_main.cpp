#include <iostream>

#include "stear/cli.hpp"

int main(int argc, char** argv) { return stear::run_cli(argc, argv, std::cout, std::cerr); }
