#include "setseg/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return setseg::run_cli(argc, argv, std::cout, std::cerr); }
