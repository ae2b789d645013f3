#include "prenet/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return prenet::run_cli(argc, argv, std::cout, std::cerr); }
