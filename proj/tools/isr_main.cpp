#include "isr/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return isr::cli::run_cli(argc, argv, std::cout, std::cerr); }
