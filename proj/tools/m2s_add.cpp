#include <iostream>

#include "m2s/cli.hpp"

int main(int argc, char** argv) { return m2s::cli::run(argc, argv, std::cout, std::cerr); }
