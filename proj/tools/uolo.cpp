#include <iostream>

#include "uolo/commands.hpp"

int main(int argc, char** argv) { return uolo::run_cli(argc, argv, std::cout, std::cerr); }
