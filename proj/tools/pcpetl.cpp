#include <iostream>

#include "pcpetl/commands.hpp"

int main(int argc, char** argv) { return pcpetl::run_cli(argc, argv, std::cout, std::cerr); }
