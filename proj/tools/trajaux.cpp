#include <iostream>

#include "trajaux/cli.hpp"

int main(int argc, char** argv) { return trajaux::cli::run(argc, argv, std::cout, std::cerr); }
