#include "cli.hpp"

int main(int argc, char** argv) { return rose::cli::run(argc, argv, std::cout, std::cerr); }
