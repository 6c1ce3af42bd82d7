#include <iostream>

#include "opflayer/cli.hpp"

int main(int argc, char** argv) { return opflayer::dispatch(argc, argv, std::cout, std::cerr); }
