#include "ptrick/cli.hpp"

int main(int argc, char** argv) { return ptrick::cli::run(argc, argv); }
