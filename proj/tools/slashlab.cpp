#include "slashlab/cli.hpp"

int main(int argc, char** argv) { return slashlab::cli::run(argc, argv); }
