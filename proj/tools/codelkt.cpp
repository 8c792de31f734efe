#include "codelkt/cli.hpp"

int main(int argc, char** argv) { return codelkt::cli::run_cli(argc, argv); }
