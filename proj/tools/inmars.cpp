#include "inmars/cli.hpp"

int main(int argc, char** argv) { return inmars::cli::run(argc, argv); }
