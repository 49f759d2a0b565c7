#include "emphasis/cli.hpp"

int main(int argc, char** argv) { return emphasis::cli::run(argc, argv); }
