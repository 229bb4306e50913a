#include "emae/cli.hpp"

int main(int argc, char** argv) { return emae::cli::main(argc, argv); }
