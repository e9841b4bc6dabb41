#include "cli.hpp"

int main(int argc, char** argv) { return skynet::cli::run(argc, argv); }
