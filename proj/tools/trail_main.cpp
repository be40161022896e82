#include "trail/cli.hpp"

int main(int argc, char** argv) { return trail::cli::run(argc, argv); }
