#include "cli.hpp"

int main(int argc, char** argv) { return mmfm::cli::run(argc, argv); }
