#include "abstain/cli.hpp"

int main(int argc, char** argv) { return abstain::cli::run(argc, argv); }
