#include "combemb/cli.hpp"

int main(int argc, char** argv) { return combemb::cli::run(argc, argv); }
