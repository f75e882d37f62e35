#include "adavib/cli.hpp"

int main(int argc, char** argv) { return adavib::cli::run(argc, argv); }
