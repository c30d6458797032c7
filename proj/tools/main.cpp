#include "ddpgcn/cli.hpp"

int main(int argc, char** argv) { return ddpgcn::cli::dispatch(argc, argv); }
