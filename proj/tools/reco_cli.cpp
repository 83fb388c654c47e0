#include "reco/cli.hpp"

int main(int argc, char** argv) { return reco::dispatch(argc, argv); }
