#include "camrw/cli.hpp"

int main(int argc, char** argv) { return camrw::run_cli(std::vector<std::string>(argv, argv + argc)); }
