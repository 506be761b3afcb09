// Command line front end. Subcommands land here as the library grows.
#include <cstdio>

int main() {
    std::printf("latflow: no subcommand\n");
    return 2;
}
