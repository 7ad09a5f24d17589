#include <cstdio>

int main() {
    std::puts("rpcfab: subcommands pending");
    return 0;
}
