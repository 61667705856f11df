#include <cstdio>

int main() {
  std::puts("fermi: cli not wired yet");
  return 1;
}
