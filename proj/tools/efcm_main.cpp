#include <cstdio>

int main() {
  std::puts("efcm: placeholder");
  return 0;
}
