#include <cstdio>

int main() {
  std::puts("rise cli placeholder");
  return 0;
}
