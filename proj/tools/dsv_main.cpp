#include <iostream>

int main() {
  std::cout << "dsv: placeholder\n";
  return 0;
}
