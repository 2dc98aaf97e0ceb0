#include <exception>
#include <iostream>

#include "app.hpp"
#include "cerag/errors.hpp"

int main(int argc, char** argv) {
    try {
        return cerag::run_app(argc, argv);
    } catch (const cerag::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
