#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dsqa {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// Error categories map to CLI exit codes: config 2, data 3, numeric 4.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& msg)
        : std::runtime_error(msg), code_(std::move(code)) {}
    const std::string& code() const { return code_; }

private:
    std::string code_;
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error("config", msg) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("config", msg) {}
};
struct StateError : Error {
    explicit StateError(const std::string& msg) : Error("config", msg) {}
};
struct RangeError : Error {
    explicit RangeError(const std::string& msg) : Error("config", msg) {}
};
struct DomainError : Error {
    explicit DomainError(const std::string& msg) : Error("config", msg) {}
};
struct CapacityError : Error {
    explicit CapacityError(const std::string& msg) : Error("config", msg) {}
};
struct DataError : Error {
    explicit DataError(const std::string& msg) : Error("data", msg) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error("numeric", msg) {}
};

enum class Mode { train, eval };

// Reserved vocabulary slots, fixed across every corpus.
namespace tokens {
constexpr int PAD = 0;
constexpr int EOS = 1;
constexpr int UNK = 2;
constexpr int BOUNDARY = 3;
constexpr int reserved = 4;
} // namespace tokens

} // namespace dsqa
