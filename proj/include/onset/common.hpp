#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace onset {

using u64 = std::uint64_t;

// ---------------------------------------------------------------------------
// Errors. Every failure surfaces as a subclass with a message naming the
// offending field / line / shape so callers and tests can assert on it.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : Error { using Error::Error; };
struct ParseError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct ShapeError : Error { using Error::Error; };
struct ContractError : Error { using Error::Error; };
struct EmptyInputError : Error { using Error::Error; };
struct DependencyError : Error { using Error::Error; };
struct SamplingError : Error { using Error::Error; };
struct IndexError : Error { using Error::Error; };
struct LookupError : Error { using Error::Error; };
struct DegenerateInputError : Error { using Error::Error; };
struct VersioningError : Error { using Error::Error; };
struct DictionaryError : Error { using Error::Error; };

// ---------------------------------------------------------------------------
// Calendar dates. Stored as days since 1970-01-01 so window arithmetic is
// plain integer math; parsed/printed as ISO-8601.
// ---------------------------------------------------------------------------

struct Date {
    std::int32_t days = 0;

    static Date from_ymd(int year, int month, int day);
    static Date parse(std::string_view iso);
    std::string to_string() const;

    Date operator+(int d) const { return Date{days + d}; }
    Date operator-(int d) const { return Date{days - d}; }
    int operator-(Date other) const { return days - other.days; }
    auto operator<=>(const Date&) const = default;
};

void civil_from_days(std::int32_t z, int& year, int& month, int& day);
std::int32_t days_from_civil(int year, int month, int day);

// ---------------------------------------------------------------------------
// Hashing (FNV-1a / splitmix64). Used for patient-split assignment and
// artifact config hashes; must be stable across platforms.
// ---------------------------------------------------------------------------

u64 fnv1a64(std::string_view s);
u64 splitmix64(u64 x);

// Deterministic map of (key, seed) to [0, 1).
double hash_unit(std::string_view key, u64 seed);

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// distribution helpers below are hand-rolled because std::*_distribution is
// implementation-defined. normal() uses an Irwin-Hall sum (no libm calls) so
// generated corpora are bit-identical across platforms.
// ---------------------------------------------------------------------------

class Rng {
  public:
    explicit Rng(u64 seed) : eng_(seed) {}

    u64 next_u64() { return eng_(); }

    // [0, 1), 53-bit resolution
    double next_double() { return double(eng_() >> 11) * 0x1.0p-53; }

    // uniform in [0, n)
    u64 below(u64 n);

    // uniform integer in [lo, hi] inclusive
    int range_int(int lo, int hi);

    double range_real(double lo, double hi) {
        return lo + (hi - lo) * next_double();
    }

    bool bernoulli(double p) { return next_double() < p; }

    // approximate normal via (sum of 12 uniforms) - 6; exact-arithmetic only
    double normal(double mean, double sd);

    template <class T>
    const T& choice(const std::vector<T>& v) {
        return v[below(v.size())];
    }

    // independent child stream
    Rng fork(u64 tag) { return Rng(splitmix64(eng_() ^ splitmix64(tag))); }

  private:
    std::mt19937_64 eng_;
};

// ---------------------------------------------------------------------------
// Number formatting. format_double produces the shortest string that parses
// back to the same double (std::to_chars), so text artifacts round-trip and
// two identical runs emit identical bytes.
// ---------------------------------------------------------------------------

std::string format_double(double v);
double parse_double(std::string_view s, bool& ok);

// ---------------------------------------------------------------------------
// Small string helpers.
// ---------------------------------------------------------------------------

std::string to_lower(std::string_view s);
std::vector<std::string> split_ws(std::string_view s);
std::vector<std::string> split_on(std::string_view s, char sep);
std::string trim(std::string_view s);
bool starts_with(std::string_view s, std::string_view prefix);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, std::string_view content);

}  // namespace onset
