#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ccadepth/error.hpp"

namespace ccadepth {

// Plain "key = value" text file. '#' starts a comment. Keys keep insertion
// order so a round-tripped file is stable. List values are comma separated;
// linspace(a,b,n) and invspace(a,b,n) expand to n values uniform in the value
// or in its reciprocal.
class KeyValueFile {
  public:
    static KeyValueFile parse_file(const std::filesystem::path& path);
    static KeyValueFile parse_string(const std::string& text, const std::string& origin = "<string>");

    bool has(const std::string& key) const;
    std::string get_string(const std::string& key) const;
    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key) const;
    double get_double(const std::string& key, double fallback) const;
    long get_int(const std::string& key) const;
    long get_int(const std::string& key, long fallback) const;
    std::vector<double> get_list(const std::string& key) const;
    std::vector<double> get_list(const std::string& key, const std::vector<double>& fallback) const;

    void set(const std::string& key, const std::string& value);
    void set_double(const std::string& key, double value);
    void set_int(const std::string& key, long value);
    void set_list(const std::string& key, const std::vector<double>& values);

    std::string to_text() const;
    void write_file(const std::filesystem::path& path) const;

    const std::vector<std::string>& keys() const { return order_; }

  private:
    const std::string& raw(const std::string& key) const;

    std::map<std::string, std::string> values_;
    std::map<std::string, long> lines_;
    std::vector<std::string> order_;
    std::string origin_;
};

// Geometry and sampling of the simulated camera. Lengths in meters.
struct OpticalConfig {
    double focal_length = 0.025;        // f
    double sensor_distance = 0.0;       // z_i; 0 means derive from focus_distance
    double aperture_diameter = 1.5e-3;  // D
    int sim_grid = 512;                 // M, samples per side of the aperture window
    double window_size = 3.0e-3;        // physical side of the simulated plane
    int psf_crop = 41;                  // K, PSF kernel side in sensor pixels
    int sensor_bin = 1;                 // B, simulation samples per sensor pixel
    std::vector<double> wavelengths;    // L values, strictly increasing
    std::vector<double> depth_planes;   // J values, strictly monotone, farthest first
    double focus_distance = 1.0;

    int bands() const { return int(wavelengths.size()); }
    int planes() const { return int(depth_planes.size()); }
    double pitch() const { return window_size / sim_grid; }
    // Physical coordinate of sample i; sample sim_grid/2 sits on the axis.
    double coord(int i) const { return (i - sim_grid / 2) * pitch(); }
    double min_depth() const;
    double max_depth() const;

    // Fills sensor_distance from the thin-lens equation when left at 0 and
    // checks every invariant; throws DomainError on violation.
    void finalize();

    uint64_t hash() const;

    static OpticalConfig from_kv(const KeyValueFile& kv);
    void to_kv(KeyValueFile& kv) const;
};

// Desk-scale default: 8 bands across the visible range, 5 depth planes
// spaced uniformly in 1/z over 0.4-1.6 m, farthest first.
OpticalConfig default_desk_config();

// Canonical tiny configuration for gradient checking (M=64, N=2, R=2, L=3, J=2).
OpticalConfig gradcheck_config();

uint64_t fnv1a(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace ccadepth
