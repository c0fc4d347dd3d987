#include "ccadepth/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "ccadepth/serialize.hpp"

namespace ccadepth {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return {};
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

double parse_double(const std::string& s, const std::string& key, long line) {
    char* end = nullptr;
    double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0')
        throw ParseError("key '" + key + "': cannot parse number from '" + s + "'", line);
    return v;
}

}  // namespace

KeyValueFile KeyValueFile::parse_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file: " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_string(ss.str(), path.string());
}

KeyValueFile KeyValueFile::parse_string(const std::string& text, const std::string& origin) {
    KeyValueFile kv;
    kv.origin_ = origin;
    std::istringstream is(text);
    std::string line;
    long lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError(origin + ": expected 'key = value'", lineno);
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ParseError(origin + ": empty key", lineno);
        kv.set(key, value);
        kv.lines_[key] = lineno;
    }
    return kv;
}

bool KeyValueFile::has(const std::string& key) const { return values_.count(key) != 0; }

const std::string& KeyValueFile::raw(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ParseError(origin_ + ": missing key '" + key + "'");
    return it->second;
}

std::string KeyValueFile::get_string(const std::string& key) const { return raw(key); }
std::string KeyValueFile::get_string(const std::string& key, const std::string& fallback) const {
    return has(key) ? raw(key) : fallback;
}

double KeyValueFile::get_double(const std::string& key) const {
    auto it = lines_.find(key);
    return parse_double(raw(key), key, it == lines_.end() ? -1 : it->second);
}
double KeyValueFile::get_double(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
}

long KeyValueFile::get_int(const std::string& key) const {
    double v = get_double(key);
    long r = std::lround(v);
    if (double(r) != v) throw ParseError("key '" + key + "': expected an integer, got " + raw(key));
    return r;
}
long KeyValueFile::get_int(const std::string& key, long fallback) const {
    return has(key) ? get_int(key) : fallback;
}

std::vector<double> KeyValueFile::get_list(const std::string& key) const {
    const std::string& s = raw(key);
    auto it = lines_.find(key);
    long line = it == lines_.end() ? -1 : it->second;

    auto expand = [&](const char* name, bool inverse) -> std::vector<double> {
        std::string inner = trim(s.substr(std::string(name).size()));
        if (inner.empty() || inner.front() != '(' || inner.back() != ')')
            throw ParseError("key '" + key + "': malformed " + name + " expression", line);
        inner = inner.substr(1, inner.size() - 2);
        std::vector<std::string> parts;
        std::istringstream ps(inner);
        std::string tok;
        while (std::getline(ps, tok, ',')) parts.push_back(trim(tok));
        if (parts.size() != 3) throw ParseError("key '" + key + "': " + name + " takes (first,last,count)", line);
        double a = parse_double(parts[0], key, line);
        double b = parse_double(parts[1], key, line);
        long n = std::lround(parse_double(parts[2], key, line));
        if (n < 1) throw ParseError("key '" + key + "': count must be >= 1", line);
        std::vector<double> out(n);
        if (n == 1) {
            out[0] = a;
            return out;
        }
        if (inverse) {
            double ia = 1.0 / a, ib = 1.0 / b;
            for (long i = 0; i < n; ++i) out[i] = 1.0 / (ia + (ib - ia) * double(i) / double(n - 1));
        } else {
            for (long i = 0; i < n; ++i) out[i] = a + (b - a) * double(i) / double(n - 1);
        }
        return out;
    };

    if (s.rfind("linspace", 0) == 0) return expand("linspace", false);
    if (s.rfind("invspace", 0) == 0) return expand("invspace", true);

    std::vector<double> out;
    std::istringstream ps(s);
    std::string tok;
    while (std::getline(ps, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) throw ParseError("key '" + key + "': empty list element", line);
        out.push_back(parse_double(tok, key, line));
    }
    if (out.empty()) throw ParseError("key '" + key + "': empty list", line);
    return out;
}
std::vector<double> KeyValueFile::get_list(const std::string& key, const std::vector<double>& fallback) const {
    return has(key) ? get_list(key) : fallback;
}

void KeyValueFile::set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) order_.push_back(key);
    values_[key] = value;
}
void KeyValueFile::set_double(const std::string& key, double value) { set(key, f64_to_text(value)); }
void KeyValueFile::set_int(const std::string& key, long value) { set(key, std::to_string(value)); }
void KeyValueFile::set_list(const std::string& key, const std::vector<double>& values) {
    std::string s;
    for (size_t i = 0; i < values.size(); ++i) {
        if (i) s += ",";
        s += f64_to_text(values[i]);
    }
    set(key, s);
}

std::string KeyValueFile::to_text() const {
    std::string out;
    for (const auto& k : order_) out += k + " = " + values_.at(k) + "\n";
    return out;
}

void KeyValueFile::write_file(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write config file: " + path.string());
    os << to_text();
}

double OpticalConfig::min_depth() const {
    return *std::min_element(depth_planes.begin(), depth_planes.end());
}
double OpticalConfig::max_depth() const {
    return *std::max_element(depth_planes.begin(), depth_planes.end());
}

void OpticalConfig::finalize() {
    if (focal_length <= 0 || aperture_diameter <= 0 || window_size <= 0)
        throw DomainError("focal_length, aperture_diameter and window_size must be positive");
    if (aperture_diameter > window_size) throw DomainError("aperture_diameter exceeds window_size");
    if (sim_grid < 32) throw DomainError("sim_grid must be >= 32");
    if (psf_crop % 2 == 0) throw DomainError("psf_crop must be odd");
    if (sensor_bin < 1) throw DomainError("sensor_bin must be >= 1");
    if (size_t(sensor_bin) * psf_crop > size_t(sim_grid))
        throw DomainError("sensor_bin * psf_crop must not exceed sim_grid");
    if (wavelengths.empty()) throw DomainError("at least one wavelength required");
    for (size_t i = 1; i < wavelengths.size(); ++i)
        if (wavelengths[i] <= wavelengths[i - 1]) throw DomainError("wavelengths must be strictly increasing");
    for (double w : wavelengths)
        if (w <= 0) throw DomainError("wavelengths must be positive");
    if (depth_planes.size() < 2) throw DomainError("at least two depth planes required");
    bool inc = depth_planes[1] > depth_planes[0];
    for (size_t i = 1; i < depth_planes.size(); ++i) {
        if (depth_planes[i] <= 0) throw DomainError("depth planes must be positive");
        if ((depth_planes[i] > depth_planes[i - 1]) != inc || depth_planes[i] == depth_planes[i - 1])
            throw DomainError("depth planes must be strictly monotone");
    }
    // Fresnel validity: wavelength much smaller than every travel distance.
    const double zmin = min_depth();
    for (double w : wavelengths)
        if (w / zmin >= 1e-4) throw DomainError("wavelength too large for the Fresnel regime at the nearest depth");

    if (focus_distance > 0) {
        const double inv = 1.0 / focal_length - 1.0 / focus_distance;
        if (inv <= 0) throw DomainError("focus_distance must exceed the focal length");
        const double zi = 1.0 / inv;
        if (sensor_distance == 0.0) {
            sensor_distance = zi;
        } else if (std::abs(sensor_distance - zi) > 1e-9 * zi) {
            throw DomainError("sensor_distance disagrees with the thin-lens distance for focus_distance");
        }
    }
    if (sensor_distance <= 0) throw DomainError("sensor_distance must be positive");
}

uint64_t fnv1a(const void* data, size_t n, uint64_t seed) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

uint64_t OpticalConfig::hash() const {
    KeyValueFile kv;
    to_kv(kv);
    const std::string text = kv.to_text();
    return fnv1a(text.data(), text.size());
}

OpticalConfig OpticalConfig::from_kv(const KeyValueFile& kv) {
    OpticalConfig cfg = default_desk_config();
    cfg.sensor_distance = 0.0;
    cfg.focal_length = kv.get_double("focal_length", cfg.focal_length);
    cfg.aperture_diameter = kv.get_double("aperture_diameter", cfg.aperture_diameter);
    cfg.window_size = kv.get_double("window_size", cfg.window_size);
    cfg.sim_grid = int(kv.get_int("sim_grid", cfg.sim_grid));
    cfg.psf_crop = int(kv.get_int("psf_crop", cfg.psf_crop));
    cfg.sensor_bin = int(kv.get_int("sensor_bin", cfg.sensor_bin));
    cfg.wavelengths = kv.get_list("wavelengths", cfg.wavelengths);
    cfg.depth_planes = kv.get_list("depth_planes", cfg.depth_planes);
    cfg.focus_distance = kv.get_double("focus_distance", cfg.focus_distance);
    cfg.sensor_distance = kv.get_double("sensor_distance", 0.0);
    cfg.finalize();
    return cfg;
}

void OpticalConfig::to_kv(KeyValueFile& kv) const {
    kv.set_double("focal_length", focal_length);
    kv.set_double("sensor_distance", sensor_distance);
    kv.set_double("aperture_diameter", aperture_diameter);
    kv.set_int("sim_grid", sim_grid);
    kv.set_double("window_size", window_size);
    kv.set_int("psf_crop", psf_crop);
    kv.set_int("sensor_bin", sensor_bin);
    kv.set_list("wavelengths", wavelengths);
    kv.set_list("depth_planes", depth_planes);
    kv.set_double("focus_distance", focus_distance);
}

OpticalConfig default_desk_config() {
    OpticalConfig cfg;
    cfg.focal_length = 0.025;
    cfg.aperture_diameter = 1.5e-3;
    cfg.window_size = 3.0e-3;
    cfg.sim_grid = 512;
    cfg.psf_crop = 41;
    cfg.sensor_bin = 1;
    // Sharpest object plane at 0.75 m, between the second and third depth
    // plane: blur size alone folds the far half of the range onto the near
    // half (1.6 m blurs like 0.49 m), so the chromatic code has to carry the
    // near/far distinction while gross blur still orders the rest.
    cfg.focus_distance = 0.375;
    cfg.sensor_distance = 0.0;
    cfg.wavelengths.resize(8);
    for (int i = 0; i < 8; ++i) cfg.wavelengths[i] = (430.0 + 230.0 * i / 7.0) * 1e-9;
    // 5 planes uniform in 1/z over [0.4, 1.6] m, farthest first.
    cfg.depth_planes.resize(5);
    const double ia = 1.0 / 1.6, ib = 1.0 / 0.4;
    for (int j = 0; j < 5; ++j) cfg.depth_planes[j] = 1.0 / (ia + (ib - ia) * j / 4.0);
    cfg.finalize();
    return cfg;
}

OpticalConfig gradcheck_config() {
    OpticalConfig cfg;
    cfg.focal_length = 0.025;
    cfg.aperture_diameter = 0.6e-3;
    cfg.window_size = 1.2e-3;
    cfg.sim_grid = 64;
    cfg.psf_crop = 9;
    cfg.sensor_bin = 1;
    cfg.focus_distance = 1.0;
    cfg.sensor_distance = 0.0;
    cfg.wavelengths = {470e-9, 550e-9, 630e-9};
    cfg.depth_planes = {1.2, 0.5};
    cfg.finalize();
    return cfg;
}

}  // namespace ccadepth
