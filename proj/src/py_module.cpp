// Python bindings over the core operations: propagation, PSF simulation,
// rendering, losses/metrics, containers and scene generation.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>

#include "ccadepth/cca.hpp"
#include "ccadepth/config.hpp"
#include "ccadepth/data.hpp"
#include "ccadepth/decoder.hpp"
#include "ccadepth/losses.hpp"
#include "ccadepth/optics.hpp"
#include "ccadepth/render.hpp"
#include "ccadepth/train.hpp"
#include "ccadepth/version.hpp"

namespace py = pybind11;
using namespace ccadepth;

namespace {

OpticalConfig config_from_dict(const py::dict& d) {
    OpticalConfig cfg = default_desk_config();
    cfg.sensor_distance = 0.0;
    if (d.contains("focal_length")) cfg.focal_length = d["focal_length"].cast<double>();
    if (d.contains("aperture_diameter")) cfg.aperture_diameter = d["aperture_diameter"].cast<double>();
    if (d.contains("window_size")) cfg.window_size = d["window_size"].cast<double>();
    if (d.contains("sim_grid")) cfg.sim_grid = d["sim_grid"].cast<int>();
    if (d.contains("psf_crop")) cfg.psf_crop = d["psf_crop"].cast<int>();
    if (d.contains("sensor_bin")) cfg.sensor_bin = d["sensor_bin"].cast<int>();
    if (d.contains("focus_distance")) cfg.focus_distance = d["focus_distance"].cast<double>();
    if (d.contains("sensor_distance")) cfg.sensor_distance = d["sensor_distance"].cast<double>();
    if (d.contains("wavelengths")) cfg.wavelengths = d["wavelengths"].cast<std::vector<double>>();
    if (d.contains("depth_planes")) cfg.depth_planes = d["depth_planes"].cast<std::vector<double>>();
    cfg.finalize();
    return cfg;
}

py::dict config_to_dict(const OpticalConfig& cfg) {
    py::dict d;
    d["focal_length"] = cfg.focal_length;
    d["sensor_distance"] = cfg.sensor_distance;
    d["aperture_diameter"] = cfg.aperture_diameter;
    d["window_size"] = cfg.window_size;
    d["sim_grid"] = cfg.sim_grid;
    d["psf_crop"] = cfg.psf_crop;
    d["sensor_bin"] = cfg.sensor_bin;
    d["focus_distance"] = cfg.focus_distance;
    d["wavelengths"] = cfg.wavelengths;
    d["depth_planes"] = cfg.depth_planes;
    return d;
}

SpectralCube cube_from_array(const py::array_t<double>& arr, const std::vector<double>& wavelengths) {
    const auto info = arr.request();
    if (info.ndim != 3) throw ShapeError("cube must be (bands, height, width)");
    SpectralCube cube(int(info.shape[1]), int(info.shape[2]), int(info.shape[0]));
    if (wavelengths.size() != size_t(cube.l)) throw ShapeError("wavelength count must match the band axis");
    cube.wavelengths = wavelengths;
    auto a = arr.unchecked<3>();
    for (int b = 0; b < cube.l; ++b)
        for (int y = 0; y < cube.h; ++y)
            for (int x = 0; x < cube.w; ++x) cube.at(b, y, x) = a(b, y, x);
    return cube;
}

RealGrid grid_from_array(const py::array_t<double>& arr) {
    const auto info = arr.request();
    if (info.ndim != 2) throw ShapeError("expected a 2-D array");
    RealGrid g(int(info.shape[0]), int(info.shape[1]));
    auto a = arr.unchecked<2>();
    for (int y = 0; y < g.rows(); ++y)
        for (int x = 0; x < g.cols(); ++x) g(y, x) = a(y, x);
    return g;
}

py::array_t<double> array_from_grid(const RealGrid& g) {
    py::array_t<double> out({g.rows(), g.cols()});
    auto a = out.mutable_unchecked<2>();
    for (int y = 0; y < g.rows(); ++y)
        for (int x = 0; x < g.cols(); ++x) a(y, x) = g(y, x);
    return out;
}

py::dict metrics_to_dict(const MetricsReport& m) {
    py::dict d;
    d["mae"] = m.mae;
    d["rel"] = m.rel;
    d["log10"] = m.log10;
    d["rmse"] = m.rmse;
    d["delta1"] = m.delta1;
    d["delta2"] = m.delta2;
    d["delta3"] = m.delta3;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Wave-optics simulation and depth decoding for color-coded apertures";
    m.attr("__version__") = kVersion;

    py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
    py::register_exception<IoError>(m, "IoError", PyExc_IOError);
    py::register_exception<ConsistencyError>(m, "ConsistencyError", PyExc_RuntimeError);

    m.def("default_config", [] { return config_to_dict(default_desk_config()); },
          "Desk-scale camera configuration as a dict");

    m.def(
        "propagate",
        [](const py::array_t<std::complex<double>>& field, double pitch, double wavelength,
           double distance) {
            const auto info = field.request();
            if (info.ndim != 2) throw ShapeError("field must be 2-D");
            ComplexField f{ComplexGrid(int(info.shape[0]), int(info.shape[1])), pitch, wavelength};
            auto a = field.unchecked<2>();
            for (int y = 0; y < f.values.rows(); ++y)
                for (int x = 0; x < f.values.cols(); ++x) f.values(y, x) = a(y, x);
            const ComplexField out = angular_spectrum_propagate(f, distance);
            py::array_t<std::complex<double>> res({out.values.rows(), out.values.cols()});
            auto r = res.mutable_unchecked<2>();
            for (int y = 0; y < out.values.rows(); ++y)
                for (int x = 0; x < out.values.cols(); ++x) r(y, x) = out.values(y, x);
            return res;
        },
        py::arg("field"), py::arg("pitch"), py::arg("wavelength"), py::arg("distance"),
        "Angular-spectrum propagation with the exact transfer function");

    m.def(
        "psf_stack",
        [](const py::dict& config, const std::string& cca_path) {
            const OpticalConfig cfg = config_from_dict(config);
            const CcaImport imported = import_cca(cca_path);
            const PsfStack stack = build_psf_stack(cfg, imported.cca);
            py::array_t<double> kernels({stack.planes, stack.bands, stack.crop, stack.crop});
            std::copy(stack.kernels.begin(), stack.kernels.end(), kernels.mutable_data());
            py::array_t<double> energies({stack.planes, stack.bands});
            std::copy(stack.energies.begin(), stack.energies.end(), energies.mutable_data());
            return py::make_tuple(kernels, energies);
        },
        py::arg("config"), py::arg("cca_path"),
        "Depth/wavelength PSF stack for a CCA1 aperture file: (kernels, energies)");

    m.def(
        "render",
        [](const py::dict& config, const std::string& cca_path, const py::array_t<double>& cube,
           const py::array_t<double>& depth) {
            const OpticalConfig cfg = config_from_dict(config);
            const CcaImport imported = import_cca(cca_path);
            const SpectralCube sc = cube_from_array(cube, cfg.wavelengths);
            const DepthMap dm = grid_from_array(depth);
            const SensorResponse resp = default_sensor_response(cfg.wavelengths);
            const CodedImage coded = render_pipeline(sc, dm, imported.cca, cfg, resp);
            py::array_t<double> out({3, coded.h, coded.w});
            std::copy(coded.values.begin(), coded.values.end(), out.mutable_data());
            return out;
        },
        py::arg("config"), py::arg("cca_path"), py::arg("cube"), py::arg("depth"),
        "Depth-encoded RGB image of an all-in-focus cube, channels R, G, B");

    m.def(
        "decode",
        [](const std::string& ckpt_path, const py::array_t<double>& coded) {
            const Checkpoint ckpt = read_ckp1(ckpt_path);
            const auto info = coded.request();
            if (info.ndim != 3 || info.shape[0] != 3) throw ShapeError("coded image must be (3, H, W)");
            CodedImage img(int(info.shape[1]), int(info.shape[2]));
            std::copy(coded.data(), coded.data() + img.values.size(), img.values.begin());
            return array_from_grid(decoder_forward(ckpt.decoder, img, nullptr));
        },
        py::arg("checkpoint_path"), py::arg("coded"),
        "Depth estimate from a coded image using a trained checkpoint");

    m.def(
        "project_constraint",
        [](const py::array_t<double>& weights) {
            const auto info = weights.request();
            if (info.ndim != 3 || info.shape[0] != info.shape[1])
                throw ShapeError("weights must be (N, N, R)");
            CodedAperture cca;
            cca.n = int(info.shape[0]);
            cca.r = int(info.shape[2]);
            cca.l = 4;
            cca.weights.assign(weights.data(), weights.data() + info.size);
            cca.primaries.assign(size_t(cca.r) * cca.l, 1.0);
            cca.wavelengths_nm = {450, 490, 540, 620};
            const CodedAperture out = project_constraint(cca);
            py::array_t<double> res({cca.n, cca.n, cca.r});
            std::copy(out.weights.begin(), out.weights.end(), res.mutable_data());
            return res;
        },
        py::arg("weights"), "Manufacturability projection: normalize per cell, clip to [0,1]");

    m.def(
        "sobel",
        [](const py::array_t<double>& map) {
            RealGrid gx, gy;
            sobel_grad(grid_from_array(map), gx, gy);
            return py::make_tuple(array_from_grid(gx), array_from_grid(gy));
        },
        py::arg("map"));

    m.def(
        "total_loss",
        [](const py::array_t<double>& y, const py::array_t<double>& y_hat, double alpha, double mu,
           double sigma) {
            LossWeights w;
            w.alpha = alpha;
            w.mu = mu;
            w.sigma = sigma;
            RealGrid grad;
            const double loss = total_loss(grid_from_array(y), grid_from_array(y_hat), w, &grad);
            return py::make_tuple(loss, array_from_grid(grad));
        },
        py::arg("y"), py::arg("y_hat"), py::arg("alpha") = 1.0, py::arg("mu") = 1.0,
        py::arg("sigma") = 1.0, "Weighted training loss and its gradient w.r.t. the estimate");

    m.def(
        "metrics",
        [](const py::array_t<double>& y, const py::array_t<double>& y_hat) {
            return metrics_to_dict(evaluate_metrics(grid_from_array(y), grid_from_array(y_hat)));
        },
        py::arg("y"), py::arg("y_hat"), "MAE/REL/Log10/RMSE and delta thresholds");

    m.def(
        "generate_scene",
        [](const py::dict& config, uint64_t seed, int width, int height, int planes) {
            const OpticalConfig cfg = config_from_dict(config);
            SceneSpec spec;
            spec.seed = seed;
            spec.width = width;
            spec.height = height;
            spec.planes = planes;
            spec.z_min = cfg.min_depth();
            spec.z_max = cfg.max_depth();
            const Scene scene = generate_scene(spec, cfg);
            py::array_t<double> cube({scene.cube.l, scene.cube.h, scene.cube.w});
            std::copy(scene.cube.values.begin(), scene.cube.values.end(), cube.mutable_data());
            return py::make_tuple(cube, array_from_grid(scene.depth));
        },
        py::arg("config"), py::arg("seed"), py::arg("width") = 64, py::arg("height") = 64,
        py::arg("planes") = 3, "Synthetic textured scene: (cube, depth)");

    m.def(
        "read_sdc",
        [](const std::string& path) {
            const SdcContents c = read_sdc(path);
            py::array_t<double> cube({c.cube.l, c.cube.h, c.cube.w});
            std::copy(c.cube.values.begin(), c.cube.values.end(), cube.mutable_data());
            py::object depth = py::none();
            if (c.depth) depth = array_from_grid(*c.depth);
            return py::make_tuple(cube, c.cube.wavelengths, depth);
        },
        py::arg("path"), "Returns (cube, wavelengths, depth-or-None)");

    m.def(
        "write_sdc",
        [](const std::string& path, const py::array_t<double>& cube,
           const std::vector<double>& wavelengths, const std::optional<py::array_t<double>>& depth) {
            const SpectralCube sc = cube_from_array(cube, wavelengths);
            if (depth) {
                const DepthMap dm = grid_from_array(*depth);
                write_sdc(sc, &dm, path);
            } else {
                write_sdc(sc, nullptr, path);
            }
        },
        py::arg("path"), py::arg("cube"), py::arg("wavelengths"), py::arg("depth") = py::none());

    m.def(
        "evaluate_checkpoint",
        [](const std::string& ckpt_path, const std::string& data_dir, const py::dict& config) {
            const OpticalConfig cfg = config_from_dict(config);
            const Checkpoint ckpt = read_ckp1(ckpt_path);
            const EvalResult res = evaluate(ckpt, load_dataset(data_dir), cfg);
            return metrics_to_dict(res.aggregate);
        },
        py::arg("checkpoint_path"), py::arg("data_dir"), py::arg("config"),
        "Aggregate depth metrics of a checkpoint over a scene directory");
}
