#include "waicflow/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "waicflow/errors.hpp"

namespace waicflow {

const Vector& wavelength_grid() {
    static const Vector grid = [] {
        Vector g(kGridSize);
        for (std::size_t i = 0; i < kGridSize; ++i) g[i] = kGridStartNm + kGridStepNm * static_cast<double>(i);
        return g;
    }();
    return grid;
}

std::optional<std::size_t> grid_index(double lambda_nm) {
    const double pos = (lambda_nm - kGridStartNm) / kGridStepNm;
    const double rounded = std::round(pos);
    if (std::abs(pos - rounded) > 1e-9 || rounded < 0.0 || rounded >= static_cast<double>(kGridSize)) {
        return std::nullopt;
    }
    return static_cast<std::size_t>(rounded);
}

// ---------------------------------------------------------------------------

std::array<double, kTissueParamCount> TissueParams::to_array() const {
    return {blood_volume[0], oxygenation[0], blood_volume[1], oxygenation[1],
            blood_volume[2], oxygenation[2], scatter_amplitude, scatter_power};
}

TissueParams TissueParams::from_array(std::span<const double> values) {
    if (values.size() != kTissueParamCount) throw ShapeError("tissue parameter vector must have 8 values");
    TissueParams p;
    for (std::size_t l = 0; l < kTissueLayers; ++l) {
        p.blood_volume[l] = values[2 * l];
        p.oxygenation[l] = values[2 * l + 1];
    }
    p.scatter_amplitude = values[6];
    p.scatter_power = values[7];
    return p;
}

const std::array<const char*, kTissueParamCount>& TissueParams::names() {
    static const std::array<const char*, kTissueParamCount> n{"v1", "s1", "v2", "s2", "v3", "s3", "a", "b"};
    return n;
}

void TissueParams::validate() const {
    auto check = [](double v, double lo, double hi, const char* what) {
        if (!(v >= lo && v <= hi)) {
            std::ostringstream os;
            os << what << " = " << v << " outside [" << lo << ", " << hi << "]";
            throw DomainError(os.str());
        }
    };
    for (std::size_t l = 0; l < kTissueLayers; ++l) {
        check(blood_volume[l], 0.0, 0.3, "blood volume fraction");
        check(oxygenation[l], 0.0, 1.0, "oxygenation");
    }
    check(scatter_amplitude, 5.0, 50.0, "scattering amplitude");
    check(scatter_power, 0.3, 3.0, "scattering power");
}

TissueParams sample_tissue_params(Rng& rng) {
    TissueParams p;
    for (std::size_t l = 0; l < kTissueLayers; ++l) {
        p.blood_volume[l] = rng.uniform(0.0, 0.3);
        p.oxygenation[l] = rng.uniform(0.0, 1.0);
    }
    p.scatter_amplitude = rng.uniform(5.0, 50.0);
    p.scatter_power = rng.uniform(0.3, 3.0);
    return p;
}

// ---------------------------------------------------------------------------

double gaussian_bump(double lambda_nm, double center_nm, double width_nm) {
    const double d = (lambda_nm - center_nm) / width_nm;
    return std::exp(-0.5 * d * d);
}

double extinction_oxy(double lambda_nm) {
    return 20.0 * gaussian_bump(lambda_nm, 545.0, 18.0) + 18.0 * gaussian_bump(lambda_nm, 577.0, 16.0) + 2.0;
}

double extinction_deoxy(double lambda_nm) { return 30.0 * gaussian_bump(lambda_nm, 557.0, 25.0) + 2.0; }

double absorption_coefficient(const TissueParams& params, std::size_t layer, double lambda_nm,
                              const ExtraAbsorber* extra) {
    if (layer >= kTissueLayers) throw UsageError("layer index out of range");
    if (!grid_index(lambda_nm)) {
        throw DomainError("wavelength " + std::to_string(lambda_nm) + " nm is not on the 2 nm grid");
    }
    const double s = params.oxygenation[layer];
    double mu = params.blood_volume[layer] * (s * extinction_oxy(lambda_nm) + (1.0 - s) * extinction_deoxy(lambda_nm));
    if (extra != nullptr) mu += extra->amplitude * gaussian_bump(lambda_nm, extra->center_nm, extra->width_nm);
    return mu;
}

double reduced_scattering(const TissueParams& params, double lambda_nm) {
    return params.scatter_amplitude * std::pow(lambda_nm / 500.0, -params.scatter_power);
}

HighResSpectrum reflectance_spectrum(const TissueParams& params, const ExtraAbsorber* extra) {
    const auto& grid = wavelength_grid();
    HighResSpectrum out{Vector(grid.size())};
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const double lambda = grid[i];
        const double mus = reduced_scattering(params, lambda);
        double r = 0.0;
        for (std::size_t l = 0; l < kTissueLayers; ++l) {
            const double mua = absorption_coefficient(params, l, lambda, extra);
            r += kLayerWeight[l] * std::exp(-2.0 * (mua + mus / 10.0) * kLayerThicknessCm[l]) * (mus / (mus + mua));
        }
        out.reflectance[i] = std::clamp(r, 1e-6, 1.0);
    }
    return out;
}

// ---------------------------------------------------------------------------

std::string to_string(CameraKind kind) { return kind == CameraKind::spectrocam8 ? "spectrocam8" : "ximea16"; }

std::string to_string(Illuminant illuminant) { return illuminant == Illuminant::xenon ? "xenon" : "led"; }

CameraKind parse_camera_kind(const std::string& name) {
    if (name == "spectrocam8") return CameraKind::spectrocam8;
    if (name == "ximea16") return CameraKind::ximea16;
    throw UsageError("unknown camera '" + name + "' (expected spectrocam8 or ximea16)");
}

Illuminant parse_illuminant(const std::string& name) {
    if (name == "xenon") return Illuminant::xenon;
    if (name == "led") return Illuminant::led;
    throw UsageError("unknown illuminant '" + name + "' (expected xenon or led)");
}

double illuminant_value(Illuminant illuminant, double lambda_nm) {
    if (illuminant == Illuminant::xenon) return 1.0;
    return 0.3 + gaussian_bump(lambda_nm, 460.0, 12.0) + 0.8 * gaussian_bump(lambda_nm, 560.0, 50.0);
}

CameraModel make_camera(std::string name, Vector band_centers, double fwhm_nm, Illuminant illuminant) {
    if (band_centers.empty()) throw UsageError("camera needs at least one band");
    if (!(fwhm_nm > 0.0)) throw UsageError("filter FWHM must be positive");
    const auto& grid = wavelength_grid();
    const double sigma = fwhm_nm / (2.0 * std::sqrt(2.0 * std::log(2.0)));
    CameraModel cam;
    cam.name = std::move(name);
    cam.illuminant_name = to_string(illuminant);
    cam.fwhm_nm = fwhm_nm;
    cam.responses = Matrix(band_centers.size(), grid.size());
    for (std::size_t b = 0; b < band_centers.size(); ++b) {
        double area = 0.0;
        for (std::size_t i = 0; i < grid.size(); ++i) {
            cam.responses(b, i) = gaussian_bump(grid[i], band_centers[b], sigma);
            area += cam.responses(b, i) * kGridStepNm;
        }
        if (!(area > 0.0)) throw DomainError("filter response integrates to zero");
    }
    cam.illuminant.resize(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) cam.illuminant[i] = illuminant_value(illuminant, grid[i]);
    cam.band_centers = std::move(band_centers);
    return cam;
}

namespace {

Vector evenly_spaced(double first, double last, std::size_t n) {
    Vector v(n);
    for (std::size_t i = 0; i < n; ++i) {
        v[i] = first + (last - first) * static_cast<double>(i) / static_cast<double>(n - 1);
    }
    return v;
}

}  // namespace

CameraModel make_camera(CameraKind kind, Illuminant illuminant) {
    if (kind == CameraKind::spectrocam8) {
        return make_camera(to_string(kind), evenly_spaced(470.0, 700.0, 8), 30.0, illuminant);
    }
    return make_camera(to_string(kind), evenly_spaced(465.0, 630.0, 16), 15.0, illuminant);
}

std::string camera_table(const CameraModel& camera) {
    std::ostringstream os;
    os << "lambda_nm";
    for (std::size_t b = 0; b < camera.n_bands(); ++b) os << ",F" << b;
    os << ",L\n";
    const auto& grid = wavelength_grid();
    for (std::size_t i = 0; i < grid.size(); ++i) {
        os << format_double(grid[i]);
        for (std::size_t b = 0; b < camera.n_bands(); ++b) os << ',' << format_double(camera.responses(b, i));
        os << ',' << format_double(camera.illuminant[i]) << '\n';
    }
    return os.str();
}

BandMeasurement apply_camera(const HighResSpectrum& spectrum, const CameraModel& camera) {
    if (spectrum.reflectance.size() != camera.responses.cols()) {
        throw ShapeError("spectrum is not on the camera's wavelength grid");
    }
    BandMeasurement m{Vector(camera.n_bands(), 0.0), camera.name, camera.illuminant_name, 0};
    double total = 0.0;
    for (std::size_t b = 0; b < camera.n_bands(); ++b) {
        double raw = 0.0;
        for (std::size_t i = 0; i < spectrum.reflectance.size(); ++i) {
            raw += camera.responses(b, i) * camera.illuminant[i] * spectrum.reflectance[i] * kGridStepNm;
        }
        m.bands[b] = raw;
        total += raw;
    }
    if (!(total > 0.0)) throw DegenerateError("camera measurement is all zero");
    for (double& v : m.bands) v /= total;
    return m;
}

BandMeasurement add_noise(const BandMeasurement& measurement, double relative_sigma, Rng& rng) {
    if (!(relative_sigma >= 0.0)) throw UsageError("noise sigma must be >= 0");
    BandMeasurement out = measurement;
    out.noise_seed = rng.seed();
    if (relative_sigma == 0.0) return out;
    double total = 0.0;
    for (double& v : out.bands) {
        v = std::max(0.0, v * (1.0 + relative_sigma * rng.normal()));
        total += v;
    }
    if (!(total > 0.0)) throw DegenerateError("noise clipped every band to zero");
    for (double& v : out.bands) v /= total;
    return out;
}

Dataset simulate_dataset(std::size_t n, const CameraModel& camera, std::uint64_t seed,
                         const SimulationOptions& options) {
    if (n == 0) throw UsageError("simulate_dataset: n must be >= 1");
    Dataset data;
    data.measurements = Matrix(n, camera.n_bands());
    data.labels = Matrix(n, kTissueParamCount);
    data.tags.assign(n, SplitTag::none);
    data.meta = DatasetMeta{camera.name, camera.illuminant_name, seed, ""};
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(mix_seed(seed, i));
        const TissueParams p = sample_tissue_params(rng);
        std::optional<ExtraAbsorber> extra;
        if (options.extra_absorber_range) {
            extra = ExtraAbsorber{rng.uniform(options.extra_absorber_range->first, options.extra_absorber_range->second)};
        }
        auto m = apply_camera(reflectance_spectrum(p, extra ? &*extra : nullptr), camera);
        if (options.noise_sigma > 0.0) m = add_noise(m, options.noise_sigma, rng);
        std::copy(m.bands.begin(), m.bands.end(), data.measurements.row(i).begin());
        const auto arr = p.to_array();
        std::copy(arr.begin(), arr.end(), data.labels->row(i).begin());
    }
    return data;
}

}  // namespace waicflow
