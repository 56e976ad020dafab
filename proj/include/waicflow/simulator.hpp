#pragma once

// Analytic stand-in for a layered tissue reflectance model. Three layers,
// each with blood volume fraction and oxygenation, share a power-law
// reduced scattering coefficient. Extinction curves are sums of Gaussian
// bumps so every value can be evaluated by hand.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "waicflow/datasets.hpp"
#include "waicflow/numcore.hpp"

namespace waicflow {

inline constexpr std::size_t kTissueParamCount = 8;
inline constexpr std::size_t kTissueLayers = 3;

inline constexpr double kGridStartNm = 450.0;
inline constexpr double kGridStepNm = 2.0;
inline constexpr std::size_t kGridSize = 136;  // 450..720 nm

/// The fixed 450-720 nm, 2 nm wavelength grid.
const Vector& wavelength_grid();
/// Index of `lambda_nm` on the grid, or nullopt if it is not a grid point.
std::optional<std::size_t> grid_index(double lambda_nm);

struct TissueParams {
    std::array<double, kTissueLayers> blood_volume{};  // [0, 0.3]
    std::array<double, kTissueLayers> oxygenation{};   // [0, 1]
    double scatter_amplitude = 5.0;                    // [5, 50] 1/cm at 500 nm
    double scatter_power = 0.3;                        // [0.3, 3]

    /// Order: v1, s1, v2, s2, v3, s3, a, b.
    std::array<double, kTissueParamCount> to_array() const;
    static TissueParams from_array(std::span<const double> values);
    /// Throws DomainError if any field is outside its range.
    void validate() const;

    static const std::array<const char*, kTissueParamCount>& names();
};

/// Label column of layer-1 oxygenation in TissueParams::to_array order.
inline constexpr std::size_t kLayer1OxygenationIndex = 1;

/// Every field independently uniform over its range.
TissueParams sample_tissue_params(Rng& rng);

/// Unit-height Gaussian exp(-(x - center)^2 / (2 width^2)), all in nm.
double gaussian_bump(double lambda_nm, double center_nm, double width_nm);
/// Oxygenated and deoxygenated extinction stand-ins in 1/cm.
double extinction_oxy(double lambda_nm);
double extinction_deoxy(double lambda_nm);

/// Additional absorber present in "out-of-domain" tissue only; adds
/// amplitude * g(lambda; center, width) to every layer's absorption.
struct ExtraAbsorber {
    double amplitude = 0.0;  // 1/cm
    double center_nm = 605.0;
    double width_nm = 20.0;
};

/// mu_a of one layer (0-based) at a grid wavelength, in 1/cm.
double absorption_coefficient(const TissueParams& params, std::size_t layer, double lambda_nm,
                              const ExtraAbsorber* extra = nullptr);

/// a * (lambda / 500)^(-b), in 1/cm.
double reduced_scattering(const TissueParams& params, double lambda_nm);

inline constexpr std::array<double, kTissueLayers> kLayerThicknessCm{0.05, 0.1, 0.2};
inline constexpr std::array<double, kTissueLayers> kLayerWeight{0.5, 0.3, 0.2};

struct HighResSpectrum {
    Vector reflectance;  // one value per grid wavelength, in (0, 1]
};

HighResSpectrum reflectance_spectrum(const TissueParams& params, const ExtraAbsorber* extra = nullptr);

enum class CameraKind { spectrocam8, ximea16 };
enum class Illuminant { xenon, led };

std::string to_string(CameraKind kind);
std::string to_string(Illuminant illuminant);
CameraKind parse_camera_kind(const std::string& name);
Illuminant parse_illuminant(const std::string& name);

/// Illuminant spectral shape at one wavelength.
double illuminant_value(Illuminant illuminant, double lambda_nm);

struct CameraModel {
    std::string name;
    std::string illuminant_name;
    Vector band_centers;  // nm
    double fwhm_nm = 0.0;
    Matrix responses;     // n_bands x kGridSize, F_b(lambda)
    Vector illuminant;    // kGridSize, L(lambda)

    std::size_t n_bands() const noexcept { return band_centers.size(); }
};

/// Gaussian filters with the given centers and FWHM on the fixed grid.
CameraModel make_camera(std::string name, Vector band_centers, double fwhm_nm, Illuminant illuminant);
/// spectrocam8: 8 bands 470-700 nm, FWHM 30 nm; ximea16: 16 bands 465-630 nm,
/// FWHM 15 nm. No randomness involved.
CameraModel make_camera(CameraKind kind, Illuminant illuminant);

/// Plain-text table with columns lambda, F_0..F_{n-1}, L.
std::string camera_table(const CameraModel& camera);

struct BandMeasurement {
    Vector bands;  // non-negative, sums to 1
    std::string camera;
    std::string illuminant;
    std::uint64_t noise_seed = 0;
};

/// raw_b = sum_lambda F_b L r dlambda, then L1-normalized.
BandMeasurement apply_camera(const HighResSpectrum& spectrum, const CameraModel& camera);

/// Multiplicative N(1, sigma^2) noise per band, clipped at zero, re-normalized.
BandMeasurement add_noise(const BandMeasurement& measurement, double relative_sigma, Rng& rng);

struct SimulationOptions {
    double noise_sigma = 0.0;
    /// Draw an extra absorber amplitude per row from this range (1/cm) when set.
    std::optional<std::pair<double, double>> extra_absorber_range;
};

/// n labelled rows; row i is generated from mix_seed(seed, i) alone, so the
/// output is independent of evaluation order.
Dataset simulate_dataset(std::size_t n, const CameraModel& camera, std::uint64_t seed,
                         const SimulationOptions& options = {});

}  // namespace waicflow
