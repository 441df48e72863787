"""Irregular long-crested wave synthesis from a Bretschneider spectrum.

The free surface is a superposition of linear components with deep-water
dispersion.  Positions are earth-fixed (x, y) in meters, angles in radians,
frequencies in rad/s.

Heading convention: ``wave_heading`` is the direction waves arrive *from*,
measured from the +x axis.  0 puts the wave source dead ahead of a ship
cruising along +x (head seas), pi/2 abeam, 3*pi/4 on the stern quarter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi

# Default frequency band for discretization, as multiples of the peak
# frequency.  The band holds better than 99.5 percent of the variance.
OMEGA_BAND_FACTORS = (0.25, 4.0)


@dataclass(frozen=True)
class SpectrumParams:
    """Two-parameter Bretschneider seaway description.

    Parameters
    ----------
    significant_wave_height : float
        Significant wave height H_s [m].
    peak_modal_period : float
        Peak modal period T_p [s].
    wave_heading : float
        Arrival direction of the waves, radians in [0, 2*pi).
    gravity : float
        Gravitational acceleration [m/s^2].
    """

    significant_wave_height: float
    peak_modal_period: float
    wave_heading: float = 0.0
    gravity: float = 9.80665

    def __post_init__(self) -> None:
        if not self.significant_wave_height > 0.0:
            raise ValueError("significant_wave_height must be positive")
        if not self.peak_modal_period > 0.0:
            raise ValueError("peak_modal_period must be positive")
        if not self.gravity > 0.0:
            raise ValueError("gravity must be positive")
        if not 0.0 <= self.wave_heading < TWO_PI:
            raise ValueError("wave_heading must lie in [0, 2*pi)")

    @property
    def peak_frequency(self) -> float:
        """Peak modal frequency omega_p = 2*pi/T_p [rad/s]."""
        return TWO_PI / self.peak_modal_period

    @property
    def peak_wavelength(self) -> float:
        """Deep-water wavelength of the peak component [m]."""
        return TWO_PI / wavenumber(self.peak_frequency, self.gravity)


def spectral_density(omega, params: SpectrumParams):
    """Bretschneider one-sided spectral density S(omega) [m^2 s].

    S = (1.25/4) * (omega_p^4 / omega^5) * H_s^2 * exp(-1.25 * (omega_p/omega)^4)

    Accepts a scalar or array of positive frequencies.
    """
    w = np.asarray(omega, dtype=float)
    if np.any(w <= 0.0) or not np.all(np.isfinite(w)):
        raise ValueError("frequencies must be positive and finite")
    wp = params.peak_frequency
    hs = params.significant_wave_height
    ratio4 = (wp / w) ** 4
    dens = (1.25 / 4.0) * (wp**4 / w**5) * hs**2 * np.exp(-1.25 * ratio4)
    if np.isscalar(omega) or np.ndim(omega) == 0:
        return float(dens)
    return dens


def wavenumber(omega, gravity: float = 9.80665):
    """Deep-water dispersion k = omega^2 / g [rad/m]."""
    w = np.asarray(omega, dtype=float)
    if np.any(w <= 0.0) or not np.all(np.isfinite(w)):
        raise ValueError("frequencies must be positive and finite")
    if gravity <= 0.0:
        raise ValueError("gravity must be positive")
    k = w**2 / gravity
    if np.isscalar(omega) or np.ndim(omega) == 0:
        return float(k)
    return k


@dataclass(frozen=True)
class WaveComponents:
    """One realization of a discretized seaway.

    Fields hold per-component amplitude [m], angular frequency [rad/s],
    propagation wavenumber vector (kx, ky) [rad/m], and phase [rad].
    """

    amplitudes: np.ndarray
    frequencies: np.ndarray
    wavenumber_vectors: np.ndarray
    phases: np.ndarray

    def __post_init__(self) -> None:
        amp = np.atleast_1d(np.asarray(self.amplitudes, dtype=float))
        freq = np.atleast_1d(np.asarray(self.frequencies, dtype=float))
        kvec = np.asarray(self.wavenumber_vectors, dtype=float)
        phi = np.atleast_1d(np.asarray(self.phases, dtype=float))
        n = amp.shape[0]
        if n < 1:
            raise ValueError("at least one component required")
        if freq.shape != (n,) or phi.shape != (n,) or kvec.shape != (n, 2):
            raise ValueError("component arrays must share one length")
        if np.any(amp < 0.0):
            raise ValueError("amplitudes must be non-negative")
        if np.any(np.diff(freq) <= 0.0):
            raise ValueError("frequencies must be strictly increasing")
        if np.any(phi < 0.0) or np.any(phi >= TWO_PI):
            raise ValueError("phases must lie in [0, 2*pi)")
        object.__setattr__(self, "amplitudes", amp)
        object.__setattr__(self, "frequencies", freq)
        object.__setattr__(self, "wavenumber_vectors", kvec)
        object.__setattr__(self, "phases", phi)

    @property
    def n_components(self) -> int:
        return self.amplitudes.shape[0]

    @property
    def variance(self) -> float:
        """Total variance of the discrete seaway, sum of a_n^2 / 2 [m^2]."""
        return float(np.sum(self.amplitudes**2) / 2.0)


def discretize_spectrum(
    params: SpectrumParams,
    n_components: int,
    omega_range: tuple[float, float] | None = None,
    seed: int = 0,
) -> WaveComponents:
    """Sample the spectrum into equal-bandwidth components with random phases.

    Bins are equal-width in frequency over ``omega_range`` (default
    ``OMEGA_BAND_FACTORS`` times the peak frequency); each amplitude is
    a_n = sqrt(2 * S(omega_n) * d_omega) at the bin center.  Phases are drawn
    uniformly from [0, 2*pi) with the given seed, so the same seed always
    yields the same realization.
    """
    if n_components < 1:
        raise ValueError("n_components must be at least 1")
    if omega_range is None:
        wp = params.peak_frequency
        omega_range = (OMEGA_BAND_FACTORS[0] * wp, OMEGA_BAND_FACTORS[1] * wp)
    lo, hi = float(omega_range[0]), float(omega_range[1])
    if not 0.0 < lo < hi:
        raise ValueError("omega_range must satisfy 0 < low < high")

    edges = np.linspace(lo, hi, n_components + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    d_omega = (hi - lo) / n_components

    dens = spectral_density(centers, params)
    amps = np.sqrt(2.0 * dens * d_omega)

    k = wavenumber(centers, params.gravity)
    # Propagation direction is opposite the arrival direction.
    prop = params.wave_heading + np.pi
    kvec = np.column_stack((k * np.cos(prop), k * np.sin(prop)))

    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, TWO_PI, n_components)

    return WaveComponents(amps, centers, kvec, phases)


def _phase_angles(components: WaveComponents, position, t: float) -> np.ndarray:
    pos = np.asarray(position, dtype=float)
    if pos.shape != (2,) or not np.all(np.isfinite(pos)) or not np.isfinite(t):
        raise ValueError("position must be a finite (x, y) pair and t finite")
    kvec = components.wavenumber_vectors
    return (
        components.frequencies * t
        - (kvec[:, 0] * pos[0] + kvec[:, 1] * pos[1])
        + components.phases
    )


def elevation_at(components: WaveComponents, position, t: float) -> float:
    """Free-surface elevation [m] at earth-fixed ``position`` and time ``t``."""
    theta = _phase_angles(components, position, t)
    return float(np.sum(components.amplitudes * np.cos(theta)))


def elevation_and_slope(
    components: WaveComponents, position, t: float
) -> tuple[float, float, float]:
    """Elevation [m] and its earth-frame spatial gradient [rad] at a point.

    Returns ``(eta, d_eta/dx, d_eta/dy)``.  The gradient is analytic: the x
    derivative of cos(w t - kx x - ky y + phi) is kx sin(.) per component.
    """
    theta = _phase_angles(components, position, t)
    a = components.amplitudes
    s = np.sin(theta)
    kvec = components.wavenumber_vectors
    eta = float(np.sum(a * np.cos(theta)))
    sx = float(np.sum(a * kvec[:, 0] * s))
    sy = float(np.sum(a * kvec[:, 1] * s))
    return eta, sx, sy


def save_components(path, components: WaveComponents) -> None:
    """Write components as text: a count line, then ``a omega kx ky phi`` rows."""
    rows = np.column_stack(
        (
            components.amplitudes,
            components.frequencies,
            components.wavenumber_vectors,
            components.phases,
        )
    )
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{components.n_components}\n")
        for row in rows:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_components(path) -> WaveComponents:
    """Read a component file written by :func:`save_components`."""
    with open(path, "r", encoding="ascii") as fh:
        first = fh.readline().strip()
        n = int(first)
        data = np.loadtxt(fh, dtype=float, ndmin=2)
    if data.shape != (n, 5):
        raise ValueError(f"expected {n} rows of 5 columns, got {data.shape}")
    return WaveComponents(data[:, 0], data[:, 1], data[:, 2:4], data[:, 4])
