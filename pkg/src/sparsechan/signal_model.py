"""Synthetic clustered-AoD channel model for a ULA base station.

Generates ground-truth channels (few scatterers, each spawning a narrow fan of
sub-paths), Gaussian pilot matrices, angle-grid steering dictionaries, and noisy
measurements; scores estimates by NMSE.

Complex Gaussian convention used across the project: CN(x; mu, nu) has density
(1/(pi*nu)) * exp(-|x-mu|^2/nu), i.e. nu is the variance of the complex scalar
(real and imaginary parts each carry nu/2).
"""

import math
from dataclasses import dataclass

import numpy as np

# downlink 2.17 GHz array designed at half-wavelength for 2 GHz -> 2.17/4
DEFAULT_D_OVER_LAMBDA = 2.17 / 4.0

HALF_PI = 0.5 * math.pi


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform linear array: element count and spacing in downlink wavelengths."""

    num_antennas: int
    d_over_lambda: float = DEFAULT_D_OVER_LAMBDA

    def __post_init__(self):
        if self.num_antennas < 1:
            raise ValueError("num_antennas must be a positive integer")
        if not self.d_over_lambda > 0:
            raise ValueError("d_over_lambda must be positive")


def steering_vector(theta, geom):
    """Array response toward angle theta (radians, |theta| <= pi/2).

    Element g (0-indexed) is exp(-j*2*pi*d_over_lambda*g*sin(theta)), so
    element 0 is always 1 and all elements have unit modulus.
    """
    g = np.arange(geom.num_antennas)
    return np.exp(-2j * np.pi * geom.d_over_lambda * math.sin(theta) * g)


def steering_derivative(theta, geom):
    """Derivative of steering_vector with respect to theta."""
    g = np.arange(geom.num_antennas)
    rate = -2j * np.pi * geom.d_over_lambda * g
    return rate * math.cos(theta) * np.exp(rate * math.sin(theta))


def build_dictionary(theta, geom):
    """G x M steering dictionary: column m is steering_vector(theta[m])."""
    theta = np.asarray(theta, dtype=float)
    g = np.arange(geom.num_antennas)
    return np.exp(-2j * np.pi * geom.d_over_lambda * np.outer(g, np.sin(theta)))


def build_dictionary_derivative(theta, geom):
    """G x M matrix whose column m is steering_derivative(theta[m])."""
    theta = np.asarray(theta, dtype=float)
    g = np.arange(geom.num_antennas)
    rate = -2j * np.pi * geom.d_over_lambda * g
    return rate[:, None] * np.cos(theta)[None, :] * np.exp(
        np.outer(rate, np.sin(theta))
    )


def initial_grid(num_points):
    """Angle grid with uniformly spaced sines: asin(-1 + 2m/M) for m=1..M.

    The last point is exactly asin(1) = pi/2; steering vectors remain well
    defined there.
    """
    if num_points < 1:
        raise ValueError("grid needs at least one point")
    m = np.arange(1, num_points + 1)
    return np.arcsin(-1.0 + 2.0 * m / num_points)


def check_grid(theta):
    """Validate an angle grid: 1-D, strictly increasing, inside [-pi/2, pi/2]."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.size < 1:
        raise ValueError("grid must be a nonempty 1-D array")
    if theta.size > 1 and not np.all(np.diff(theta) > 0):
        raise ValueError("grid must be strictly increasing")
    # tiny slack: initial grid touches +pi/2 up to rounding
    if theta[0] < -HALF_PI - 1e-12 or theta[-1] > HALF_PI + 1e-12:
        raise ValueError("grid angles must lie in [-pi/2, pi/2]")
    return theta


@dataclass(frozen=True)
class GroundTruthChannel:
    """Physical channel plus the geometry that generated it (evaluation only)."""

    h: np.ndarray                  # complex (G,)
    scatterer_centers: np.ndarray  # (L_s,) radians
    path_aods: np.ndarray          # (L_s, L_p) radians
    path_gains: np.ndarray         # complex (L_s, L_p)


def synthesize_channel(num_scatterers, paths_per_scatterer, spread, geom, rng):
    """Draw a clustered channel: L_s scatterer centers, each with L_p sub-paths.

    spread is the full angular spread (radians): centers are uniform on
    [-pi/2 + spread/2, pi/2 - spread/2] and each sub-path AoD is uniform within
    +-spread/2 of its center, so every AoD stays in [-pi/2, pi/2].  Path gains
    are iid CN(0, 1/(L_s*L_p)), which makes E||h||^2 = G.  AoDs are
    continuous-valued; nothing is snapped to a grid.
    """
    if num_scatterers < 1 or paths_per_scatterer < 1:
        raise ValueError("need at least one scatterer and one path per scatterer")
    if not 0 < spread < math.pi:
        raise ValueError("spread must lie in (0, pi) radians")
    centers = rng.uniform(-HALF_PI + spread / 2, HALF_PI - spread / 2,
                          size=num_scatterers)
    offsets = rng.uniform(-spread / 2, spread / 2,
                          size=(num_scatterers, paths_per_scatterer))
    aods = centers[:, None] + offsets
    scale = math.sqrt(1.0 / (2 * num_scatterers * paths_per_scatterer))
    gains = scale * (rng.standard_normal(aods.shape)
                     + 1j * rng.standard_normal(aods.shape))
    steer = build_dictionary(aods.ravel(), geom)
    h = steer @ gains.ravel()
    return GroundTruthChannel(h=h, scatterer_centers=centers,
                              path_aods=aods, path_gains=gains)


def generate_pilots(num_pilots, num_antennas, rng):
    """N x G pilot matrix: iid CN(0,1) entries rescaled so trace(X X^H) = N*G."""
    if num_pilots < 1 or num_antennas < 1:
        raise ValueError("pilot matrix dimensions must be positive")
    z = (rng.standard_normal((num_pilots, num_antennas))
         + 1j * rng.standard_normal((num_pilots, num_antennas))) / math.sqrt(2)
    energy = np.sum(np.abs(z) ** 2)
    return z * math.sqrt(num_pilots * num_antennas / energy)


@dataclass(frozen=True)
class Measurement:
    y: np.ndarray     # complex (N,)
    true_eta: float   # noise precision used to generate the noise (inf = noiseless)


def measure(pilots, h, snr_db, rng):
    """y = X h + n with n iid CN(0, 1/eta), eta = 10^(snr_db/10).

    snr_db = +inf is the noiseless sentinel: y = X h exactly.
    """
    clean = pilots @ h
    if math.isinf(snr_db) and snr_db > 0:
        return Measurement(y=clean, true_eta=math.inf)
    eta = 10.0 ** (snr_db / 10.0)
    sd = math.sqrt(1.0 / (2 * eta))
    noise = sd * (rng.standard_normal(clean.shape)
                  + 1j * rng.standard_normal(clean.shape))
    return Measurement(y=clean + noise, true_eta=eta)


NMSE_FLOOR_DB = -300.0


def nmse_db(h_hat, h):
    """10*log10(||h_hat - h||^2 / ||h||^2), floored at -300 dB on exact recovery."""
    num = float(np.sum(np.abs(np.asarray(h_hat) - np.asarray(h)) ** 2))
    den = float(np.sum(np.abs(np.asarray(h)) ** 2))
    if den == 0.0:
        raise ValueError("true channel must be nonzero")
    if num == 0.0:
        return NMSE_FLOOR_DB
    return max(10.0 * math.log10(num / den), NMSE_FLOOR_DB)
