"""Large-footprint full-waveform simulation from discrete point clouds and
the waveform metric suite (ground finding, RH profiles, cover, LAI layers,
edge/sensitivity/understory measures).

Simulation model: every return inside 3 footprint sigmas of the center
contributes a Gaussian pulse in elevation centered at its z. The pulse is
integrated exactly over each bin (erf differences), truncated at +/- 6
pulse sigmas, so with zero noise the waveform total equals the summed
weights to floating-point accuracy. A point's weight is its footprint
Gaussian exp(-r^2 / (2 sigma_f^2)) times a reflectance factor: rho_g for
ground-classified returns and rho_v for everything else. The reflectance
factor is what makes the standard cover correction
cover = Iv / (Iv + Ig * rho_v / rho_g) recover the geometric canopy cover.

With configured noise, white Gaussian noise is added per bin and removed
again by mean + 5 sigma thresholding (both estimated from the signal-free
pad bins). With zero noise the signal threshold falls back to 1e-9 of the
peak amplitude and the Blair sensitivity saturates at 1.0; the dump header
records the noise level so the two regimes stay distinguishable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.optimize import least_squares
from scipy.special import ndtr

from .errors import DataError, NumericalError
from .las_io import GROUND_CLASS, PointCloud

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
PULSE_TRUNCATION_SIGMAS = 6.0
ZERO_NOISE_THRESHOLD_FRAC = 1e-9
MAX_COMPONENTS = 10
MIN_COMPONENT_ENERGY_FRAC = 0.01
LAI_LAYER = 1.0
LAI_EXTINCTION = 1.0
LAI_BINS = ((0.0, 10.0), (10.0, 20.0), (20.0, 30.0))
RH_STEP_EMITTED = 5
DETECTION_SIGMAS = 5.0  # ground is "detectable" when its peak clears 5 noise sigmas


class EmptyFootprintError(DataError):
    """No returns within the footprint."""


class NoGroundError(DataError):
    """The waveform holds no findable ground return."""


class DegenerateFitError(NumericalError):
    """Gaussian decomposition produced an unusable ground component."""


@dataclass(frozen=True)
class FootprintConfig:
    """Geometry, pulse and noise settings of one simulated footprint."""

    center: tuple[float, float]
    diameter: float = 25.0
    footprint_sigma: float | None = None  # defaults to diameter / 4
    pulse_fwhm: float = 2.34
    bin_size: float = 0.15
    noise_std: float = 0.0
    rho_v: float = 0.57
    rho_g: float = 0.40
    noise_seed: int | None = None

    def __post_init__(self):
        if min(self.diameter, self.pulse_fwhm, self.bin_size) <= 0:
            raise ValueError("diameter, pulse FWHM and bin size must be positive")
        if self.footprint_sigma is not None and self.footprint_sigma <= 0:
            raise ValueError("footprint sigma must be positive")
        for rho in (self.rho_v, self.rho_g):
            if not 0.0 < rho <= 1.0:
                raise ValueError("reflectances must be in (0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise stddev cannot be negative")

    @property
    def sigma_f(self) -> float:
        return self.footprint_sigma if self.footprint_sigma is not None else self.diameter / 4.0

    @property
    def sigma_pulse(self) -> float:
        return self.pulse_fwhm * FWHM_TO_SIGMA


@dataclass(frozen=True)
class Waveform:
    """Binned received-energy profile for one footprint.

    `elevation` holds bin centers in descending order and `amplitude` the
    energy per bin. `ground_energy` is the simulation-side annotation of
    energy contributed by ground-classified returns (None when the waveform
    does not come from a classified cloud).
    """

    wave_id: str
    elevation: np.ndarray
    amplitude: np.ndarray
    bin_size: float
    noise_threshold: float
    noise_std: float = 0.0
    rho_v: float = 0.57
    rho_g: float = 0.40
    center: tuple[float, float] = (0.0, 0.0)
    pulse_sigma: float = 0.5
    ground_energy: np.ndarray | None = None

    def __post_init__(self):
        elev = np.asarray(self.elevation, dtype=np.float64)
        amp = np.asarray(self.amplitude, dtype=np.float64)
        if elev.shape != amp.shape or elev.ndim != 1 or elev.size < 2:
            raise ValueError("elevation and amplitude must be equal-length 1-D arrays")
        if elev[0] < elev[-1]:
            raise ValueError("elevation bins must be descending")
        if np.any(amp < 0):
            raise ValueError("amplitudes must be non-negative")
        for name, arr in (("elevation", elev), ("amplitude", amp)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.ground_energy is not None:
            g = np.asarray(self.ground_energy, dtype=np.float64)
            if g.shape != elev.shape:
                raise ValueError("ground_energy must match the bin layout")
            g.flags.writeable = False
            object.__setattr__(self, "ground_energy", g)

    @property
    def total_energy(self) -> float:
        return float(self.amplitude.sum())

    def ascending(self) -> tuple[np.ndarray, np.ndarray]:
        """(bin centers, amplitudes) from the bottom of the waveform up."""
        return self.elevation[::-1], self.amplitude[::-1]

    def edges_ascending(self) -> np.ndarray:
        centers = self.elevation[::-1]
        return np.concatenate((centers - self.bin_size / 2.0,
                               [centers[-1] + self.bin_size / 2.0]))

    def scaled(self, factor: float) -> "Waveform":
        """Same waveform with all energies (and the noise floor) scaled."""
        return replace(
            self,
            amplitude=self.amplitude * factor,
            noise_threshold=self.noise_threshold * factor,
            noise_std=self.noise_std * factor,
            ground_energy=None if self.ground_energy is None else self.ground_energy * factor,
        )


@dataclass(frozen=True)
class GaussianComponent:
    energy: float
    center: float
    width: float

    def density(self, z: np.ndarray) -> np.ndarray:
        return self.energy * np.exp(-0.5 * ((z - self.center) / self.width) ** 2) \
            / (self.width * math.sqrt(2.0 * math.pi))


@dataclass(frozen=True)
class GroundFit:
    """Result of waveform decomposition plus the three ground estimates."""

    gheight: float
    max_ground: float
    infl_ground: float
    components: tuple[GaussianComponent, ...]
    centers: np.ndarray   # ascending
    smoothed: np.ndarray  # ascending, pulse-width smoothed amplitude

    @property
    def ground_component(self) -> GaussianComponent:
        return self.components[0]


def footprint_weights(cloud: PointCloud, cfg: FootprintConfig):
    """(selection mask, per-point weights) for returns inside 3 sigma_f."""
    dx = cloud.x - cfg.center[0]
    dy = cloud.y - cfg.center[1]
    r2 = dx * dx + dy * dy
    sel = r2 <= (3.0 * cfg.sigma_f) ** 2
    refl = np.where(cloud.classification == GROUND_CLASS, cfg.rho_g, cfg.rho_v)
    w = refl * np.exp(-r2 / (2.0 * cfg.sigma_f ** 2))
    return sel, np.where(sel, w, 0.0)


def _bin_pulses(z: np.ndarray, weights: np.ndarray, edges: np.ndarray,
                sigma: float) -> np.ndarray:
    """Accumulate per-bin energy of Gaussian pulses, truncated at 6 sigma."""
    nbins = edges.size - 1
    out = np.zeros(nbins)
    if z.size == 0:
        return out
    width_bins = int(math.ceil(2.0 * PULSE_TRUNCATION_SIGMAS * sigma / (edges[1] - edges[0]))) + 2
    width_bins = min(width_bins, nbins)
    start = np.floor((z - PULSE_TRUNCATION_SIGMAS * sigma - edges[0])
                     / (edges[1] - edges[0])).astype(int)
    start = np.clip(start, 0, nbins - width_bins)
    local = start[:, None] + np.arange(width_bins + 1)[None, :]
    cdf = ndtr((edges[local] - z[:, None]) / sigma)
    contrib = weights[:, None] * np.diff(cdf, axis=1)
    np.add.at(out, (start[:, None] + np.arange(width_bins)[None, :]).ravel(),
              contrib.ravel())
    return out


def simulate_footprint(cloud: PointCloud, cfg: FootprintConfig,
                       wave_id: str = "wf") -> Waveform:
    """Simulate the received waveform of one large footprint.

    Requires un-normalized elevations; raises EmptyFootprintError when no
    return lies within 3 footprint sigmas of the center.
    """
    sel, w = footprint_weights(cloud, cfg)
    if not sel.any():
        raise EmptyFootprintError(
            f"no returns within {3 * cfg.sigma_f:.1f} m of {cfg.center}")
    z = cloud.z[sel]
    w = w[sel]
    is_ground = cloud.classification[sel] == GROUND_CLASS

    sigma = cfg.sigma_pulse
    pad = PULSE_TRUNCATION_SIGMAS * sigma + 3.0 * cfg.bin_size
    lo = z.min() - pad
    nbins = int(math.ceil((z.max() + pad - lo) / cfg.bin_size)) + 1
    edges = lo + np.arange(nbins + 1) * cfg.bin_size
    centers = edges[:-1] + cfg.bin_size / 2.0

    amplitude = _bin_pulses(z, w, edges, sigma)
    ground_energy = _bin_pulses(z[is_ground], w[is_ground], edges, sigma)

    noise_std = cfg.noise_std
    if noise_std > 0.0:
        rng = np.random.default_rng(cfg.noise_seed)
        amplitude = amplitude + rng.normal(0.0, noise_std, nbins)
        # signal-free pad bins carry pure noise; estimate the floor there
        quiet = (centers < z.min() - 3.0 * sigma) | (centers > z.max() + 3.0 * sigma)
        mean_n = float(amplitude[quiet].mean())
        std_n = float(amplitude[quiet].std())
        threshold = DETECTION_SIGMAS * std_n
        amplitude = amplitude - mean_n
        amplitude[amplitude < threshold] = 0.0
        amplitude = np.maximum(amplitude, 0.0)
    else:
        threshold = ZERO_NOISE_THRESHOLD_FRAC * float(amplitude.max())

    return Waveform(
        wave_id=wave_id,
        elevation=centers[::-1].copy(),
        amplitude=amplitude[::-1].copy(),
        bin_size=cfg.bin_size,
        noise_threshold=threshold,
        noise_std=noise_std,
        rho_v=cfg.rho_v,
        rho_g=cfg.rho_g,
        center=cfg.center,
        pulse_sigma=sigma,
        ground_energy=ground_energy[::-1].copy(),
    )


def _pulse_smoothed(wf: Waveform) -> np.ndarray:
    """Amplitude smoothed with the pulse-width kernel (ascending order)."""
    _, amp = wf.ascending()
    return gaussian_filter1d(amp, wf.pulse_sigma / wf.bin_size, mode="constant")


def _local_maxima(values: np.ndarray, floor: float) -> np.ndarray:
    idx = []
    for i in range(1, values.size - 1):
        if values[i] > floor and values[i] >= values[i - 1] and values[i] > values[i + 1]:
            idx.append(i)
    return np.asarray(idx, dtype=int)


def _refine_peak(centers: np.ndarray, values: np.ndarray, i: int) -> float:
    """Parabolic interpolation of a local maximum's elevation."""
    if i <= 0 or i >= values.size - 1:
        return float(centers[i])
    y0, y1, y2 = values[i - 1], values[i], values[i + 1]
    denom = y0 - 2.0 * y1 + y2
    if denom >= 0.0 or abs(denom) < 1e-300:
        return float(centers[i])
    shift = 0.5 * (y0 - y2) / denom
    step = centers[1] - centers[0]
    return float(centers[i] + np.clip(shift, -1.0, 1.0) * step)


def decompose(wf: Waveform, max_components: int = MAX_COMPONENTS) -> tuple[GaussianComponent, ...]:
    """Iterative Gaussian decomposition of a waveform.

    Components are seeded at pulse-smoothed local maxima, refined jointly
    with bounded least squares and pruned below 1% of total energy. The
    result is sorted from the lowest component upward.
    """
    centers, amp = wf.ascending()
    total = float(amp.sum())
    if total <= 0.0:
        return ()
    smoothed = _pulse_smoothed(wf)
    floor = max(wf.noise_threshold * 0.25, 1e-12 * float(smoothed.max()))
    peaks = _local_maxima(smoothed, floor)
    if peaks.size == 0:
        peaks = np.asarray([int(np.argmax(amp))])
    if peaks.size > max_components:
        peaks = peaks[np.argsort(smoothed[peaks])[::-1][:max_components]]
        peaks = np.sort(peaks)

    width0 = max(wf.bin_size, wf.pulse_sigma)
    k = peaks.size
    p0 = np.concatenate((
        np.maximum(smoothed[peaks] * width0 * math.sqrt(2 * math.pi) / wf.bin_size, 1e-9 * total),
        centers[peaks],
        np.full(k, width0),
    ))
    span = centers[-1] - centers[0]
    lower = np.concatenate((np.zeros(k), np.full(k, centers[0]), np.full(k, 0.25 * width0)))
    upper = np.concatenate((np.full(k, 2.0 * total), np.full(k, centers[-1]),
                            np.full(k, max(span, width0))))

    def model(params):
        e, mu, s = params[:k], params[k:2 * k], params[2 * k:]
        dens = e[None, :] * np.exp(-0.5 * ((centers[:, None] - mu[None, :]) / s[None, :]) ** 2) \
            / (s[None, :] * math.sqrt(2 * math.pi))
        return dens.sum(axis=1) * wf.bin_size

    result = least_squares(lambda p: model(p) - amp, np.clip(p0, lower, upper),
                           bounds=(lower, upper), max_nfev=300 * k)
    e, mu, s = result.x[:k], result.x[k:2 * k], result.x[2 * k:]
    keep = e >= MIN_COMPONENT_ENERGY_FRAC * total
    if keep.any() and not keep.all():
        e, mu, s = e[keep], mu[keep], s[keep]
    comps = tuple(GaussianComponent(float(ei), float(mi), float(si))
                  for ei, mi, si in sorted(zip(e, mu, s), key=lambda c: c[1]))
    return comps


def _inflection_elevations(centers: np.ndarray, smoothed: np.ndarray) -> np.ndarray:
    d2 = np.gradient(np.gradient(smoothed, centers), centers)
    signs = np.sign(d2)
    out = []
    for i in range(1, signs.size):
        if signs[i] != signs[i - 1] and signs[i] != 0 and signs[i - 1] != 0:
            # linear interpolation of the zero crossing of d2
            z0, z1 = centers[i - 1], centers[i]
            v0, v1 = d2[i - 1], d2[i]
            out.append(float(z0 - v0 * (z1 - z0) / (v1 - v0)))
    return np.asarray(out)


def find_ground(wf: Waveform) -> GroundFit:
    """Locate the ground return three ways: Gaussian fit, lowest maximum,
    and the midpoint of the lowest pair of inflection points.

    Raises NoGroundError when the waveform has no decomposable signal or
    when the simulation annotation says no ground return was ever there.
    """
    if wf.ground_energy is not None and float(wf.ground_energy.sum()) <= 0.0:
        raise NoGroundError(f"{wf.wave_id}: footprint contains no ground returns")
    comps = decompose(wf)
    if not comps:
        raise NoGroundError(f"{wf.wave_id}: no signal above the noise threshold")

    centers, _ = wf.ascending()
    smoothed = _pulse_smoothed(wf)
    floor = max(wf.noise_threshold * 0.25, 1e-12 * float(smoothed.max()))
    peaks = _local_maxima(smoothed, floor)
    if peaks.size == 0:
        peaks = np.asarray([int(np.argmax(smoothed))])
    max_ground = _refine_peak(centers, smoothed, int(peaks[0]))

    inflections = _inflection_elevations(centers, smoothed)
    if inflections.size >= 2:
        infl_ground = float((inflections[0] + inflections[1]) / 2.0)
    else:
        infl_ground = max_ground

    return GroundFit(
        gheight=comps[0].center,
        max_ground=max_ground,
        infl_ground=infl_ground,
        components=comps,
        centers=centers,
        smoothed=smoothed,
    )


def _signal_extent(wf: Waveform) -> tuple[float, float, int, int]:
    """(bottom, top, first index, last index) of the above-noise signal.

    Signal limits are the centers of the outermost above-threshold bins:
    the detected signal starts and ends somewhere inside those bins, and
    the center is the unbiased choice.
    """
    centers, amp = wf.ascending()
    above = np.nonzero(amp >= max(wf.noise_threshold, 1e-300))[0]
    if above.size == 0:
        raise DataError(f"{wf.wave_id}: no signal above the noise threshold")
    first, last = int(above[0]), int(above[-1])
    return float(centers[first]), float(centers[last]), first, last


def rh_metrics(wf: Waveform, ground: float,
               percents=None) -> np.ndarray:
    """Relative-height metrics: elevation of the p% cumulative-energy level
    above `ground`, for p = 0..100 by default.

    RH0 and RH100 are the signal bottom and top; interior levels come from
    linear interpolation of the cumulative profile, clamped into the signal
    extent so the array is nondecreasing by construction.
    """
    if percents is None:
        percents = np.arange(101)
    percents = np.asarray(percents, dtype=np.float64)
    centers, amp = wf.ascending()
    energy = np.where(amp >= wf.noise_threshold, amp, 0.0)
    total = float(energy.sum())
    if total <= 0.0:
        raise DataError(f"{wf.wave_id}: waveform has no energy")
    bottom, top, first, last = _signal_extent(wf)
    if ground > top:
        raise DataError(f"{wf.wave_id}: ground {ground:.2f} above signal top {top:.2f}")

    edges = wf.edges_ascending()
    cum = np.concatenate(([0.0], np.cumsum(energy)))
    out = np.empty(percents.size)
    for j, p in enumerate(percents):
        if p <= 0.0:
            out[j] = bottom
        elif p >= 100.0:
            out[j] = top
        else:
            target = p / 100.0 * total
            i = int(np.searchsorted(cum, target, side="left")) - 1
            i = max(0, min(i, energy.size - 1))
            while energy[i] <= 0.0:  # cumulative is flat here; step to the bin that crosses
                i += 1
            out[j] = min(max(edges[i] + (target - cum[i]) / energy[i] * wf.bin_size,
                             bottom), top)
    return out - ground


def _cover_from_ground_energy(iv: float, ig: float, rho_v: float, rho_g: float) -> float:
    iv = max(iv, 0.0)
    ig = max(ig, 0.0)
    denom = iv + ig * rho_v / rho_g
    if denom <= 0.0:
        return 0.0
    return min(max(iv / denom, 0.0), 1.0)


def _energy_below(wf: Waveform, elevation: float) -> float:
    centers, amp = wf.ascending()
    edges = wf.edges_ascending()
    energy = np.where(amp >= wf.noise_threshold, amp, 0.0)
    below = float(energy[edges[1:] <= elevation].sum())
    inside = (edges[:-1] < elevation) & (edges[1:] > elevation)
    if inside.any():
        i = int(np.nonzero(inside)[0][0])
        below += energy[i] * (elevation - edges[i]) / wf.bin_size
    return below


def cover_metrics(wf: Waveform, fit: GroundFit) -> dict[str, float]:
    """Canopy cover from the fitted ground component plus the half-energy
    variants computed at each of the three ground estimates.

    bayHalfCov is reported at the Gaussian ground: no Bayesian decomposition
    is run, so it mirrors gaussHalfCov by construction.
    """
    total = wf.total_energy
    ig = fit.ground_component.energy
    if ig > total * (1.0 + 1e-6):
        raise DegenerateFitError(
            f"{wf.wave_id}: fitted ground energy {ig:.3g} exceeds total {total:.3g}")
    cover = _cover_from_ground_energy(total - ig, ig, wf.rho_v, wf.rho_g)
    out = {"cover": cover}
    for name, elev in (("gaussHalfCov", fit.gheight), ("maxHalfCov", fit.max_ground),
                       ("infHalfCov", fit.infl_ground)):
        ig_half = 2.0 * _energy_below(wf, elev)
        out[name] = _cover_from_ground_energy(total - ig_half, ig_half, wf.rho_v, wf.rho_g)
    out["bayHalfCov"] = out["gaussHalfCov"]
    return out


def als_cover(cloud: PointCloud, cfg: FootprintConfig) -> float:
    """Cover from the discrete cloud: reflectance-weighted first-return split."""
    sel, w = footprint_weights(cloud, cfg)
    first = sel & (cloud.return_number == 1)
    ground = first & (cloud.classification == GROUND_CLASS)
    canopy = first & ~ground
    iv = float(w[canopy].sum())
    ig = float(w[ground].sum())
    return _cover_from_ground_energy(iv, ig, cfg.rho_v, cfg.rho_g)


def profile_metrics(wf: Waveform, fit: GroundFit, rh: np.ndarray,
                    layer: float = LAI_LAYER) -> tuple[dict[str, float], set[str]]:
    """Foliage height diversity, layered LAI profiles and the RH-power sums.

    The canopy profile is the waveform minus the fitted ground component.
    LAI uses the MacArthur-Horn transform of cumulative cover from the top,
    with extinction k = 1 and 1 m layers; gLAI heights reference the
    Gaussian ground, hgLAI the lowest-maximum ground. A cumulative cover
    that saturates at 1 is clamped to 1 - 1e-6 and the metric flagged.
    """
    centers, amp = wf.ascending()
    energy = np.where(amp >= wf.noise_threshold, amp, 0.0)
    canopy = np.maximum(energy - fit.ground_component.density(centers) * wf.bin_size, 0.0)
    undefined: set[str] = set()
    out: dict[str, float] = {}

    heights = centers - fit.gheight
    above = heights > 0.0
    canopy_above = np.where(above, canopy, 0.0)
    ev_total = float(canopy_above.sum())
    if ev_total > 0.0:
        layers = np.floor(heights[above] / layer).astype(int)
        layer_energy = np.bincount(layers, weights=canopy_above[above])
        p = layer_energy[layer_energy > 0.0] / ev_total
        out["FHD"] = float(-(p * np.log(p)).sum())
    else:
        out["FHD"] = math.nan
        undefined.add("FHD")

    ig = fit.ground_component.energy
    total_cover = _cover_from_ground_energy(ev_total, ig, wf.rho_v, wf.rho_g)

    def lai_bins(prefix: str, ground: float):
        h = centers - ground
        canopy_h = np.where(h > 0.0, canopy, 0.0)
        etot = float(canopy_h.sum())
        for lo, hi in LAI_BINS:
            name = f"{prefix}{int(lo)}t{int(hi)}"
            if etot <= 0.0:
                out[name] = 0.0
                continue
            def gap_log(z):
                above_z = float(canopy_h[h > z].sum())
                c = total_cover * above_z / etot
                if c >= 1.0 - 1e-6:
                    c = 1.0 - 1e-6
                    undefined.add(name + ".saturated")
                return -math.log(1.0 - c) / LAI_EXTINCTION
            out[name] = max(gap_log(lo) - gap_log(hi), 0.0)

    lai_bins("gLAI", fit.gheight)
    lai_bins("hgLAI", fit.max_ground)

    clamped = np.maximum(np.asarray(rh, dtype=np.float64), 0.0)
    out["niM2"] = float((clamped ** 2).sum())
    out["niM2.1"] = float((clamped ** 2.1).sum())
    return out, undefined


def ancillary_metrics(wf: Waveform, cloud: PointCloud, cfg: FootprintConfig,
                      fit: GroundFit) -> tuple[dict[str, float], set[str]]:
    """Signal extent, edge extents, Blair sensitivity, understory measures,
    truth annotations, ground slope and densities for one footprint."""
    centers, amp = wf.ascending()
    undefined: set[str] = set()
    out: dict[str, float] = {}

    bottom, top, first, last = _signal_extent(wf)
    out["signalTop"] = top
    out["signalBottom"] = bottom

    # edge extents: from the signal limits to the half-peak crossings
    peak = float(amp.max())
    ground_peak = float(np.interp(fit.max_ground, centers, amp))
    lead_idx = np.nonzero(amp >= 0.5 * peak)[0]
    out["leadingEdgeExt"] = top - float(centers[lead_idx[-1]]) \
        if lead_idx.size else math.nan
    trail_target = 0.5 * ground_peak if ground_peak > 0 else 0.5 * peak
    trail_idx = np.nonzero(amp >= trail_target)[0]
    out["trailingEdgeExt"] = float(centers[trail_idx[0]]) - bottom \
        if trail_idx.size else math.nan
    for name in ("leadingEdgeExt", "trailingEdgeExt"):
        if not math.isfinite(out[name]):
            undefined.add(name)

    total = wf.total_energy
    if wf.noise_std <= 0.0:
        out["blairSense"] = 1.0  # saturated: no noise means any cover is detectable
    else:
        sigma_g = cfg.sigma_pulse
        e_min = DETECTION_SIGMAS * wf.noise_std * sigma_g * math.sqrt(2 * math.pi) / wf.bin_size
        if e_min >= total:
            out["blairSense"] = 0.0
        else:
            num = wf.rho_g * (total - e_min)
            out["blairSense"] = num / (num + wf.rho_v * e_min)

    # understory measures need two separated modes
    floor = max(wf.noise_threshold * 0.25, 1e-12 * float(fit.smoothed.max()))
    peaks = _local_maxima(fit.smoothed, floor)
    if peaks.size >= 2 and len(fit.components) >= 2:
        ground_curve = fit.ground_component.density(centers) * wf.bin_size
        canopy_curve = np.zeros_like(ground_curve)
        for comp in fit.components[1:]:
            canopy_curve += comp.density(centers) * wf.bin_size
        overlap = float(np.minimum(ground_curve, canopy_curve).sum())
        out["groundOverlap"] = overlap / fit.ground_component.energy
        lo, hi = int(peaks[0]), int(peaks[1])
        valley = fit.smoothed[lo:hi + 1]
        out["groundMin"] = float(valley.min())
        d2 = np.gradient(np.gradient(fit.smoothed, centers), centers)
        out["groundInfl"] = float(d2[lo:hi + 1].max())
    else:
        for name in ("groundOverlap", "groundMin", "groundInfl"):
            out[name] = math.nan
            undefined.add(name)

    sel, w = footprint_weights(cloud, cfg)
    ground_sel = sel & (cloud.classification == GROUND_CLASS)
    if ground_sel.any():
        wg = w[ground_sel]
        out["trueGround"] = float(np.average(cloud.z[ground_sel], weights=wg))
    else:
        out["trueGround"] = math.nan
        undefined.add("trueGround")
    out["trueTop"] = float(cloud.z[sel].max())

    sigma_fit = fit.ground_component.width
    spread = math.sqrt(max(sigma_fit ** 2 - cfg.sigma_pulse ** 2, 0.0))
    out["groundSlope"] = math.degrees(math.atan(spread / cfg.sigma_f))

    radius = cfg.diameter / 2.0
    area = math.pi * radius ** 2
    dx = cloud.x - cfg.center[0]
    dy = cloud.y - cfg.center[1]
    in_disk = dx * dx + dy * dy <= radius ** 2
    out["pointDense"] = float(in_disk.sum()) / area
    out["beamDense"] = float((in_disk & (cloud.return_number == 1)).sum()) / area
    out["waveEnergy"] = total
    return out, undefined


def footprint_metrics(cloud: PointCloud, cfg: FootprintConfig,
                      wave_id: str = "wf") -> tuple[dict[str, float], set[str], Waveform]:
    """All waveform metrics for one footprint, as an ordered name->value map."""
    wf = simulate_footprint(cloud, cfg, wave_id=wave_id)
    fit = find_ground(wf)

    rh_levels = np.arange(101)
    rh_gauss = rh_metrics(wf, fit.gheight, rh_levels)
    rh_max = rh_metrics(wf, fit.max_ground, rh_levels)
    rh_infl = rh_metrics(wf, fit.infl_ground, rh_levels)
    rh_real = _rh_from_points(cloud, cfg, fit.gheight)

    out: dict[str, float] = {
        "gHeight": fit.gheight,
        "maxGround": fit.max_ground,
        "inflGround": fit.infl_ground,
    }
    undefined: set[str] = set()
    anc, undef_a = ancillary_metrics(wf, cloud, cfg, fit)
    cov = cover_metrics(wf, fit)
    prof, undef_p = profile_metrics(wf, fit, rh_gauss)
    out["signalTop"] = anc.pop("signalTop")
    out["signalBottom"] = anc.pop("signalBottom")
    out.update(cov)
    out["ALScover"] = als_cover(cloud, cfg)
    out.update(anc)
    out.update(prof)
    out["lon"] = cfg.center[0]
    out["lat"] = cfg.center[1]
    undefined |= undef_a | {n for n in undef_p if not n.endswith(".saturated")}

    for name, arr in (("rhGauss", rh_gauss), ("rhMax", rh_max),
                      ("rhInfl", rh_infl), ("rhReal", rh_real)):
        for p in range(0, 101, RH_STEP_EMITTED):
            out[f"{name}{p}"] = float(arr[p])
    return out, undefined, wf


def aggregate_footprints(per_footprint: list[tuple[dict[str, float], set[str]]]
                         ) -> tuple[dict[str, float], set[str]]:
    """Combine several footprints of one plot into a single metric row.

    Values are nan-aware means over footprints; a metric stays undefined
    only when no footprint could compute it.
    """
    if not per_footprint:
        raise DataError("no footprints to aggregate")
    if len(per_footprint) == 1:
        return per_footprint[0]
    names = list(per_footprint[0][0])
    out: dict[str, float] = {}
    undefined: set[str] = set()
    for name in names:
        column = np.asarray([values[name] for values, _ in per_footprint])
        finite = column[np.isfinite(column)]
        if finite.size:
            out[name] = float(finite.mean())
        else:
            out[name] = math.nan
            undefined.add(name)
    return out, undefined


def _rh_from_points(cloud: PointCloud, cfg: FootprintConfig, ground: float) -> np.ndarray:
    """RH profile straight from the discrete returns (weighted z quantiles)."""
    sel, w = footprint_weights(cloud, cfg)
    z = cloud.z[sel]
    w = w[sel]
    order = np.argsort(z)
    z, w = z[order], w[order]
    cum = np.cumsum(w)
    total = cum[-1]
    out = np.empty(101)
    out[0] = z[0]
    out[100] = z[-1]
    for p in range(1, 100):
        i = int(np.searchsorted(cum, p / 100.0 * total, side="left"))
        out[p] = z[min(i, z.size - 1)]
    return out - ground


def write_waveform(wf: Waveform, path) -> None:
    """Dump a waveform in the text format: header then elevation/amplitude rows."""
    with open(path, "w") as fh:
        fh.write(f"wave_id {wf.wave_id}\n")
        fh.write(f"center_x {wf.center[0]!r}\n")
        fh.write(f"center_y {wf.center[1]!r}\n")
        fh.write(f"bin_size {wf.bin_size!r}\n")
        fh.write(f"noise {wf.noise_std!r}\n")
        fh.write("elevation amplitude\n")
        for e, a in zip(wf.elevation, wf.amplitude):
            fh.write(f"{float(e)!r} {float(a)!r}\n")
