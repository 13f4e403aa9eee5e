"""Synthetic weather drivers and a first-order equilibrium-temperature stream model.

The stream model relaxes water temperature toward an equilibrium that is a
linear function of air temperature, shortwave radiation and cloud cover:

    T_eq(t)   = a0 + a1*T_air(t) + a2*SW(t) + a3*cloud(t)
    T_w(t+1)  = max(floor, T_w(t) + k*(T_eq(t) - T_w(t)))
"""
from __future__ import annotations

import datetime as dt
import math
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import FEATURE_UNITS, STREAM_SCHEMA, Dataset, Sample

REQUIRED_DRIVERS = ("air_temperature", "solar_radiation", "cloud_cover")


@dataclass(frozen=True)
class SimParams:
    k: float = 0.2
    a0: float = 2.0
    a1: float = 0.9
    a2: float = 0.01
    a3: float = -1.5
    initial_temp: float = 5.0
    floor: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.k <= 1.0):
            raise ValueError(f"relaxation rate k must lie in (0, 1], got {self.k}")
        if not all(math.isfinite(v) for v in asdict(self).values()):
            raise ValueError("simulator parameters must be finite")


@dataclass(frozen=True)
class WeatherGenParams:
    air_mean: float = 11.0
    air_amplitude: float = 12.0
    air_peak_doy: float = 200.0
    air_noise_sd: float = 2.5
    air_noise_ar: float = 0.7
    solar_mean: float = 180.0
    solar_amplitude: float = 110.0
    cloud_mean: float = 0.5
    cloud_persistence: float = 0.7
    cloud_noise_sd: float = 0.2
    rain_rate: float = 0.3
    rain_scale: float = 6.0
    groundwater_amplitude: float = 0.3
    groundwater_lag_days: float = 45.0
    subsurface_smoothing: float = 0.1
    site_offset_sd: float = 1.0
    start_date: str = "2006-10-31"
    seed: int = 0

    def __post_init__(self):
        for name in ("air_amplitude", "solar_amplitude", "air_noise_sd", "cloud_noise_sd",
                     "rain_scale", "groundwater_amplitude", "site_offset_sd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("rain_rate", "cloud_persistence", "air_noise_ar", "cloud_mean", "subsurface_smoothing"):
            if not (0.0 <= getattr(self, name) <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class ObsParams:
    """Sim-to-observation gap: global bias, per-site offsets, AR(1) Gaussian noise."""

    bias: float = 0.5
    noise_sd: float = 0.5
    site_bias_sd: float = 1.0
    noise_ar: float = 0.0
    seed: int = 0


def default_sites(n: int) -> List[str]:
    return [f"s{i + 1}" for i in range(n)]


def _seasonal(doy: np.ndarray, peak: float) -> np.ndarray:
    return np.cos(2.0 * np.pi * (doy - peak) / 365.0)


def generate_weather(sites: Sequence[str], days: int, params: WeatherGenParams = WeatherGenParams()) -> Dataset:
    """Daily driver series for each site, seeded per (seed, site index)."""
    if days < 1:
        raise ValueError("days must be >= 1")
    p = params
    start = dt.date.fromisoformat(p.start_date)
    dates = [start + dt.timedelta(days=d) for d in range(days)]
    doy = np.array([d.timetuple().tm_yday for d in dates], dtype=float)
    clear_sky = p.solar_mean + p.solar_amplitude * _seasonal(doy, 172.0)
    samples: List[Sample] = []
    for idx, site in enumerate(sites):
        rng = np.random.default_rng([p.seed, idx])
        offset = p.site_offset_sd * rng.standard_normal()
        innov = np.sqrt(1.0 - p.air_noise_ar ** 2) * p.air_noise_sd
        eps_air = rng.standard_normal(days)
        eps_cloud = rng.standard_normal(days)
        u_rain = rng.random(days)
        mag_rain = rng.exponential(1.0, days)

        noise = np.empty(days)
        cloud = np.empty(days)
        n_prev, c_prev = 0.0, p.cloud_mean
        for t in range(days):
            n_prev = p.air_noise_ar * n_prev + innov * eps_air[t]
            noise[t] = n_prev
            c_prev = p.cloud_mean + p.cloud_persistence * (c_prev - p.cloud_mean) + p.cloud_noise_sd * eps_cloud[t]
            c_prev = min(1.0, max(0.0, c_prev))
            cloud[t] = c_prev
        base = p.air_mean + offset
        air = base + p.air_amplitude * _seasonal(doy, p.air_peak_doy) + noise
        solar = clear_sky * (1.0 - 0.7 * cloud)
        rain_prob = np.clip(p.rain_rate * 2.0 * cloud, 0.0, 1.0)
        rain = np.where(u_rain < rain_prob, p.rain_scale * mag_rain, 0.0)
        ground = base + p.groundwater_amplitude * p.air_amplitude * _seasonal(doy, p.air_peak_doy + p.groundwater_lag_days)
        sub = np.empty(days)
        s_prev = base
        for t in range(days):
            s_prev = s_prev + p.subsurface_smoothing * (air[t] - s_prev)
            sub[t] = s_prev
        pet = np.maximum(0.0, 0.0135 * (air + 17.8) * solar * 0.0864 / 2.45)

        cols = {
            "rainfall": rain, "air_temperature": air, "solar_radiation": solar, "cloud_cover": cloud,
            "groundwater_temperature": ground, "subsurface_temperature": sub,
            "potential_evapotranspiration": pet,
        }
        cols = {k: np.round(v, 2) for k, v in cols.items()}
        for t, date in enumerate(dates):
            feats = {name: float(cols[name][t]) + 0.0 for name in STREAM_SCHEMA}
            samples.append(Sample(site, date, feats))
    return Dataset(samples, units=FEATURE_UNITS)


def equilibrium_temperature(sample: Sample, p: SimParams) -> float:
    f = sample.features
    for name in REQUIRED_DRIVERS:
        if name not in f:
            raise ValueError(f"missing required driver {name!r} at {sample.site_id} {sample.date}")
    return p.a0 + p.a1 * f["air_temperature"] + p.a2 * f["solar_radiation"] + p.a3 * f["cloud_cover"]


def relax(t_eq: Sequence[float], p: SimParams) -> np.ndarray:
    """Water temperature series; element t uses equilibria up to t-1."""
    out = np.empty(len(t_eq))
    tw = p.initial_temp
    for t, te in enumerate(t_eq):
        out[t] = tw
        tw = max(p.floor, tw + p.k * (te - tw))
    return out


def simulate_stream_temperature(drivers: Dataset, p: SimParams = SimParams()) -> Dataset:
    filled: Dict[tuple, float] = {}
    for site in drivers.sites:
        series = drivers.site_samples(site)
        tw = relax([equilibrium_temperature(s, p) for s in series], p)
        for s, v in zip(series, tw):
            filled[s.key] = float(v)
    return drivers.map(lambda s: replace(s, simulated_label=filled[s.key]))


def perturb_to_observations(simulated: Dataset, bias: float = 0.0, noise_sd: float = 0.0, seed: int = 0,
                            site_bias_sd: float = 0.0, noise_ar: float = 0.0, floor: float = 0.0) -> Dataset:
    """y = max(floor, sim + bias + site offset + noise), noise AR(1) with stationary sd ``noise_sd``."""
    if noise_sd < 0 or site_bias_sd < 0:
        raise ValueError("noise and site-bias standard deviations must be >= 0")
    if not (0.0 <= noise_ar < 1.0):
        raise ValueError("noise_ar must lie in [0, 1)")
    obs: Dict[tuple, float] = {}
    for idx, site in enumerate(simulated.sites):
        rng = np.random.default_rng([seed, idx, 1])
        offset = bias + site_bias_sd * rng.standard_normal()
        series = simulated.site_samples(site)
        eps = rng.standard_normal(len(series))
        n = noise_sd * eps[0] if series else 0.0
        innov = noise_sd * math.sqrt(1.0 - noise_ar ** 2)
        for t, s in enumerate(series):
            if s.simulated_label is None:
                raise ValueError(f"no simulated label at {s.site_id} {s.date}")
            if t:
                n = noise_ar * n + innov * eps[t]
            obs[s.key] = max(floor, s.simulated_label + offset + n)
    return simulated.map(lambda s: replace(s, observed_label=obs[s.key]))


def site_offsets(simulated: Dataset, bias: float, seed: int, site_bias_sd: float) -> Dict[str, float]:
    """The per-site offsets :func:`perturb_to_observations` applies for the same arguments."""
    out = {}
    for idx, site in enumerate(simulated.sites):
        rng = np.random.default_rng([seed, idx, 1])
        out[site] = bias + site_bias_sd * rng.standard_normal()
    return out


def build_benchmark(n_sites: int = 8, days: int = 2400, weather: WeatherGenParams = WeatherGenParams(),
                    sim: SimParams = SimParams(), obs: ObsParams = ObsParams(), sites: Optional[Sequence[str]] = None) -> Dataset:
    """Drivers with both simulated and observed labels."""
    sites = list(sites) if sites is not None else default_sites(n_sites)
    simulated = simulate_stream_temperature(generate_weather(sites, days, weather), sim)
    return perturb_to_observations(simulated, obs.bias, obs.noise_sd, obs.seed, obs.site_bias_sd, obs.noise_ar)
