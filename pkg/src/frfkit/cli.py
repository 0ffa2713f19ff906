"""Scenario runner and command-line interface.

Reproduces the package's three benchmark studies end to end from a JSON
configuration: a transient-conditions study (spectral analysis with
rectangular and Hann windows against the local polynomial method), a
SISO closed-loop bias study (direct vs indirect estimation), and a MIMO
study contrasting the full multivariable plant with the per-loop
equivalent plant. Every run is fully seeded; identical configurations
produce byte-identical numerical outputs.

Exit codes: 0 success, 2 configuration/validation error, 3 defect
fraction above the configured threshold.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .closedloop import (
    ClosedLoopDataset,
    direct_bias_asymptote,
    direct_estimate,
    equivalent_plant,
    equivalent_plant_true,
    full_plant,
    indirect_estimate,
    interaction_term,
    run_mimo_experiments,
    true_sensitivity,
)
from .estimators import (
    FrfEstimate,
    LpmConfig,
    lpm_fit,
    power_spectra,
    spectral_analysis,
    write_frf_csv,
)
from .sim import (
    ControllerConfig,
    StateSpaceModel,
    UnstableLoopError,
    benchmark_plant,
    discretize_zoh,
    read_statespace_json,
    simulate_closed_loop,
    true_frf,
)
from .signals import (
    MultisineSpec,
    TimeSeries,
    WindowFunction,
    bin_frequencies,
    generate_multisine,
    spectrum_set,
)

TWO_PI = 2.0 * math.pi

SCENARIOS = ("transient_study", "closed_loop_siso_bias",
             "mimo_full_vs_equivalent", "custom")

_TRANSIENT_ESTIMATORS = ("sa_rect", "sa_hann", "lpm")
_BIAS_ESTIMATORS = ("direct_sa", "indirect_sa", "indirect_lpm")
_MIMO_ESTIMATORS = ("sa_rect", "lpm")


class ConfigError(ValueError):
    """Configuration rejected; the message carries the field path."""


@dataclass
class ScenarioConfig:
    """Fully materialized scenario parameters (defaults already applied)."""

    scenario: str
    plant_source: str              # "builtin" or a JSON file path
    fs_hz: float
    period_seconds: float
    excited_bins: object           # None (full grid), list of bins, or (min_hz, max_hz)
    rms: float
    n_periods_total: int
    n_periods_used: int
    noise_std: tuple
    estimators: tuple
    lpm_poly_order: int
    lpm_half_width: int            # None selects the smallest solvable width
    lpm_dof_margin: int
    phase_seed: int
    noise_seed: int
    band_hz: tuple
    excited_channel: int           # 1-based channel of the excitation
    controller_gain: float
    controller_zero: float
    controller_pole: float
    steady_state_start: bool
    max_defect_fraction: float
    output_dir: str

    @property
    def period_samples(self) -> int:
        return int(round(self.period_seconds * self.fs_hz))

    @property
    def ts(self) -> float:
        return 1.0 / self.fs_hz

    def echo(self) -> dict:
        """Everything that influences the results, for the report."""
        return {
            "scenario": self.scenario,
            "plant": self.plant_source,
            "fs_hz": self.fs_hz,
            "multisine": {
                "period_seconds": self.period_seconds,
                "period_samples": self.period_samples,
                "excited_bins": "full" if self.excited_bins is None else self.excited_bins,
                "rms": self.rms,
            },
            "n_periods_total": self.n_periods_total,
            "n_periods_used": self.n_periods_used,
            "noise_std": list(self.noise_std),
            "estimators": list(self.estimators),
            "lpm": {
                "poly_order": self.lpm_poly_order,
                "half_width": self.lpm_half_width,
                "dof_margin": self.lpm_dof_margin,
            },
            "seeds": {"phase": self.phase_seed, "noise": self.noise_seed},
            "band_hz": list(self.band_hz),
            "excited_channel": self.excited_channel,
            "controller": {
                "gain": self.controller_gain,
                "zero": self.controller_zero,
                "pole": self.controller_pole,
            },
            "steady_state_start": self.steady_state_start,
            "max_defect_fraction": self.max_defect_fraction,
            "package_version": __version__,
        }


_SCENARIO_DEFAULTS = {
    "transient_study": {
        "fs_hz": 1000.0, "period_seconds": 5.0, "n_periods_total": 2,
        "noise_std": 1e-4, "estimators": list(_TRANSIENT_ESTIMATORS),
        "steady_state_start": False,
    },
    "closed_loop_siso_bias": {
        "fs_hz": 1000.0, "period_seconds": 1.0, "n_periods_total": 220,
        "n_periods_used": 200, "noise_std": 0.05,
        "estimators": ["direct_sa", "indirect_sa"], "steady_state_start": False,
    },
    "mimo_full_vs_equivalent": {
        "fs_hz": 1000.0, "period_seconds": 2.0, "n_periods_total": 2,
        "noise_std": 0.0, "estimators": ["sa_rect"], "steady_state_start": True,
    },
    # "custom" applies no scenario defaults: geometry must be explicit
    "custom": {},
}

_CUSTOM_REQUIRED = ("fs_hz", "multisine", "n_periods_total", "noise_std", "estimators")

_TOP_KEYS = {"scenario", "plant", "fs_hz", "multisine", "n_periods_total",
             "n_periods_used", "noise_std", "estimators", "lpm", "seeds",
             "band_hz", "excited_channel", "controller", "steady_state_start",
             "max_defect_fraction", "output_dir"}
_MULTISINE_KEYS = {"period_seconds", "excited_bins", "rms"}
_LPM_KEYS = {"poly_order", "half_width", "dof_margin"}
_SEED_KEYS = {"phase", "noise"}
_PLANT_KEYS = {"source", "path"}
_CONTROLLER_KEYS = {"gain", "zero", "pole"}


def _reject_unknown(section: dict, allowed: set, path: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} at {path}")


def _as_number(value, path: str, minimum=None, strict_min=False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    value = float(value)
    if minimum is not None:
        if strict_min and not value > minimum:
            raise ConfigError(f"{path}: must be > {minimum}, got {value}")
        if not strict_min and not value >= minimum:
            raise ConfigError(f"{path}: must be >= {minimum}, got {value}")
    return value


def _as_int(value, path: str, minimum=None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}, got {value}")
    return value


def parse_config(path) -> ScenarioConfig:
    """Read, strictly validate and default-fill a scenario configuration.

    Unknown keys are rejected with their location; invariant violations
    name the offending fields. Seeds are always explicit: runs carry no
    hidden entropy.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError("$: config must be a JSON object")
    _reject_unknown(doc, _TOP_KEYS, "$")

    scenario = doc.get("scenario")
    if scenario not in SCENARIOS:
        raise ConfigError(f"$.scenario: expected one of {SCENARIOS}, got {scenario!r}")
    defaults = _SCENARIO_DEFAULTS[scenario]
    if scenario == "custom":
        missing = [k for k in _CUSTOM_REQUIRED if k not in doc]
        if missing:
            raise ConfigError(f"$.{missing[0]}: required for a custom scenario")

    if "seeds" not in doc:
        raise ConfigError("$.seeds: required (runs must be explicitly seeded)")
    seeds = doc["seeds"]
    if not isinstance(seeds, dict):
        raise ConfigError("$.seeds: expected an object")
    _reject_unknown(seeds, _SEED_KEYS, "$.seeds")
    if "phase" not in seeds:
        raise ConfigError("$.seeds.phase: required")
    phase_seed = _as_int(seeds["phase"], "$.seeds.phase")

    plant = doc.get("plant", {"source": "builtin"})
    if not isinstance(plant, dict):
        raise ConfigError("$.plant: expected an object")
    _reject_unknown(plant, _PLANT_KEYS, "$.plant")
    source = plant.get("source", "builtin")
    if source == "builtin":
        plant_source = "builtin"
    elif source == "json":
        if "path" not in plant:
            raise ConfigError("$.plant.path: required when source is 'json'")
        plant_source = str(plant["path"])
    else:
        raise ConfigError(f"$.plant.source: expected 'builtin' or 'json', got {source!r}")

    fs_hz = _as_number(doc.get("fs_hz", defaults.get("fs_hz")), "$.fs_hz",
                       minimum=0.0, strict_min=True)

    multisine = doc.get("multisine", {})
    if not isinstance(multisine, dict):
        raise ConfigError("$.multisine: expected an object")
    _reject_unknown(multisine, _MULTISINE_KEYS, "$.multisine")
    period_seconds = _as_number(
        multisine.get("period_seconds", defaults.get("period_seconds")),
        "$.multisine.period_seconds", minimum=0.0, strict_min=True)
    rms = _as_number(multisine.get("rms", 1.0), "$.multisine.rms",
                     minimum=0.0, strict_min=True)
    excited_raw = multisine.get("excited_bins", "full")
    if excited_raw == "full":
        excited_bins = None
    elif isinstance(excited_raw, list):
        excited_bins = [_as_int(v, "$.multisine.excited_bins[]", minimum=1)
                        for v in excited_raw]
        if not excited_bins:
            raise ConfigError("$.multisine.excited_bins: must not be empty")
    elif isinstance(excited_raw, dict):
        _reject_unknown(excited_raw, {"min_hz", "max_hz"}, "$.multisine.excited_bins")
        lo = _as_number(excited_raw.get("min_hz", 0.0), "$.multisine.excited_bins.min_hz",
                        minimum=0.0)
        hi = _as_number(excited_raw.get("max_hz", fs_hz / 2), "$.multisine.excited_bins.max_hz",
                        minimum=0.0, strict_min=True)
        if hi <= lo:
            raise ConfigError("$.multisine.excited_bins: max_hz must exceed min_hz")
        excited_bins = (lo, hi)
    else:
        raise ConfigError("$.multisine.excited_bins: expected 'full', a list or a band object")

    n_total = _as_int(doc.get("n_periods_total", defaults.get("n_periods_total")),
                      "$.n_periods_total", minimum=1)
    n_used = _as_int(doc.get("n_periods_used", defaults.get("n_periods_used", n_total)),
                     "$.n_periods_used", minimum=1)
    if n_used > n_total:
        raise ConfigError(
            f"$.n_periods_used: {n_used} exceeds n_periods_total = {n_total}")

    noise_raw = doc.get("noise_std", defaults.get("noise_std"))
    if isinstance(noise_raw, list):
        noise_std = tuple(_as_number(v, "$.noise_std[]", minimum=0.0) for v in noise_raw)
    else:
        noise_std = (_as_number(noise_raw, "$.noise_std", minimum=0.0),)
    if any(v > 0 for v in noise_std):
        if "noise" not in seeds:
            raise ConfigError("$.seeds.noise: required when noise_std > 0")
        noise_seed = _as_int(seeds["noise"], "$.seeds.noise")
    else:
        noise_seed = _as_int(seeds.get("noise", 0), "$.seeds.noise")

    estimators = doc.get("estimators", defaults.get("estimators"))
    if not isinstance(estimators, list) or not estimators:
        raise ConfigError("$.estimators: expected a non-empty list")
    allowed = {"transient_study": _TRANSIENT_ESTIMATORS, "custom": _TRANSIENT_ESTIMATORS,
               "closed_loop_siso_bias": _BIAS_ESTIMATORS,
               "mimo_full_vs_equivalent": _MIMO_ESTIMATORS}[scenario]
    for name in estimators:
        if name not in allowed:
            raise ConfigError(
                f"$.estimators: {name!r} not valid for {scenario} (use {allowed})")

    lpm = doc.get("lpm", {})
    if not isinstance(lpm, dict):
        raise ConfigError("$.lpm: expected an object")
    _reject_unknown(lpm, _LPM_KEYS, "$.lpm")
    lpm_poly_order = _as_int(lpm.get("poly_order", 2), "$.lpm.poly_order", minimum=0)
    lpm_half_width = lpm.get("half_width")
    if lpm_half_width is not None:
        lpm_half_width = _as_int(lpm_half_width, "$.lpm.half_width", minimum=1)
    lpm_dof_margin = lpm.get("dof_margin")
    if lpm_dof_margin is not None:
        lpm_dof_margin = _as_int(lpm_dof_margin, "$.lpm.dof_margin", minimum=1)

    band = doc.get("band_hz", [0.4, 0.8 * fs_hz / 2.0])
    if (not isinstance(band, list)) or len(band) != 2:
        raise ConfigError("$.band_hz: expected [low_hz, high_hz]")
    band_hz = (_as_number(band[0], "$.band_hz[0]", minimum=0.0),
               _as_number(band[1], "$.band_hz[1]", minimum=0.0, strict_min=True))
    if band_hz[1] <= band_hz[0]:
        raise ConfigError("$.band_hz: high edge must exceed low edge")

    excited_channel = _as_int(doc.get("excited_channel", 1), "$.excited_channel",
                              minimum=1)

    controller = doc.get("controller", {})
    if not isinstance(controller, dict):
        raise ConfigError("$.controller: expected an object")
    _reject_unknown(controller, _CONTROLLER_KEYS, "$.controller")
    gain = _as_number(controller.get("gain", 50.0), "$.controller.gain")
    zero = _as_number(controller.get("zero", 0.9), "$.controller.zero")
    pole = _as_number(controller.get("pole", 0.5), "$.controller.pole")

    steady = doc.get("steady_state_start", defaults.get("steady_state_start", False))
    if not isinstance(steady, bool):
        raise ConfigError("$.steady_state_start: expected true or false")

    max_defects = _as_number(doc.get("max_defect_fraction", 0.25),
                             "$.max_defect_fraction", minimum=0.0)

    output_dir = doc.get("output_dir", "out")
    if not isinstance(output_dir, str):
        raise ConfigError("$.output_dir: expected a string")

    return ScenarioConfig(
        scenario=scenario, plant_source=plant_source, fs_hz=fs_hz,
        period_seconds=period_seconds, excited_bins=excited_bins, rms=rms,
        n_periods_total=n_total, n_periods_used=n_used, noise_std=noise_std,
        estimators=tuple(estimators), lpm_poly_order=lpm_poly_order,
        lpm_half_width=lpm_half_width, lpm_dof_margin=lpm_dof_margin,
        phase_seed=phase_seed, noise_seed=noise_seed, band_hz=band_hz,
        excited_channel=excited_channel, controller_gain=gain,
        controller_zero=zero, controller_pole=pole, steady_state_start=steady,
        max_defect_fraction=max_defects, output_dir=output_dir,
    )


@dataclass
class ScenarioReport:
    """Everything a scenario run produced, ready for export."""

    scenario: str
    config_echo: dict
    estimates: dict                 # name -> FrfEstimate
    oracles: dict                   # name -> FrfEstimate
    curves: list                    # long-format rows (series, kind, hz, value)
    band_stats: dict                # estimate name -> summary statistics
    defect_log: list
    extra_stats: dict = field(default_factory=dict)
    runtime_seconds: float = 0.0

    def defect_fraction(self) -> float:
        total_bins = sum(e.n_bins for e in self.estimates.values())
        if total_bins == 0:
            return 0.0
        return len(self.defect_log) / total_bins


def _load_plant(cfg: ScenarioConfig) -> StateSpaceModel:
    if cfg.plant_source == "builtin":
        model = benchmark_plant()
    else:
        model = read_statespace_json(cfg.plant_source)
    if model.is_continuous:
        return discretize_zoh(model, cfg.ts)
    if abs(model.ts - cfg.ts) > 1e-12 * cfg.ts:
        raise ConfigError(
            f"$.fs_hz: plant is discrete at ts={model.ts}, config requests ts={cfg.ts}")
    return model


def _build_spec(cfg: ScenarioConfig) -> MultisineSpec:
    n = cfg.period_samples
    if cfg.excited_bins is None:
        bins = None
    elif isinstance(cfg.excited_bins, tuple):
        lo, hi = cfg.excited_bins
        df = cfg.fs_hz / n
        bins = [k for k in range(1, n // 2)
                if lo <= k * df <= hi]
        if not bins:
            raise ConfigError("$.multisine.excited_bins: band excites no bins")
    else:
        bins = cfg.excited_bins
    if bins is None:
        return MultisineSpec.flat(n, rms=cfg.rms, phase_seed=cfg.phase_seed,
                                  n_periods=cfg.n_periods_total)
    return MultisineSpec.flat(n, tuple(bins), rms=cfg.rms,
                              phase_seed=cfg.phase_seed,
                              n_periods=cfg.n_periods_total)


def _lpm_config(cfg: ScenarioConfig, n_inputs: int) -> LpmConfig:
    if cfg.lpm_half_width is None:
        auto = LpmConfig.auto(n_inputs, cfg.lpm_poly_order)
        margin = cfg.lpm_dof_margin if cfg.lpm_dof_margin is not None else auto.dof_margin
        return LpmConfig(cfg.lpm_poly_order, auto.half_width, margin)
    margin = cfg.lpm_dof_margin if cfg.lpm_dof_margin is not None else 1
    return LpmConfig(cfg.lpm_poly_order, cfg.lpm_half_width, margin)


def _mag_db(values: np.ndarray) -> np.ndarray:
    return 20.0 * np.log10(np.maximum(np.abs(values), 1e-300))


def _collect_curves(curves, series, freqs_hz, values, oracle_values=None):
    """Append long-format magnitude (and error) rows for one series."""
    mag = _mag_db(values)
    for f, v in zip(freqs_hz, mag):
        curves.append((series, "magnitude_db", float(f), float(v)))
    if oracle_values is not None:
        err = _mag_db(values - oracle_values)
        for f, v in zip(freqs_hz, err):
            curves.append((series, "error_db", float(f), float(v)))


def _band_stats(freqs_hz, values, oracle_values, band_hz) -> dict:
    sel = (freqs_hz >= band_hz[0]) & (freqs_hz <= band_hz[1]) & np.isfinite(values)
    if not np.any(sel):
        return {"n_bins": 0}
    err = np.abs(values[sel] - oracle_values[sel])
    return {
        "n_bins": int(sel.sum()),
        "max_error_db": float(_mag_db(np.array([np.max(err)]))[0]),
        "mean_error_db": float(_mag_db(np.array([np.mean(err)]))[0]),
        "max_error_abs": float(np.max(err)),
        "mean_error_abs": float(np.mean(err)),
    }


def _excited_record_bins(spec: MultisineSpec, n_periods: int) -> np.ndarray:
    return n_periods * np.asarray(spec.excited_bins)


def _defect_entries(name: str, est: FrfEstimate, freqs_hz) -> list:
    return [
        {"estimate": name, "bin": d.bin_index,
         "frequency_hz": float(freqs_hz[d.bin_index]) if d.bin_index < len(freqs_hz) else None,
         "reason": d.reason,
         "detail": None if d.detail is None else float(d.detail)}
        for d in est.defects
    ]


def _run_transient_study(cfg: ScenarioConfig) -> ScenarioReport:
    plant = _load_plant(cfg)
    if plant.n_inputs != plant.n_outputs:
        raise ConfigError("$.plant: transient study needs a square plant")
    if cfg.excited_channel > plant.n_inputs:
        raise ConfigError(f"$.excited_channel: plant has {plant.n_inputs} inputs")
    ctrl = ControllerConfig.lead(plant.n_inputs, cfg.ts, cfg.controller_gain,
                                 cfg.controller_zero, cfg.controller_pole)
    spec = _build_spec(cfg)
    j = cfg.excited_channel - 1
    mono = generate_multisine(spec, cfg.ts)
    data = np.zeros((plant.n_inputs, mono.n_samples))
    data[j] = mono.data[0]
    d = TimeSeries(data, cfg.ts)
    noise = np.resize(np.asarray(cfg.noise_std), plant.n_outputs)
    record = simulate_closed_loop(plant, ctrl, d, noise_std=noise,
                                  noise_seed=cfg.noise_seed)
    dataset = ClosedLoopDataset.from_record(record, j, ctrl)
    if cfg.n_periods_used < cfg.n_periods_total:
        dataset = dataset.tail_periods(cfg.period_samples, cfg.n_periods_used)
    stacked = TimeSeries(np.vstack([dataset.d.data[j:j + 1],
                                    dataset.u.data[j:j + 1]]), cfg.ts, ("d", "u"))

    period = cfg.period_samples
    estimates, oracles, curves, stats, defects = {}, {}, [], {}, []
    exc_period = np.asarray(spec.excited_bins)

    period_freqs = None
    for name in cfg.estimators:
        if name in ("sa_rect", "sa_hann"):
            window = WindowFunction.hann(period) if name == "sa_hann" else None
            spectra = spectrum_set(stacked, period, window=window)
            est = spectral_analysis(power_spectra(spectra, [0], [1]))
            exc = exc_period
            period_freqs = est.bin_frequencies
        else:  # lpm
            spectra = spectrum_set(stacked)
            est = lpm_fit(spectra, _lpm_config(cfg, 1), input_channels=[0],
                          output_channels=[1])
            exc = _excited_record_bins(spec, cfg.n_periods_used)
        oracle_vals = true_sensitivity(plant, ctrl, est.bin_frequencies)[:, j, j]
        freqs_hz = est.bin_frequencies / TWO_PI
        estimates[name] = est
        _collect_curves(curves, name, freqs_hz[exc], est.g[exc, 0, 0],
                        oracle_vals[exc])
        stats[name] = _band_stats(freqs_hz[exc], est.g[exc, 0, 0],
                                  oracle_vals[exc], cfg.band_hz)
        defects += _defect_entries(name, est, freqs_hz)

    oracle_freqs = period_freqs if period_freqs is not None \
        else estimates[cfg.estimators[0]].bin_frequencies
    s_oracle = true_sensitivity(plant, ctrl, oracle_freqs)[:, j, j]
    oracles["oracle"] = FrfEstimate(
        s_oracle[:, None, None], oracle_freqs,
        variance=np.zeros((len(oracle_freqs), 1, 1)),
        estimator_tag={"estimator": "sensitivity_oracle"})
    _collect_curves(curves, "oracle", oracle_freqs / TWO_PI, s_oracle)

    return ScenarioReport(cfg.scenario, cfg.echo(), estimates, oracles,
                          curves, stats, defects)


def _run_siso_bias(cfg: ScenarioConfig) -> ScenarioReport:
    plant = _load_plant(cfg)
    j = cfg.excited_channel - 1
    if j >= plant.n_inputs or j >= plant.n_outputs:
        raise ConfigError(f"$.excited_channel: plant has {plant.n_inputs} inputs")
    siso = StateSpaceModel(plant.a, plant.b[:, j:j + 1], plant.c[j:j + 1, :],
                           plant.d[j:j + 1, j:j + 1], ts=plant.ts)
    ctrl = ControllerConfig.lead(1, cfg.ts, cfg.controller_gain,
                                 cfg.controller_zero, cfg.controller_pole)
    spec = _build_spec(cfg)
    d = generate_multisine(spec, cfg.ts)
    sigma = float(np.asarray(cfg.noise_std).ravel()[0])
    record = simulate_closed_loop(siso, ctrl, d, noise_std=sigma,
                                  noise_seed=cfg.noise_seed)
    dataset = ClosedLoopDataset.from_record(record, 0, ctrl)
    if cfg.n_periods_used < cfg.n_periods_total:
        dataset = dataset.tail_periods(cfg.period_samples, cfg.n_periods_used)

    period = cfg.period_samples
    exc = np.asarray(spec.excited_bins)
    estimates, oracles, curves, stats, defects = {}, {}, [], {}, []
    extra = {}

    for name in cfg.estimators:
        if name == "direct_sa":
            est = direct_estimate(dataset, period)
        elif name == "indirect_sa":
            est = indirect_estimate(dataset, "sa", window_length=period)
        else:  # indirect_lpm
            est = indirect_estimate(dataset, "lpm",
                                    lpm_config=_lpm_config(cfg, 1))
        estimates[name] = est
        freqs = est.bin_frequencies
        g0 = true_frf(siso, freqs).g[:, 0, 0]
        sel = exc if name != "indirect_lpm" else \
            _excited_record_bins(spec, cfg.n_periods_used)
        freqs_hz = freqs / TWO_PI
        _collect_curves(curves, name, freqs_hz[sel], est.g[sel, 0, 0], g0[sel])
        stats[name] = _band_stats(freqs_hz[sel], est.g[sel, 0, 0], g0[sel],
                                  cfg.band_hz)
        defects += _defect_entries(name, est, freqs_hz)

    period_freqs = bin_frequencies(period, cfg.ts)
    g0 = true_frf(siso, period_freqs).g[:, 0, 0]
    oracles["oracle"] = true_frf(siso, period_freqs)
    _collect_curves(curves, "oracle", period_freqs / TWO_PI, g0)

    # analytic large-M limit of the direct estimate for this excitation
    d_spec = spectrum_set(TimeSeries(dataset.d.data, cfg.ts), period).data[0, 0]
    k_frf = ctrl.frf(period_freqs)[:, 0, 0]
    asymptote = direct_bias_asymptote(g0, k_frf, np.abs(d_spec) ** 2, sigma**2)
    oracles["bias_asymptote"] = FrfEstimate(
        asymptote[:, None, None], period_freqs,
        estimator_tag={"estimator": "direct_bias_asymptote", "noise_std": sigma})
    _collect_curves(curves, "bias_asymptote", period_freqs[exc] / TWO_PI,
                    asymptote[exc], g0[exc])
    if "direct_sa" in estimates:
        est = estimates["direct_sa"]
        dev = np.abs(est.g[exc, 0, 0] - asymptote[exc])
        if est.variance is not None:
            se = np.sqrt(est.variance[exc, 0, 0])
            ok = dev <= 3 * se
            extra["direct_within_3se_of_asymptote"] = float(np.mean(ok[np.isfinite(dev)]))
    return ScenarioReport(cfg.scenario, cfg.echo(), estimates, oracles,
                          curves, stats, defects, extra)


def _run_mimo_study(cfg: ScenarioConfig) -> ScenarioReport:
    plant = _load_plant(cfg)
    if plant.n_inputs != plant.n_outputs or plant.n_inputs < 2:
        raise ConfigError("$.plant: the MIMO study needs a square multivariable plant")
    ctrl = ControllerConfig.lead(plant.n_inputs, cfg.ts, cfg.controller_gain,
                                 cfg.controller_zero, cfg.controller_pole)
    spec = _build_spec(cfg)
    estimator = "lpm" if "lpm" in cfg.estimators else "sa"
    sigma = np.resize(np.asarray(cfg.noise_std), plant.n_outputs)
    noise_seeds = tuple(cfg.noise_seed + k for k in range(plant.n_inputs)) \
        if np.any(sigma > 0) else None
    frm = run_mimo_experiments(
        plant, ctrl, spec, noise_std=sigma,
        phase_seeds=tuple(cfg.phase_seed + k for k in range(plant.n_inputs)),
        noise_seeds=noise_seeds, estimator=estimator,
        lpm_config=_lpm_config(cfg, 1) if estimator == "lpm" else None,
        n_periods_used=cfg.n_periods_used,
        start_at_steady_state=cfg.steady_state_start)
    g_full = full_plant(frm)
    g_eq = equivalent_plant(frm)

    freqs = g_full.bin_frequencies
    freqs_hz = freqs / TWO_PI
    exc = _excited_record_bins(spec, cfg.n_periods_used) if estimator == "lpm" \
        else np.asarray(spec.excited_bins)
    g_true = true_frf(plant, freqs).g
    k_frf = ctrl.frf(freqs)
    eq_true = equivalent_plant_true(g_true, k_frf)

    estimates = {"gs": frm.gs, "s": frm.s, "g_full": g_full, "g_equiv": g_eq}
    oracles = {"oracle": true_frf(plant, freqs)}
    curves, stats, defects = [], {}, []
    n = plant.n_inputs
    for i in range(n):
        for jj in range(n):
            label = f"{i + 1}{jj + 1}"
            _collect_curves(curves, f"g_full_{label}", freqs_hz[exc],
                            g_full.g[exc, i, jj], g_true[exc, i, jj])
            _collect_curves(curves, f"g_equiv_{label}", freqs_hz[exc],
                            g_eq.g[exc, i, jj], eq_true[exc, i, jj])
            _collect_curves(curves, f"oracle_{label}", freqs_hz[exc],
                            g_true[exc, i, jj])
    stats["g_full"] = _band_stats(freqs_hz[exc], g_full.g[exc, 0, 0],
                                  g_true[exc, 0, 0], cfg.band_hz)
    stats["g_equiv"] = _band_stats(freqs_hz[exc], g_eq.g[exc, 0, 0],
                                   eq_true[exc, 0, 0], cfg.band_hz)
    for name, est in estimates.items():
        defects += _defect_entries(name, est, freqs_hz)

    extra = {}
    if n == 2:
        gap = g_full.g[exc, 0, 0] - g_eq.g[exc, 0, 0]
        inter = interaction_term(g_true, k_frf, loop=0)[exc]
        _collect_curves(curves, "interaction_11", freqs_hz[exc], inter)
        finite = np.isfinite(gap)
        extra["max_gap_vs_interaction_dev"] = float(
            np.max(np.abs(gap[finite] - inter[finite])))
        extra["max_interaction_magnitude"] = float(np.max(np.abs(inter)))
    return ScenarioReport(cfg.scenario, cfg.echo(), estimates, oracles,
                          curves, stats, defects, extra)


def run_scenario(cfg: ScenarioConfig) -> ScenarioReport:
    """Execute a validated scenario configuration. Deterministic given
    the config (all randomness flows from the recorded seeds)."""
    started = time.perf_counter()
    if cfg.scenario in ("transient_study", "custom"):
        report = _run_transient_study(cfg)
    elif cfg.scenario == "closed_loop_siso_bias":
        report = _run_siso_bias(cfg)
    elif cfg.scenario == "mimo_full_vs_equivalent":
        report = _run_mimo_study(cfg)
    else:  # unreachable once parse_config has run
        raise ConfigError(f"$.scenario: unsupported scenario {cfg.scenario!r}")
    report.runtime_seconds = time.perf_counter() - started
    return report


_ESTIMATE_FILES = {
    "sa_rect": "frf_sa_rect.csv",
    "sa_hann": "frf_sa_hann.csv",
    "lpm": "frf_lpm.csv",
    "direct_sa": "frf_direct_sa.csv",
    "indirect_sa": "frf_indirect_sa.csv",
    "indirect_lpm": "frf_indirect_lpm.csv",
    "gs": "gs.csv",
    "s": "s.csv",
    "g_full": "g_full.csv",
    "g_equiv": "g_equiv.csv",
}


def export_report(report: ScenarioReport, out_dir) -> list:
    """Write one CSV per estimate, the oracle curves, a long-format plot
    CSV and a deterministic summary.json; run metadata (timestamp,
    runtime) goes to a separate run_meta.json so the numerical outputs
    are byte-stable across reruns.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    for name, est in report.estimates.items():
        fname = _ESTIMATE_FILES.get(name, f"frf_{name}.csv")
        write_frf_csv(est, out / fname)
        written.append(fname)
    for name, est in report.oracles.items():
        fname = f"{name}.csv"
        write_frf_csv(est, out / fname)
        written.append(fname)

    with (out / "curves.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["series", "kind", "frequency_hz", "value_db"])
        for series, kind, f, v in report.curves:
            writer.writerow([series, kind, repr(f), repr(v)])
    written.append("curves.csv")

    summary = {
        "scenario": report.scenario,
        "config": report.config_echo,
        "band_statistics": report.band_stats,
        "extra_statistics": report.extra_stats,
        "defects": report.defect_log,
        "defect_fraction": report.defect_fraction(),
        "files": sorted(written),
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append("summary.json")

    meta = {
        "generated_at_utc": datetime.datetime.now(datetime.timezone.utc)
        .replace(microsecond=0).isoformat(),
        "runtime_seconds": report.runtime_seconds,
        "package_version": __version__,
    }
    (out / "run_meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append("run_meta.json")
    return [str(out / name) for name in written]


def _cmd_run(args) -> int:
    try:
        cfg = parse_config(args.config)
        if args.seed_override is not None:
            cfg.phase_seed = args.seed_override
            cfg.noise_seed = args.seed_override + 1
        if args.out is not None:
            cfg.output_dir = args.out
        report = run_scenario(cfg)
    except (ConfigError, UnstableLoopError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    files = export_report(report, cfg.output_dir)
    for path in files:
        print(path)
    fraction = report.defect_fraction()
    if fraction > cfg.max_defect_fraction:
        print(f"error: defect fraction {fraction:.3f} exceeds threshold "
              f"{cfg.max_defect_fraction:.3f}", file=sys.stderr)
        return 3
    return 0


def _cmd_oracle(args) -> int:
    try:
        model = read_statespace_json(args.model)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.bins < 2:
        print("error: --bins must be >= 2", file=sys.stderr)
        return 2
    if args.zoh and model.is_continuous:
        model = discretize_zoh(model, 1.0 / args.fs)
    if not model.is_continuous and abs(model.ts - 1.0 / args.fs) > 1e-9 / args.fs:
        print(f"error: model sampling rate {1.0 / model.ts} Hz does not match "
              f"--fs {args.fs}", file=sys.stderr)
        return 2
    freqs = math.pi * args.fs * np.arange(args.bins) / (args.bins - 1)
    est = true_frf(model, freqs)
    write_frf_csv(est, args.out)
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="frfkit",
        description="Frequency response identification scenario runner")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario configuration")
    run_p.add_argument("config", help="path to the JSON scenario config")
    run_p.add_argument("--out", default=None, help="output directory override")
    run_p.add_argument("--seed-override", type=int, default=None,
                       help="replace the configured seeds (phase=N, noise=N+1)")
    run_p.set_defaults(func=_cmd_run)

    oracle_p = sub.add_parser("oracle", help="emit the analytic FRF of a model")
    oracle_p.add_argument("model", help="state-space model JSON file")
    oracle_p.add_argument("--fs", type=float, required=True,
                          help="sampling rate in Hz setting the frequency grid")
    oracle_p.add_argument("--bins", type=int, required=True,
                          help="number of bins from 0 to the Nyquist rate")
    oracle_p.add_argument("--zoh", action="store_true",
                          help="discretize a continuous model first (exact ZOH)")
    oracle_p.add_argument("--out", default="true_frf.csv",
                          help="output CSV path (default true_frf.csv)")
    oracle_p.set_defaults(func=_cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
