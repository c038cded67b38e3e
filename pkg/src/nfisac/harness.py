"""Scenario files, result tables and the experiment drivers behind the CLI.

Scenario files are flat ``key = value`` text.  Every experiment writes CSV
files whose leading ``#`` lines carry a hash of the resolved configuration,
the seed and the package version, so identical inputs give identical bytes.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .array import (FresnelRegionWarning, PolarPoint, UlaConfig, random_combiner,
                    sensing_channel)
from .crb import crb, crb_hybrid, far_field_crb, fim, steering_derivatives
from .music import (CartesianGrid, PolarGrid, music, sample_covariance, simulate_echoes, spectrum,
                    subspace_split)
from .optimizer import (DesignError, DesignInfeasibleError, DesignResult, DesignScenario,
                        design_fully_digital, design_hybrid)

EXPERIMENTS = ("crb-vs-rate", "music-spectrum", "crb-vs-distance", "design", "music-mse")


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


# Desk scale keeps the 0.5 m aperture (and so the near-field region) but uses
# 17 elements; the power is raised by 65/17 to keep the array gain budget.
DESK_PRESET = {"n_antennas": 17, "p_max_dbm": round(20.0 + 10.0 * math.log10(65.0 / 17.0), 2)}
PAPER_PRESET = {"n_antennas": 65, "p_max_dbm": 20.0}


@dataclass(frozen=True)
class ScenarioConfig:
    """Flat scenario description, all quantities in config units (GHz, dBm, degrees).

    ``users`` is a tuple of ``(r_m, theta_deg)`` pairs; empty means "draw
    ``k_users`` locations from the seed".
    """

    n_antennas: int = 17
    freq_ghz: float = 28.0
    # the commonly quoted 1.07 cm for 28 GHz; None means c / f
    wavelength_m: Optional[float] = 0.0107
    aperture_m: float = 0.5
    k_users: int = 4
    target_r_m: float = 20.0
    target_theta_deg: float = 45.0
    p_max_dbm: float = DESK_PRESET["p_max_dbm"]
    noise_dbm: float = -60.0
    sensing_noise_dbm: Optional[float] = None
    n_rf: int = 5
    r_min_bits: tuple = (5.0,)
    trials: int = 1
    mode: str = "fd"
    snapshots: int = 1024
    users: tuple = ()
    pathloss_exponent_convention: str = "unsquared"
    sweep_r_min: tuple = (0.0, 1.0, 3.0, 5.0, 7.0, 9.0)
    sweep_r_m: tuple = ()
    grid_step_m: float = 0.08
    grid_extent_m: float = 40.0
    echo_snr_db: float = 20.0
    mse_halfwidth: float = 10.0
    mse_points: int = 201

    def __post_init__(self):
        if self.mode not in ("fd", "hb"):
            raise ValueError(f"mode must be 'fd' or 'hb', got {self.mode!r}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        for name in ("sweep_r_min", "sweep_r_m"):
            vals = getattr(self, name)
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValueError(f"{name} must be strictly increasing")
        if self.users and len(self.users) != self.k_users:
            raise ValueError("number of listed users differs from k_users")
        self.array  # validates geometry and wavelength
        if self.pathloss_exponent_convention not in ("unsquared", "free_space"):
            raise ValueError("pathloss_exponent_convention must be 'unsquared' or 'free_space'")
        if len(self.r_min_bits) not in (1, self.k_users):
            raise ValueError("r_min_bits needs one value or one per user")

    @property
    def array(self) -> UlaConfig:
        return UlaConfig.from_aperture(self.n_antennas, self.aperture_m, self.freq_ghz * 1e9,
                                       wavelength=self.wavelength_m)

    @property
    def target(self) -> PolarPoint:
        return PolarPoint.from_degrees(self.target_r_m, self.target_theta_deg)

    def per_user_r_min(self) -> tuple:
        if len(self.r_min_bits) == 1:
            return self.r_min_bits * self.k_users
        return self.r_min_bits

    def to_text(self) -> str:
        """Canonical ``key = value`` text; parsing it gives back an equal config."""
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if f.name == "users":
                v = ", ".join(f"{r!r}@{t!r}" for r, t in v)
            elif isinstance(v, tuple):
                v = ", ".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


_INT_KEYS = {"n_antennas", "k_users", "n_rf", "trials", "snapshots", "mse_points"}
_STR_KEYS = {"mode", "pathloss_exponent_convention"}
_LIST_KEYS = {"r_min_bits", "sweep_r_min", "sweep_r_m"}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _INT_KEYS:
        return int(raw)
    if key in _STR_KEYS:
        return raw.lower()
    if key in _LIST_KEYS:
        return tuple(float(x) for x in raw.replace(";", ",").split(",") if x.strip())
    if key == "users":
        out = []
        for item in raw.replace(";", ",").split(","):
            if item.strip():
                r, t = item.split("@")
                out.append((float(r), float(t)))
        return tuple(out)
    if key in ("sensing_noise_dbm", "wavelength_m") and raw.lower() in ("", "none"):
        return None
    return float(raw)


def parse_scenario(text: str, base: Optional[dict] = None) -> ScenarioConfig:
    """Parse flat ``key = value`` text on top of ``base`` defaults."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    # flat files have no section header
    parser.read_string("[scenario]\n" + text)
    known = {f.name for f in dataclasses.fields(ScenarioConfig)}
    values = dict(base or {})
    for key, raw in parser["scenario"].items():
        if key not in known:
            raise ValueError(f"unknown scenario key {key!r}")
        values[key] = _parse_value(key, raw)
    if "users" in values and values["users"] and "k_users" not in values:
        values["k_users"] = len(values["users"])
    return ScenarioConfig(**values)


def load_scenario(path: Optional[str] = None, paper_scale: bool = False) -> ScenarioConfig:
    """Preset defaults (desk or paper scale) overridden by the file, if any."""
    base = dict(PAPER_PRESET if paper_scale else DESK_PRESET)
    text = ""
    if path is not None:
        with open(path) as fh:
            text = fh.read()
    return parse_scenario(text, base)


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, key...)``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


_USERS, _COMBINER, _ECHO, _MSE = 0, 1, 2, 3


def draw_users(cfg: ScenarioConfig, seed: int) -> tuple:
    """``k_users`` locations, ``r`` uniform in ``[1.2 D, 2 D^2/lambda]`` and angle in [30, 150] deg."""
    arr = cfg.array
    rng = rng_stream(seed, _USERS)
    r = rng.uniform(arr.fresnel_bound, arr.rayleigh_distance, cfg.k_users)
    t = rng.uniform(30.0, 150.0, cfg.k_users)
    return tuple((float(a), float(b)) for a, b in zip(r, t))


def resolve(cfg: ScenarioConfig, seed: int) -> ScenarioConfig:
    """Fill in user locations so the config fully determines the experiment."""
    if cfg.users:
        return cfg
    return dataclasses.replace(cfg, users=draw_users(cfg, seed))


def build_scenario(cfg: ScenarioConfig, r_min=None, target: Optional[PolarPoint] = None,
                   target_gain: Optional[complex] = None) -> DesignScenario:
    """Design scenario in SI units from a resolved config."""
    if not cfg.users:
        raise ValueError("resolve the config (user locations) first")
    arr = cfg.array
    users = [PolarPoint.from_degrees(r, t) for r, t in cfg.users]
    noise = dbm_to_watts(cfg.noise_dbm)
    s_noise = noise if cfg.sensing_noise_dbm is None else dbm_to_watts(cfg.sensing_noise_dbm)
    return DesignScenario.create(
        arr, users, target or cfg.target, p_max=dbm_to_watts(cfg.p_max_dbm), noise=noise,
        r_min=cfg.per_user_r_min() if r_min is None else r_min, snapshots=cfg.snapshots,
        sensing_noise=s_noise, target_gain=target_gain,
        num_rf=cfg.n_rf if cfg.mode == "hb" else None, convention=cfg.pathloss_exponent_convention)


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    scenario: ScenarioConfig
    seed: int = 0
    out_dir: Optional[str] = None
    scale: str = "desk"
    workers: int = 1

    def __post_init__(self):
        if self.kind not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.kind!r}")
        if self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")

    def metadata(self) -> Dict[str, str]:
        text = f"experiment = {self.kind}\nseed = {self.seed}\n" + self.scenario.to_text()
        return {"experiment": self.kind, "seed": str(self.seed), "scale": self.scale,
                "config_hash": hashlib.sha256(text.encode()).hexdigest()[:16],
                "version": __version__}


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if v is None:
        return ""
    v = float(v)
    return "" if math.isnan(v) else repr(v)


@dataclass
class ResultTable:
    """Rows of values under a fixed column schema plus a metadata block."""

    columns: List[str]
    rows: List[list] = field(default_factory=list)
    metadata: Dict[str, str] = field(default_factory=dict)

    def add(self, **values) -> None:
        missing = set(self.columns) - set(values)
        extra = set(values) - set(self.columns)
        if missing or extra:
            raise ValueError(f"row schema mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
        self.rows.append([values[c] for c in self.columns])

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        out = []
        for row in self.rows:
            v = row[i]
            out.append(math.nan if v is None or v == "" else float(v) if not isinstance(v, str) else v)
        return np.array(out, dtype=object if any(isinstance(v, str) for v in out) else float)

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self, path_or_buf) -> None:
        if not self.metadata:
            raise ValueError("metadata block is required")
        buf = io.StringIO()
        for k in sorted(self.metadata):
            buf.write(f"# {k}: {self.metadata[k]}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(v) for v in row])
        if isinstance(path_or_buf, (str, os.PathLike)):
            with open(path_or_buf, "w", newline="") as fh:
                fh.write(buf.getvalue())
        else:
            path_or_buf.write(buf.getvalue())

    @classmethod
    def read_csv(cls, path) -> "ResultTable":
        meta, lines = {}, []
        with open(path, newline="") as fh:
            for line in fh:
                if line.startswith("#"):
                    k, _, v = line[1:].strip().partition(":")
                    meta[k.strip()] = v.strip()
                else:
                    lines.append(line)
        reader = csv.reader(lines)
        cols = next(reader)
        rows = []
        for r in reader:
            row = []
            for v in r:
                try:
                    row.append(float(v) if v != "" else math.nan)
                except ValueError:
                    row.append(v)
            rows.append(row)
        return cls(cols, rows, meta)


def _pool_map(fn: Callable, items: Sequence, workers: int) -> list:
    """Order-preserving map, optionally across processes."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _write(exp: ExperimentConfig, name: str, table: ResultTable) -> None:
    if exp.out_dir is None:
        return
    os.makedirs(exp.out_dir, exist_ok=True)
    table.to_csv(os.path.join(exp.out_dir, name))
    with open(os.path.join(exp.out_dir, "scenario.cfg"), "w") as fh:
        fh.write(exp.scenario.to_text())


def _resolved(exp: ExperimentConfig) -> ExperimentConfig:
    return dataclasses.replace(exp, scenario=resolve(exp.scenario, exp.seed))


def _design(s: DesignScenario, combiner=None) -> DesignResult:
    if s.hybrid:
        return design_hybrid(s, combiner=combiner)
    return design_fully_digital(s)


def _hb_trial(args):
    cfg, r_min, seed, trial = args
    s = build_scenario(dataclasses.replace(cfg, mode="hb"), r_min=r_min)
    W = random_combiner(s.num_rf, s.array.num_antennas, rng_stream(seed, _COMBINER, trial))
    try:
        res = design_hybrid(s, combiner=W)
    except DesignInfeasibleError:
        return "infeasible", None
    except DesignError:
        return "solver_failure", None
    return "ok", res.crb.matrix


def run_crb_vs_rate(exp: ExperimentConfig) -> ResultTable:
    """RCRB of the FD and HB designs over the ``sweep_r_min`` values.

    The HB columns average the CRB over ``trials`` combiner draws; trial
    ``t`` uses the same draw at every rate so the curve is comparable.
    """
    exp = _resolved(exp)
    cfg = exp.scenario
    cols = ["R_min", "rcrb_distance_fd", "rcrb_angle_fd", "rcrb_distance_hb", "rcrb_angle_hb",
            "status_fd", "status_hb", "hb_trials_ok"]
    table = ResultTable(cols, metadata=exp.metadata())
    fd_cfg = dataclasses.replace(cfg, mode="fd")
    for r_min in cfg.sweep_r_min:
        row = dict.fromkeys(cols, math.nan)
        row["R_min"] = r_min
        try:
            res = design_fully_digital(build_scenario(fd_cfg, r_min=r_min))
            row["rcrb_distance_fd"], row["rcrb_angle_fd"] = res.crb.root()
            row["status_fd"] = "ok"
        except DesignInfeasibleError:
            row["status_fd"] = "infeasible"
        except DesignError:
            row["status_fd"] = "solver_failure"
        outcomes = _pool_map(_hb_trial, [(cfg, r_min, exp.seed, t) for t in range(cfg.trials)],
                             exp.workers)
        mats = [m for st, m in outcomes if st == "ok"]
        row["hb_trials_ok"] = float(len(mats))
        if mats:
            mean = np.mean(mats, axis=0)
            row["rcrb_distance_hb"], row["rcrb_angle_hb"] = np.sqrt(np.diag(mean))
            row["status_hb"] = "ok"
        else:
            row["status_hb"] = outcomes[0][0]
        table.add(**row)
    _write(exp, "crb_vs_rate.csv", table)
    return table


def _combiner(s: DesignScenario, seed: int) -> Optional[np.ndarray]:
    if not s.hybrid:
        return None
    return random_combiner(s.num_rf, s.array.num_antennas, rng_stream(seed, _COMBINER, 0))


def ray_variation(spec_p: np.ndarray) -> float:
    """``(max - min) / max`` of the normalised spectrum ``1/p`` along a ray."""
    v = spec_p.min() / np.maximum(spec_p, np.finfo(float).tiny)
    return float((v.max() - v.min()) / v.max())


@dataclass
class MusicSpectrumRun:
    table: ResultTable
    near: object
    far: object


def _write_grid(path: str, values: np.ndarray, meta: Dict[str, str]) -> None:
    with open(path, "w") as fh:
        for k in sorted(meta):
            fh.write(f"# {k}: {meta[k]}\n")
        np.savetxt(fh, values, fmt="%.10e", delimiter=",")


def run_music_spectrum(exp: ExperimentConfig) -> MusicSpectrumRun:
    """Near- and far-field MUSIC spectra of one echo realisation.

    The waveform is the rate-constrained design for ``r_min_bits``.  Spectra
    are written as ``1/p`` normalised to a unit peak, rows indexed by ``x``
    and columns by ``y`` (see ``spectrum_axes.csv``).
    """
    exp = _resolved(exp)
    cfg = exp.scenario
    s = build_scenario(cfg)
    W = _combiner(s, exp.seed)
    res = _design(s, W)
    G = sensing_channel(s.array, s.target, s.target_gain).G
    batch = simulate_echoes(G, res.waveform, cfg.snapshots, s.sensing_noise,
                            rng_stream(exp.seed, _ECHO, 0), combiner=W)
    grid = CartesianGrid.uniform(cfg.grid_extent_m, cfg.grid_step_m)
    _, E_n = subspace_split(sample_covariance(batch), 1)
    near = spectrum(E_n, s.array, grid, "near", combiner=W)
    far = spectrum(E_n, s.array, grid, "far", combiner=W)
    ray = PolarGrid(np.arange(1, int(cfg.grid_extent_m / cfg.grid_step_m) + 1) * cfg.grid_step_m,
                    np.array([s.target.theta]))
    cols = ["dictionary", "r_hat_m", "theta_hat_deg", "x_hat_m", "y_hat_m", "ray_variation"]
    table = ResultTable(cols, metadata=exp.metadata())
    for name, sp in (("near", near), ("far", far)):
        r, th = sp.estimate
        var = ray_variation(spectrum(E_n, s.array, ray, name, combiner=W).p)
        table.add(dictionary=name, r_hat_m=r, theta_hat_deg=math.degrees(th),
                  x_hat_m=r * math.cos(th), y_hat_m=r * math.sin(th), ray_variation=var)
    if exp.out_dir is not None:
        _write(exp, "music_estimate.csv", table)
        meta = exp.metadata()
        _write_grid(os.path.join(exp.out_dir, "spectrum_near.csv"), near.normalized, meta)
        _write_grid(os.path.join(exp.out_dir, "spectrum_far.csv"), far.normalized, meta)
        axes = ResultTable(["index", "x_m", "y_m"], metadata=meta)
        for i, (x, y) in enumerate(zip(grid.x, grid.y)):
            axes.add(index=float(i), x_m=x, y_m=y)
        axes.to_csv(os.path.join(exp.out_dir, "spectrum_axes.csv"))
    return MusicSpectrumRun(table, near, far)


def distance_sweep(cfg: ScenarioConfig) -> np.ndarray:
    if cfg.sweep_r_m:
        return np.array(cfg.sweep_r_m)
    return np.linspace(2.0, 2.0 * cfg.array.rayleigh_distance, 10)


def run_crb_vs_distance(exp: ExperimentConfig) -> ResultTable:
    """RCRB versus target distance along the configured ray.

    The target gain is held at its value for the nominal target distance
    (no pathloss variation).  ``rcrb_angle_far`` is the planar-wave angle
    bound evaluated with the same transmit covariance.
    """
    exp = _resolved(exp)
    cfg = exp.scenario
    base = build_scenario(cfg)
    gain = base.target_gain
    W = _combiner(base, exp.seed)
    cols = ["r_s", "rcrb_distance", "rcrb_angle", "rcrb_angle_far", "status"]
    table = ResultTable(cols, metadata=exp.metadata())
    for r in distance_sweep(cfg):
        tgt = PolarPoint(float(r), base.target.theta)
        row = dict.fromkeys(cols, math.nan)
        row["r_s"] = float(r)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", FresnelRegionWarning)
                res = _design(base.with_target(tgt, gain), W)
        except DesignInfeasibleError:
            row["status"] = "infeasible"
            table.add(**row)
            continue
        except DesignError:
            row["status"] = "solver_failure"
            table.add(**row)
            continue
        row["rcrb_distance"], row["rcrb_angle"] = res.crb.root()
        noise = base.sensing_noise
        R = res.waveform.covariance
        row["rcrb_angle_far"] = math.sqrt(far_field_crb(base.array, tgt.theta, R, gain,
                                                        base.snapshots, noise, combiner=W))
        row["status"] = "ok"
        table.add(**row)
    _write(exp, "crb_vs_distance.csv", table)
    return table


def run_single_design(exp: ExperimentConfig):
    """One design with its diagnostics; raises on infeasibility."""
    exp = _resolved(exp)
    cfg = exp.scenario
    s = build_scenario(cfg)
    W = _combiner(s, exp.seed)
    res = _design(s, W)
    table = ResultTable(["item", "value", "limit"], metadata=exp.metadata())
    for k, (rate, req) in enumerate(zip(res.rates, s.r_min)):
        table.add(item=f"rate_user_{k + 1}", value=float(rate), limit=float(req))
    table.add(item="power", value=res.power, limit=s.p_max)
    rd, ra = res.crb.root()
    table.add(item="rcrb_distance", value=rd, limit=math.nan)
    table.add(item="rcrb_angle", value=ra, limit=math.nan)
    table.add(item="trace_crb", value=res.objective, limit=math.nan)
    table.add(item="relaxed_trace_crb", value=res.relaxed_objective, limit=math.nan)
    table.add(item="solver_iterations", value=float(res.solution.iterations), limit=math.nan)
    _write(exp, "design.csv", table)
    return res, table


def _mse_trial(args):
    cfg_arr, G, wf, T, noise, W, grid, seed, trial = args
    batch = simulate_echoes(G, wf, T, noise, rng_stream(seed, _MSE, trial), combiner=W)
    sp = music(batch, cfg_arr, grid, combiner=W)
    i, j = sp.estimate_index
    edge = i in (0, grid.shape[0] - 1) or j in (0, grid.shape[1] - 1)
    return sp.estimate, edge


def run_music_mse(exp: ExperimentConfig) -> ResultTable:
    """Monte Carlo MSE of MUSIC against the CRB at a fixed echo SNR.

    The target gain is scaled so that ``|beta|^2 a^T R_x a^* / sigma^2``
    equals ``echo_snr_db``.  MUSIC searches a local polar grid of
    ``+-mse_halfwidth`` RCRB around the truth with ``mse_points`` per axis.
    """
    exp = _resolved(exp)
    cfg = exp.scenario
    s = build_scenario(cfg)
    W = _combiner(s, exp.seed)
    res = _design(s, W)
    R = res.waveform.covariance
    deriv = steering_derivatives(s.array, s.target)
    a = deriv.a
    illum = float(np.real(a @ R @ a.conj()))
    snr = 10.0 ** (cfg.echo_snr_db / 10.0)
    g0 = s.target_gain
    gain = g0 / abs(g0) * math.sqrt(snr * s.sensing_noise / illum)
    if W is None:
        bound = crb(fim(deriv, R, gain, s.snapshots, s.sensing_noise))
    else:
        bound = crb_hybrid(deriv, R, W, gain, s.snapshots, s.sensing_noise)
    sr, st = bound.root()
    h = cfg.mse_halfwidth
    grid = PolarGrid(s.target.r + np.linspace(-h, h, cfg.mse_points) * sr,
                     s.target.theta + np.linspace(-h, h, cfg.mse_points) * st)
    G = sensing_channel(s.array, s.target, gain).G
    out = _pool_map(_mse_trial, [(s.array, G, res.waveform, s.snapshots, s.sensing_noise, W, grid,
                                  exp.seed, t) for t in range(cfg.trials)], exp.workers)
    est = np.array([e for e, _ in out])
    err_r = est[:, 0] - s.target.r
    err_t = est[:, 1] - s.target.theta
    cols = ["echo_snr_db", "trials", "mse_distance", "crb_distance", "mse_angle", "crb_angle",
            "bias_distance", "bias_angle", "edge_hits"]
    table = ResultTable(cols, metadata=exp.metadata())
    table.add(echo_snr_db=cfg.echo_snr_db, trials=float(cfg.trials),
              mse_distance=float(np.mean(err_r**2)), crb_distance=bound.distance,
              mse_angle=float(np.mean(err_t**2)), crb_angle=bound.angle,
              bias_distance=float(err_r.mean()), bias_angle=float(err_t.mean()),
              edge_hits=float(sum(e for _, e in out)))
    _write(exp, "music_mse.csv", table)
    return table

