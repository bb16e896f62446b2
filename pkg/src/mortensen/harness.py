"""Scenario configuration, synthetic data generation, and persistence.

A ScenarioConfig is a plain JSON-able description; compiling it yields a
Scenario holding the spectral grid, time grid, measurement operator and
lazily-cached nominal trajectory / Riccati solution that every driver
shares.  All randomness flows from named substreams of the configured seed,
so a fixed seed reproduces every artifact byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .discretization import (
    EnergyState,
    MeasurementOp,
    SpectralGrid,
    low_mode_measurement,
    velocity_probe_measurement,
)
from .dynamics import (
    ControlSignal,
    OutputSignal,
    TimeGrid,
    Trajectory,
    solve_forward,
)
from .errors import ValidationError
from .lqr_riccati import RiccatiSolution, riccati_margins, riccati_nominal
from .observer import GainMode
from .ocp import OcpData, SolverTolerances

SCHEMA_VERSION = 1


# -- configuration ---------------------------------------------------------------------


def _expect_mapping(value, path):
    if not isinstance(value, dict):
        raise ValidationError(f"{path}: expected an object")
    return value


def _take(mapping, path, key, default, kinds, required=False):
    if key not in mapping:
        if required:
            raise ValidationError(f"{path}.{key}: missing required field")
        return default
    val = mapping.pop(key)
    if kinds is bool:
        if not isinstance(val, bool):
            raise ValidationError(f"{path}.{key}: expected a boolean")
        return val
    if kinds is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ValidationError(f"{path}.{key}: expected a number")
        return float(val)
    if kinds is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ValidationError(f"{path}.{key}: expected an integer")
        return val
    if kinds is str:
        if not isinstance(val, str):
            raise ValidationError(f"{path}.{key}: expected a string")
        return val
    if kinds is list:
        if not isinstance(val, list):
            raise ValidationError(f"{path}.{key}: expected an array")
        return val
    if kinds is dict:
        if not isinstance(val, dict):
            raise ValidationError(f"{path}.{key}: expected an object")
        return val
    return val


def _reject_unknown(mapping, path):
    if mapping:
        key = sorted(mapping)[0]
        raise ValidationError(f"{path}.{key}: unknown field")


@dataclass(frozen=True)
class ScenarioConfig:
    """Complete description of one experiment; JSON round-trippable."""

    mode_count: int = 32
    domain_length: float = math.pi
    t_final: float = 1.0
    dt: float = 1e-3
    alpha: float = 1.0
    cubic_on: bool = True
    dealias_factor: float = 2.0
    initial_state: dict = field(
        default_factory=lambda: {"kind": "mode", "index": 1, "amplitude": 1.0}
    )
    measurement: dict = field(
        default_factory=lambda: {"kind": "low_modes", "count": 4}
    )
    disturbance: dict = field(
        default_factory=lambda: {
            "v": {"kind": "zero"},
            "eta": {"kind": "zero"},
            "mu": {"kind": "zero"},
        }
    )
    seed: int = 0
    trust_radius: float = 1.0
    tolerances: dict = field(default_factory=dict)
    gain: dict = field(default_factory=lambda: {"kind": "riccati_nominal"})
    argmin_samples: int = 4

    def validate(self) -> None:
        path = "config"
        if isinstance(self.mode_count, bool) or not isinstance(self.mode_count, int):
            raise ValidationError(f"{path}.mode_count: must be an integer")
        for name in ("domain_length", "t_final", "dt", "alpha", "dealias_factor",
                     "trust_radius"):
            val = getattr(self, name)
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ValidationError(f"{path}.{name}: must be a number")
        if not isinstance(self.cubic_on, bool):
            raise ValidationError(f"{path}.cubic_on: must be a boolean")
        if isinstance(self.argmin_samples, bool) or not isinstance(self.argmin_samples, int):
            raise ValidationError(f"{path}.argmin_samples: must be an integer")
        if self.mode_count < 1:
            raise ValidationError(f"{path}.mode_count: must be a positive integer")
        if self.domain_length <= 0:
            raise ValidationError(f"{path}.domain_length: must be positive")
        if self.t_final <= 0 or self.dt <= 0:
            raise ValidationError(f"{path}.t_final/dt: must be positive")
        steps = round(self.t_final / self.dt)
        if steps < 1 or abs(steps * self.dt - self.t_final) > 1e-9:
            raise ValidationError(f"{path}.dt: must divide t_final")
        if self.alpha <= 0:
            raise ValidationError(f"{path}.alpha: must be positive")
        if self.dealias_factor < 1.0:
            raise ValidationError(f"{path}.dealias_factor: must be >= 1")
        if self.cubic_on and self.dealias_factor < 1.5:
            raise ValidationError(
                f"{path}.dealias_factor: must be >= 3/2 with the cubic term enabled"
            )
        if self.trust_radius <= 0:
            raise ValidationError(f"{path}.trust_radius: must be positive")
        if self.argmin_samples < 1:
            raise ValidationError(f"{path}.argmin_samples: must be >= 1")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ValidationError(f"{path}.seed: must be an integer")
        self._validate_initial_state(f"{path}.initial_state")
        self._validate_measurement(f"{path}.measurement")
        self._validate_disturbance(f"{path}.disturbance")
        self._validate_gain(f"{path}.gain")
        self._validate_tolerances(f"{path}.tolerances")

    def _validate_initial_state(self, path):
        spec = dict(_expect_mapping(self.initial_state, path))
        kind = _take(spec, path, "kind", None, str, required=True)
        if kind == "zero":
            pass
        elif kind == "mode":
            idx = _take(spec, path, "index", 1, int)
            amp = _take(spec, path, "amplitude", 1.0, float)
            if not 1 <= idx <= self.mode_count:
                raise ValidationError(f"{path}.index: must be in [1, mode_count]")
            if not np.isfinite(amp):
                raise ValidationError(f"{path}.amplitude: must be finite")
        elif kind == "custom":
            disp = _take(spec, path, "displacement", None, list, required=True)
            vel = _take(spec, path, "velocity", None, list, required=True)
            if len(disp) != self.mode_count or len(vel) != self.mode_count:
                raise ValidationError(f"{path}: arrays must have length mode_count")
        else:
            raise ValidationError(f"{path}.kind: unknown initial state kind '{kind}'")
        _reject_unknown(spec, path)

    def _validate_measurement(self, path):
        spec = dict(_expect_mapping(self.measurement, path))
        kind = _take(spec, path, "kind", None, str, required=True)
        if kind == "low_modes":
            count = _take(spec, path, "count", None, int, required=True)
            if not 1 <= count <= self.mode_count:
                raise ValidationError(f"{path}.count: must be in [1, mode_count]")
        elif kind == "velocity_probe":
            points = _take(spec, path, "points", None, list, required=True)
            if not points:
                raise ValidationError(f"{path}.points: must be non-empty")
            for p in points:
                if not isinstance(p, (int, float)) or not 0 < p < self.domain_length:
                    raise ValidationError(
                        f"{path}.points: must lie strictly inside (0, domain_length)"
                    )
        elif kind == "custom":
            matrix = _take(spec, path, "matrix", None, list, required=True)
            rows = np.asarray(matrix, dtype=float)
            if rows.ndim != 2 or rows.shape[1] != 2 * self.mode_count:
                raise ValidationError(f"{path}.matrix: expected shape (m, 2*mode_count)")
        else:
            raise ValidationError(f"{path}.kind: unknown measurement kind '{kind}'")
        _reject_unknown(spec, path)

    def _validate_disturbance(self, path):
        spec = dict(_expect_mapping(self.disturbance, path))
        v_spec = dict(_expect_mapping(_take(spec, path, "v", {"kind": "zero"}, dict), f"{path}.v"))
        eta_spec = dict(_expect_mapping(_take(spec, path, "eta", {"kind": "zero"}, dict), f"{path}.eta"))
        mu_spec = dict(_expect_mapping(_take(spec, path, "mu", {"kind": "zero"}, dict), f"{path}.mu"))
        _reject_unknown(spec, path)
        kind = _take(v_spec, f"{path}.v", "kind", None, str, required=True)
        if kind == "smooth_random":
            amp = _take(v_spec, f"{path}.v", "amplitude", None, float, required=True)
            corr = _take(v_spec, f"{path}.v", "correlation_time", 0.1, float)
            modes = _take(v_spec, f"{path}.v", "spatial_modes", 4, int)
            if amp < 0:
                raise ValidationError(f"{path}.v.amplitude: must be >= 0")
            if corr <= 0:
                raise ValidationError(f"{path}.v.correlation_time: must be positive")
            if not 1 <= modes <= self.mode_count:
                raise ValidationError(f"{path}.v.spatial_modes: must be in [1, mode_count]")
        elif kind != "zero":
            raise ValidationError(f"{path}.v.kind: unknown disturbance kind '{kind}'")
        _reject_unknown(v_spec, f"{path}.v")
        kind = _take(eta_spec, f"{path}.eta", "kind", None, str, required=True)
        if kind == "random":
            amp = _take(eta_spec, f"{path}.eta", "amplitude", None, float, required=True)
            if amp < 0:
                raise ValidationError(f"{path}.eta.amplitude: must be >= 0")
        elif kind != "zero":
            raise ValidationError(f"{path}.eta.kind: unknown disturbance kind '{kind}'")
        _reject_unknown(eta_spec, f"{path}.eta")
        kind = _take(mu_spec, f"{path}.mu", "kind", None, str, required=True)
        if kind == "random":
            amp = _take(mu_spec, f"{path}.mu", "amplitude", None, float, required=True)
            corr = _take(mu_spec, f"{path}.mu", "correlation_time", 0.05, float)
            if amp < 0:
                raise ValidationError(f"{path}.mu.amplitude: must be >= 0")
            if corr <= 0:
                raise ValidationError(f"{path}.mu.correlation_time: must be positive")
        elif kind != "zero":
            raise ValidationError(f"{path}.mu.kind: unknown disturbance kind '{kind}'")
        _reject_unknown(mu_spec, f"{path}.mu")

    def _validate_gain(self, path):
        spec = dict(_expect_mapping(self.gain, path))
        kind = _take(spec, path, "kind", None, str, required=True)
        if kind == "full_hessian":
            refresh = _take(spec, path, "refresh_every", 1, int)
            if refresh < 1:
                raise ValidationError(f"{path}.refresh_every: must be >= 1")
        elif kind != "riccati_nominal":
            raise ValidationError(f"{path}.kind: unknown gain kind '{kind}'")
        _reject_unknown(spec, path)

    def _validate_tolerances(self, path):
        spec = dict(_expect_mapping(self.tolerances, path))
        defaults = dataclasses.asdict(SolverTolerances())
        for key, val in list(spec.items()):
            if key not in defaults:
                raise ValidationError(f"{path}.{key}: unknown field")
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ValidationError(f"{path}.{key}: expected a number")
            if isinstance(defaults[key], int) and not isinstance(val, int):
                raise ValidationError(f"{path}.{key}: expected an integer")
            if val <= 0:
                raise ValidationError(f"{path}.{key}: must be positive")

    @staticmethod
    def from_dict(raw: dict) -> "ScenarioConfig":
        data = dict(_expect_mapping(raw, "config"))
        kwargs = {}
        fields = {f.name for f in dataclasses.fields(ScenarioConfig)}
        for key in list(data):
            if key not in fields:
                raise ValidationError(f"config.{key}: unknown field")
            kwargs[key] = data.pop(key)
        cfg = ScenarioConfig(**kwargs)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def override(self, dotted: str, value) -> "ScenarioConfig":
        """Return a copy with one dotted-path field replaced."""
        parts = dotted.split(".")
        data = self.to_dict()
        node = data
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ValidationError(f"config.{dotted}: unknown override path")
            node = node[part]
        leaf = parts[-1]
        if not isinstance(node, dict) or leaf not in node:
            # allow introducing optional sub-keys (e.g. measurement.count)
            if not isinstance(node, dict):
                raise ValidationError(f"config.{dotted}: unknown override path")
        node[leaf] = value
        return ScenarioConfig.from_dict(data)


def parse_override(expr: str):
    """Parse key=value with JSON-typed values (bare words become strings)."""
    if "=" not in expr:
        raise ValidationError(f"override '{expr}': expected key=value")
    key, raw = expr.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


# -- compiled scenario -----------------------------------------------------------------


class Scenario:
    """Runtime form of a configuration with shared caches.

    The nominal trajectory, its half-step refinement, the Riccati solution
    and its margins are computed once and reused by every driver.
    """

    def __init__(self, config: ScenarioConfig):
        config.validate()
        self.config = config
        self.grid = SpectralGrid(
            config.mode_count, config.domain_length, config.dealias_factor
        )
        self.tgrid = TimeGrid(config.t_final, config.dt)
        self.meas = self._build_measurement()
        self.alpha = config.alpha
        self.cubic_on = config.cubic_on
        self.trust_radius = config.trust_radius
        self.tolerances = SolverTolerances(**config.tolerances)
        gain_spec = dict(config.gain)
        self.gain = GainMode(
            gain_spec.get("kind", "riccati_nominal"),
            gain_spec.get("refresh_every", 1),
        )
        self.seed = config.seed
        self._nominal = None
        self._fine_nominal = None
        self._riccati = None
        self._riccati_margins = None

    def _build_measurement(self) -> MeasurementOp:
        spec = self.config.measurement
        if spec["kind"] == "low_modes":
            return low_mode_measurement(self.grid, spec["count"])
        if spec["kind"] == "velocity_probe":
            return velocity_probe_measurement(self.grid, spec["points"])
        return MeasurementOp(np.asarray(spec["matrix"], dtype=float), self.grid)

    def initial_state(self) -> EnergyState:
        spec = self.config.initial_state
        n = self.grid.mode_count
        if spec["kind"] == "zero":
            return EnergyState.zero(n)
        if spec["kind"] == "mode":
            disp = np.zeros(n)
            # amplitude is the physical peak of the sine; convert to the
            # orthonormal-coefficient value
            disp[spec["index"] - 1] = spec["amplitude"] * math.sqrt(
                self.grid.domain_length / 2.0
            )
            return EnergyState(disp, np.zeros(n))
        return EnergyState(
            np.asarray(spec["displacement"], dtype=float),
            np.asarray(spec["velocity"], dtype=float),
        )

    def nominal(self) -> Trajectory:
        if self._nominal is None:
            self._nominal = solve_forward(
                self.initial_state(), None, self.tgrid, self.grid, self.cubic_on
            )
        return self._nominal

    def fine_nominal(self) -> Trajectory:
        if self._fine_nominal is None:
            self._fine_nominal = solve_forward(
                self.initial_state(),
                None,
                TimeGrid(self.tgrid.t_final, 0.5 * self.tgrid.dt),
                self.grid,
                self.cubic_on,
            )
        return self._fine_nominal

    def riccati(self) -> RiccatiSolution:
        if self._riccati is None:
            self._riccati = riccati_nominal(
                self.nominal(),
                self.grid,
                self.meas,
                self.alpha,
                self.cubic_on,
                fine_nominal=self.fine_nominal(),
            )
        return self._riccati

    def riccati_margins(self) -> np.ndarray:
        if self._riccati_margins is None:
            self._riccati_margins = riccati_margins(self.riccati(), self.grid)
        return self._riccati_margins

    def ocp_data(self, horizon_index: int, xi: EnergyState, y: OutputSignal) -> OcpData:
        return OcpData(
            self.grid,
            self.nominal(),
            self.meas,
            horizon_index,
            xi,
            y,
            self.alpha,
            self.cubic_on,
            self.trust_radius,
        )

    # -- synthetic disturbances --------------------------------------------------------

    _STREAMS = {"control": 1, "initial-error": 2, "measurement-noise": 3}

    def _rng(self, label: str) -> np.random.Generator:
        # fixed stream ids, not hash(), so artifacts are seed-reproducible
        return np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=(self._STREAMS[label],))
        )

    def synthesize_control(self) -> ControlSignal:
        spec = self.config.disturbance.get("v", {"kind": "zero"})
        n = self.grid.mode_count
        if spec["kind"] == "zero":
            return ControlSignal.zero(self.tgrid, n)
        rng = self._rng("control")
        modes = spec.get("spatial_modes", 4)
        corr = spec.get("correlation_time", 0.1)
        steps = self.tgrid.steps
        decay = math.exp(-self.tgrid.dt / corr)
        noise_scale = math.sqrt(1.0 - decay**2)
        env = np.empty((steps + 1, modes))
        env[0] = rng.standard_normal(modes)
        draws = rng.standard_normal((steps, modes))
        for k in range(steps):
            env[k + 1] = decay * env[k] + noise_scale * draws[k]
        values = np.zeros((steps + 1, n))
        values[:, :modes] = env
        sig = ControlSignal(self.tgrid, values)
        norm = sig.norm()
        if norm > 0:
            values *= spec["amplitude"] / norm
        return ControlSignal(self.tgrid, values)

    def synthesize_initial_error(self) -> EnergyState:
        spec = self.config.disturbance.get("eta", {"kind": "zero"})
        n = self.grid.mode_count
        if spec["kind"] == "zero":
            return EnergyState.zero(n)
        rng = self._rng("initial-error")
        k = np.arange(1, n + 1, dtype=float)
        disp = rng.standard_normal(n) / k**2
        vel = rng.standard_normal(n) / k**2
        state = EnergyState(disp, vel)
        from .discretization import energy_norm

        norm = energy_norm(state, self.grid)
        scale = spec["amplitude"] / norm if norm > 0 else 0.0
        return EnergyState(disp * scale, vel * scale)

    def synthesize_measurement_noise(self) -> OutputSignal:
        spec = self.config.disturbance.get("mu", {"kind": "zero"})
        m = self.meas.output_dim
        if spec["kind"] == "zero":
            return OutputSignal.zero(self.tgrid, m)
        rng = self._rng("measurement-noise")
        corr = spec.get("correlation_time", 0.05)
        steps = self.tgrid.steps
        decay = math.exp(-self.tgrid.dt / corr)
        noise_scale = math.sqrt(1.0 - decay**2)
        vals = np.empty((steps + 1, m))
        vals[0] = rng.standard_normal(m)
        draws = rng.standard_normal((steps, m))
        for k in range(steps):
            vals[k + 1] = decay * vals[k] + noise_scale * draws[k]
        sig = OutputSignal(self.tgrid, vals)
        norm = sig.norm()
        if norm > 0:
            vals *= spec["amplitude"] / norm
        return OutputSignal(self.tgrid, vals)


@dataclass
class SimulationResult:
    truth: Trajectory
    y_abs: OutputSignal
    y_rel: OutputSignal
    control: ControlSignal
    initial_error: EnergyState
    measurement_noise: OutputSignal


def simulate(scenario: Scenario) -> SimulationResult:
    """Generate the disturbed truth and its absolute/relative outputs."""
    v = scenario.synthesize_control()
    eta = scenario.synthesize_initial_error()
    mu = scenario.synthesize_measurement_noise()
    w0 = scenario.initial_state()
    start = EnergyState(
        w0.displacement + eta.displacement, w0.velocity + eta.velocity
    )
    truth = solve_forward(start, v, scenario.tgrid, scenario.grid, scenario.cubic_on)
    y_abs_vals = truth.states @ scenario.meas.matrix.T + mu.values
    nominal = scenario.nominal()
    y_rel_vals = y_abs_vals - nominal.states @ scenario.meas.matrix.T
    return SimulationResult(
        truth=truth,
        y_abs=OutputSignal(scenario.tgrid, y_abs_vals),
        y_rel=OutputSignal(scenario.tgrid, y_rel_vals),
        control=v,
        initial_error=eta,
        measurement_noise=mu,
    )


# -- persistence -----------------------------------------------------------------------


def _format_row(values) -> str:
    return ",".join(f"{x:.17g}" for x in values)


def write_trajectory_csv(path: str, traj: Trajectory) -> None:
    """CSV with header t,a_1..a_N,b_1..b_N; 17 significant digits, LF."""
    n = traj.mode_count
    header = "t," + ",".join(f"a_{k}" for k in range(1, n + 1)) + "," + ",".join(
        f"b_{k}" for k in range(1, n + 1)
    )
    with open(path, "w", newline="\n") as fh:
        fh.write(header + "\n")
        for t, row in zip(traj.grid.times, traj.states):
            fh.write(f"{t:.17g}," + _format_row(row) + "\n")


def read_trajectory_csv(path: str) -> Trajectory:
    with open(path, "r", newline="\n") as fh:
        header = fh.readline().strip().split(",")
        if header[0] != "t" or (len(header) - 1) % 2 != 0:
            raise ValidationError(f"{path}: malformed trajectory header")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    times = np.array([float(r[0]) for r in rows])
    states = np.array([[float(x) for x in r[1:]] for r in rows])
    if times.shape[0] < 2:
        raise ValidationError(f"{path}: need at least two rows")
    dt = times[1] - times[0]
    return Trajectory(TimeGrid(times[-1], dt), states)


def write_signal_csv(path: str, times: np.ndarray, values: np.ndarray, prefix: str) -> None:
    header = "t," + ",".join(f"{prefix}_{k}" for k in range(1, values.shape[1] + 1))
    with open(path, "w", newline="\n") as fh:
        fh.write(header + "\n")
        for t, row in zip(times, values):
            fh.write(f"{t:.17g}," + _format_row(row) + "\n")


@dataclass
class MetricsReport:
    """Schema-versioned run metrics, serializable to JSON."""

    command: str
    config: dict
    metrics: dict = field(default_factory=dict)
    wall_times: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> str:
        payload = {
            "schema_version": self.schema_version,
            "command": self.command,
            "config": self.config,
            "metrics": self.metrics,
            "wall_times": self.wall_times,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def write(self, path: str) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write(self.to_json() + "\n")


class StopWatch:
    """Accumulates named wall-clock durations."""

    def __init__(self):
        self.laps = {}

    def time(self, name: str):
        watch = self

        class _Ctx:
            def __enter__(self):
                self.start = time.perf_counter()
                return self

            def __exit__(self, *exc):
                watch.laps[name] = watch.laps.get(name, 0.0) + (
                    time.perf_counter() - self.start
                )
                return False

        return _Ctx()
