"""
Sensor layouts, empirical inner products, noise models and measurement datasets.

Measurements follow m_i = (S f*)(x_i) + e_i with iid noise e_i. sigma is the standard
deviation of the noise. Random draws come from numpy's PCG64 generator seeded through a
``SeedSequence``; replication r of a study uses the substream with spawn key (r,), so every
draw is reproducible from (seed, replication) regardless of thread scheduling.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import msgspec
import numpy as np
from scipy.spatial import cKDTree

from backend.app.models.fem_grid import FieldVector, ProblemCoefficients
from backend.app.models.parabolic_forward import ForwardConfig, SpectralMode, sample_forward, spectral_oracle
from backend.app.utils.errors import ArgumentError, ParseError, ReportIOError

logger = logging.getLogger(__name__)

DEFAULT_B_CONFIG = 4.0


@dataclass(frozen=True, eq=False)
class SensorSet:
    """
    Pairwise distinct sensor locations in the closed unit square.

    d_max is the fill distance (largest distance from a point of the square to its nearest
    sensor, estimated on a probe grid that includes the corners), d_min the smallest
    pairwise distance and b_bound = d_max / d_min.
    """

    points: np.ndarray
    d_max: float
    d_min: float
    b_bound: float

    @property
    def n(self) -> int:
        return self.points.shape[0]


def make_sensor_set(
    points,
    b_config: Optional[float] = DEFAULT_B_CONFIG,
    probe_resolution: int = 256,
) -> SensorSet:
    """
    Validate sensor locations and compute their quasi-uniformity constants.

    Args:
        points: Array-like of shape (n, 2)
        b_config (float | None): Upper bound for d_max / d_min, None disables the check
        probe_resolution (int): Probe grid cells per side used to estimate d_max

    Raises:
        ArgumentError: empty or duplicated sensors, points outside the square, or a
            quasi-uniformity ratio above ``b_config``
    """
    points = np.array(points, dtype=np.float64)
    if points.size == 0:
        raise ArgumentError("sensor list is empty")
    if points.ndim != 2 or points.shape[1] != 2:
        raise ArgumentError(f"sensor points must have shape (n, 2), got {points.shape}")
    if np.any((points < 0.0) | (points > 1.0)) or not np.all(np.isfinite(points)):
        raise ArgumentError("sensor points must lie in the closed unit square")

    tree = cKDTree(points)
    if points.shape[0] > 1:
        distances, _ = tree.query(points, k=2)
        d_min = float(distances[:, 1].min())
        if d_min == 0.0:
            raise ArgumentError("sensor points must be pairwise distinct")
    else:
        d_min = math.inf

    probe = np.linspace(0.0, 1.0, probe_resolution + 1)
    px, py = np.meshgrid(probe, probe)
    fill, _ = tree.query(np.column_stack([px.ravel(), py.ravel()]))
    d_max = float(fill.max())
    b_bound = d_max / d_min
    if b_config is not None and b_bound > b_config:
        raise ArgumentError(f"sensors are not quasi-uniform: d_max/d_min = {b_bound:.3f} exceeds {b_config}")
    points.setflags(write=False)
    return SensorSet(points=points, d_max=d_max, d_min=d_min, b_bound=b_bound)


def make_uniform_sensors(k: int, b_config: Optional[float] = DEFAULT_B_CONFIG) -> SensorSet:
    """
    k x k sensors at the cell centres ((i + 1/2)/k, (j + 1/2)/k), ordered row-major by y.

    Raises:
        ArgumentError: k < 2
    """
    if k < 2:
        raise ArgumentError(f"need at least 2 sensors per side, got {k}")
    centres = (np.arange(k) + 0.5) / k
    xs, ys = np.meshgrid(centres, centres)
    return make_sensor_set(np.column_stack([xs.ravel(), ys.ravel()]), b_config=b_config)


def make_jittered_sensors(k: int, jitter: float, seed: int, b_config: Optional[float] = DEFAULT_B_CONFIG) -> SensorSet:
    """
    Scattered sensors: cell centres moved uniformly by up to ``jitter`` cell widths.

    ``jitter`` must lie in [0, 0.5) so each sensor stays inside its own cell.
    """
    if not 0.0 <= jitter < 0.5:
        raise ArgumentError(f"jitter must lie in [0, 0.5), got {jitter}")
    if k < 2:
        raise ArgumentError(f"need at least 2 sensors per side, got {k}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    centres = (np.arange(k) + 0.5) / k
    xs, ys = np.meshgrid(centres, centres)
    offsets = rng.uniform(-jitter, jitter, size=(k * k, 2)) / k
    return make_sensor_set(np.column_stack([xs.ravel(), ys.ravel()]) + offsets, b_config=b_config)


def empirical_inner(u, v) -> float:
    """(u, v)_n = (1/n) sum_i u_i v_i."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or u.shape != v.shape or u.shape[0] == 0:
        raise ArgumentError(f"empirical inner product needs equal non-empty vectors, got {u.shape} and {v.shape}")
    return float(u @ v) / u.shape[0]


def empirical_norm(u) -> float:
    return math.sqrt(max(empirical_inner(u, u), 0.0))


class NoiseKind(str, Enum):
    GAUSSIAN = "gaussian"
    UNIFORM_BOUNDED = "uniform_bounded"


@dataclass(frozen=True)
class NoiseModel:
    """
    iid measurement noise with standard deviation ``sigma``.

    gaussian: N(0, sigma^2). uniform_bounded: U[-sigma sqrt(3), sigma sqrt(3)].
    """

    kind: NoiseKind = NoiseKind.GAUSSIAN
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if not self.sigma >= 0:
            raise ArgumentError(f"noise sigma must be nonnegative, got {self.sigma}")
        if not 0 <= self.seed < 2**64:
            raise ArgumentError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    def generator(self, replication: Optional[int] = None) -> np.random.Generator:
        if replication is None:
            sequence = np.random.SeedSequence(self.seed)
        else:
            sequence = np.random.SeedSequence(self.seed, spawn_key=(int(replication),))
        return np.random.Generator(np.random.PCG64(sequence))

    def draw(self, n: int, replication: Optional[int] = None) -> np.ndarray:
        if self.sigma == 0.0:
            return np.zeros(n)
        rng = self.generator(replication)
        if self.kind is NoiseKind.GAUSSIAN:
            return rng.normal(0.0, self.sigma, size=n)
        bound = self.sigma * math.sqrt(3.0)
        return rng.uniform(-bound, bound, size=n)


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """Sensor data m, optional noise-free truth (S f*)(x_i) and the noise descriptor."""

    sensors: SensorSet
    values: np.ndarray
    noise: NoiseModel
    truth_values: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (self.sensors.n,):
            raise ArgumentError(f"measurement vector has shape {values.shape}, expected ({self.sensors.n},)")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.truth_values is not None:
            truth = np.array(self.truth_values, dtype=np.float64)
            if truth.shape != values.shape:
                raise ArgumentError(f"truth vector has shape {truth.shape}, expected {values.shape}")
            truth.setflags(write=False)
            object.__setattr__(self, "truth_values", truth)

    @property
    def n(self) -> int:
        return self.sensors.n

    @property
    def noise_draws(self) -> Optional[np.ndarray]:
        return None if self.truth_values is None else self.values - self.truth_values


@dataclass(frozen=True, eq=False)
class FemTruth:
    """Noise-free data from the finite element forward solve (typically on a finer mesh)."""

    fwd: ForwardConfig
    source: FieldVector

    def sample(self, sensors: SensorSet) -> np.ndarray:
        return sample_forward(self.fwd, self.source, sensors)


@dataclass(frozen=True)
class SpectralTruth:
    """Noise-free data from the closed-form spectral solution."""

    coeff: ProblemCoefficients
    modes: Tuple[SpectralMode, ...]
    weights: Tuple[float, ...]

    def sample(self, sensors: SensorSet) -> np.ndarray:
        return spectral_oracle(self.coeff, self.modes, self.weights, sensors.points)


TruthSource = Union[FemTruth, SpectralTruth]


def add_noise(
    sensors: SensorSet,
    truth_values: np.ndarray,
    noise: NoiseModel,
    replication: Optional[int] = None,
) -> MeasurementSet:
    """Attach one noise realization (substream ``replication``) to precomputed truth."""
    truth_values = np.asarray(truth_values, dtype=np.float64)
    values = truth_values + noise.draw(sensors.n, replication)
    return MeasurementSet(sensors=sensors, values=values, noise=noise, truth_values=truth_values)


def generate_measurements(
    truth: TruthSource,
    sensors: SensorSet,
    noise: NoiseModel,
    replication: Optional[int] = None,
) -> MeasurementSet:
    """
    Synthesize m = (S f*)(x_i) + e_i.

    Args:
        truth (FemTruth | SpectralTruth): Provider of the noise-free samples
        sensors (SensorSet): Measurement locations
        noise (NoiseModel): Noise kind, level and master seed
        replication (int | None): Substream index for Monte Carlo replications

    Returns:
        MeasurementSet: data with the truth kept alongside
    """
    truth_values = truth.sample(sensors)
    logger.debug(f"Generated truth at {sensors.n} sensors, noise {noise.kind.value} sigma={noise.sigma}")
    return add_noise(sensors, truth_values, noise, replication)


class NoiseRecord(msgspec.Struct, forbid_unknown_fields=True):
    kind: Literal["gaussian", "uniform_bounded"]
    sigma: float
    seed: int


class MeasurementRecord(msgspec.Struct, forbid_unknown_fields=True):
    """On-disk JSON layout of a measurement file."""

    n: int
    sensor_points: List[Tuple[float, float]]
    values: List[float]
    noise: NoiseRecord
    truth: Optional[List[float]] = None


def save_measurements(data: MeasurementSet, path: Union[str, Path]) -> Path:
    """
    Write ``data`` as JSON. Floats use the shortest representation that round-trips
    to the same double, so values reload bitwise identical.

    Raises:
        ReportIOError: the file cannot be written
    """
    record = MeasurementRecord(
        n=data.n,
        sensor_points=[(float(x), float(y)) for x, y in data.sensors.points],
        values=data.values.tolist(),
        noise=NoiseRecord(kind=data.noise.kind.value, sigma=data.noise.sigma, seed=data.noise.seed),
        truth=None if data.truth_values is None else data.truth_values.tolist(),
    )
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(msgspec.json.encode(record))
    except OSError as exc:
        raise ReportIOError(f"cannot write measurements to {path}: {exc}") from exc
    logger.info(f"Saved {data.n} measurements to {path}")
    return path


def load_measurements(path: Union[str, Path]) -> MeasurementSet:
    """
    Read a measurement file written by :func:`save_measurements`.

    Raises:
        ReportIOError: the file cannot be read
        ParseError: malformed JSON, wrong field types, or row counts that disagree with n
        ArgumentError: an empty sensor list
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ReportIOError(f"cannot read measurements from {path}: {exc}") from exc
    try:
        record = msgspec.json.decode(raw, type=MeasurementRecord)
    except (msgspec.ValidationError, msgspec.DecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc

    for field, rows in (("sensor_points", record.sensor_points), ("values", record.values), ("truth", record.truth)):
        if rows is not None and len(rows) != record.n:
            raise ParseError(f"{path}: header n={record.n} but `$.{field}` has {len(rows)} rows")
    sensors = make_sensor_set(np.array(record.sensor_points, dtype=np.float64).reshape(-1, 2), b_config=None)
    noise = NoiseModel(kind=NoiseKind(record.noise.kind), sigma=record.noise.sigma, seed=record.noise.seed)
    return MeasurementSet(sensors=sensors, values=np.array(record.values), noise=noise, truth_values=record.truth)
