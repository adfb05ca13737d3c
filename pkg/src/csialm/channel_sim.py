"""Sum-of-paths multipath channel generator for time-varying uplink/downlink CSI.

Each user realization draws a small set of propagation paths (gain, direction,
delay, phase, Doppler). The frequency response of a uniform linear array is the
sum of the paths' steering vectors, each rotated by its delay across subcarriers
and by its Doppler across time.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError

SPEED_OF_LIGHT = 299_792_458.0
MAGIC = b"CSIA"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHIIIIII4d")
SPLITS = ("train", "val", "test")
DEFAULT_VELOCITIES_KMH = tuple(float(v) for v in range(10, 101, 10))


@dataclass(frozen=True)
class ScenarioConfig:
    M: int = 8
    d_over_lambda: float = 0.5
    P: int = 12
    f_uplink: float = 2.4e9
    delta_f_fdd: float = 0.0
    F: int = 16
    subcarrier_spacing: float = 180e3
    T_history: int = 16
    sample_interval: float = 1e-3
    velocity: float = 0.0
    angle_spread: float = float(np.deg2rad(15.0))
    delay_spread: float = 300e-9
    duplex: str = "TDD"
    seed: int = 0
    tag: str = "uma"

    def __post_init__(self):
        for name in ("M", "P", "F", "T_history"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.duplex not in ("TDD", "FDD"):
            raise ConfigError(f"duplex must be TDD or FDD, got {self.duplex!r}")
        if self.duplex == "TDD" and self.delta_f_fdd != 0:
            raise ConfigError("TDD requires delta_f_fdd == 0")
        if self.f_uplink <= 0 or self.sample_interval <= 0:
            raise ConfigError("f_uplink and sample_interval must be positive")

    @property
    def f_downlink(self) -> float:
        return self.f_uplink + self.delta_f_fdd

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.f_uplink

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown scenario key(s): {', '.join(unknown)}")
        return cls(**data)


def umi_scenario(base: ScenarioConfig | None = None, **overrides) -> ScenarioConfig:
    """Second propagation environment for transfer tests: wider angles, shorter delays, more paths."""
    base = base or ScenarioConfig()
    params = dict(angle_spread=float(np.deg2rad(30.0)), delay_spread=100e-9, P=20, tag="umi")
    params.update(overrides)
    return dataclasses.replace(base, **params)


@dataclass(frozen=True)
class PathSet:
    alpha: np.ndarray
    theta: np.ndarray
    tau: np.ndarray
    phi: np.ndarray
    nu: np.ndarray

    def with_phases(self, phi: np.ndarray) -> "PathSet":
        return dataclasses.replace(self, phi=np.asarray(phi, dtype=float))


@dataclass
class CsiSequence:
    values: np.ndarray  # complex [pairs x F x T]
    carrier: float
    timestamps: np.ndarray
    tag: str = ""

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ContractError("CSI contains non-finite entries")


def array_response(theta: float, M: int, d_over_lambda: float = 0.5) -> np.ndarray:
    if abs(theta) > np.pi / 2 + 1e-12:
        raise ContractError(f"|theta| must be <= pi/2, got {theta}")
    m = np.arange(M)
    return np.exp(-2j * np.pi * m * d_over_lambda * np.sin(theta))


def _steering(theta: np.ndarray, M: int, d_over_lambda: float) -> np.ndarray:
    m = np.arange(M)[:, None]
    return np.exp(-2j * np.pi * m * d_over_lambda * np.sin(np.asarray(theta))[None, :])


def _wrap_half_pi(x: np.ndarray) -> np.ndarray:
    return np.mod(x + np.pi / 2, np.pi) - np.pi / 2


def draw_paths(cfg: ScenarioConfig, rng: np.random.Generator) -> PathSet:
    mean_doa = rng.uniform(-np.pi / 3, np.pi / 3)
    theta = _wrap_half_pi(mean_doa + cfg.angle_spread * rng.standard_normal(cfg.P))
    tau = rng.exponential(cfg.delay_spread, cfg.P) if cfg.delay_spread > 0 else np.zeros(cfg.P)
    decay = np.exp(-tau / cfg.delay_spread) if cfg.delay_spread > 0 else np.ones(cfg.P)
    power = decay * rng.exponential(1.0, cfg.P)
    alpha = np.sqrt(power / power.sum())
    phi = rng.uniform(-np.pi, np.pi, cfg.P)
    heading = rng.uniform(-np.pi, np.pi)
    nu = cfg.velocity / cfg.wavelength * np.sin(theta + heading)
    return PathSet(alpha=alpha, theta=theta, tau=tau, phi=phi, nu=nu)


def sample_csi(paths: PathSet, cfg: ScenarioConfig, t_index, carrier: float) -> np.ndarray:
    """H[m, k] at time ``t_index * sample_interval``; an array of indices adds a trailing time axis."""
    if carrier <= 0:
        raise ContractError("carrier must be positive")
    t = np.atleast_1d(np.asarray(t_index, dtype=float)) * cfg.sample_interval
    freqs = carrier + np.arange(cfg.F) * cfg.subcarrier_spacing
    steer = _steering(paths.theta, cfg.M, cfg.d_over_lambda) * paths.alpha[None, :]  # [M, P]
    phase = (
        paths.phi[:, None, None]
        + 2 * np.pi * paths.nu[:, None, None] * t[None, None, :]
        - 2 * np.pi * freqs[None, :, None] * paths.tau[:, None, None]
    )  # [P, F, T]
    h = np.einsum("mp,pft->mft", steer, np.exp(1j * phase))
    return h[..., 0] if np.ndim(t_index) == 0 else h


@dataclass
class SampleSet:
    history: np.ndarray  # complex64 [n, M, F, T] uplink
    target: np.ndarray  # complex64 [n, M, F] downlink at the next step
    velocity_kmh: np.ndarray  # float64 [n]

    def __len__(self) -> int:
        return len(self.velocity_kmh)

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        if idx.size == 0:
            idx = idx.astype(np.intp)
        return SampleSet(self.history[idx], self.target[idx], self.velocity_kmh[idx])


@dataclass
class DatasetSplit:
    config: ScenarioConfig
    train: SampleSet
    val: SampleSet
    test: SampleSet
    extra: dict = field(default_factory=dict)

    def split(self, name: str) -> SampleSet:
        return getattr(self, name)


def stratified_velocities(n: int, grid=DEFAULT_VELOCITIES_KMH) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    counts = [n // len(grid) + (i < n % len(grid)) for i in range(len(grid))]
    return np.repeat(grid, counts)


def generate_sample(cfg: ScenarioConfig, velocity_kmh: float, rng: np.random.Generator):
    vcfg = dataclasses.replace(cfg, velocity=velocity_kmh / 3.6)
    paths = draw_paths(vcfg, rng)
    hist = sample_csi(paths, vcfg, np.arange(cfg.T_history), cfg.f_uplink)
    if cfg.duplex == "TDD":
        target = sample_csi(paths, vcfg, cfg.T_history, cfg.f_uplink)
    else:
        dl = paths.with_phases(rng.uniform(-np.pi, np.pi, cfg.P))
        target = sample_csi(dl, vcfg, cfg.T_history, cfg.f_downlink)
    return hist, target


def make_samples(cfg: ScenarioConfig, n: int, split_id: int, grid=DEFAULT_VELOCITIES_KMH) -> SampleSet:
    if n < 1:
        raise ConfigError(f"sample count must be >= 1, got {n}")
    velocities = stratified_velocities(n, grid)
    hist = np.empty((n, cfg.M, cfg.F, cfg.T_history), dtype=np.complex64)
    target = np.empty((n, cfg.M, cfg.F), dtype=np.complex64)
    for i, v in enumerate(velocities):
        rng = np.random.default_rng([cfg.seed, split_id, i])
        hist[i], target[i] = generate_sample(cfg, v, rng)
    return SampleSet(hist, target, velocities)


def make_dataset(
    cfg: ScenarioConfig, n_train: int, n_val: int, n_test: int, grid=DEFAULT_VELOCITIES_KMH
) -> DatasetSplit:
    return DatasetSplit(
        config=cfg,
        train=make_samples(cfg, n_train, 0, grid),
        val=make_samples(cfg, n_val, 1, grid),
        test=make_samples(cfg, n_test, 2, grid),
    )


def add_noise(csi, snr_db: float, rng: np.random.Generator, sample_axis: int | None = None):
    """Circular complex Gaussian noise at the requested SNR.

    With ``sample_axis`` set, the signal power is measured per slice along that
    axis; otherwise over the whole array. ``snr_db=inf`` returns the input.
    Accepts a ``CsiSequence`` or a complex array.
    """
    if isinstance(csi, CsiSequence):
        noisy = add_noise(csi.values, snr_db, rng)
        return dataclasses.replace(csi, values=noisy)
    if np.isnan(snr_db):
        raise ContractError("snr_db must not be NaN")
    x = np.asarray(csi)
    if np.isposinf(snr_db):
        return x.copy()
    if sample_axis is None:
        power = np.mean(np.abs(x) ** 2)
    else:
        axes = tuple(i for i in range(x.ndim) if i != sample_axis % x.ndim)
        power = np.mean(np.abs(x) ** 2, axis=axes, keepdims=True)
    noise_power = power / 10 ** (snr_db / 10)
    noise = rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape)
    return (x + np.sqrt(noise_power / 2) * noise).astype(x.dtype)


# binary format -------------------------------------------------------------------


def _interleave(z: np.ndarray) -> bytes:
    out = np.empty(z.shape + (2,), dtype="<f4")
    out[..., 0] = z.real
    out[..., 1] = z.imag
    return out.tobytes()


def _deinterleave(buf: bytes, shape: tuple) -> np.ndarray:
    raw = np.frombuffer(buf, dtype="<f4").reshape(shape + (2,))
    z = np.empty(shape, dtype=np.complex64)
    z.real = raw[..., 0]
    z.imag = raw[..., 1]
    return z


def write_dataset(path, ds: DatasetSplit) -> tuple[Path, Path]:
    """Write ``path`` (binary) and ``path.json`` (scenario sidecar)."""
    path = Path(path)
    cfg = ds.config
    counts = [len(ds.split(s)) for s in SPLITS]
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, 0 if cfg.duplex == "TDD" else 1,
        cfg.M, cfg.F, cfg.T_history, *counts,
        cfg.f_uplink, cfg.f_downlink, cfg.sample_interval, cfg.subcarrier_spacing,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for name in SPLITS:
            s = ds.split(name)
            fh.write(np.asarray(s.velocity_kmh, dtype="<f8").tobytes())
            fh.write(_interleave(s.history))
            fh.write(_interleave(s.target))
    sidecar = path.with_name(path.name + ".json")
    meta = {
        "scenario": cfg.to_dict(),
        "f_uplink": cfg.f_uplink,
        "f_downlink": cfg.f_downlink,
        "counts": dict(zip(SPLITS, counts)),
        **ds.extra,
    }
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path, sidecar


def read_dataset(path) -> DatasetSplit:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise ContractError(f"{path}: not a CSIA dataset")
    (_, version, _duplex, M, F, T, *rest) = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported version {version}")
    counts = rest[:3]
    sidecar = path.with_name(path.name + ".json")
    meta = json.loads(sidecar.read_text())
    cfg = ScenarioConfig.from_dict(meta["scenario"])
    offset = _HEADER.size
    sets = {}
    for name, n in zip(SPLITS, counts):
        vel = np.frombuffer(data, dtype="<f8", count=n, offset=offset).astype(np.float64)
        offset += 8 * n
        size = n * M * F * T * 8
        hist = _deinterleave(data[offset:offset + size], (n, M, F, T))
        offset += size
        size = n * M * F * 8
        target = _deinterleave(data[offset:offset + size], (n, M, F))
        offset += size
        sets[name] = SampleSet(hist, target, vel)
    extra = {k: v for k, v in meta.items() if k not in ("scenario", "f_uplink", "f_downlink", "counts")}
    return DatasetSplit(config=cfg, extra=extra, **sets)
