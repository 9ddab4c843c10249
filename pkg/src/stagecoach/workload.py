"""Synthetic weather-model-like workloads: gridded fields written per step."""

from __future__ import annotations

import threading
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import DType, Selection

WRF_3D_NAMES = ["T", "P", "QVAPOR", "U", "V", "W", "PH", "PHB"]
WRF_2D_NAMES = ["T2", "PSFC", "U10", "V10", "HGT", "RAINC", "SST", "TSK"]

GEN_SMOOTH = "smooth"
GEN_RANDOM = "random"
GEN_CONSTANT = "constant"

CONSTANT_VALUE = 287.15


@dataclass
class WorkloadSpec:
    nx: int = 64
    ny: int = 64
    nz: int = 16
    n_3d_fields: int = 2
    n_2d_fields: int = 2
    steps: int = 3
    compute_ms_per_step: float = 0.0
    px: int = 2
    py: int = 2
    nodes: int = 1
    ranks_per_node: int = 4
    generator: str = GEN_SMOOTH
    seed: int = 42
    include_time_scalar: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.generator not in (GEN_SMOOTH, GEN_RANDOM, GEN_CONSTANT):
            raise ConfigError(f"unknown generator {self.generator!r}")
        if self.px * self.py != self.world_size:
            raise ConfigError(
                f"decomposition {self.px}x{self.py} != world size "
                f"{self.nodes}x{self.ranks_per_node}"
            )
        if self.px > self.nx or self.py > self.ny:
            raise ConfigError("more patches than grid points")
        for f in ("nx", "ny", "nz", "steps", "nodes", "ranks_per_node"):
            if getattr(self, f) < 1 and f != "steps":
                raise ConfigError(f"{f} must be >= 1")

    @property
    def world_size(self) -> int:
        return self.nodes * self.ranks_per_node

    def field_defs(self) -> list[tuple[str, DType, tuple[int, ...]]]:
        defs = []
        for i in range(self.n_3d_fields):
            name = WRF_3D_NAMES[i] if i < len(WRF_3D_NAMES) else f"VAR3D_{i}"
            defs.append((name, DType.f32, (self.nz, self.ny, self.nx)))
        for i in range(self.n_2d_fields):
            name = WRF_2D_NAMES[i] if i < len(WRF_2D_NAMES) else f"VAR2D_{i}"
            defs.append((name, DType.f32, (self.ny, self.nx)))
        if self.include_time_scalar:
            defs.append(("XTIME", DType.f64, ()))
        return defs

    def bytes_raw_per_step(self) -> int:
        return sum(
            DType.f64.itemsize if shape == () else np.prod(shape, dtype=np.int64) * dt.itemsize
            for _, dt, shape in self.field_defs()
        )


def _split(extent: int, parts: int) -> list[tuple[int, int]]:
    """Near-even split; the remainder goes to the low-index patches."""
    base, extra = divmod(extent, parts)
    out = []
    offset = 0
    for i in range(parts):
        size = base + (1 if i < extra else 0)
        out.append((offset, size))
        offset += size
    return out


def patch_for_rank(spec: WorkloadSpec, rank: int, shape: tuple[int, ...]) -> Selection:
    """This rank's hyperslab of a 2D (ny,nx) or 3D (nz,ny,nx) field."""
    rx = rank % spec.px
    ry = rank // spec.px
    ys, yc = _split(spec.ny, spec.py)[ry]
    xs, xc = _split(spec.nx, spec.px)[rx]
    if len(shape) == 3:
        return Selection((0, ys, xs), (spec.nz, yc, xc))
    return Selection((ys, xs), (yc, xc))


def field_seed(seed: int, name: str, step: int) -> int:
    return (seed * 1_000_003 + zlib.crc32(name.encode()) * 97 + step) & 0x7FFFFFFF


def generate_global(spec: WorkloadSpec, name: str, shape: tuple[int, ...], step: int) -> np.ndarray:
    """Deterministic global field for (seed, name, step); float32, row-major."""
    rng = np.random.default_rng(field_seed(spec.seed, name, step))
    if spec.generator == GEN_CONSTANT:
        return np.full(shape, CONSTANT_VALUE, dtype=np.float32)
    if spec.generator == GEN_RANDOM:
        return rng.random(shape, dtype=np.float32)
    return _smooth_field(rng, shape, step)


def _smooth_field(rng, shape: tuple[int, ...], step: int, base=287.0, amp=3.0, nwaves=4,
                  noise_sigma=1e-3) -> np.ndarray:
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    f = np.full(shape, base, dtype=np.float64)
    for _ in range(nwaves):
        freqs = rng.uniform(0.2, 0.7, len(shape)) / np.maximum(np.array(shape), 2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        arg = phase + 0.3 * step
        for g, fr in zip(grids, freqs):
            arg = arg + 2.0 * np.pi * fr * g
        f += (amp / nwaves) * np.sin(arg)
    f += rng.normal(0.0, noise_sigma, shape)
    return np.ascontiguousarray(f, dtype=np.float32)


class StepFieldCache:
    """Builds each global field once per step and shares it across rank threads."""

    def __init__(self, spec: WorkloadSpec, keep_steps: int = 2):
        self.spec = spec
        self.keep = keep_steps
        self._lock = threading.Lock()
        self._cache: dict[tuple[int, str], np.ndarray] = {}

    def get(self, name: str, shape: tuple[int, ...], step: int) -> np.ndarray:
        key = (step, name)
        with self._lock:
            arr = self._cache.get(key)
            if arr is None:
                arr = generate_global(self.spec, name, shape, step)
                self._cache[key] = arr
                stale = [k for k in self._cache if k[0] <= step - self.keep]
                for k in stale:
                    del self._cache[k]
            return arr

    def patch_bytes(self, name: str, shape: tuple[int, ...], step: int, sel: Selection) -> bytes:
        arr = self.get(name, shape, step)
        slices = tuple(slice(s, s + c) for s, c in zip(sel.start, sel.count))
        return np.ascontiguousarray(arr[slices]).tobytes()
