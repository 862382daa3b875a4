import logging
import re
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from algorithms.sparse_ops import sparse_conv3
from algorithms.topology import NEIGHBOR_OFFSETS, unit_frame
from models.grid import FeatureGrid, IndexGrid
from utils.errors import ContractError

logger = logging.getLogger(__name__)

BENCH_CHANNELS = 32
BENCH_REPEATS = 11
BENCH_WARMUPS = 3
SWEEP_RESOLUTION = 64
SWEEP_DENSITIES = (0.05, 0.1, 0.2, 0.4)
# Conv time may grow at most this much faster than the active-voxel count
SCALING_SLACK = 1.5
SHELL_CASE = re.compile(r'^shell(\d+)$')
LOOKUP_QUERIES = 100_000
EMPTY_RESOLUTION = 32
# Dense baseline conv runs only while its input array stays under this size
DENSE_CONV_MAX_BYTES = 256 << 20
DENSE_CONV_REPEATS = 3


@dataclass
class BenchCase:
    name: str
    resolution: int
    active_voxels: int
    topology_bytes: int
    index_bytes: int
    value_bytes: int
    dense_bytes: int
    dense_conv_ms: Optional[float]
    build_ms: float
    lookup_per_s: float
    conv_ms: float

    @property
    def conv_speedup(self):
        if self.dense_conv_ms is None or self.conv_ms <= 0:
            return None
        return self.dense_conv_ms / self.conv_ms

    def to_dict(self):
        return dict(self.__dict__, conv_speedup=self.conv_speedup)


@dataclass
class BenchReport:
    cases: List[BenchCase] = field(default_factory=list)
    channels: int = BENCH_CHANNELS
    repeats: int = BENCH_REPEATS
    near_linear: bool = True
    scaling: List[dict] = field(default_factory=list)

    def to_dict(self):
        return {
            'channels': self.channels,
            'repeats': self.repeats,
            'near_linear': self.near_linear,
            'scaling': self.scaling,
            'cases': [c.to_dict() for c in self.cases],
        }


def shell_coords(resolution, thickness=1.0, radius_fraction=0.4):
    """
    Voxels of a sphere shell, enumerated column by column.

    Each (i, j) column holds at most two z intervals where the centre distance
    lies in [r − t/2, r + t/2], so no dense R³ array is ever built.
    """
    c = 0.5 * (resolution - 1)
    r = radius_fraction * resolution
    r_in, r_out = max(0.0, r - 0.5 * thickness), r + 0.5 * thickness
    axis = np.arange(resolution)
    ii, jj = np.meshgrid(axis, axis, indexing='ij')
    rho2 = ((ii - c) ** 2 + (jj - c) ** 2).ravel()
    ii, jj = ii.ravel(), jj.ravel()
    hit = rho2 <= r_out * r_out
    ii, jj, rho2 = ii[hit], jj[hit], rho2[hit]
    dz_out = np.sqrt(r_out * r_out - rho2)
    dz_in = np.sqrt(np.maximum(0.0, r_in * r_in - rho2))
    parts = []
    for sign in (-1.0, 1.0):
        near = c + sign * dz_in
        far = c + sign * dz_out
        lo = np.ceil(np.minimum(near, far) - 1e-9).astype(np.int64)
        hi = np.floor(np.maximum(near, far) + 1e-9).astype(np.int64)
        lo, hi = np.clip(lo, 0, resolution - 1), np.clip(hi, 0, resolution - 1)
        counts = np.maximum(hi - lo + 1, 0)
        col = np.repeat(np.arange(counts.shape[0]), counts)
        offsets = np.arange(col.shape[0]) - np.repeat(np.cumsum(counts) - counts, counts)
        parts.append(np.stack([ii[col], jj[col], lo[col] + offsets], axis=1))
    # Columns inside the inner radius contribute two disjoint caps; outside it the caps meet
    return np.unique(np.concatenate(parts), axis=0)


def random_coords(resolution, density, seed=0):
    rng = np.random.default_rng(seed)
    total = resolution ** 3
    flat = rng.choice(total, size=int(round(density * total)), replace=False)
    return np.stack(np.unravel_index(np.sort(flat), (resolution,) * 3), axis=1)


def scatter_dense(coords, values, resolution):
    """Active rows written into a zero R³×C array"""
    dense = np.zeros((resolution,) * 3 + (values.shape[1],), dtype=values.dtype)
    if coords.shape[0]:
        dense[coords[:, 0], coords[:, 1], coords[:, 2]] = values
    return dense


def dense_conv3(dense, weight):
    """
    Baseline 3³ convolution over a full R³×C_in array: zero-pad by one voxel,
    then one strided-slice matmul per offset. Same stencil convention as
    sparse_conv3, so it agrees with it on every active output voxel.
    """
    r = dense.shape[:3]
    padded = np.pad(dense, ((1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.zeros(r + (weight.shape[2],), dtype=np.result_type(dense.dtype, weight.dtype))
    for k, (dx, dy, dz) in enumerate(NEIGHBOR_OFFSETS):
        window = padded[1 + dx:1 + dx + r[0], 1 + dy:1 + dy + r[1], 1 + dz:1 + dz + r[2]]
        out += window @ weight[k]
    return out


def _median_ms(fn, repeats, warmups):
    for _ in range(warmups):
        fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1e3)
    return float(np.median(times))


class BenchService:
    """Sparse-grid build, lookup and convolution timing with a dense-array baseline"""

    @staticmethod
    def measure(name, coords, resolution, channels=BENCH_CHANNELS, repeats=BENCH_REPEATS,
                warmups=BENCH_WARMUPS, seed=0) -> BenchCase:
        voxel_size, origin = unit_frame(resolution)
        start = time.perf_counter()
        grid = IndexGrid.build_from_coords(coords, voxel_size, origin)
        build_ms = (time.perf_counter() - start) * 1e3

        rng = np.random.default_rng(seed)
        queries = rng.integers(0, resolution, size=(LOOKUP_QUERIES, 3))
        start = time.perf_counter()
        grid.lookup(queries)
        lookup_per_s = LOOKUP_QUERIES / max(time.perf_counter() - start, 1e-9)

        features = FeatureGrid(grid, rng.standard_normal((grid.voxel_count, channels)).astype(np.float32))
        weight = (rng.standard_normal((27, channels, channels)) / np.sqrt(27 * channels)).astype(np.float32)
        conv_ms = _median_ms(lambda: sparse_conv3(features, weight), repeats, warmups)

        dense_conv_ms = None
        if int(resolution) ** 3 * channels * 4 <= DENSE_CONV_MAX_BYTES:
            dense = scatter_dense(grid.coords, features.values, int(resolution))
            dense_conv_ms = _median_ms(lambda: dense_conv3(dense, weight), min(repeats, DENSE_CONV_REPEATS), 1)
            del dense
        else:
            logger.info("%s: dense baseline array over %d MiB, skipping its conv timing", name,
                        DENSE_CONV_MAX_BYTES >> 20)

        stats = features.memory_stats()
        case = BenchCase(
            name=name,
            resolution=int(resolution),
            active_voxels=grid.voxel_count,
            topology_bytes=stats.topology_bytes,
            index_bytes=stats.index_bytes,
            value_bytes=stats.value_bytes,
            dense_bytes=int(resolution) ** 3 * (1 + 4 * channels),
            dense_conv_ms=dense_conv_ms,
            build_ms=build_ms,
            lookup_per_s=lookup_per_s,
            conv_ms=conv_ms,
        )
        logger.info("%s: %d voxels, %.1f KiB topology, build %.1f ms, conv %.2f ms", name, case.active_voxels,
                    (case.topology_bytes + case.index_bytes) / 1024.0, build_ms, conv_ms)
        return case

    @staticmethod
    def scaling_check(cases: List[BenchCase]):
        """Compare conv time growth to voxel growth between consecutive sweep cases"""
        rows = []
        ok = True
        for a, b in zip(cases[:-1], cases[1:]):
            voxel_ratio = b.active_voxels / max(1, a.active_voxels)
            time_ratio = b.conv_ms / max(a.conv_ms, 1e-6)
            within = time_ratio <= SCALING_SLACK * voxel_ratio
            ok = ok and within
            rows.append({'from': a.name, 'to': b.name, 'voxel_ratio': voxel_ratio,
                         'time_ratio': time_ratio, 'within_bound': within})
        return ok, rows

    @staticmethod
    def run_bench(cases, channels=BENCH_CHANNELS, repeats=BENCH_REPEATS, warmups=BENCH_WARMUPS, seed=0):
        """
        Run the named cases: `shell<R>` sphere shells, `empty` and `sweep`
        (random densities at 64³ followed by the near-linear scaling check).

        Raises:
            ContractError: unknown case name
        """
        report = BenchReport(channels=channels, repeats=repeats)
        for name in cases:
            match = SHELL_CASE.match(name)
            if match:
                resolution = int(match.group(1))
                report.cases.append(BenchService.measure(name, shell_coords(resolution), resolution, channels,
                                                         repeats, warmups, seed))
            elif name == 'sweep':
                sweep = [BenchService.measure(f'sweep{d:g}', random_coords(SWEEP_RESOLUTION, d, seed),
                                              SWEEP_RESOLUTION, channels, repeats, warmups, seed)
                         for d in SWEEP_DENSITIES]
                report.cases.extend(sweep)
                ok, rows = BenchService.scaling_check(sweep)
                report.near_linear = report.near_linear and ok
                report.scaling.extend(rows)
                if not ok:
                    logger.warning("Convolution time grows faster than %.1f× the active-voxel count", SCALING_SLACK)
            elif name == 'empty':
                report.cases.append(BenchService.measure(name, np.zeros((0, 3), dtype=np.int64), EMPTY_RESOLUTION,
                                                         channels, repeats, warmups, seed))
            else:
                raise ContractError(f"Unknown bench case '{name}', expected shell<R>, sweep or empty")
        return report
