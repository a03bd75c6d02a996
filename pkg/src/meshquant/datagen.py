"""
Synthetic steady-state Darcy flow: -div(a grad u) = 1 on the unit square, u = 0 on the boundary.

The coefficient is piecewise constant (3 or 12) from a thresholded smoothed Gaussian
field; the 5-point finite-difference system uses harmonic means of the coefficient on
the faces between neighbouring grid nodes.
"""
import hashlib
import json
import logging
from collections.abc import Iterable, Iterator
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import linalg as splinalg
from tqdm import tqdm

from .graph import MeshGraph, build_knn_graph, grid_clusters

logger = logging.getLogger(__package__)

GENERATOR_VERSION = 1
DATASET_FORMAT = 'meshquant-darcy'
COEFFICIENT_LOW, COEFFICIENT_HIGH = 3.0, 12.0
RESIDUAL_TOLERANCE = 1e-8


@dataclass
class DataConfig:
    grid_size: int = 32
    stride: int = 2
    k: int = 5
    n_train: int = 200
    n_val: int = 50
    seed: int = 0
    smoothing: float = 3.0
    solver: Literal['direct', 'cg'] = 'direct'
    cluster_size: int = 0
    workers: int = 1

    def validate(self):
        if self.grid_size < 8:
            raise ValueError(f"grid_size must be at least 8, got {self.grid_size}")
        if self.stride < 1:
            raise ValueError(f"stride must be at least 1, got {self.stride}")
        if self.k < 1:
            raise ValueError(f"k must be at least 1, got {self.k}")
        if self.n_train < 1 or self.n_val < 0:
            raise ValueError("n_train must be positive and n_val nonnegative")
        if self.solver not in ('direct', 'cg'):
            raise ValueError(f"unknown solver '{self.solver}'")
        nodes = (-(-self.grid_size // self.stride)) ** 2
        if nodes < self.k:
            raise ValueError(f"{nodes} graph nodes cannot host k={self.k} neighbours")

    @property
    def n_samples(self) -> int:
        return self.n_train + self.n_val


@dataclass
class DarcySample:
    coefficient: np.ndarray  # (n, n), indexed [i, j] with i along x
    solution: np.ndarray  # (n, n)
    seed: int

    @property
    def grid_size(self) -> int:
        return self.coefficient.shape[0]


def random_coefficient(n: int, rng: np.random.Generator, smoothing: float = 3.0) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal((n, n)), sigma=smoothing * n / 32, mode='reflect')
    return np.where(field >= 0, COEFFICIENT_HIGH, COEFFICIENT_LOW)


def assemble_darcy(coefficient: np.ndarray) -> tuple[sparse.csr_array, np.ndarray]:
    """Interior system A u = f on the (n-2)^2 unknowns, mesh width h = 1 / (n - 1)."""
    a = np.asarray(coefficient, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n) or n < 3:
        raise ValueError(f"coefficient must be a square grid, got shape {a.shape}")
    if np.any(a <= 0) or not np.all(np.isfinite(a)):
        raise ValueError("coefficient must be finite and strictly positive")
    h2 = (1.0 / (n - 1)) ** 2
    m = n - 2
    index = np.arange(m * m).reshape(m, m)
    rows, cols, vals = [], [], []
    diag = np.zeros((m, m))
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        centre = a[1:-1, 1:-1]
        other = a[1 + di:n - 1 + di, 1 + dj:n - 1 + dj]
        face = 2.0 * centre * other / (centre + other) / h2
        diag += face
        ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing='ij')
        ni, nj = ii + di, jj + dj
        inside = (ni >= 0) & (ni < m) & (nj >= 0) & (nj < m)
        rows.append(index[inside])
        cols.append(index[ni[inside], nj[inside]])
        vals.append(-face[inside])
    rows.append(index.ravel())
    cols.append(index.ravel())
    vals.append(diag.ravel())
    matrix = sparse.csr_array((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(m * m, m * m))
    return matrix, np.ones(m * m)


def solve_darcy(coefficient: np.ndarray, solver: str = 'direct', tol: float = RESIDUAL_TOLERANCE) -> np.ndarray:
    matrix, rhs = assemble_darcy(coefficient)
    if solver == 'direct':
        interior = splinalg.spsolve(matrix.tocsc(), rhs)
    elif solver == 'cg':
        interior, info = splinalg.cg(matrix, rhs, rtol=tol * 1e-3, atol=0.0, maxiter=20 * len(rhs))
        if info != 0:
            raise RuntimeError(f"conjugate gradients did not converge (info={info})")
    else:
        raise ValueError(f"unknown solver '{solver}'")
    residual = float(np.max(np.abs(matrix @ interior - rhs)))
    if not residual <= tol:
        raise RuntimeError(f"Darcy solve residual {residual:.3e} exceeds {tol:.0e}")
    n = coefficient.shape[0]
    u = np.zeros((n, n))
    u[1:-1, 1:-1] = interior.reshape(n - 2, n - 2)
    return u


def generate_darcy_sample(n: int, seed: int, smoothing: float = 3.0, solver: str = 'direct') -> DarcySample:
    if n < 8:
        raise ValueError(f"grid size must be at least 8, got {n}")
    rng = np.random.default_rng(seed)
    coefficient = random_coefficient(n, rng, smoothing)
    return DarcySample(coefficient=coefficient, solution=solve_darcy(coefficient, solver), seed=seed)


def grid_to_graph(sample: DarcySample, stride: int, k: int, cluster_size: int = 0) -> MeshGraph:
    """Subsample every ``stride``-th node, connect by kNN with self-loops."""
    if stride < 1:
        raise ValueError(f"stride must be at least 1, got {stride}")
    n = sample.grid_size
    idx = np.arange(0, n, stride)
    ii, jj = np.meshgrid(idx, idx, indexing='ij')
    positions = np.stack([ii.ravel(), jj.ravel()], axis=1) / (n - 1)
    edges = build_knn_graph(positions, k, self_loops=True)
    clusters = grid_clusters((len(idx), len(idx)), cluster_size) if cluster_size > 0 else None
    return MeshGraph(positions=positions, features=sample.coefficient[ii, jj].reshape(-1, 1), edges=edges,
                     targets=sample.solution[ii, jj].reshape(-1, 1), clusters=clusters)


def sample_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)]


def _build_record(args: tuple[int, int, DataConfig]) -> dict:
    index, seed, config = args
    graph = grid_to_graph(generate_darcy_sample(config.grid_size, seed, config.smoothing, config.solver),
                          config.stride, config.k, config.cluster_size)
    record = {
        'index': index, 'seed': seed,
        'positions': graph.positions.tolist(), 'edges': graph.edges.tolist(),
        'features': graph.features.tolist(), 'targets': graph.targets.tolist(),
    }
    if graph.clusters:
        record['clusters'] = [c.tolist() for c in graph.clusters]
    return record


def generate_records(config: DataConfig, progress: bool = False) -> Iterator[dict]:
    jobs = [(i, s, config) for i, s in enumerate(sample_seeds(config.seed, config.n_samples))]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            # map keeps submission order
            yield from tqdm(pool.map(_build_record, jobs), total=len(jobs), disable=not progress, desc='samples')
    else:
        yield from tqdm(map(_build_record, jobs), total=len(jobs), disable=not progress, desc='samples')


def write_dataset(path: Union[str, Path], config: DataConfig, progress: bool = False) -> str:
    """Write header plus one JSON record per sample; returns the SHA-256 of the file."""
    config.validate()
    path = Path(path)
    digest = hashlib.sha256()
    header = {'format': DATASET_FORMAT, 'generator_version': GENERATOR_VERSION, 'config': asdict(config)}
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        line = json.dumps(header, sort_keys=True) + '\n'
        f.write(line)
        digest.update(line.encode())
        count = 0
        for record in generate_records(config, progress):
            line = json.dumps(record, sort_keys=True) + '\n'
            f.write(line)
            digest.update(line.encode())
            count += 1
    logger.info(f"wrote {count} samples to '{path}' (sha256 {digest.hexdigest()[:16]})")
    return digest.hexdigest()


def file_checksum(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def _record_to_graph(record: dict) -> MeshGraph:
    clusters = [np.asarray(c, dtype=np.int64) for c in record['clusters']] if 'clusters' in record else None
    return MeshGraph(positions=np.asarray(record['positions']), features=np.asarray(record['features']),
                     edges=np.asarray(record['edges'], dtype=np.int64),
                     targets=np.asarray(record['targets']), clusters=clusters)


@dataclass
class Dataset:
    header: dict
    train: list[MeshGraph]
    val: list[MeshGraph]


def read_dataset(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"No such dataset: '{path}'")
    with open(path, encoding='utf-8') as f:
        header = json.loads(f.readline())
        if header.get('format') != DATASET_FORMAT:
            raise ValueError(f"'{path}' is not a {DATASET_FORMAT} dataset")
        graphs = [_record_to_graph(json.loads(line)) for line in _nonblank(f)]
    n_train = header['config']['n_train']
    logger.info(f"loaded {len(graphs)} samples from '{path}'")
    return Dataset(header, graphs[:n_train], graphs[n_train:])


def _nonblank(lines: Iterable[str]) -> Iterator[str]:
    return (line for line in lines if line.strip())


@dataclass
class Normalizer:
    """Feature standardization and target scaling fitted on the training split."""
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_scale: np.ndarray

    @classmethod
    def fit(cls, graphs: list[MeshGraph]) -> 'Normalizer':
        if not graphs:
            raise ValueError("cannot fit a normalizer on an empty dataset")
        features = np.concatenate([g.features for g in graphs])
        targets = np.concatenate([g.targets for g in graphs])
        std = features.std(axis=0)
        scale = np.sqrt(np.mean(targets ** 2, axis=0))
        return cls(features.mean(axis=0), np.where(std > 0, std, 1.0), np.where(scale > 0, scale, 1.0))

    def apply(self, graph: MeshGraph) -> MeshGraph:
        targets = None if graph.targets is None else graph.targets / self.target_scale
        return MeshGraph(positions=graph.positions, features=(graph.features - self.feature_mean) / self.feature_std,
                         edges=graph.edges, targets=targets, clusters=graph.clusters)

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, state: dict) -> 'Normalizer':
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in state.items()})
