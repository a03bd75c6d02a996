import numpy as np

from meshquant.datagen import DataConfig, generate_darcy_sample, grid_to_graph
from meshquant.graph import MeshGraph, build_knn_graph


def random_graph(rng: np.random.Generator, n_nodes: int = 6, k: int = 3, in_dim: int = 1,
                 pos_dim: int = 2, self_loops: bool = True) -> MeshGraph:
    positions = rng.uniform(size=(n_nodes, pos_dim))
    return MeshGraph(positions=positions, features=rng.normal(size=(n_nodes, in_dim)),
                     edges=build_knn_graph(positions, k, self_loops=self_loops),
                     targets=rng.normal(size=(n_nodes, 1)))


def path_graph(n: int = 3) -> MeshGraph:
    """0 - 1 - ... - (n-1) with edges in both directions."""
    edges = [(i, i + 1) for i in range(n - 1)] + [(i + 1, i) for i in range(n - 1)]
    return MeshGraph(positions=np.arange(n, dtype=np.float64), features=np.zeros(n), edges=edges)


def darcy_graphs(count: int, grid_size: int = 8, stride: int = 2, k: int = 3, seed: int = 0) -> list[MeshGraph]:
    return [grid_to_graph(generate_darcy_sample(grid_size, seed + i), stride, k) for i in range(count)]


def tiny_data_config(**kwargs) -> DataConfig:
    values = dict(grid_size=8, stride=2, k=3, n_train=4, n_val=2, seed=3)
    values.update(kwargs)
    return DataConfig(**values)
