"""Shared builders for tests."""

import numpy as np
import pytest

from attnloc.features import DESCRIPTOR_DIM, SCALES, DenseFeatureLevel, FeaturePyramid
from attnloc.geometry import Pose3
from attnloc.mapdb import KeypointSet, MapDatabase, MapNode


def random_pyramid(rng, width=64, height=48, dim=DESCRIPTOR_DIM) -> FeaturePyramid:
    levels = []
    for s in SCALES:
        hs, ws = height // s, width // s
        desc = rng.normal(size=(hs, ws, dim)).astype(np.float32)
        heat = rng.uniform(0, 1, size=(hs, ws)).astype(np.float32)
        levels.append(DenseFeatureLevel(s, desc, heat))
    return FeaturePyramid(width, height, tuple(levels))


def random_keypoints(rng, scale, n) -> KeypointSet:
    return KeypointSet.from_arrays(
        scale,
        rng.uniform(0, 100, (n, 2)),
        rng.uniform(0, 1, n),
        rng.normal(scale=30, size=(n, 3)),
        rng.normal(size=(n, DESCRIPTOR_DIM)),
    )


def random_node(rng, node_id, camera_id=0, max_kp=6) -> MapNode:
    q = rng.normal(size=4)
    pose = Pose3(rng.uniform(-100, 100, 3), q / np.linalg.norm(q))
    levels = tuple(random_keypoints(rng, s, int(rng.integers(0, max_kp + 1))) for s in SCALES)
    return MapNode(node_id, pose, camera_id, levels)


def random_database(rng, n_nodes=None) -> MapDatabase:
    n = int(rng.integers(0, 8)) if n_nodes is None else n_nodes
    return MapDatabase(tuple(random_node(rng, i, camera_id=int(rng.integers(0, 3))) for i in range(n)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
