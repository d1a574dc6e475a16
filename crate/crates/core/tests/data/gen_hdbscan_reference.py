"""Regenerates hdbscan_reference.json with scikit-learn's HDBSCAN.

scikit-learn counts the point itself in `min_samples`; the Rust implementation
does not, so the reference runs with min_samples + 1.

    python3 gen_hdbscan_reference.py > hdbscan_reference.json
"""
import json

import numpy as np
import sklearn
from sklearn.cluster import HDBSCAN

MIN_CLUSTER_SIZE = 5
MIN_SAMPLES = 3


def reference_labels(points):
    if len(points) < MIN_CLUSTER_SIZE:
        return [-1] * len(points)
    model = HDBSCAN(
        min_cluster_size=MIN_CLUSTER_SIZE,
        min_samples=MIN_SAMPLES + 1,
        metric="euclidean",
        algorithm="brute",
        cluster_selection_method="eom",
        allow_single_cluster=False,
    )
    return model.fit_predict(np.asarray(points)).tolist()


def random_fixture(rng, idx):
    if idx % 20 == 19:
        n = int(rng.integers(0, MIN_CLUSTER_SIZE))
        return rng.uniform(0, 1, size=(n, 2)).tolist()
    n_blobs = int(rng.integers(2, 5))
    parts = []
    for _ in range(n_blobs):
        centre = rng.uniform(0.15, 0.85, size=2)
        size = int(rng.integers(8, 31))
        sd = rng.uniform(0.01, 0.035)
        parts.append(rng.normal(centre, sd, size=(size, 2)))
    n_noise = int(rng.integers(3, 16))
    parts.append(rng.uniform(0, 1, size=(n_noise, 2)))
    pts = np.concatenate(parts)
    rng.shuffle(pts)
    return pts.tolist()


def main():
    rng = np.random.default_rng(20240611)
    fixtures = []
    for i in range(100):
        pts = random_fixture(rng, i)
        fixtures.append({"name": f"random_{i:03d}", "points": pts, "labels": reference_labels(pts)})

    ex = np.random.default_rng(7)
    two = np.concatenate([
        ex.normal((0.3, 0.3), 0.01, size=(20, 2)),
        ex.normal((0.7, 0.7), 0.01, size=(20, 2)),
        np.array([[0.02, 0.98], [0.98, 0.02], [0.03, 0.97]]),
    ]).tolist()
    angles = ex.uniform(0, 2 * np.pi, size=10)
    radii = 0.01 * np.sqrt(ex.uniform(0, 1, size=10))
    one = np.stack([0.5 + radii * np.cos(angles), 0.5 + radii * np.sin(angles)], axis=1).tolist()
    four = ex.uniform(0, 1, size=(4, 2)).tolist()
    examples = [
        {"name": "two_blobs_three_far", "points": two, "labels": reference_labels(two)},
        {"name": "single_tight_blob", "points": one, "labels": reference_labels(one)},
        {"name": "four_points", "points": four, "labels": reference_labels(four)},
    ]
    json.dump(
        {
            "generator": f"scikit-learn {sklearn.__version__} HDBSCAN",
            "min_cluster_size": MIN_CLUSTER_SIZE,
            "min_samples": MIN_SAMPLES,
            "fixtures": fixtures,
            "examples": examples,
        },
        __import__("sys").stdout,
    )


if __name__ == "__main__":
    main()
