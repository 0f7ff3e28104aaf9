"""Cross-image top-k retrieval of a query crop against a dataset."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dataset import DatasetManifest
from ..errors import ConfigError, EmptyDataset


@dataclass
class RetrievalResult:
    query: dict
    entries: list[tuple[str, float]]  # (image id, score), best first
    paths: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "query": self.query,
            "results": [{"rank": r + 1, "id": i, "score": s, "path": p}
                        for r, ((i, s), p) in enumerate(zip(self.entries, self.paths or
                                                            [None] * len(self.entries)))],
        }

    def write(self, path) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".partial")
        tmp.write_text(json.dumps(self.to_json(), indent=2))
        os.replace(tmp, path)
        return path


def image_score(z: np.ndarray, feature_maps) -> float:
    """Best cosine similarity over every cell of every level."""
    return float(max(np.max(np.asarray(f.values, dtype=np.float64) @ z) for f in feature_maps))


def score_dataset(z, dataset: DatasetManifest, embedder, min_side: int | None = None) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return np.array([image_score(z, embedder.pyramid(dataset.load(i, min_side).pixels))
                     for i in range(len(dataset))])


def rank(ids: list[str], scores, k: int) -> list[tuple[str, float]]:
    """Top-k by score, ties kept in dataset order."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")[:k]
    return [(ids[i], float(scores[i])) for i in order]


def retrieve_topk(query_crop, dataset: DatasetManifest, embedder, k: int = 10,
                  min_side: int | None = None, query_info: dict | None = None) -> RetrievalResult:
    """Rank dataset images by their best cell similarity to the query crop (H x W x 3 pixels)."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    if len(dataset) == 0:
        raise EmptyDataset("retrieval dataset is empty")
    z = embedder.crop(np.asarray(getattr(query_crop, "pixels", query_crop)))
    scores = score_dataset(z, dataset, embedder, min_side)
    ids = [item.id for item in dataset.items]
    entries = rank(ids, scores, k)
    by_id = {item.id: str(dataset.resolve(item)) for item in dataset.items}
    return RetrievalResult(query=query_info or {}, entries=entries,
                           paths=[by_id[i] for i, _ in entries])
