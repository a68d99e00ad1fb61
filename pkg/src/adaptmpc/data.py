"""Tagged transition datasets and their on-disk JSON-lines form."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_FIELDS = ("x_prev", "u_prev", "x", "u", "x_next")


@dataclass
class TransitionDataset:
    """Records ``(x_{t-1}, u_{t-1}, x_t, u_t, x_{t+1})`` with one task tag each."""

    x_prev: np.ndarray
    u_prev: np.ndarray
    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray
    tags: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in _FIELDS:
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        self.tags = np.asarray(self.tags, dtype=object).reshape(-1)
        n = self.x.shape[0]
        for name in _FIELDS:
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"field {name} has {getattr(self, name).shape[0]} rows, expected {n}")
        if self.tags.size != n:
            raise ValueError("one tag per record required")
        if any(not t for t in self.tags):
            raise ValueError("tags must be non-empty")

    @classmethod
    def empty(cls, d_x, d_u, metadata=None):
        zx, zu = np.zeros((0, d_x)), np.zeros((0, d_u))
        return cls(zx, zu, zx, zu, zx, np.zeros(0, dtype=object), dict(metadata or {}))

    def __len__(self):
        return self.x.shape[0]

    @property
    def d_x(self):
        return self.x.shape[1]

    @property
    def d_u(self):
        return self.u.shape[1]

    def stacked(self):
        """Rows ``[x; u; x']`` for the current transition."""
        return np.hstack([self.x, self.u, self.x_next])

    def stacked_previous(self):
        """Rows ``[x_{t-1}; u_{t-1}; x_t]``."""
        return np.hstack([self.x_prev, self.u_prev, self.x])

    def select(self, mask):
        mask = np.asarray(mask)
        return TransitionDataset(*(getattr(self, f)[mask] for f in _FIELDS),
                                 self.tags[mask], dict(self.metadata))

    def exclude_tag(self, tag):
        return self.select(self.tags != tag)

    def task_tags(self):
        return sorted(set(self.tags.tolist()))

    @staticmethod
    def concat(datasets):
        datasets = [d for d in datasets]
        if not datasets:
            raise ValueError("nothing to concatenate")
        meta = {"sources": [d.metadata for d in datasets]}
        return TransitionDataset(*(np.vstack([getattr(d, f) for d in datasets]) for f in _FIELDS),
                                 np.concatenate([d.tags for d in datasets]), meta)

    # -- persistence -------------------------------------------------------
    def save(self, path):
        """Write one JSON record per line plus ``<path>.meta.json``."""
        path = Path(path)
        with open(path, "w") as fh:
            for i in range(len(self)):
                rec = {f: getattr(self, f)[i].tolist() for f in _FIELDS}
                rec["tag"] = self.tags[i]
                fh.write(json.dumps(rec) + "\n")
        meta = dict(self.metadata, d_x=self.d_x, d_u=self.d_u, records=len(self))
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta_path = Path(str(path) + ".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        if not rows:
            return cls.empty(meta.get("d_x", 0), meta.get("d_u", 0), meta)
        cols = {f: np.array([r[f] for r in rows], dtype=float) for f in _FIELDS}
        return cls(**cols, tags=np.array([r["tag"] for r in rows], dtype=object), metadata=meta)


def hold_one_out(datasets, held_out):
    """Merge datasets, dropping every record tagged ``held_out``."""
    merged = TransitionDataset.concat(datasets)
    return merged.exclude_tag(held_out)
