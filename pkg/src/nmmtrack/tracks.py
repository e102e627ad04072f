"""Per-timestep estimator output shared by both filters."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import N_TARGET, TARGET_NAMES


@dataclass
class EstimateTrack:
    """Estimates in physical units.

    ``mean`` always has 17 columns (augmented state then ``tau_e, tau_i``).  The
    Kalman filter fills the time-constant columns with the values it was run
    with.  ``std`` and ``innovation`` are optional (only the filter has them).
    A run that diverged is truncated and carries ``diverged_at``.
    """

    times: np.ndarray
    y: np.ndarray
    y_hat: np.ndarray
    mean: np.ndarray
    std: np.ndarray | None = None
    innovation: np.ndarray | None = None
    method: str = ""
    diverged_at: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.times)
        if self.mean.shape != (n, N_TARGET):
            raise ValueError(f"mean must be ({n}, {N_TARGET}), got {self.mean.shape}")
        for name in ("y", "y_hat", "std", "innovation"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ValueError(f"{name} length {len(arr)} != {n}")

    def __len__(self):
        return len(self.times)

    @property
    def diverged(self):
        return self.diverged_at is not None

    def column(self, name):
        return self.mean[:, TARGET_NAMES.index(name)]

    def columns(self):
        cols = ["t", "y", "y_hat", *TARGET_NAMES]
        if self.std is not None:
            cols += [f"std_{n}" for n in TARGET_NAMES]
        if self.innovation is not None:
            cols.append("innovation")
        return cols

    def to_csv(self, path):
        parts = [self.times, self.y, self.y_hat, self.mean]
        if self.std is not None:
            parts.append(self.std)
        if self.innovation is not None:
            parts.append(self.innovation)
        table = np.column_stack(parts)
        header = ",".join(self.columns())
        if self.method or self.diverged:
            # comment line keeps the file a plain CSV for most readers
            header = f"# method={self.method} diverged_at={self.diverged_at}\n" + header
        np.savetxt(Path(path), table, delimiter=",", header=header, comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path):
        lines = Path(path).read_text().splitlines()
        method, diverged_at, skip = "", None, 1
        if lines and lines[0].startswith("#"):
            skip = 2
            for tok in lines[0][1:].split():
                key, _, val = tok.partition("=")
                if key == "method":
                    method = val
                elif key == "diverged_at" and val != "None":
                    diverged_at = int(val)
        cols = lines[skip - 1].split(",")
        table = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
        if table.size == 0:
            table = np.zeros((0, len(cols)))
        k = 3 + N_TARGET
        std = table[:, k:k + N_TARGET] if "std_u" in cols else None
        innovation = table[:, cols.index("innovation")] if "innovation" in cols else None
        return cls(table[:, 0], table[:, 1], table[:, 2], table[:, 3:k], std, innovation, method, diverged_at)
