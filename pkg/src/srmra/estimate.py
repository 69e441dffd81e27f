"""Solver output shared by both estimators."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as srmr_io
from .model import ShiftDistribution, normalize_image


@dataclass
class Estimate:
    x_hat: np.ndarray
    rho_hat: ShiftDistribution
    trace: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def save(self, directory: str | os.PathLike) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        srmr_io.save_srmr1(d / "x_hat.srmr", self.x_hat)
        srmr_io.save_srmr1(d / "rho_hat.srmr", self.rho_hat.joint)
        srmr_io.save_pgm(d / "x_hat.pgm", self.x_hat)
        (d / "trace.json").write_text(json.dumps({"meta": self.meta, "trace": self.trace}, indent=1))
        return d

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "Estimate":
        d = Path(directory)
        payload = json.loads((d / "trace.json").read_text())
        rho = ShiftDistribution.from_joint(srmr_io.load_srmr1(d / "rho_hat.srmr"))
        return cls(srmr_io.load_srmr1(d / "x_hat.srmr"), rho, payload["trace"], payload["meta"])


def random_initialization(L: int, seed: int) -> tuple[np.ndarray, ShiftDistribution]:
    """Image pixels uniform on [0, 1] stretched to span [0, 1]; marginals uniform, normalized."""
    rng = np.random.default_rng(seed)
    x, _ = normalize_image(rng.uniform(size=(L, L)))
    return x, ShiftDistribution.random(L, rng)
