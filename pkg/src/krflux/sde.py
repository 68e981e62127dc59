"""Synthetic snapshot data from dX = -grad Psi(X) dt + sigma dB."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import sqrtm

from .autodiff import ParamVector
from .dynamics import potential_gradient


class CholeskyFailure(ValueError):
    pass


class BlowUp(FloatingPointError):
    """Particles escaped; the time step is too large for the drift."""


@dataclass
class SdeProblem:
    potential: object
    theta: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        d = self.potential.dim
        if self.sigma.shape != (d, d) or not np.all(np.isfinite(self.sigma)):
            raise ValueError(f"sigma must be a finite {d}x{d} matrix")
        self._params = ParamVector()
        self._params.add(self.potential.segment, self.theta)

    @property
    def dim(self) -> int:
        return self.potential.dim

    @property
    def diffusion(self) -> np.ndarray:
        return 0.5 * self.sigma @ self.sigma.T

    @classmethod
    def from_diffusion(cls, potential, theta, diffusion) -> "SdeProblem":
        """sigma is the symmetric PSD square root of 2 D."""
        root = np.real(sqrtm(2.0 * np.atleast_2d(np.asarray(diffusion, dtype=np.float64))))
        return cls(potential, theta, 0.5 * (root + root.T))

    def drift(self, x: np.ndarray) -> np.ndarray:
        return -potential_gradient(self.potential, x, self._params)


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covs = np.asarray(self.covs, dtype=np.float64).reshape(len(self.weights), self.means.shape[1],
                                                                    self.means.shape[1])
        if np.any(self.weights <= 0) or not np.isclose(self.weights.sum(), 1.0, atol=1e-12):
            raise ValueError("mixture weights must be positive and sum to 1")

    @classmethod
    def equal(cls, means, covs) -> "GaussianMixture":
        n = len(means)
        return cls(np.full(n, 1.0 / n), means, covs)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "covs": self.covs.tolist()}


@dataclass
class SnapshotDataset:
    dim: int
    times: list[float]
    samples: list[np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = [float(t) for t in self.times]
        if len(self.times) != len(self.samples):
            raise ValueError("one sample matrix per time stamp")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("snapshot times must be strictly increasing")
        for x in self.samples:
            if x.ndim != 2 or x.shape[1] != self.dim:
                raise ValueError(f"snapshot samples must be N x {self.dim}")
            if not np.all(np.isfinite(x)):
                raise ValueError("snapshot samples must be finite")

    def __len__(self) -> int:
        return len(self.times)

    def all_points(self) -> np.ndarray:
        return np.concatenate(self.samples)

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        files = []
        for i, x in enumerate(self.samples):
            name = f"snapshot_{i:03d}.csv"
            files.append(name)
            with open(os.path.join(directory, name), "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow([f"x{j + 1}" for j in range(self.dim)])
                for row in x:
                    writer.writerow([format(v, ".17g") for v in row])
        manifest = {"format_version": 1, "dim": self.dim, "times": self.times,
                    "n": [len(x) for x in self.samples], "files": files, **self.meta}
        with open(os.path.join(directory, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, directory: str) -> "SnapshotDataset":
        with open(os.path.join(directory, "manifest.json")) as fh:
            manifest = json.load(fh)
        samples = []
        for name in manifest["files"]:
            arr = np.loadtxt(os.path.join(directory, name), delimiter=",", skiprows=1, ndmin=2)
            samples.append(arr.reshape(-1, manifest["dim"]))
        meta = {k: v for k, v in manifest.items() if k not in ("format_version", "dim", "times", "n", "files")}
        return cls(manifest["dim"], manifest["times"], samples, meta)


def sample_mixture(gm: GaussianMixture, n: int, seed, return_labels: bool = False):
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    chols = []
    for cov in gm.covs:
        try:
            chols.append(np.linalg.cholesky(cov))
        except np.linalg.LinAlgError as exc:
            raise CholeskyFailure("mixture covariance is not positive definite") from exc
    labels = rng.choice(len(gm.weights), size=n, p=gm.weights)
    z = rng.standard_normal((n, gm.dim))
    out = np.empty((n, gm.dim))
    for j, chol in enumerate(chols):
        idx = labels == j
        out[idx] = gm.means[j] + z[idx] @ chol.T
    return (out, labels) if return_labels else out


def _steps(t: float, dt: float) -> int:
    k = int(round(t / dt))
    if abs(k * dt - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"time {t} is not a multiple of dt={dt}")
    return k


def euler_maruyama(prob: SdeProblem, x0, t_end: float, dt: float, seed=None, noise=None) -> np.ndarray:
    """Integrate particles from x0 to t_end.

    ``noise`` optionally supplies the standard normal increments, shape
    (steps, N, d), e.g. to couple runs at different step sizes.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.array(x0, dtype=np.float64)
    steps = _steps(t_end, dt)
    rng = np.random.default_rng(seed)
    for k in range(steps):
        xi = noise[k] if noise is not None else rng.standard_normal(x.shape)
        x = _em_step(prob, x, dt, xi)
    return x


def _em_step(prob, x, dt, xi):
    x = x + prob.drift(x) * dt + np.sqrt(dt) * (xi @ prob.sigma.T)
    if not np.all(np.abs(x) < 1e6):
        raise BlowUp("particle magnitude exceeded 1e6; reduce dt")
    return x


def generate_dataset(prob: SdeProblem, gm: GaussianMixture, n_samples: int, times, dt: float,
                     seed: int) -> SnapshotDataset:
    times = [float(t) for t in times]
    if not times or times[0] != 0.0 or any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("times must start at 0 and increase")
    init_seed, path_seed = np.random.SeedSequence(seed).spawn(2)
    x = sample_mixture(gm, n_samples, init_seed)
    rng = np.random.default_rng(path_seed)
    marks = {_steps(t, dt): i for i, t in enumerate(times)}
    snaps = [None] * len(times)
    snaps[0] = x.copy()
    for k in range(1, max(marks) + 1):
        x = _em_step(prob, x, dt, rng.standard_normal(x.shape))
        if k in marks:
            snaps[marks[k]] = x.copy()
    meta = {"seed": seed, "dt": dt,
            "ground_truth": {"potential": prob.potential.kind, "theta_psi": prob.theta.tolist(),
                             "diffusion": prob.diffusion.tolist()}}
    return SnapshotDataset(prob.dim, times, snaps, meta)
