"""Time grids, finite mark spaces and lazily generated random drivers.

Drivers for step k are drawn from a generator seeded by
``SeedSequence(master_seed, spawn_key=(k,))``.  Any sweep (forward or
backward, first pass or tenth) therefore sees exactly the same increments
without the ensemble ever being held in memory at once.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm, poisson

from .errors import ConfigError

DUMP_MAGIC = b"RSFBDRV1"
DUMP_VERSION = 1


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not np.isfinite(self.T) or self.T <= 0:
            raise ConfigError(f"horizon T must be positive, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.T
        return t

    def t(self, k: int) -> float:
        return self.T if k == self.n_steps else k * self.dt

    def index_of(self, t: float) -> int:
        """Nearest node index for time t."""
        return int(np.clip(np.rint(t / self.dt), 0, self.n_steps))


@dataclass(frozen=True)
class MarkSpace:
    atoms: tuple
    weights: tuple

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float).ravel()
        w = np.asarray(self.weights, dtype=float).ravel()
        if a.size == 0:
            raise ConfigError("mark space has no atoms")
        if a.size != w.size:
            raise ConfigError("mark space atoms and weights differ in length")
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise ConfigError("mark weights must be finite and nonnegative")
        if not w.sum() > 0:
            raise ConfigError("mark space total mass must be positive")
        object.__setattr__(self, "atoms", tuple(a.tolist()))
        object.__setattr__(self, "weights", tuple(w.tolist()))

    @property
    def e(self) -> np.ndarray:
        return np.asarray(self.atoms)

    @property
    def nu(self) -> np.ndarray:
        return np.asarray(self.weights)

    @property
    def K(self) -> int:
        return len(self.atoms)

    @property
    def mass(self) -> float:
        return float(np.sum(self.weights))

    def integrate(self, vals):
        """Sum over atoms of vals[..., j] * nu_j."""
        return np.asarray(vals) @ self.nu


@dataclass
class StepNoise:
    """Driver increments of one step for all paths."""
    dW1: np.ndarray
    dW2: np.ndarray
    dN1: np.ndarray  # (n, K1) int counts
    dN2: np.ndarray
    dNt1: np.ndarray  # compensated, float
    dNt2: np.ndarray


def _poisson_cdf(lam, tail=1e-17):
    p = np.exp(-lam)
    cdf = [p]
    k = 0
    while 1.0 - cdf[-1] > tail and k < 200:
        k += 1
        p = p * lam / k
        cdf.append(cdf[-1] + p)
    return np.asarray(cdf[:-1]) if len(cdf) > 1 else np.zeros(0)


def _poisson(rng, lam, m):
    """Poisson counts by inverse transform of one uniform per (path, atom);
    much faster than Generator.poisson for the tiny means of a time step."""
    out = np.zeros((m, lam.size), dtype=np.int64)
    U = rng.random((m, lam.size))
    for j, l in enumerate(lam):
        if l <= 0:
            continue
        if l > 5.0:
            out[:, j] = rng.poisson(l, size=m)
            continue
        out[:, j] = np.searchsorted(_poisson_cdf(float(l)), U[:, j], side="right")
    return out


@dataclass
class PathEnsemble:
    grid: TimeGrid
    marks1: MarkSpace
    marks2: MarkSpace
    n_paths: int
    master_seed: int
    antithetic: bool = False
    cache_limit: int = 4_000_000
    _cache: dict = field(default_factory=dict, repr=False)

    def _draw(self, k: int) -> StepNoise:
        n = self.n_paths
        dt = self.grid.dt
        ss = np.random.SeedSequence(int(self.master_seed), spawn_key=(int(k),))
        rng = np.random.Generator(np.random.PCG64(ss))
        m = (n + 1) // 2 if self.antithetic else n
        sq = np.sqrt(dt)
        w = rng.standard_normal((2, m)) * sq
        n1 = _poisson(rng, self.marks1.nu * dt, m)
        n2 = _poisson(rng, self.marks2.nu * dt, m)
        if self.antithetic:
            w = np.concatenate([w, -w], axis=1)[:, :n]
            n1 = np.concatenate([n1, n1], axis=0)[:n]
            n2 = np.concatenate([n2, n2], axis=0)[:n]
        return StepNoise(
            dW1=w[0], dW2=w[1], dN1=n1, dN2=n2,
            dNt1=n1 - self.marks1.nu * dt, dNt2=n2 - self.marks2.nu * dt,
        )

    def step(self, k: int) -> StepNoise:
        if not 0 <= k < self.grid.n_steps:
            raise IndexError(f"step {k} outside grid")
        if self.n_paths * self.grid.n_steps <= self.cache_limit:
            s = self._cache.get(k)
            if s is None:
                s = self._cache[k] = self._draw(k)
            return s
        return self._draw(k)

    def steps(self):
        for k in range(self.grid.n_steps):
            yield k, self.step(k)

    def with_paths(self, n_paths: int, master_seed: int | None = None) -> "PathEnsemble":
        return PathEnsemble(self.grid, self.marks1, self.marks2, n_paths,
                            self.master_seed if master_seed is None else master_seed,
                            self.antithetic, self.cache_limit)

    def with_grid(self, grid: TimeGrid) -> "PathEnsemble":
        return PathEnsemble(grid, self.marks1, self.marks2, self.n_paths,
                            self.master_seed, self.antithetic, self.cache_limit)


def generate_ensemble(grid, marks1, marks2, n_paths, master_seed, antithetic=False):
    if not isinstance(grid, TimeGrid):
        raise ConfigError("grid must be a TimeGrid")
    for m in (marks1, marks2):
        if not isinstance(m, MarkSpace):
            raise ConfigError("mark spaces must be MarkSpace instances")
    if int(n_paths) != n_paths or n_paths < 1:
        raise ConfigError(f"n_paths must be >= 1, got {n_paths}")
    if antithetic and n_paths % 2:
        raise ConfigError("antithetic ensembles need an even path count")
    return PathEnsemble(grid, marks1, marks2, int(n_paths), int(master_seed), bool(antithetic))


def brownian_moments_check(ens: PathEnsemble, z_crit: float = 4.0, steps=None) -> dict:
    """Per-step moment statistics of the drivers with 4-stderr flags.

    Standard errors: mean sqrt(dt/n); variance dt*sqrt(2/n);
    correlation 1/sqrt(n); Poisson means by the exact two-sided count test.
    """
    n = ens.n_paths
    dt = ens.grid.dt
    idx = range(ens.grid.n_steps) if steps is None else steps
    rows = []
    flags = []
    # jump drivers with few expected events per step: the normal band of the
    # sample correlation does not hold there, so their pairs are recorded only
    sparse = {f"N{i}_{j}" for i, ms in ((1, ens.marks1), (2, ens.marks2))
              for j in range(ms.K) if ms.nu[j] * dt * n < 30}
    for k in idx:
        s = ens.step(k)
        rec = {"step": int(k)}
        for name, w in (("W1", s.dW1), ("W2", s.dW2)):
            mu = float(w.mean())
            var = float(w.var(ddof=1)) if n > 1 else 0.0
            rec[f"mean_{name}"] = mu
            rec[f"var_{name}"] = var
            if not ens.antithetic and abs(mu) > z_crit * np.sqrt(dt / n):
                flags.append((k, f"mean_{name}"))
            if n > 1 and abs(var - dt) > z_crit * dt * np.sqrt(2.0 / n):
                flags.append((k, f"var_{name}"))
        drivers = {"W1": s.dW1, "W2": s.dW2}
        for j in range(ens.marks1.K):
            drivers[f"N1_{j}"] = s.dNt1[:, j]
        for j in range(ens.marks2.K):
            drivers[f"N2_{j}"] = s.dNt2[:, j]
        for name, v in drivers.items():
            if name.startswith("N"):
                nu = (ens.marks1 if name[1] == "1" else ens.marks2).nu[int(name[3:])]
                mu = float(v.mean())
                rec[f"mean_{name}"] = mu
                # exact two-sided Poisson test on the step's total count at
                # the tail probability of a z_crit normal test
                lam = nu * dt * n
                if lam > 0:
                    tot = int(round((mu + nu * dt) * n))
                    p = 2.0 * min(poisson.cdf(tot, lam), poisson.sf(tot - 1, lam))
                    if p < 2.0 * norm.sf(z_crit):
                        flags.append((k, f"mean_{name}"))
        names = list(drivers)
        if n > 2:
            X = np.stack([drivers[a] for a in names])
            ok = np.ptp(X, axis=1) > 0
            C = np.corrcoef(X[ok]) if ok.sum() > 1 else np.ones((1, 1))
            live = [a for a, o in zip(names, ok) if o]
            for i in range(len(live)):
                for j in range(i + 1, len(live)):
                    c = float(C[i, j])
                    key = f"corr_{live[i]}_{live[j]}"
                    rec[key] = c
                    if live[i] in sparse or live[j] in sparse:
                        continue
                    if abs(c) > z_crit / np.sqrt(n):
                        flags.append((k, key))
        rows.append(rec)
    return {"n_paths": n, "dt": dt, "steps": rows, "flags": flags, "pass": not flags,
            "corr_untested": sorted(sparse)}


def dump_drivers(ens: PathEnsemble, path) -> None:
    """Binary dump: magic, version, T, n_steps, K1, K2, n_paths, then
    per step dW1, dW2 (float64) and dN1, dN2 (int64) in C order."""
    g = ens.grid
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<IdQIIQ", DUMP_VERSION, g.T, g.n_steps,
                             ens.marks1.K, ens.marks2.K, ens.n_paths))
        for _, s in ens.steps():
            fh.write(s.dW1.astype("<f8").tobytes())
            fh.write(s.dW2.astype("<f8").tobytes())
            fh.write(s.dN1.astype("<i8").tobytes())
            fh.write(s.dN2.astype("<i8").tobytes())


def load_drivers(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(DUMP_MAGIC))
        if magic != DUMP_MAGIC:
            raise ConfigError("not a driver dump file")
        ver, T, n_steps, K1, K2, n = struct.unpack("<IdQIIQ", fh.read(struct.calcsize("<IdQIIQ")))
        if ver != DUMP_VERSION:
            raise ConfigError(f"unsupported dump version {ver}")
        dW1 = np.empty((n_steps, n)); dW2 = np.empty((n_steps, n))
        dN1 = np.empty((n_steps, n, K1), dtype=np.int64)
        dN2 = np.empty((n_steps, n, K2), dtype=np.int64)
        for k in range(n_steps):
            dW1[k] = np.frombuffer(fh.read(8 * n), "<f8")
            dW2[k] = np.frombuffer(fh.read(8 * n), "<f8")
            dN1[k] = np.frombuffer(fh.read(8 * n * K1), "<i8").reshape(n, K1)
            dN2[k] = np.frombuffer(fh.read(8 * n * K2), "<i8").reshape(n, K2)
    return {"T": T, "n_steps": n_steps, "K1": K1, "K2": K2, "n_paths": n,
            "dW1": dW1, "dW2": dW2, "dN1": dN1, "dN2": dN2}
