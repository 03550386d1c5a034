"""N-story linear shear building under ground excitation.

Assembles chain-topology system matrices, simulates total floor
accelerations with an exact zero-order-hold discretization of the
first-order state-space form, propagates forward sensitivities with the
same discrete scheme, and generates synthetic noisy datasets.

The simulation core is batched: a stack of buildings sharing the same
mass vector and time step but differing in stiffness and damping is
discretized and integrated together, which is what the posterior-gradient
path needs when many MCMC chains move in parallel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import expm


@dataclass(frozen=True)
class ShearBuilding:
    """Story-wise physical parameters of a linear shear building."""

    stiffness: np.ndarray
    damping: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        for name in ("stiffness", "damping", "mass"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.stiffness.size
        if self.damping.size != n or self.mass.size != n:
            raise ValueError("stiffness, damping and mass must have equal length")

    @property
    def n_stories(self) -> int:
        return self.stiffness.size


@dataclass(frozen=True)
class Dataset:
    """Ground motion plus noisy acceleration measurements at observed dofs."""

    ground_accel: np.ndarray
    observed_dofs: tuple
    measurements: np.ndarray
    dt: float
    noise_ratio: float

    def __post_init__(self):
        object.__setattr__(self, "ground_accel", np.asarray(self.ground_accel, dtype=float))
        object.__setattr__(self, "measurements", np.asarray(self.measurements, dtype=float))
        object.__setattr__(self, "observed_dofs", tuple(int(i) for i in self.observed_dofs))
        if self.measurements.shape != (len(self.observed_dofs), self.ground_accel.size):
            raise ValueError("measurements must be (n_observed, n_steps)")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def n_obs(self) -> int:
        return self.measurements.shape[0]

    @property
    def n_steps(self) -> int:
        return self.measurements.shape[1]


@dataclass(frozen=True)
class DatasetConfig:
    """Synthetic-data generation settings."""

    duration: float
    dt: float = 0.01
    noise_ratio: float = 1.0
    perturbation_cov: float = 0.10
    ground_std: float = 1.0
    observed_dofs: tuple | None = None


def nominal_building(
    n_stories: int, k0: float = 2.0e7, c0: float = 6.0e4, mass: float = 2.0e5
) -> ShearBuilding:
    """Uniform building with every story at the nominal parameter values."""
    n = int(n_stories)
    return ShearBuilding(
        stiffness=np.full(n, float(k0)),
        damping=np.full(n, float(c0)),
        mass=np.full(n, float(mass)),
    )


def story_patterns(n: int) -> np.ndarray:
    """Per-story assembly patterns: K = sum_s k_s * P[s] (same for damping)."""
    pats = np.zeros((n, n, n))
    for s in range(n):
        pats[s, s, s] += 1.0
        if s > 0:
            pats[s, s - 1, s - 1] += 1.0
            pats[s, s, s - 1] = pats[s, s - 1, s] = -1.0
    return pats


def assemble_system(b: ShearBuilding):
    """Mass, damping and stiffness matrices (M, C, K) of the chain model.

    Stiffness and mass must be strictly positive. Damping is deliberately
    unchecked: the inference chain explores damping values of either sign
    and the likelihood must stay evaluable there.
    """
    if np.any(b.stiffness <= 0):
        raise ValueError("story stiffness must be strictly positive")
    if np.any(b.mass <= 0):
        raise ValueError("floor mass must be strictly positive")
    pats = story_patterns(b.n_stories)
    K = np.einsum("s,sij->ij", b.stiffness, pats)
    C = np.einsum("s,sij->ij", b.damping, pats)
    M = np.diag(b.mass)
    return M, C, K


def default_parameters(n_stories: int) -> list:
    """All stiffness then all damping parameters, story order."""
    return [("k", s) for s in range(n_stories)] + [("c", s) for s in range(n_stories)]


@dataclass
class Discretized:
    """Exact one-step propagators for a batch of buildings at fixed dt.

    ad, bd map state to state over one step under zero-order-hold input;
    c_out maps state to total floor accelerations. When parameters are
    tracked, f and g drive the coupled sensitivity recursion and dc_out is
    the parameter derivative of the output map (shared across the batch
    because it depends only on the fixed masses and assembly patterns).
    """

    ad: np.ndarray
    bd: np.ndarray
    c_out: np.ndarray
    f: np.ndarray | None = None
    g: np.ndarray | None = None
    dc_out: np.ndarray | None = None

    @property
    def batch(self) -> int:
        return self.ad.shape[0]


def _param_blocks(mass: np.ndarray, wrt: Sequence) -> tuple:
    """State-matrix and output-map derivatives for each tracked parameter."""
    n = mass.size
    pats = story_patterns(n)
    minv = 1.0 / mass
    p = len(wrt)
    ap = np.zeros((p, 2 * n, 2 * n))
    dc = np.zeros((p, n, 2 * n))
    for i, (kind, s) in enumerate(wrt):
        blk = -minv[:, None] * pats[s]
        col = slice(0, n) if kind == "k" else slice(n, 2 * n)
        ap[i, n:, col] = blk
        dc[i, :, col] = blk
    return ap, dc


def discretize_batch(
    mass: np.ndarray,
    stiffness: np.ndarray,
    damping: np.ndarray,
    dt: float,
    wrt: Sequence = (),
    cond_limit: float = 1e8,
) -> Discretized:
    """Exact ZOH discretization of a batch of buildings.

    stiffness and damping are (batch, n_stories); mass is (n_stories,) and
    shared. The continuous system is diagonalized per batch element; rows
    whose eigenvector matrix is badly conditioned (1-norm condition
    estimate above cond_limit) fall back to matrix-exponential formulas.
    """
    mass = np.asarray(mass, dtype=float)
    ks = np.atleast_2d(np.asarray(stiffness, dtype=float))
    cs = np.atleast_2d(np.asarray(damping, dtype=float))
    nb, n = ks.shape
    pats = story_patterns(n)
    minv = 1.0 / mass
    kmat = np.einsum("bs,sij->bij", ks, pats)
    cmat = np.einsum("bs,sij->bij", cs, pats)
    a = np.zeros((nb, 2 * n, 2 * n))
    a[:, :n, n:] = np.eye(n)
    a[:, n:, :n] = -minv[None, :, None] * kmat
    a[:, n:, n:] = -minv[None, :, None] * cmat
    bvec = np.zeros((nb, 2 * n))
    bvec[:, n:] = -1.0
    c_out = a[:, n:, :].copy()

    lam, vec = np.linalg.eig(a)
    vinv = np.linalg.inv(vec)
    cond1 = np.abs(vec).sum(axis=1).max(axis=1) * np.abs(vinv).sum(axis=1).max(axis=1)
    ok = cond1 <= cond_limit

    e = np.exp(lam * dt)
    ad = np.real(np.einsum("bij,bj,bjk->bik", vec, e, vinv))
    aib = np.linalg.solve(a, bvec[:, :, None])[:, :, 0]
    phi = np.linalg.solve(a, ad - np.eye(2 * n))
    bd = np.einsum("bij,bj->bi", phi, bvec)

    f = g = dc = None
    if wrt:
        ap, dc = _param_blocks(mass, wrt)
        den = lam[:, :, None] - lam[:, None, :]
        scale = np.maximum(np.abs(lam).max(axis=1), 1.0)
        close = np.abs(den) < 1e-8 * scale[:, None, None]
        den = np.where(close, 1.0, den)
        num = e[:, :, None] - e[:, None, :]
        lphi = np.where(close, dt * e[:, :, None], num / den)
        w = np.einsum("bij,pjk,bkl->bpil", vinv, ap, vec)
        f = np.real(np.einsum("bij,bpjk,bkl->bpil", vec, w * lphi[:, None], vinv))
        g = np.einsum("bpij,bj->bpi", f, aib) - np.einsum(
            "bij,pjk,bk->bpi", phi, ap, aib
        )

    if not np.all(ok):
        for bidx in np.nonzero(~ok)[0]:
            adb, bdb, fb, gb = _discretize_expm(a[bidx], bvec[bidx], dt, ap if wrt else None)
            ad[bidx] = adb
            bd[bidx] = bdb
            if wrt:
                f[bidx] = fb
                g[bidx] = gb
    return Discretized(ad=ad, bd=bd, c_out=c_out, f=f, g=g, dc_out=dc)


def _discretize_expm(a, bvec, dt, ap):
    """Matrix-exponential fallback for one batch element."""
    m = a.shape[0]
    adb = expm(a * dt)
    phi = np.linalg.solve(a, adb - np.eye(m))
    bdb = phi @ bvec
    if ap is None:
        return adb, bdb, None, None
    aib = np.linalg.solve(a, bvec)
    p = ap.shape[0]
    fb = np.empty((p, m, m))
    gb = np.empty((p, m))
    for i in range(p):
        big = np.zeros((2 * m, 2 * m))
        big[:m, :m] = a
        big[m:, m:] = a
        big[:m, m:] = ap[i]
        fb[i] = expm(big * dt)[:m, m:]
        gb[i] = fb[i] @ aib - phi @ ap[i] @ aib
    return adb, bdb, fb, gb


def run_batch(disc: Discretized, ground: np.ndarray):
    """March the discrete recursions over the ground-motion record.

    Returns total accelerations y with shape (batch, n_floors, n_steps) and,
    when the discretization tracks parameters, sensitivities dy with shape
    (batch, n_params, n_floors, n_steps). Measurement j is the state after
    step j, i.e. at time (j+1) dt.
    """
    ground = np.asarray(ground, dtype=float)
    nt = ground.size
    nb, n, m = disc.c_out.shape
    x = np.zeros((nb, m))
    y = np.empty((nb, n, nt))
    sens = disc.f is not None
    if sens:
        p = disc.f.shape[1]
        xp = np.zeros((nb, p, m))
        dy = np.empty((nb, p, n, nt))
    else:
        dy = None
    for j in range(nt):
        aj = ground[j]
        if sens:
            xp = (
                np.einsum("bij,bpj->bpi", disc.ad, xp)
                + np.einsum("bpij,bj->bpi", disc.f, x)
                + disc.g * aj
            )
        x = np.einsum("bij,bj->bi", disc.ad, x) + disc.bd * aj
        y[:, :, j] = np.einsum("bni,bi->bn", disc.c_out, x)
        if sens:
            dy[:, :, :, j] = np.einsum("bni,bpi->bpn", disc.c_out, xp) + np.einsum(
                "pni,bi->bpn", disc.dc_out, x
            )
    return y, dy


def simulate_accelerations(b: ShearBuilding, d: Dataset) -> np.ndarray:
    """Clean total accelerations at the observed dofs, (n_obs, n_steps)."""
    disc = discretize_batch(b.mass, b.stiffness[None, :], b.damping[None, :], d.dt)
    y, _ = run_batch(disc, d.ground_accel)
    return y[0, list(d.observed_dofs), :]


def simulate_with_sensitivities(b: ShearBuilding, d: Dataset, wrt: Sequence | None = None):
    """Clean response plus its derivative for each tracked parameter.

    wrt is a list of ("k"|"c", story_index) pairs; default is every
    stiffness then every damping parameter. Returns (y, dy) with shapes
    (n_obs, n_steps) and (n_params, n_obs, n_steps).
    """
    if wrt is None:
        wrt = default_parameters(b.n_stories)
    disc = discretize_batch(b.mass, b.stiffness[None, :], b.damping[None, :], d.dt, wrt=wrt)
    y, dy = run_batch(disc, d.ground_accel)
    obs = list(d.observed_dofs)
    return y[0, obs, :], dy[0][:, obs, :]


def generate_dataset(b_nominal: ShearBuilding, cfg: DatasetConfig, rng: np.random.Generator):
    """Synthetic dataset with ground truth drawn near the nominal building.

    Ground motion is i.i.d. zero-mean Gaussian per step. True stiffness and
    damping are nominal times (1 + cov * z) with independent standard
    normal z, redrawn in the vanishingly rare case of a non-positive draw.
    Measurement noise is i.i.d. Gaussian with standard deviation equal to
    the channel-averaged rms of the clean response times noise_ratio.
    """
    steps = cfg.duration / cfg.dt
    nt = int(round(steps))
    if abs(steps - nt) > 1e-9 or nt <= 0:
        raise ValueError("duration must be a positive multiple of dt")
    n = b_nominal.n_stories
    obs = cfg.observed_dofs if cfg.observed_dofs is not None else (0, n - 1)
    obs = tuple(sorted(set(int(i) for i in obs)))

    ground = rng.normal(0.0, cfg.ground_std, nt)

    def perturb(nominal):
        z = rng.standard_normal(n)
        vals = nominal * (1.0 + cfg.perturbation_cov * z)
        while np.any(vals <= 0):
            bad = vals <= 0
            vals[bad] = nominal[bad] * (1.0 + cfg.perturbation_cov * rng.standard_normal(bad.sum()))
        return vals

    k_true = perturb(b_nominal.stiffness)
    c_true = perturb(b_nominal.damping)
    b_true = ShearBuilding(stiffness=k_true, damping=c_true, mass=b_nominal.mass)

    clean_all, _ = run_batch(
        discretize_batch(b_true.mass, k_true[None, :], c_true[None, :], cfg.dt), ground
    )
    clean = clean_all[0, list(obs), :]
    rms = float(np.mean(np.sqrt(np.mean(clean**2, axis=1))))
    noise_std = rms * cfg.noise_ratio
    noisy = clean + rng.normal(0.0, 1.0, clean.shape) * noise_std

    dataset = Dataset(
        ground_accel=ground,
        observed_dofs=obs,
        measurements=noisy,
        dt=cfg.dt,
        noise_ratio=cfg.noise_ratio,
    )
    truth = {
        "stiffness": k_true,
        "damping": c_true,
        "noise_std": noise_std,
        "rms": rms,
    }
    return dataset, truth


def save_dataset(path, dataset: Dataset, truth: dict | None = None) -> None:
    """Write the dataset as CSV plus a key-value sidecar.

    CSV columns: time, ground, y_1..y_No, one row per step. The sidecar
    (<path>.meta.json) carries dt, observed dofs, noise ratio and, when
    given, the ground-truth parameters.
    """
    path = Path(path)
    nt = dataset.n_steps
    time = (np.arange(nt) + 1) * dataset.dt
    cols = [time, dataset.ground_accel] + [dataset.measurements[i] for i in range(dataset.n_obs)]
    header = ",".join(["time", "ground"] + [f"y_{i + 1}" for i in range(dataset.n_obs)])
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=header, comments="")
    meta = {
        "dt": dataset.dt,
        "observed_dofs": list(dataset.observed_dofs),
        "noise_ratio": dataset.noise_ratio,
    }
    if truth is not None:
        meta["truth"] = {
            k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in truth.items()
        }
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=1))


def load_dataset(path):
    """Inverse of save_dataset; returns (Dataset, truth-or-None)."""
    path = Path(path)
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    meta = json.loads(Path(str(path) + ".meta.json").read_text())
    n_obs = raw.shape[1] - 2
    dataset = Dataset(
        ground_accel=raw[:, 1],
        observed_dofs=tuple(meta["observed_dofs"]),
        measurements=raw[:, 2 : 2 + n_obs].T,
        dt=float(meta["dt"]),
        noise_ratio=float(meta["noise_ratio"]),
    )
    truth = meta.get("truth")
    if truth is not None:
        truth = {
            k: (np.asarray(v, dtype=float) if isinstance(v, list) else v)
            for k, v in truth.items()
        }
    return dataset, truth
