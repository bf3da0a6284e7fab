"""Synthetic trials for the three generative models plus divergence ground truths.

Variant ``A``: ``s ~ p(S)``, ``y ~ p(Y)``, ``z|y ~ N(mu_y, I)``, ``x = A_s z + delta_s + eps``.
Variant ``B``: as ``A`` but ``y ~ p(Y|S)``.
Variant ``C``: adds ``w|s ~ N(nu_s, I)`` and ``x = A z + B w + eps`` with shared ``A, B``.

The nuisance label ``s`` enumerates (subject, session) pairs as
``subject * n_sessions + session``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, fields, replace
from typing import Optional

import numpy as np
from scipy.linalg import expm
from scipy.optimize import linprog

from .rng import RngStream

log = logging.getLogger(__name__)

VARIANTS = ("A", "B", "C")


class SpecError(ValueError):
    pass


class SubsampleWarning(UserWarning):
    pass


@dataclass
class TrialBatch:
    """Trials ``(x, y, s)``; ``subject`` and ``session`` are kept for splitting."""

    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    subject: Optional[np.ndarray] = None
    session: Optional[np.ndarray] = None
    n_classes: Optional[int] = None
    n_nuisance: Optional[int] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.s = np.asarray(self.s, dtype=np.int64)
        n = len(self.x)
        if self.y.shape != (n,) or self.s.shape != (n,):
            raise ValueError(
                f"x, y, s must share batch length; got {self.x.shape}, {self.y.shape}, {self.s.shape}")
        if self.subject is None:
            self.subject = self.s.copy()
        if self.session is None:
            self.session = np.zeros(n, dtype=np.int64)
        self.subject = np.asarray(self.subject, dtype=np.int64)
        self.session = np.asarray(self.session, dtype=np.int64)
        if self.n_classes is None:
            self.n_classes = int(self.y.max()) + 1 if n else 0
        if self.n_nuisance is None:
            self.n_nuisance = int(self.s.max()) + 1 if n else 0
        if n and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError(f"task labels outside [0, {self.n_classes})")
        if n and (self.s.min() < 0 or self.s.max() >= self.n_nuisance):
            raise ValueError(f"nuisance labels outside [0, {self.n_nuisance})")

    def __len__(self):
        return len(self.y)

    def take(self, idx) -> "TrialBatch":
        idx = np.asarray(idx)
        return TrialBatch(self.x[idx], self.y[idx], self.s[idx], self.subject[idx],
                          self.session[idx], self.n_classes, self.n_nuisance)

    def select_subjects(self, subjects) -> "TrialBatch":
        mask = np.isin(self.subject, np.asarray(list(subjects), dtype=np.int64))
        return self.take(np.flatnonzero(mask))

    def reindex_nuisance(self) -> "TrialBatch":
        """Relabel ``s`` onto ``0..k-1`` in order of first (sorted) appearance."""
        values, inverse = np.unique(self.s, return_inverse=True)
        return TrialBatch(self.x, self.y, inverse.astype(np.int64), self.subject, self.session,
                          self.n_classes, len(values))

    @staticmethod
    def concat(batches) -> "TrialBatch":
        batches = list(batches)
        return TrialBatch(
            np.concatenate([b.x for b in batches]),
            np.concatenate([b.y for b in batches]),
            np.concatenate([b.s for b in batches]),
            np.concatenate([b.subject for b in batches]),
            np.concatenate([b.session for b in batches]),
            max(b.n_classes for b in batches),
            max(b.n_nuisance for b in batches),
        )


@dataclass
class GenModelSpec:
    """Parameters of a synthetic generative model.

    Arrays left as ``None`` (class means, label tables, subject effects) are
    drawn once from ``structure_seed``, so a spec fully determines the
    population of subjects independently of the sampling stream.
    """

    variant: str = "A"
    n_classes: int = 2
    n_subjects: int = 4
    n_sessions: int = 1
    latent_dim: int = 8
    class_separation: float = 2.0
    class_means: Optional[np.ndarray] = None
    label_prior: Optional[np.ndarray] = None
    label_given_nuisance: Optional[np.ndarray] = None
    nuisance_prior: Optional[np.ndarray] = None
    mixing_strength: float = 0.0
    offset_scale: float = 0.0
    session_scale: float = 0.0
    noise_scale: float = 1.0
    w_dim: int = 4
    nuisance_separation: float = 6.0
    n_times: Optional[int] = None
    structure_seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def n_nuisance(self) -> int:
        return self.n_subjects * self.n_sessions

    @property
    def x_dim(self) -> int:
        return self.latent_dim + (self.w_dim if self.variant == "C" else 0)

    def validate(self):
        if self.variant not in VARIANTS:
            raise SpecError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n_classes < 2 or self.n_subjects < 1 or self.n_sessions < 1:
            raise SpecError("need n_classes >= 2, n_subjects >= 1, n_sessions >= 1")
        if self.latent_dim < 1 or (self.variant == "C" and self.w_dim < 1):
            raise SpecError("latent dimensions must be positive")
        if self.noise_scale < 0 or self.offset_scale < 0 or self.session_scale < 0:
            raise SpecError("noise, offset and session scales must be non-negative")
        if self.n_times is not None and self.n_times < 1:
            raise SpecError("n_times must be positive when given")
        for name, shape in (("label_prior", (self.n_classes,)),
                            ("nuisance_prior", (self.n_nuisance,)),
                            ("label_given_nuisance", (self.n_nuisance, self.n_classes))):
            table = getattr(self, name)
            if table is None:
                continue
            table = np.asarray(table, dtype=np.float64)
            if table.shape != shape:
                raise SpecError(f"{name} must have shape {shape}, got {table.shape}")
            if np.any(table < 0) or not np.allclose(table.sum(axis=-1), 1.0, atol=1e-9):
                raise SpecError(f"{name} rows must be probability vectors")
            setattr(self, name, table)
        if self.class_means is not None:
            means = np.asarray(self.class_means, dtype=np.float64)
            if means.shape != (self.n_classes, self.latent_dim):
                raise SpecError(f"class_means must be ({self.n_classes}, {self.latent_dim})")
            self.class_means = means

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "GenModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown generative-model keys: {sorted(unknown)}")
        kw = {k: (np.asarray(v, dtype=np.float64) if isinstance(v, list) else v)
              for k, v in d.items()}
        return cls(**kw)

    def with_(self, **kw) -> "GenModelSpec":
        return replace(self, **kw)


@dataclass
class Structure:
    """Fixed population parameters drawn from a spec's structure seed."""

    class_means: np.ndarray
    label_prior: np.ndarray
    label_given_nuisance: np.ndarray
    nuisance_prior: np.ndarray
    mixing: np.ndarray  # (|S|, d, d) for A/B; (D, d + w_dim) for C
    offsets: np.ndarray  # (|S|, D)
    nuisance_means: np.ndarray  # (|S|, w_dim) for C, else empty
    waveform: Optional[np.ndarray] = None


def _random_rotation(dim: int, strength: float, rng: RngStream) -> np.ndarray:
    if strength == 0:
        return np.eye(dim)
    g = rng.normal(size=(dim, dim))
    skew = (g - g.T) / np.sqrt(2 * dim)
    return expm(strength * skew)


def build_structure(spec: GenModelSpec) -> Structure:
    rng = RngStream(spec.structure_seed).derive("structure")
    c, d, ns = spec.n_classes, spec.latent_dim, spec.n_nuisance
    if spec.class_means is not None:
        means = spec.class_means
    else:
        dirs = rng.normal(size=(c, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        # binary case: antipodal means at the requested distance
        if c == 2:
            dirs[1] = -dirs[0]
        means = 0.5 * spec.class_separation * dirs
    prior = spec.label_prior if spec.label_prior is not None else np.full(c, 1.0 / c)
    if spec.label_given_nuisance is not None:
        cond = spec.label_given_nuisance
    elif spec.variant == "B":
        cond = rng.generator.dirichlet(np.full(c, 2.0), size=ns)
    else:
        cond = np.tile(prior, (ns, 1))
    s_prior = spec.nuisance_prior if spec.nuisance_prior is not None else np.full(ns, 1.0 / ns)

    if spec.variant == "C":
        dim = d + spec.w_dim
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        mixing = q if spec.mixing_strength else np.eye(dim)
        offsets = np.zeros((ns, dim))
        nu = _spread_means(ns, spec.w_dim, spec.nuisance_separation, rng)
    else:
        subj_rot = [_random_rotation(d, spec.mixing_strength, rng) for _ in range(spec.n_subjects)]
        subj_off = spec.offset_scale * rng.normal(size=(spec.n_subjects, d))
        mixing = np.empty((ns, d, d))
        offsets = np.empty((ns, d))
        for subj in range(spec.n_subjects):
            for sess in range(spec.n_sessions):
                k = subj * spec.n_sessions + sess
                mixing[k] = subj_rot[subj]
                offsets[k] = subj_off[subj] + spec.session_scale * rng.normal(size=d)
        nu = np.zeros((ns, 0))
    waveform = None
    if spec.n_times is not None:
        t = np.arange(spec.n_times)
        centre, width = 0.5 * (spec.n_times - 1), max(spec.n_times / 6.0, 1.0)
        waveform = np.exp(-0.5 * ((t - centre) / width) ** 2)
    return Structure(means, prior, cond, s_prior, mixing, offsets, nu, waveform)


def _spread_means(n: int, dim: int, separation: float, rng: RngStream) -> np.ndarray:
    """``n`` points in ``dim`` dimensions with all pairwise distances >= ``separation``."""
    if n <= dim:
        # scaled orthonormal rows: every pairwise distance equals `separation`
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        return q[:n] * (separation / np.sqrt(2.0))
    side = int(np.ceil(n ** (1.0 / dim)))
    grid = np.stack(np.meshgrid(*[np.arange(side)] * dim, indexing="ij"), -1).reshape(-1, dim)
    return grid[:n].astype(np.float64) * separation


@dataclass
class Generated:
    batch: TrialBatch
    z: np.ndarray
    w: Optional[np.ndarray] = None


def generate(spec: GenModelSpec, n: int, rng: RngStream, *, balanced: bool = False,
             structure: Structure | None = None) -> Generated:
    """Sample ``n`` trials following the factorisation of ``spec.variant``.

    With ``balanced`` the nuisance labels cycle through every value instead of
    being drawn from ``p(S)``.
    """
    if n < 1:
        raise SpecError("n must be >= 1")
    spec.validate()
    st = structure or build_structure(spec)
    ns = spec.n_nuisance
    if balanced:
        s = np.sort(np.arange(n) % ns)
    else:
        s = rng.choice(ns, size=n, p=st.nuisance_prior)
    if spec.variant == "B":
        u = rng.uniform(size=n)
        cdf = np.cumsum(st.label_given_nuisance[s], axis=1)
        y = np.minimum((u[:, None] > cdf).sum(axis=1), spec.n_classes - 1)
    else:
        y = rng.choice(spec.n_classes, size=n, p=st.label_prior)
    z = st.class_means[y] + rng.normal(size=(n, spec.latent_dim))
    w = None
    if spec.variant == "C":
        w = st.nuisance_means[s] + rng.normal(size=(n, spec.w_dim))
        clean = np.concatenate([z, w], axis=1) @ st.mixing.T
    else:
        clean = np.einsum("nij,nj->ni", st.mixing[s], z) + st.offsets[s]
    if st.waveform is None:
        x = clean + spec.noise_scale * rng.normal(size=clean.shape)
    else:
        x = clean[:, :, None] * st.waveform[None, None, :]
        x = x + spec.noise_scale * rng.normal(size=x.shape)
    subject = s // spec.n_sessions
    session = s % spec.n_sessions
    batch = TrialBatch(x, y, s, subject, session, spec.n_classes, ns)
    return Generated(batch, z, w)


# --------------------------------------------------------------------------- #
# ground-truth dependence measures


def gaussian_pair(rho: float, n: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """``n`` draws of a standard bivariate normal with correlation ``rho``."""
    if not abs(rho) < 1:
        raise ValueError("|rho| must be < 1")
    a = rng.normal(size=n)
    b = rho * a + np.sqrt(1 - rho * rho) * rng.normal(size=n)
    return a, b


def closed_form_gaussian_mi(rho: float) -> float:
    if not abs(rho) < 1:
        raise ValueError("|rho| must be < 1")
    return -0.5 * float(np.log1p(-rho * rho)) + 0.0


def exact_discrete_mi(joint) -> float:
    """Mutual information in nats of a 2-D joint probability table."""
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("joint table must be 2-D")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("joint table must be non-negative and sum to 1")
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / (pa @ pb)[nz])))


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return pts[:, None] if pts.ndim == 1 else pts


def brute_force_w1(mu_points, mu_mass, nu_points, nu_mass) -> float:
    """Exact W1 between two discrete distributions under the L1 ground metric.

    Solves the transport linear program over the coupling polytope.
    """
    a, b = _as_points(mu_points), _as_points(nu_points)
    p = np.asarray(mu_mass, dtype=np.float64)
    q = np.asarray(nu_mass, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError("supports live in different dimensions")
    if p.shape != (len(a),) or q.shape != (len(b),):
        raise ValueError("mass vectors must match support sizes")
    if np.any(p < 0) or np.any(q < 0) or abs(p.sum() - 1) > 1e-9 or abs(q.sum() - 1) > 1e-9:
        raise ValueError("masses must be non-negative and sum to 1")
    m, k = len(a), len(b)
    cost = np.abs(a[:, None, :] - b[None, :, :]).sum(axis=2).ravel()
    rows = np.zeros((m, m * k))
    for i in range(m):
        rows[i, i * k:(i + 1) * k] = 1.0
    cols = np.zeros((k, m * k))
    for j in range(k):
        cols[j, j::k] = 1.0
    res = linprog(cost, A_eq=np.vstack([rows, cols]), b_eq=np.concatenate([p, q]),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise ValueError(f"transport LP failed: {res.message}")
    return float(res.fun)


def w1_1d_samples(a, b) -> float:
    """W1 between two equal-size 1-D empirical samples via the sorted coupling."""
    a, b = np.sort(np.asarray(a, dtype=np.float64)), np.sort(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError("samples must have equal size")
    return float(np.abs(a - b).mean())


# --------------------------------------------------------------------------- #
# dataset shaping


def subsample_nontargets(batch: TrialBatch, ratio: int, rng: RngStream,
                         target_label: int = 1) -> TrialBatch:
    """Keep every target and ``ratio`` non-targets per target within each nuisance value."""
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    if batch.n_classes != 2:
        raise ValueError("non-target subsampling needs binary labels")
    keep = []
    for s in np.unique(batch.s):
        idx = np.flatnonzero(batch.s == s)
        targets = idx[batch.y[idx] == target_label]
        others = idx[batch.y[idx] != target_label]
        want = ratio * len(targets)
        if want > len(others):
            msg = (f"nuisance {s}: wanted {want} non-targets, only {len(others)} available; "
                   "keeping all")
            log.warning(msg)
            warnings.warn(msg, SubsampleWarning, stacklevel=2)
            chosen = others
        else:
            chosen = np.sort(rng.choice(others, size=want, replace=False))
        keep.append(targets)
        keep.append(chosen)
    idx = np.concatenate(keep)
    idx = idx[rng.permutation(len(idx))]
    return batch.take(idx)


def subject_split(subjects, n_train: int, n_val: int, n_test: int, fold_id: int,
                  rng: RngStream) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint train/val/test subject sets drawn uniformly for ``fold_id``."""
    pool = np.array(sorted(set(int(s) for s in subjects)), dtype=np.int64)
    if min(n_train, n_val, n_test) < 0:
        raise ValueError("split sizes must be non-negative")
    if n_train + n_val + n_test > len(pool):
        raise ValueError(
            f"need {n_train + n_val + n_test} subjects, only {len(pool)} available")
    order = pool[rng.derive("subject-split", int(fold_id)).permutation(len(pool))]
    train = np.sort(order[:n_train])
    val = np.sort(order[n_train:n_train + n_val])
    test = np.sort(order[n_train + n_val:n_train + n_val + n_test])
    return train, val, test
