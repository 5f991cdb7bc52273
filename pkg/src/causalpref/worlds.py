"""Synthetic preference worlds with fully known latent factors.

Two generators stand in for the real corpora:

* :func:`sample_ultrafeedback_world` - two response-level scores in
  [0, 5] whose correlation is controlled, one fixed linear reward.
* :func:`sample_confounded_world` - two objectives (helpful / harmless)
  and a prompt type that agrees with the objective with probability
  ``rho_conf``.

Embeddings are produced by a fixed random map so that models have to
recover the latents from ``e`` and can latch onto the prompt type.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

SCORE_LOW, SCORE_HIGH = 0.0, 5.0
UF_CENTER, UF_SCALE = 2.5, 1.25


def substream(seed: int, *names: str | int) -> np.random.Generator:
    """Independent generator for a named purpose under a root seed."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for name in names:
        words.append(zlib.crc32(str(name).encode()) if isinstance(name, str) else int(name))
    return np.random.default_rng(np.random.SeedSequence(words))


# ---------------------------------------------------------------------------
# records


@dataclass
class PreferenceExample:
    id: str
    e: np.ndarray
    e_prime: np.ndarray
    c: int
    t: int
    ell: int
    z: np.ndarray | None = None
    z_prime: np.ndarray | None = None


def _rows(values, n: int) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if n == 0 and arr.ndim == 2:
        return arr.reshape(0, arr.shape[1])
    return arr.reshape(n, -1)


@dataclass
class PreferenceDataset:
    """Column-oriented collection of comparisons.

    ``ell = 0`` when the first response is preferred.  ``z``/``z_prime``
    are ground truth and are ``None`` for imported embeddings.
    """

    ids: list[str]
    e: np.ndarray
    e_prime: np.ndarray
    c: np.ndarray
    t: np.ndarray
    ell: np.ndarray
    z: np.ndarray | None = None
    z_prime: np.ndarray | None = None
    header: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.ids)
        self.e = _rows(self.e, n)
        self.e_prime = _rows(self.e_prime, n)
        self.c = np.asarray(self.c, dtype=np.int64).reshape(n)
        self.t = np.asarray(self.t, dtype=np.int64).reshape(n)
        self.ell = np.asarray(self.ell, dtype=np.int64).reshape(n)
        if self.e.shape != self.e_prime.shape:
            raise ValueError("e and e_prime differ in shape")
        if not np.all((self.ell == 0) | (self.ell == 1)):
            raise ValueError("labels must be 0 or 1")
        if self.z is not None:
            self.z = _rows(self.z, n)
            self.z_prime = _rows(self.z_prime, n)

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> PreferenceExample:
        return PreferenceExample(
            id=self.ids[i],
            e=self.e[i],
            e_prime=self.e_prime[i],
            c=int(self.c[i]),
            t=int(self.t[i]),
            ell=int(self.ell[i]),
            z=None if self.z is None else self.z[i],
            z_prime=None if self.z_prime is None else self.z_prime[i],
        )

    def __iter__(self) -> Iterator[PreferenceExample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def dim(self) -> int:
        return self.e.shape[1]

    @property
    def has_latents(self) -> bool:
        return self.z is not None

    def subset(self, index) -> "PreferenceDataset":
        index = np.asarray(index, dtype=np.int64)
        return PreferenceDataset(
            ids=[self.ids[i] for i in index],
            e=self.e[index],
            e_prime=self.e_prime[index],
            c=self.c[index],
            t=self.t[index],
            ell=self.ell[index],
            z=None if self.z is None else self.z[index],
            z_prime=None if self.z_prime is None else self.z_prime[index],
            header=dict(self.header),
        )

    def swapped(self) -> "PreferenceDataset":
        """Same comparisons with the two responses exchanged and labels flipped."""
        return PreferenceDataset(
            ids=list(self.ids),
            e=self.e_prime.copy(),
            e_prime=self.e.copy(),
            c=self.c.copy(),
            t=self.t.copy(),
            ell=1 - self.ell,
            z=None if self.z is None else self.z_prime.copy(),
            z_prime=None if self.z is None else self.z.copy(),
            header=dict(self.header),
        )


def concat_datasets(parts: Sequence[PreferenceDataset]) -> PreferenceDataset:
    has_z = all(p.z is not None for p in parts)
    return PreferenceDataset(
        ids=[i for p in parts for i in p.ids],
        e=np.concatenate([p.e for p in parts]),
        e_prime=np.concatenate([p.e_prime for p in parts]),
        c=np.concatenate([p.c for p in parts]),
        t=np.concatenate([p.t for p in parts]),
        ell=np.concatenate([p.ell for p in parts]),
        z=np.concatenate([p.z for p in parts]) if has_z else None,
        z_prime=np.concatenate([p.z_prime for p in parts]) if has_z else None,
        header=dict(parts[0].header) if parts else {},
    )


# ---------------------------------------------------------------------------
# labels


def assign_label(r: float, r_prime: float, rng: np.random.Generator) -> int:
    """0 if the first reward is larger, 1 if smaller, a fair coin on ties."""
    if not (math.isfinite(r) and math.isfinite(r_prime)):
        raise ValueError("rewards must be finite")
    if r > r_prime:
        return 0
    if r < r_prime:
        return 1
    return int(rng.integers(0, 2))


def assign_labels(r: np.ndarray, r_prime: np.ndarray, rng: np.random.Generator,
                  btl_noise: bool = False) -> np.ndarray:
    """Vectorised :func:`assign_label`; with ``btl_noise`` draws from the BTL model instead."""
    r = np.asarray(r, dtype=np.float64)
    r_prime = np.asarray(r_prime, dtype=np.float64)
    coins = rng.integers(0, 2, size=r.shape)
    if btl_noise:
        u = rng.random(r.shape)
        p_first = 1.0 / (1.0 + np.exp(-(r - r_prime)))
        return np.where(u < p_first, 0, 1).astype(np.int64)
    return np.where(r > r_prime, 0, np.where(r < r_prime, 1, coins)).astype(np.int64)


# ---------------------------------------------------------------------------
# embeddings


@dataclass(frozen=True)
class EmbeddingConfig:
    dim: int = 64
    n_nuisance: int = 8
    type_gain: float = 2.0
    noise: float = 0.1


class EmbeddingMap:
    """``e = tanh(A [z_std; gain * onehot(t); eta]) + eps`` with a fixed seeded ``A``."""

    def __init__(self, n_latent: int, n_types: int, cfg: EmbeddingConfig, seed: int,
                 center: np.ndarray | float = 0.0, scale: np.ndarray | float = 1.0):
        if cfg.dim <= 0:
            raise ValueError("embedding dimension must be positive")
        if cfg.noise < 0:
            raise ValueError("embedding noise must be >= 0")
        self.n_latent = n_latent
        self.n_types = n_types
        self.cfg = cfg
        self.center = np.broadcast_to(np.asarray(center, dtype=np.float64), (n_latent,))
        self.scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (n_latent,))
        n_in = n_latent + n_types + cfg.n_nuisance
        rng = substream(seed, "embedding-map")
        self.A = rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(cfg.dim, n_in))

    def embed(self, z: np.ndarray, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        t = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if z.shape[1] != self.n_latent:
            raise ValueError(f"expected {self.n_latent} latent coordinates, got {z.shape[1]}")
        if len(t) != len(z):
            raise ValueError("one type per latent row required")
        if np.any((t < 0) | (t >= self.n_types)):
            raise ValueError("prompt type out of range")
        n = len(z)
        onehot = np.zeros((n, self.n_types))
        onehot[np.arange(n), t] = self.cfg.type_gain
        eta = rng.standard_normal((n, self.cfg.n_nuisance))
        u = np.concatenate([(z - self.center) / self.scale, onehot, eta], axis=1)
        e = np.tanh(u @ self.A.T)
        if self.cfg.noise > 0:
            e = e + self.cfg.noise * rng.standard_normal(e.shape)
        return e


def synth_embedding(emap: EmbeddingMap, z, t: int, seed: int) -> np.ndarray:
    """Embedding of a single response; deterministic in ``(z, t, seed)``."""
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    return emap.embed(z, np.array([t]), np.random.default_rng(seed))[0]


# ---------------------------------------------------------------------------
# UltraFeedback-style world


def _clipped_scores(u: np.ndarray) -> np.ndarray:
    return np.clip(UF_CENTER + UF_SCALE * u, SCORE_LOW, SCORE_HIGH)


@lru_cache(maxsize=64)
def copula_parameter(rho_target: float, n_mc: int = 400_000) -> float:
    """Copula correlation whose clipped scores attain ``rho_target``.

    Solved by bisection on a fixed common-random-number sample, so the
    answer is deterministic.
    """
    rng = substream(0, "copula-calibration")
    a = rng.standard_normal(n_mc)
    b = rng.standard_normal(n_mc)
    z1 = _clipped_scores(a)

    def attained(q: float) -> float:
        z2 = _clipped_scores(q * a + math.sqrt(max(0.0, 1.0 - q * q)) * b)
        return float(np.corrcoef(z1, z2)[0, 1])

    lo, hi = -1.0, 1.0
    if not attained(lo) <= rho_target <= attained(hi):
        raise ValueError(
            f"correlation {rho_target} unattainable with scores clipped to "
            f"[{SCORE_LOW}, {SCORE_HIGH}]: range is [{attained(lo):.4f}, {attained(hi):.4f}]"
        )
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if attained(mid) < rho_target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def uf_reward(z: np.ndarray, alpha: float) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return alpha * z[..., 0] + (1.0 - alpha) * z[..., 1]


@dataclass(frozen=True)
class UltraFeedbackWorld:
    alpha: float = 0.25
    embedding: EmbeddingConfig = EmbeddingConfig()
    btl_noise: bool = False
    seed: int = 0

    def embedding_map(self) -> EmbeddingMap:
        return EmbeddingMap(2, 1, self.embedding, self.seed, center=UF_CENTER, scale=UF_SCALE)

    def reward(self, z: np.ndarray, c=None) -> np.ndarray:
        return uf_reward(z, self.alpha)


def sample_uf_scores(n: int, rho_target: float, rng: np.random.Generator) -> np.ndarray:
    q = copula_parameter(round(float(rho_target), 12))
    a = rng.standard_normal(n)
    b = rng.standard_normal(n)
    return np.stack([_clipped_scores(a), _clipped_scores(q * a + math.sqrt(1 - q * q) * b)], axis=1)


def sample_ultrafeedback_world(n: int, rho_target: float, alpha: float = 0.25, seed: int = 0,
                               world: UltraFeedbackWorld | None = None,
                               stream: str = "examples") -> PreferenceDataset:
    """Comparisons whose score differences have correlation ``rho_target``.

    ``world.seed`` fixes the embedding map; ``seed`` and ``stream`` fix the
    examples, so train / validation / test sets drawn from one world share
    the map but not the draws.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if not -0.95 <= rho_target <= 0.95:
        raise ValueError(f"rho_target must lie in [-0.95, 0.95], got {rho_target}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    world = replace(world, alpha=alpha) if world is not None else UltraFeedbackWorld(alpha=alpha, seed=seed)
    rng = substream(seed, stream, f"rho={rho_target!r}")
    z = sample_uf_scores(n, rho_target, rng)
    z_prime = sample_uf_scores(n, rho_target, rng)
    ell = assign_labels(world.reward(z), world.reward(z_prime), rng, world.btl_noise)
    emap = world.embedding_map()
    zeros = np.zeros(n, dtype=np.int64)
    e = emap.embed(z, zeros, rng)
    e_prime = emap.embed(z_prime, zeros, rng)
    header = {
        "world": "ultrafeedback",
        "alpha": alpha,
        "rho_target": rho_target,
        "embedding": asdict(world.embedding),
        "btl_noise": world.btl_noise,
        "world_seed": world.seed,
        "seed": seed,
        "stream": stream,
    }
    return PreferenceDataset(
        ids=[f"{stream}-{i}" for i in range(n)],
        e=e, e_prime=e_prime, c=zeros, t=zeros, ell=ell, z=z, z_prime=z_prime, header=header,
    )


# ---------------------------------------------------------------------------
# confounded world (helpful / harmless)


@dataclass(frozen=True)
class ConfoundedWorld:
    """Latents per response are ``(z_help, z_harm)``.

    Prompt type 0 is "helpful", type 1 "harmless"; the factor matching the
    prompt type has scale ``sigma_aligned``, the other ``sigma_off``.
    Objective ``c`` scores with ``r_c = z[c]``.
    """

    latent_corr: float = -0.5
    sigma_aligned: float = 1.0
    sigma_off: float = 0.2
    embedding: EmbeddingConfig = EmbeddingConfig()
    btl_noise: bool = False
    seed: int = 0

    def embedding_map(self) -> EmbeddingMap:
        return EmbeddingMap(2, 2, self.embedding, self.seed)

    def reward(self, z: np.ndarray, c) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        c = np.asarray(c, dtype=np.int64)
        return np.where(c == 0, z[..., 0], z[..., 1])

    def sample_latents(self, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = len(t)
        a = rng.standard_normal(n)
        b = rng.standard_normal(n)
        q = self.latent_corr
        u = np.stack([a, q * a + math.sqrt(1 - q * q) * b], axis=1)
        scales = np.where(
            (t == 0)[:, None],
            np.array([self.sigma_aligned, self.sigma_off]),
            np.array([self.sigma_off, self.sigma_aligned]),
        )
        return u * scales


def balanced_objectives(n: int, rng: np.random.Generator) -> np.ndarray:
    c = np.zeros(n, dtype=np.int64)
    c[n // 2:] = 1
    rng.shuffle(c)
    return c


def sample_confounded_world(n: int, rho_conf: float, seed: int = 0,
                            world: ConfoundedWorld | None = None,
                            stream: str = "examples") -> PreferenceDataset:
    """Objective-balanced comparisons with ``P(t = c) = rho_conf``."""
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0.5 <= rho_conf <= 1.0:
        raise ValueError(f"rho_conf must lie in [0.5, 1.0], got {rho_conf}")
    world = world if world is not None else ConfoundedWorld(seed=seed)
    rng = substream(seed, stream, f"rho={rho_conf!r}")
    c = balanced_objectives(n, rng)
    agree = rng.random(n) < rho_conf
    t = np.where(agree, c, 1 - c)
    z = world.sample_latents(t, rng)
    z_prime = world.sample_latents(t, rng)
    ell = assign_labels(world.reward(z, c), world.reward(z_prime, c), rng, world.btl_noise)
    emap = world.embedding_map()
    e = emap.embed(z, t, rng)
    e_prime = emap.embed(z_prime, t, rng)
    header = {
        "world": "confounded",
        "rho_conf": rho_conf,
        "latent_corr": world.latent_corr,
        "sigma_aligned": world.sigma_aligned,
        "sigma_off": world.sigma_off,
        "embedding": asdict(world.embedding),
        "btl_noise": world.btl_noise,
        "world_seed": world.seed,
        "seed": seed,
        "stream": stream,
    }
    return PreferenceDataset(
        ids=[f"{stream}-{i}" for i in range(n)],
        e=e, e_prime=e_prime, c=c, t=t, ell=ell, z=z, z_prime=z_prime, header=header,
    )


# ---------------------------------------------------------------------------
# non-additive prompt effects


def nonadditive_reward(z_x, z_t, beta0: float, beta1: float, gamma0: float, gamma1: float):
    """Quadratic reward whose optimum depends on the prompt kind ``z_x``."""
    z_x = np.asarray(z_x)
    z_t = np.asarray(z_t, dtype=np.float64)
    return np.where(z_x == 0, beta0 * (z_t - gamma0) ** 2, beta1 * (z_t - gamma1) ** 2)


def nonadditive_world(n: int, beta0: float, beta1: float, gamma0: float, gamma1: float,
                      seed: int = 0) -> PreferenceDataset:
    """Binary prompt kind shared by both responses, response-level ``z_t ~ U[0, 1]``.

    Embeddings are the raw latent features ``[z_x, z_t]``.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if not gamma0 > gamma1:
        raise ValueError(f"need gamma0 > gamma1, got {gamma0} <= {gamma1}")
    rng = substream(seed, "nonadditive")
    z_x = rng.integers(0, 2, size=n)
    z_t = rng.random(n)
    z_t_prime = rng.random(n)
    r = nonadditive_reward(z_x, z_t, beta0, beta1, gamma0, gamma1)
    r_prime = nonadditive_reward(z_x, z_t_prime, beta0, beta1, gamma0, gamma1)
    ell = assign_labels(r, r_prime, rng)
    z = np.stack([z_x, z_t], axis=1).astype(np.float64)
    z_prime = np.stack([z_x, z_t_prime], axis=1).astype(np.float64)
    header = {"world": "nonadditive", "beta": [beta0, beta1], "gamma": [gamma0, gamma1], "seed": seed}
    return PreferenceDataset(
        ids=[f"na-{i}" for i in range(n)], e=z.copy(), e_prime=z_prime.copy(),
        c=np.zeros(n), t=z_x, ell=ell, z=z, z_prime=z_prime, header=header,
    )


# ---------------------------------------------------------------------------
# splits


REFERENCE_SPLITS = {"train": 30_000, "validation": 6_000}
DESK_SPLITS = {"train": 10_000, "validation": 2_000, "test": 10_000}


def make_splits(dataset: PreferenceDataset, fractions: Sequence[float], seed: int = 0
                ) -> dict[str, PreferenceDataset]:
    """Disjoint train / validation / test partition, deterministic in ``seed``."""
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"need three non-negative fractions summing to 1, got {fractions}")
    n = len(dataset)
    perm = substream(seed, "splits").permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return {
        "train": dataset.subset(np.sort(perm[:n_train])),
        "validation": dataset.subset(np.sort(perm[n_train:n_train + n_val])),
        "test": dataset.subset(np.sort(perm[n_train + n_val:])),
    }


# ---------------------------------------------------------------------------
# file format


def save_dataset(dataset: PreferenceDataset, path) -> None:
    """One JSON object per line; the first line is ``{"header": ...}``."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"header": dataset.header}, sort_keys=True) + "\n")
        for ex in dataset:
            rec = {
                "id": ex.id,
                "e": ex.e.tolist(),
                "e_prime": ex.e_prime.tolist(),
                "c": ex.c,
                "t": ex.t,
                "ell": ex.ell,
            }
            if ex.z is not None:
                rec["z"] = ex.z.tolist()
                rec["z_prime"] = ex.z_prime.tolist()
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path) -> PreferenceDataset:
    """Read the JSONL format; records without ``z`` fields load as imported data."""
    header: dict[str, Any] = {}
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if lineno == 1 and "header" in obj:
                header = obj["header"]
                continue
            for key in ("id", "e", "e_prime", "c", "ell"):
                if key not in obj:
                    raise ValueError(f"{path}:{lineno}: missing field {key!r}")
            records.append(obj)
    if not records:
        raise ValueError(f"{path}: no records")
    with_z = ["z" in r for r in records]
    if any(with_z) and not all(with_z):
        raise ValueError(f"{path}: latent fields present on some records only")
    has_z = all(with_z)
    if not has_z:
        header = {**header, "imported": True}
    return PreferenceDataset(
        ids=[str(r["id"]) for r in records],
        e=np.array([r["e"] for r in records], dtype=np.float64),
        e_prime=np.array([r["e_prime"] for r in records], dtype=np.float64),
        c=np.array([r["c"] for r in records]),
        t=np.array([r.get("t", 0) for r in records]),
        ell=np.array([r["ell"] for r in records]),
        z=np.array([r["z"] for r in records]) if has_z else None,
        z_prime=np.array([r["z_prime"] for r in records]) if has_z else None,
        header=header,
    )
