"""Multi-objective reward models and their training loop.

Three variants share one interface:

``base``
    one MLP over ``[e; onehot(c)]``.
``multihead``
    a shared trunk ``e -> z_hat`` and one head per objective.
``adversarial``
    multihead plus a classifier that tries to recover ``c`` from
    ``z_hat``; it sits behind a gradient-reversal node so a single
    backward pass trains the classifier while pushing the trunk to
    discard objective information.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from .btl import btl_nll_node, winner_margins
from .worlds import PreferenceDataset, substream

log = logging.getLogger(__name__)

N_OBJECTIVES = 2


class Variant(str, Enum):
    BASE = "base"
    MULTIHEAD = "multihead"
    ADVERSARIAL = "adversarial"


@dataclass(frozen=True)
class RewardModelSpec:
    variant: Variant
    trunk: ad.MlpSpec
    head: ad.MlpSpec | None = None
    adversary: ad.MlpSpec | None = None
    lam: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.variant is Variant.BASE:
            if self.head is not None or self.adversary is not None:
                raise ValueError("the base model has no heads or adversary")
            if self.trunk.widths[-1] != 1:
                raise ValueError("the base model's MLP must output a scalar")
            return
        if self.head is None:
            raise ValueError(f"{self.variant.value} model needs a head spec")
        if self.head.widths[0] != self.trunk.widths[-1]:
            raise ValueError("trunk output width must equal head input width")
        if self.head.widths[-1] != 1:
            raise ValueError("heads must output a scalar")
        if self.variant is Variant.ADVERSARIAL:
            if self.adversary is None:
                raise ValueError("adversarial model needs an adversary spec")
            if self.lam is None:
                raise ValueError("adversarial model needs lambda")
            if self.lam < 0:
                raise ValueError("lambda must be >= 0")
            if self.adversary.widths[0] != self.trunk.widths[-1] or self.adversary.widths[-1] != 1:
                raise ValueError("adversary must map the latent to one logit")

    @property
    def input_dim(self) -> int:
        w = self.trunk.widths[0]
        return w - N_OBJECTIVES if self.variant is Variant.BASE else w

    def to_dict(self) -> dict[str, Any]:
        def mlp(s):
            return None if s is None else {"widths": list(s.widths), "activation": s.activation.value, "seed": s.seed}

        return {
            "variant": self.variant.value,
            "trunk": mlp(self.trunk),
            "head": mlp(self.head),
            "adversary": mlp(self.adversary),
            "lam": self.lam,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RewardModelSpec":
        def mlp(s):
            return None if s is None else ad.MlpSpec(tuple(s["widths"]), s["activation"], s["seed"])

        return cls(Variant(d["variant"]), mlp(d["trunk"]), mlp(d.get("head")),
                   mlp(d.get("adversary")), d.get("lam"))


def build_spec(variant: str | Variant, input_dim: int, hidden: int = 64, latent: int = 16,
               lam: float | None = 1.0, seed: int = 0) -> RewardModelSpec:
    """Standard widths: 3-layer trunk, one-hidden-layer heads and adversary.

    Seeds are derived per component so that the trunk and heads are
    initialised identically across the multihead and adversarial variants.
    """
    variant = Variant(variant)
    seeds = substream(seed, "init").integers(0, 2**63 - 1, size=4)
    if variant is Variant.BASE:
        trunk = ad.MlpSpec((input_dim + N_OBJECTIVES, hidden, hidden, latent, 1), seed=int(seeds[0]))
        return RewardModelSpec(variant, trunk)
    trunk = ad.MlpSpec((input_dim, hidden, hidden, latent), seed=int(seeds[0]))
    head = ad.MlpSpec((latent, hidden, 1), seed=int(seeds[1]))
    if variant is Variant.MULTIHEAD:
        return RewardModelSpec(variant, trunk, head)
    adversary = ad.MlpSpec((latent, hidden, 1), seed=int(seeds[3]))
    return RewardModelSpec(variant, trunk, head, adversary, lam)


def _onehot(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.int64)
    if np.any((c < 0) | (c >= N_OBJECTIVES)):
        raise ValueError(f"objective must be in {{0, 1}}, got {sorted(set(c.tolist()))}")
    out = np.zeros((len(c), N_OBJECTIVES))
    out[np.arange(len(c)), c] = 1.0
    return out


class RewardModel:
    def __init__(self, spec: RewardModelSpec):
        self.spec = spec
        self.trunk = ad.MLP(spec.trunk, name="trunk")
        self.heads: list[ad.MLP] = []
        self.adversary: ad.MLP | None = None
        if spec.variant is not Variant.BASE:
            head_seeds = substream(spec.head.seed, "heads").integers(0, 2**63 - 1, size=N_OBJECTIVES)
            self.heads = [
                ad.MLP(ad.MlpSpec(spec.head.widths, spec.head.activation, int(s)), name=f"head{k}")
                for k, s in enumerate(head_seeds)
            ]
        if spec.variant is Variant.ADVERSARIAL:
            self.adversary = ad.MLP(spec.adversary, name="adversary")

    @property
    def variant(self) -> Variant:
        return self.spec.variant

    def parameters(self) -> list[ad.Node]:
        params = self.trunk.parameters()
        for h in self.heads:
            params += h.parameters()
        if self.adversary is not None:
            params += self.adversary.parameters()
        return params

    def get_weights(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.parameters()]

    def set_weights(self, arrays: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if p.value.shape != np.shape(a):
                raise ValueError(f"shape mismatch for {p.name}: {p.value.shape} vs {np.shape(a)}")
            p.value[...] = a

    # -- forward ----------------------------------------------------------

    def _check_input(self, e: np.ndarray) -> np.ndarray:
        e = np.atleast_2d(np.asarray(e, dtype=np.float64))
        if e.shape[1] != self.spec.input_dim:
            raise ValueError(f"expected embeddings of width {self.spec.input_dim}, got {e.shape[1]}")
        return e

    def latent(self, e) -> ad.Node:
        if self.variant is Variant.BASE:
            raise TypeError("the base model has no separate latent representation")
        return self.trunk(ad.constant(self._check_input(e)))

    def reward_from_latent(self, z_hat: ad.Node, c: np.ndarray) -> ad.Node:
        c = np.asarray(c, dtype=np.int64)
        _onehot(c)  # validates
        out = None
        for k, head in enumerate(self.heads):
            mask = (c == k).astype(np.float64)
            term = ad.mul(ad.column(head(z_hat), 0), mask)
            out = term if out is None else ad.add(out, term)
        return out

    def reward_node(self, e, c) -> ad.Node:
        """Rewards for a batch of embeddings under per-row objectives ``c``."""
        e = self._check_input(e)
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (len(e),))
        if self.variant is Variant.BASE:
            x = np.concatenate([e, _onehot(c)], axis=1)
            return ad.column(self.trunk(ad.constant(x)), 0)
        return self.reward_from_latent(self.latent(e), c)

    def reward(self, e, c) -> np.ndarray:
        return self.reward_node(e, c).value

    # -- losses -----------------------------------------------------------

    def losses(self, e, e_prime, c, ell) -> dict[str, ad.Node]:
        """Graph nodes for the BTL loss and, for the adversarial variant, the adversary loss.

        ``total`` is what the optimiser minimises.  For the adversarial
        model the adversary reads the latent through a gradient-reversal
        node, so ``total = L_R + L_adv`` in value while the trunk receives
        ``dL_R - lam * dL_adv``.
        """
        c = np.asarray(c, dtype=np.int64)
        if self.variant is Variant.BASE:
            diff = ad.sub(self.reward_node(e, c), self.reward_node(e_prime, c))
            nll = btl_nll_node(diff, ell)
            return {"total": nll, "reward": nll}
        z_hat = self.latent(e)
        z_hat_prime = self.latent(e_prime)
        diff = ad.sub(self.reward_from_latent(z_hat, c), self.reward_from_latent(z_hat_prime, c))
        nll = btl_nll_node(diff, ell)
        if self.variant is Variant.MULTIHEAD:
            return {"total": nll, "reward": nll}
        if self.spec.lam is None:
            raise ValueError("lambda unset")
        target = c.astype(np.float64)
        adv = ad.add(
            ad.bce_with_logits(ad.column(self.adversary(ad.grad_reverse(z_hat, self.spec.lam)), 0), target),
            ad.bce_with_logits(ad.column(self.adversary(ad.grad_reverse(z_hat_prime, self.spec.lam)), 0), target),
        )
        return {"total": ad.add(nll, adv), "reward": nll, "adversary": adv}

    def adversary_logits(self, e) -> np.ndarray:
        if self.adversary is None:
            raise TypeError("only the adversarial model has an adversary")
        return self.adversary(self.latent(e)).value[:, 0]

    # -- persistence ------------------------------------------------------

    def save(self, path, extra: dict[str, Any] | None = None) -> None:
        """Binary weights at ``path`` and a JSON sidecar next to it."""
        path = Path(path)
        ad.save_arrays(path, self.get_weights())
        sidecar = {"spec": self.spec.to_dict(), **(extra or {})}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RewardModel":
        path = Path(path)
        sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        model = cls(RewardModelSpec.from_dict(sidecar["spec"]))
        model.set_weights(ad.load_arrays(path))
        return model


def batch_metrics(model: RewardModel, data: PreferenceDataset, chunk: int = 4096) -> tuple[float, float]:
    """Mean BTL NLL and accuracy of ``model`` on ``data``."""
    nll = 0.0
    correct = 0
    for start in range(0, len(data), chunk):
        sl = slice(start, start + chunk)
        d = model.reward(data.e[sl], data.c[sl]) - model.reward(data.e_prime[sl], data.c[sl])
        margins = winner_margins(d, data.ell[sl])
        nll -= float(np.sum(ad.stable_log_sigmoid(margins)))
        correct += int(np.sum((d < 0).astype(np.int64) == data.ell[sl]))
    return nll / len(data), correct / len(data)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-4
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch size must be positive")
        if not self.seeds:
            raise ValueError("at least one seed required")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


REFERENCE_TRAIN_CONFOUNDED = TrainConfig(epochs=10, lr=1e-4, seeds=(0, 1, 2, 3, 4))
REFERENCE_TRAIN_UF = TrainConfig(epochs=10, lr=1e-4, seeds=(0, 1, 2))


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    train_nll: float
    train_accuracy: float
    val_nll: float
    val_accuracy: float


@dataclass
class TrainResult:
    model: RewardModel
    history: list[EpochRecord]
    best_epoch: int
    seed: int

    @property
    def best(self) -> EpochRecord:
        return self.history[self.best_epoch - 1]

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "history": [asdict(h) for h in self.history],
        }


def train(spec: RewardModelSpec, splits: dict[str, PreferenceDataset], cfg: TrainConfig,
          seed: int | None = None) -> TrainResult:
    """Adam on the BTL loss with best-validation-accuracy checkpointing.

    ``seed`` (default: first of ``cfg.seeds``) controls mini-batch order;
    initialisation comes from ``spec``.  Validation ties keep the earlier
    epoch.
    """
    seed = cfg.seeds[0] if seed is None else seed
    train_set = splits.get("train")
    val_set = splits.get("validation")
    if train_set is None or len(train_set) == 0:
        raise ValueError("empty training split")
    if val_set is None or len(val_set) == 0:
        raise ValueError("empty validation split")
    model = RewardModel(spec)
    params = model.parameters()
    state = ad.AdamState(lr=cfg.lr)
    rng = substream(seed, "batches")
    n = len(train_set)
    history: list[EpochRecord] = []
    best_acc = -math.inf
    best_weights = model.get_weights()
    best_epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss = model.losses(train_set.e[idx], train_set.e_prime[idx], train_set.c[idx], train_set.ell[idx])
            value = float(loss["total"].value)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = ad.backward(loss["total"])
            ad.adam_step(state, params, [grads.get(p, np.zeros_like(p.value)) for p in params])
        tr_nll, tr_acc = batch_metrics(model, train_set)
        va_nll, va_acc = batch_metrics(model, val_set)
        if not (math.isfinite(tr_nll) and math.isfinite(va_nll)):
            raise TrainingDiverged(f"non-finite evaluation loss after epoch {epoch}")
        history.append(EpochRecord(epoch, tr_nll, tr_acc, va_nll, va_acc))
        log.debug("epoch %d train_acc=%.4f val_acc=%.4f", epoch, tr_acc, va_acc)
        if va_acc > best_acc:
            best_acc = va_acc
            best_weights = model.get_weights()
            best_epoch = epoch
    model.set_weights(best_weights)
    return TrainResult(model=model, history=history, best_epoch=best_epoch, seed=seed)
