"""Loss terms and the weighted composite objective.

Every op accepts torch tensors (and keeps autograd intact) or anything
``torch.as_tensor`` understands, and returns a 0-d tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import torch
from torch import Tensor

from .errors import InvalidConfigError, LossDomainError, ShapeMismatchError

EPS = 1e-7
PHASES = ("D", "EG")


@dataclass(frozen=True)
class LossWeights:
    alpha0: float = 10.0  # reconstruction
    alpha1: float = 0.1  # latent consistency
    alpha2: float = 0.1  # classification
    alpha3: float = 10.0  # cycle

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise InvalidConfigError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    def ablate(self, rec: bool = True, lcl: bool = True, cls: bool = True) -> "LossWeights":
        """Zero out the weights of disabled terms (GAN and cycle always stay)."""
        return replace(
            self,
            alpha0=self.alpha0 if rec else 0.0,
            alpha1=self.alpha1 if lcl else 0.0,
            alpha2=self.alpha2 if cls else 0.0,
        )


@dataclass
class LossBreakdown:
    """Per-term losses for one phase.

    Fields hold 0-d tensors while a step is in flight and plain floats once
    :meth:`detached` has been called.  Terms a phase does not compute are 0.
    """

    phase: str
    gan_x: float | Tensor = 0.0
    gan_y: float | Tensor = 0.0
    rec: float | Tensor = 0.0
    lcl: float | Tensor = 0.0
    cls_real: float | Tensor = 0.0
    cls_fake: float | Tensor = 0.0
    cyc: float | Tensor = 0.0
    composite: float | Tensor = 0.0

    TERMS = ("gan_x", "gan_y", "rec", "lcl", "cls_real", "cls_fake", "cyc")

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")

    def detached(self) -> "LossBreakdown":
        def val(v):
            return float(v.detach()) if isinstance(v, Tensor) else float(v)

        return LossBreakdown(self.phase, **{n: val(getattr(self, n))
                                            for n in (*self.TERMS, "composite")})

    def as_dict(self) -> dict[str, float]:
        d = self.detached()
        return {n: getattr(d, n) for n in (*self.TERMS, "composite")}


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else torch.as_tensor(x, dtype=torch.float64)


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape {tuple(a.shape)} != {tuple(b.shape)}")


def _check_prob(p: Tensor, what: str) -> None:
    # NaN slips through on purpose so the trainer can name the non-finite term
    with torch.no_grad():
        if (p < 0).any() or (p > 1).any():
            raise LossDomainError(f"{what} must lie in [0, 1]")


def gan_loss(real_scores, fake_scores, phase: str) -> Tensor:
    """Binary adversarial loss in minimization form.

    Phase ``"D"``: ``-(mean log real + mean log(1 - fake))``.
    Phase ``"EG"``: non-saturating ``-mean log fake``; ``real_scores`` is ignored
    and may be None.
    """
    fake = _t(fake_scores)
    _check_prob(fake, "fake scores")
    fake = fake.clamp(EPS, 1 - EPS)
    if phase == "EG":
        return -torch.log(fake).mean()
    if phase != "D":
        raise ValueError(f"phase must be one of {PHASES}, got {phase!r}")
    real = _t(real_scores)
    _check_prob(real, "real scores")
    real = real.clamp(EPS, 1 - EPS)
    return -(torch.log(real).mean() + torch.log1p(-fake).mean())


def _distance(a, b, norm: str) -> Tensor:
    a, b = _t(a), _t(b)
    _same_shape(a, b)
    diff = a - b
    if norm == "l1":
        return diff.abs().mean()
    if norm == "l2":
        return (diff * diff).mean()
    raise ValueError(f"norm must be 'l1' or 'l2', got {norm!r}")


def reconstruction_loss(x, x_rec) -> Tensor:
    """Mean squared error over every element."""
    return _distance(x, x_rec, "l2")


def latent_consistency_loss(z, z_roundtrip, norm: str = "l1") -> Tensor:
    return _distance(z, z_roundtrip, norm)


def cycle_consistency_loss(x, x_cycled, norm: str = "l1") -> Tensor:
    return _distance(x, x_cycled, norm)


def classification_loss(posteriors, labels) -> Tensor:
    """Mean negative log posterior of the true label.

    ``posteriors`` is (N, n_domains) on the simplex, ``labels`` N integer ids.
    """
    p = _t(posteriors)
    if p.dim() == 1:
        p = p[None]
    ids = torch.as_tensor(labels, dtype=torch.int64).reshape(-1)
    if ids.numel() == 1 and p.shape[0] > 1:
        ids = ids.expand(p.shape[0])
    if ids.numel() != p.shape[0]:
        raise ShapeMismatchError(f"{ids.numel()} labels for {p.shape[0]} posteriors")
    _check_prob(p, "posteriors")
    picked = p.gather(1, ids[:, None]).squeeze(1)
    return -torch.log(picked.clamp_min(EPS)).mean()


def composite_loss(terms: LossBreakdown, weights: LossWeights):
    """Weighted objective for the phase recorded in ``terms``.

    D: gan_x + gan_y + alpha2 * cls_real.
    EG: gan_x + gan_y + alpha0 rec + alpha1 lcl + alpha2 cls_fake + alpha3 cyc.
    """
    gan = terms.gan_x + terms.gan_y
    if terms.phase == "D":
        return gan + weights.alpha2 * terms.cls_real
    return (gan
            + weights.alpha0 * terms.rec
            + weights.alpha1 * terms.lcl
            + weights.alpha2 * terms.cls_fake
            + weights.alpha3 * terms.cyc)
