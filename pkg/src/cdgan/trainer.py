"""Cross-domain alternating training.

Every iteration draws an ordered pair of distinct domains, assigns the first
to the X tower and the second to the Y tower, then takes one ADAM step on
the discriminators followed by one ADAM step on the encoders and generators.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch
from torch import Tensor

from .data import DomainSampler, MultiDomainDataset, sample_batch
from .errors import InvalidConfigError, InvalidLabelError, NonFiniteError
from .losses import (
    LossBreakdown,
    LossWeights,
    classification_loss,
    composite_loss,
    cycle_consistency_loss,
    gan_loss,
    latent_consistency_loss,
    reconstruction_loss,
)
from .model import CDGAN, ModelConfig, build_model, label_ids

log = logging.getLogger(__name__)

METRICS_HEADER = ["iteration", "gan_x", "gan_y", "rec", "lcl", "cls_real", "cls_fake",
                  "cyc", "composite_d", "composite_eg"]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_per_domain: int = 1
    max_iterations: int = 2000
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 500
    log_every: int = 50
    latent_norm: str = "l1"
    cycle_norm: str = "l1"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise InvalidConfigError(
                f"learning_rate must be >= 0, got {self.learning_rate}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        if self.adam_eps <= 0:
            raise InvalidConfigError("adam_eps must be > 0")
        for name in ("batch_per_domain", "checkpoint_every", "log_every"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be a positive integer")
        if self.max_iterations < 0:
            raise InvalidConfigError("max_iterations must be >= 0")
        for name in ("latent_norm", "cycle_norm"):
            if getattr(self, name) not in ("l1", "l2"):
                raise InvalidConfigError(f"{name} must be 'l1' or 'l2'")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["weights"] = {f.name: getattr(self.weights, f.name) for f in fields(self.weights)}
        return d


class AdamMoments(NamedTuple):
    m: Tensor
    v: Tensor
    step: int

    @classmethod
    def zeros_like(cls, param: Tensor) -> "AdamMoments":
        return cls(torch.zeros_like(param), torch.zeros_like(param), 0)


def adam_update(param: Tensor, grad: Tensor, moments: AdamMoments,
                config: TrainConfig) -> tuple[Tensor, AdamMoments]:
    """One bias-corrected ADAM step.  Pure: inputs are not modified."""
    if param.shape != grad.shape:
        raise InvalidConfigError(f"param {tuple(param.shape)} vs grad {tuple(grad.shape)}")
    if not torch.isfinite(grad).all():
        raise NonFiniteError("gradient")
    b1, b2 = config.adam_beta1, config.adam_beta2
    step = moments.step + 1
    m = b1 * moments.m + (1 - b1) * grad
    v = b2 * moments.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    new = param - config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps)
    return new, AdamMoments(m, v, step)


def sample_domain_pair(n_domains: int, rng: np.random.Generator) -> tuple[int, int]:
    """Uniform draw over the n*(n-1) ordered pairs of distinct domains."""
    if n_domains < 2:
        raise InvalidConfigError(f"need >= 2 domains to draw a pair, got {n_domains}")
    a = int(rng.integers(n_domains))
    b = int(rng.integers(n_domains - 1))
    return a, b + (b >= a)


@dataclass
class TrainState:
    params: CDGAN
    optimizer_moments: dict[str, AdamMoments]
    iteration: int
    pair_rng: np.random.Generator
    sampler: DomainSampler | None
    loss_history: list[tuple[int, LossBreakdown, LossBreakdown]] = field(default_factory=list)
    domains: list[str] = field(default_factory=list)

    @property
    def rng_state(self) -> dict:
        return {
            "pair_rng": self.pair_rng.bit_generator.state,
            "sampler": None if self.sampler is None else self.sampler.state_dict(),
        }


def _seed_streams(seed: int) -> tuple[np.random.Generator, int]:
    pair_seq, sampler_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(pair_seq), int(sampler_seq.generate_state(1)[0])


def init_state(model_config: ModelConfig, config: TrainConfig,
               data: MultiDomainDataset | None = None) -> TrainState:
    model = build_model(model_config)
    pair_rng, sampler_seed = _seed_streams(config.seed)
    sampler = DomainSampler(data, sampler_seed) if data is not None else None
    moments = {name: AdamMoments.zeros_like(p.detach()) for name, p in model.named_parameters()}
    return TrainState(model, moments, 0, pair_rng, sampler,
                      domains=list(data.domains) if data is not None else [])


def _check_finite(terms: LossBreakdown) -> None:
    for name in (*LossBreakdown.TERMS, "composite"):
        v = getattr(terms, name)
        if isinstance(v, Tensor) and not torch.isfinite(v).all():
            raise NonFiniteError(name, f"{terms.phase}-phase loss term {name!r} is not finite")


def d_phase_losses(model: CDGAN, x, lx, y, ly, weights: LossWeights) -> LossBreakdown:
    """Discriminator objective; the fakes are computed without gradient."""
    with torch.no_grad():
        x_fake = model.generator_x(model.encoder_y(y), _onehot(model, lx))
        y_fake = model.generator_y(model.encoder_x(x), _onehot(model, ly))
    dx_real, dx_fake = model.discriminator_x(x), model.discriminator_x(x_fake)
    dy_real, dy_fake = model.discriminator_y(y), model.discriminator_y(y_fake)
    terms = LossBreakdown(
        "D",
        gan_x=gan_loss(dx_real.realness, dx_fake.realness, "D"),
        gan_y=gan_loss(dy_real.realness, dy_fake.realness, "D"),
        cls_real=(classification_loss(dx_real.class_posterior, lx)
                  + classification_loss(dy_real.class_posterior, ly)),
    )
    terms.composite = composite_loss(terms, weights)
    return terms


def eg_phase_losses(model: CDGAN, x, lx, y, ly, weights: LossWeights,
                    latent_norm: str = "l1", cycle_norm: str = "l1") -> LossBreakdown:
    """Encoder/generator objective with the discriminators held fixed."""
    ohx, ohy = _onehot(model, lx), _onehot(model, ly)
    z_x, z_y = model.encoder_x(x), model.encoder_y(y)
    y_fake = model.generator_y(z_x, ohy)
    x_fake = model.generator_x(z_y, ohx)
    x_rec = model.generator_x(z_x, ohx)
    y_rec = model.generator_y(z_y, ohy)
    z_y_fake, z_x_fake = model.encoder_y(y_fake), model.encoder_x(x_fake)
    x_cyc = model.generator_x(z_y_fake, ohx)
    y_cyc = model.generator_y(z_x_fake, ohy)
    dx_fake, dy_fake = model.discriminator_x(x_fake), model.discriminator_y(y_fake)
    terms = LossBreakdown(
        "EG",
        gan_x=gan_loss(None, dx_fake.realness, "EG"),
        gan_y=gan_loss(None, dy_fake.realness, "EG"),
        rec=reconstruction_loss(x, x_rec) + reconstruction_loss(y, y_rec),
        lcl=(latent_consistency_loss(z_x, z_y_fake, latent_norm)
             + latent_consistency_loss(z_y, z_x_fake, latent_norm)),
        cls_fake=(classification_loss(dx_fake.class_posterior, lx)
                  + classification_loss(dy_fake.class_posterior, ly)),
        cyc=cycle_consistency_loss(x, x_cyc, cycle_norm) + cycle_consistency_loss(y, y_cyc, cycle_norm),
    )
    terms.composite = composite_loss(terms, weights)
    return terms


def _onehot(model: CDGAN, ids: Tensor) -> Tensor:
    return torch.nn.functional.one_hot(ids, model.config.n_domains).to(
        next(model.parameters()).dtype)


def _apply_adam(state: TrainState, named: list[tuple[str, Tensor]], loss: Tensor,
                config: TrainConfig) -> None:
    grads = torch.autograd.grad(loss, [p for _, p in named])
    with torch.no_grad():
        for (name, p), g in zip(named, grads):
            try:
                new, state.optimizer_moments[name] = adam_update(
                    p, g, state.optimizer_moments[name], config)
            except NonFiniteError as exc:
                raise NonFiniteError(name, f"non-finite gradient for parameter {name}") from exc
            p.copy_(new)


def _phase_named_params(model: CDGAN) -> tuple[list, list]:
    d_ids = {id(p) for p in model.d_parameters()}
    d, eg = [], []
    for name, p in model.named_parameters():
        (d if id(p) in d_ids else eg).append((name, p))
    return d, eg


def train_step(state: TrainState, batch_a, batch_b, config: TrainConfig
               ) -> tuple[TrainState, LossBreakdown, LossBreakdown]:
    """One D update then one E/G update on the (X, Y) batches.

    ``batch_a`` and ``batch_b`` are ``(images, label_ids)`` pairs.  The state is
    updated in place and also returned.
    """
    model = state.params
    x, lx = batch_a
    y, ly = batch_b
    n_d = model.config.n_domains
    lx = label_ids(lx, x.shape[0], n_d)
    ly = label_ids(ly, y.shape[0], n_d)
    if (lx == ly).any():
        raise InvalidLabelError("the two batches must come from distinct domains")
    dtype = next(model.parameters()).dtype
    x, y = x.to(dtype), y.to(dtype)
    d_named, eg_named = _phase_named_params(model)

    d_terms = d_phase_losses(model, x, lx, y, ly, config.weights)
    _check_finite(d_terms)
    _apply_adam(state, d_named, d_terms.composite, config)

    eg_terms = eg_phase_losses(model, x, lx, y, ly, config.weights,
                               config.latent_norm, config.cycle_norm)
    _check_finite(eg_terms)
    _apply_adam(state, eg_named, eg_terms.composite, config)

    state.iteration += 1
    d_terms, eg_terms = d_terms.detached(), eg_terms.detached()
    state.loss_history.append((state.iteration, d_terms, eg_terms))
    return state, d_terms, eg_terms


def metrics_row(iteration: int, d: LossBreakdown, eg: LossBreakdown) -> list:
    return [iteration, eg.gan_x, eg.gan_y, eg.rec, eg.lcl, d.cls_real, eg.cls_fake, eg.cyc,
            d.composite, eg.composite]


def train(config: TrainConfig, data: MultiDomainDataset, model_config: ModelConfig,
          state: TrainState | None = None, out_dir: str | Path | None = None,
          on_iteration: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run training up to ``config.max_iterations`` total iterations.

    Passing ``state`` resumes from it.  With ``out_dir`` set, metrics are
    appended to ``metrics.csv`` every ``log_every`` iterations and checkpoints
    written to ``checkpoints/`` every ``checkpoint_every`` iterations and at
    the end.
    """
    from .checkpoint import save_checkpoint

    if model_config.n_domains != data.n_domains:
        raise InvalidConfigError(
            f"model has {model_config.n_domains} domains, dataset has {data.n_domains}")
    for d, imgs in enumerate(data.train):
        if len(imgs) < config.batch_per_domain:
            raise InvalidConfigError(
                f"domain {data.domains[d]!r} has {len(imgs)} training images, "
                f"fewer than batch_per_domain={config.batch_per_domain}")
    if state is None:
        state = init_state(model_config, config, data)
    elif state.sampler is None:
        state.sampler = DomainSampler(data, _seed_streams(config.seed)[1])

    writer = None
    ckpt_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.csv"
        fresh = state.iteration == 0 or not metrics_path.exists()
        fh = open(metrics_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(METRICS_HEADER)
    try:
        while state.iteration < config.max_iterations:
            a, b = sample_domain_pair(data.n_domains, state.pair_rng)
            batch_a = sample_batch(data, a, config.batch_per_domain, state.sampler)
            batch_b = sample_batch(data, b, config.batch_per_domain, state.sampler)
            _, d_terms, eg_terms = train_step(state, batch_a, batch_b, config)
            it = state.iteration
            if it % config.log_every == 0:
                log.info("iter %d  D %.4f  EG %.4f", it, d_terms.composite, eg_terms.composite)
                if writer is not None:
                    writer.writerow(metrics_row(it, d_terms, eg_terms))
                    fh.flush()
            if ckpt_dir is not None and it % config.checkpoint_every == 0:
                save_checkpoint(ckpt_dir / f"iter_{it:06d}.npz", state, config)
            if on_iteration is not None:
                on_iteration(state)
        if ckpt_dir is not None:
            final = ckpt_dir / f"iter_{state.iteration:06d}.npz"
            if not final.exists():
                save_checkpoint(final, state, config)
    finally:
        if writer is not None:
            fh.close()
    return state

