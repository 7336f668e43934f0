"""Single-file checkpoints.

A checkpoint is an ``.npz`` archive with

* one array per parameter, keyed ``<network>/<layer-index>/<param-name>``
  (tied layers are stored under both owners),
* ``optim/<param>/m`` and ``optim/<param>/v`` ADAM moments when saved from a
  training state,
* ``meta``: a UTF-8 JSON document holding ``format_version``, the model
  config, the tied groups, domain names and, for training states, the train
  config, iteration, RNG states, ADAM step counts and the loss history.
"""

from __future__ import annotations

import io
import json
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from .errors import CDGANError
from .losses import LossBreakdown
from .model import CDGAN, ModelConfig, build_model

FORMAT_VERSION = 1


class CheckpointError(CDGANError):
    pass


def _history_to_json(history):
    return [[it, d.as_dict(), eg.as_dict()] for it, d, eg in history]


def _history_from_json(items):
    return [(int(it), LossBreakdown("D", **d), LossBreakdown("EG", **eg)) for it, d, eg in items]


def save_checkpoint(path, state_or_model, train_config=None, domains=None) -> Path:
    """Write a model (``CDGAN``) or a full ``TrainState`` to ``path``."""
    from .trainer import TrainState

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = state_or_model if isinstance(state_or_model, TrainState) else None
    model: CDGAN = state.params if state is not None else state_or_model
    arrays = {name: p.detach().cpu().numpy() for name, p in model.named_layer_parameters()}
    meta = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "tied_groups": [list(g) for g in model.tied_groups],
        "domains": list(domains if domains is not None else (state.domains if state else [])),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
    }
    if state is not None:
        steps = {}
        for name, mom in state.optimizer_moments.items():
            arrays[f"optim/{name}/m"] = mom.m.cpu().numpy()
            arrays[f"optim/{name}/v"] = mom.v.cpu().numpy()
            steps[name] = mom.step
        meta.update(
            iteration=state.iteration,
            rng_state=state.rng_state,
            adam_steps=steps,
            loss_history=_history_to_json(state.loss_history),
        )
    if train_config is not None:
        meta["train_config"] = train_config.to_dict()
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    # write via a buffer so np.savez cannot append its own suffix
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def _read(path):
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "meta" not in arrays:
        raise CheckpointError(f"{path} has no metadata entry")
    meta = json.loads(arrays.pop("meta").tobytes().decode("utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {meta.get('format_version')!r}")
    return arrays, meta


def _restore_model(arrays, meta, expect_config: ModelConfig | None) -> CDGAN:
    known = {f.name for f in fields(ModelConfig)}
    config = ModelConfig(**{k: v for k, v in meta["model_config"].items() if k in known})
    if expect_config is not None and expect_config != config:
        raise CheckpointError(
            f"checkpoint config {config} is incompatible with requested {expect_config}")
    model = build_model(config)
    if meta.get("dtype") == "float64":
        model = model.double()
    if [list(g) for g in model.tied_groups] != meta["tied_groups"]:
        raise CheckpointError("tied groups recorded in the checkpoint do not match its config")
    with torch.no_grad():
        for name, p in model.named_layer_parameters():
            if name not in arrays:
                raise CheckpointError(f"checkpoint is missing parameter {name}")
            value = torch.from_numpy(arrays[name])
            if value.shape != p.shape:
                raise CheckpointError(
                    f"{name}: stored shape {tuple(value.shape)} != model shape {tuple(p.shape)}")
            p.copy_(value)
    # tied twins are one tensor in the model; a mismatch means the file broke the invariant
    for net_a, i, net_b, j in model.tied_groups:
        prefix_a, prefix_b = f"{net_a}/{i}/", f"{net_b}/{j}/"
        for key in arrays:
            if key.startswith(prefix_a):
                other = prefix_b + key[len(prefix_a):]
                if not np.array_equal(arrays[key], arrays[other]):
                    raise CheckpointError(f"tied parameters {key} and {other} differ")
    return model


def load_model(path, expect_config: ModelConfig | None = None) -> tuple[CDGAN, dict]:
    """Load the networks only; returns ``(model, meta)``."""
    arrays, meta = _read(path)
    return _restore_model(arrays, meta, expect_config), meta


def load_checkpoint(path, data=None, expect_config: ModelConfig | None = None):
    """Load a full training state saved by :func:`save_checkpoint`."""
    from .data import DomainSampler
    from .trainer import AdamMoments, TrainConfig, TrainState

    arrays, meta = _read(path)
    if "iteration" not in meta:
        raise CheckpointError(f"{path} holds a bare model, not a training state")
    model = _restore_model(arrays, meta, expect_config)
    moments = {}
    for name, p in model.named_parameters():
        try:
            m = torch.from_numpy(arrays[f"optim/{name}/m"].copy())
            v = torch.from_numpy(arrays[f"optim/{name}/v"].copy())
        except KeyError:
            raise CheckpointError(f"checkpoint is missing optimizer moments for {name}") from None
        moments[name] = AdamMoments(m, v, int(meta["adam_steps"][name]))
    pair_rng = np.random.default_rng()
    pair_rng.bit_generator.state = meta["rng_state"]["pair_rng"]
    sampler = None
    sampler_state = meta["rng_state"]["sampler"]
    if data is not None and sampler_state is not None:
        sampler = DomainSampler(data, 0)
        sampler.load_state_dict(sampler_state)
    state = TrainState(
        params=model,
        optimizer_moments=moments,
        iteration=int(meta["iteration"]),
        pair_rng=pair_rng,
        sampler=sampler,
        loss_history=_history_from_json(meta["loss_history"]),
        domains=list(meta.get("domains", [])),
    )
    train_config = TrainConfig(**meta["train_config"]) if "train_config" in meta else None
    return state, train_config
