"""Classification-accuracy scoring and the ablation / shared-layer experiment harness."""

from __future__ import annotations

import csv
import logging
import math
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .data import MultiDomainDataset
from .errors import CDGANError, DatasetError, InvalidConfigError, JudgeUnusableError
from .model import CDGAN, ModelConfig
from .trainer import TrainConfig, TrainState, train

log = logging.getLogger(__name__)

RESULTS_HEADER = ["cell_name", "seed", "accuracy", "judge_real_accuracy", "iterations",
                  "wall_seconds"]
SUMMARY_HEADER = ["cell_name", "n_seeds", "mean_accuracy", "std_accuracy"]
CURVE_HEADER = ["cell_name", "seed", "iteration", "accuracy"]


class SmallCNN(nn.Module):
    """Three conv blocks and a linear head; the desk-scale judge."""

    def __init__(self, n_classes: int, in_channels: int = 3, image_size: int = 32,
                 width: int = 16):
        super().__init__()
        chans = [in_channels, width, width * 2, width * 4]
        self.blocks = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, padding=1) for i in range(3))
        size = image_size
        for _ in range(3):
            size = max(size // 2, 1)
        self.head = nn.Linear(chans[-1] * size * size, n_classes)

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.blocks:
            x = F.relu(conv(x))
            if x.shape[-1] > 1:
                x = F.max_pool2d(x, 2)
        return self.head(x.flatten(1))


@dataclass(frozen=True)
class JudgeSpec:
    width: int = 16
    epochs: int = 8
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    floor: float = 0.90


@dataclass
class JudgeClassifier:
    network: nn.Module
    n_domains: int
    real_accuracy: float
    floor: float = 0.90

    @property
    def usable(self) -> bool:
        return self.real_accuracy >= self.floor

    def require_usable(self) -> None:
        if not self.usable:
            raise JudgeUnusableError(self.real_accuracy, self.floor)

    @torch.no_grad()
    def predict(self, images: Tensor, chunk: int = 256) -> Tensor:
        """Arg-max class per image; ``torch.argmax`` picks the lowest id on ties."""
        was_training = self.network.training
        self.network.eval()
        out = [self.network(images[i:i + chunk].float()).argmax(dim=1)
               for i in range(0, len(images), chunk)]
        self.network.train(was_training)
        return torch.cat(out) if out else torch.zeros(0, dtype=torch.int64)


def train_judge(dataset: MultiDomainDataset, spec: JudgeSpec = JudgeSpec()) -> JudgeClassifier:
    """Fit a domain classifier on the real train split, score it on the test split."""
    if dataset.n_domains < 2:
        raise DatasetError("need >= 2 classes to train a judge")
    x_np, y_np = dataset.split_arrays("train")
    if len(np.unique(y_np)) < 2:
        raise DatasetError("need >= 2 classes with training images to train a judge")
    gen = torch.Generator().manual_seed(spec.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        net = SmallCNN(dataset.n_domains, dataset.image_channels, dataset.image_size, spec.width)
    x, y = torch.from_numpy(x_np), torch.from_numpy(y_np)
    opt = torch.optim.Adam(net.parameters(), lr=spec.learning_rate)
    net.train()
    for _ in range(spec.epochs):
        order = torch.randperm(len(x), generator=gen)
        for i in range(0, len(x), spec.batch_size):
            idx = order[i:i + spec.batch_size]
            loss = F.cross_entropy(net(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    judge = JudgeClassifier(net, dataset.n_domains, 0.0, spec.floor)
    xt, yt = dataset.split_arrays("test")
    if len(xt):
        judge.real_accuracy = float((judge.predict(torch.from_numpy(xt)).numpy() == yt).mean())
    if not judge.usable:
        log.warning("judge accuracy %.4f is below the floor %.2f", judge.real_accuracy, spec.floor)
    return judge


def classification_accuracy(judge: JudgeClassifier, images: Tensor, intended_labels) -> float:
    """Fraction of images whose judge arg-max equals the intended target domain."""
    judge.require_usable()
    labels = torch.as_tensor(intended_labels, dtype=torch.int64).reshape(-1)
    if len(images) == 0:
        raise CDGANError("cannot score an empty batch")
    if len(labels) != len(images):
        raise CDGANError(f"{len(labels)} labels for {len(images)} images")
    pred = judge.predict(images)
    return int((pred == labels).sum()) / len(labels)


@torch.no_grad()
def translate(model: CDGAN, images: Tensor, target, chunk: int = 64) -> Tensor:
    """Encode with the X tower, decode with the Y tower towards ``target``."""
    from .model import encode, generate, label_ids

    dtype = next(model.parameters()).dtype
    ids = label_ids(target, len(images), model.config.n_domains)
    out = []
    for i in range(0, len(images), chunk):
        z = encode(model, "X", images[i:i + chunk].to(dtype))
        out.append(generate(model, "Y", z, ids[i:i + chunk]).float())
    return torch.cat(out)


def generate_eval_set(state: TrainState | CDGAN, dataset: MultiDomainDataset,
                      per_domain_count: int | None = None, seed: int = 0
                      ) -> tuple[Tensor, Tensor, Tensor]:
    """Translate every test image into every other domain.

    Returns ``(images, intended_labels, source_labels)``.  With
    ``per_domain_count`` set, each target domain keeps a seeded subset of that
    many translations.
    """
    model = state.params if isinstance(state, TrainState) else state
    rng = np.random.default_rng(seed)
    images, targets, sources = [], [], []
    for t in range(dataset.n_domains):
        cand = [(s, i) for s in range(dataset.n_domains) if s != t
                for i in range(len(dataset.test[s]))]
        if per_domain_count is not None and per_domain_count < len(cand):
            keep = np.sort(rng.choice(len(cand), size=per_domain_count, replace=False))
            cand = [cand[k] for k in keep]
        if not cand:
            continue
        src = torch.from_numpy(np.stack([dataset.test[s][i] for s, i in cand]))
        images.append(translate(model, src, t))
        targets.append(torch.full((len(cand),), t, dtype=torch.int64))
        sources.append(torch.tensor([s for s, _ in cand], dtype=torch.int64))
    if not images:
        raise DatasetError("the test split has no images to translate")
    return torch.cat(images), torch.cat(targets), torch.cat(sources)


def evaluate_model(model, dataset, judge, per_domain_count=None, seed=0) -> float:
    images, targets, _ = generate_eval_set(model, dataset, per_domain_count, seed)
    return classification_accuracy(judge, images, targets)


# -- experiment matrices --------------------------------------------------

@dataclass(frozen=True)
class ExperimentCell:
    name: str
    rec: bool = True
    lcl: bool = True
    cls: bool = True
    n_shared_layers: int | None = None  # None keeps the base model config
    seeds: tuple[int, ...] = (0,)

    def key(self):
        return (self.rec, self.lcl, self.cls, self.n_shared_layers)

    def model_config(self, base: ModelConfig, seed: int) -> ModelConfig:
        cfg = replace(base, seed=seed)
        if self.n_shared_layers is None:
            return cfg
        k = self.n_shared_layers
        return replace(cfg, n_shared_layers=k, share_lowest=k > 0, share_highest=k > 0)

    def train_config(self, base: TrainConfig, seed: int) -> TrainConfig:
        weights = base.weights.ablate(rec=self.rec, lcl=self.lcl, cls=self.cls)
        return replace(base, seed=seed, weights=weights)


@dataclass
class ExperimentMatrix:
    cells: list[ExperimentCell] = field(default_factory=list)

    def __post_init__(self):
        names = [c.name for c in self.cells]
        if len(set(names)) != len(names):
            raise InvalidConfigError("experiment cell names must be distinct")
        keys = [c.key() for c in self.cells]
        if len(set(keys)) != len(keys):
            raise InvalidConfigError("experiment cells must differ in configuration")


def loss_ablation_matrix(seeds: Sequence[int] = (0,)) -> ExperimentMatrix:
    """The eight loss combinations on top of the GAN + cycle baseline."""
    seeds = tuple(seeds)
    rows = [
        ("Baseline", False, False, False),
        ("Baseline + R", True, False, False),
        ("Baseline + LCL", False, True, False),
        ("Baseline + C", False, False, True),
        ("Baseline + R + LCL", True, True, False),
        ("Baseline + R + C", True, False, True),
        ("Baseline + LCL + C", False, True, True),
        ("Baseline + R + LCL + C", True, True, True),
    ]
    return ExperimentMatrix([ExperimentCell(n, r, l, c, seeds=seeds) for n, r, l, c in rows])


def shared_layer_matrix(counts: Sequence[int] = (0, 1, 2, 3),
                        seeds: Sequence[int] = (0,)) -> ExperimentMatrix:
    return ExperimentMatrix([ExperimentCell(f"shared={k}", n_shared_layers=k, seeds=tuple(seeds))
                             for k in counts])


@dataclass
class CellResult:
    cell_name: str
    seed: int
    accuracy: float
    judge_real_accuracy: float
    iterations: int
    wall_seconds: float
    error: str | None = None
    curve: list[tuple[int, float]] = field(default_factory=list)

    def row(self) -> list:
        return [self.cell_name, self.seed, self.accuracy, self.judge_real_accuracy,
                self.iterations, round(self.wall_seconds, 3)]


def run_experiment_matrix(matrix: ExperimentMatrix, base_model: ModelConfig,
                          base_train: TrainConfig, dataset: MultiDomainDataset,
                          judge: JudgeClassifier | None = None, out_dir=None,
                          per_domain_count: int | None = None, eval_every: int | None = None,
                          eval_seed: int = 0) -> list[CellResult]:
    """Train and score every (cell, seed); failures are recorded, not raised.

    With ``out_dir`` set, writes ``results.csv``, ``summary.csv`` and, when
    curves were collected, ``curves.csv``, plus ``accuracy.png``.
    """
    if judge is None and matrix.cells:
        judge = train_judge(dataset)
    if judge is not None:
        judge.require_usable()
    results: list[CellResult] = []
    for cell in matrix.cells:
        for seed in cell.seeds:
            mcfg = cell.model_config(base_model, seed)
            tcfg = cell.train_config(base_train, seed)
            curve: list[tuple[int, float]] = []

            def probe(state, curve=curve):
                if eval_every and state.iteration % eval_every == 0:
                    curve.append((state.iteration, evaluate_model(
                        state.params, dataset, judge, per_domain_count, eval_seed)))

            start = time.perf_counter()
            try:
                state = train(tcfg, dataset, mcfg, on_iteration=probe)
                acc = evaluate_model(state.params, dataset, judge, per_domain_count, eval_seed)
                err = None
            except CDGANError as exc:
                log.error("cell %s seed %d failed: %s", cell.name, seed, exc)
                acc, err = math.nan, str(exc)
            res = CellResult(cell.name, seed, acc, judge.real_accuracy, tcfg.max_iterations,
                             time.perf_counter() - start, err, curve)
            log.info("cell %-24s seed %d accuracy %.4f", cell.name, seed, acc)
            results.append(res)
    if out_dir is not None:
        write_results(results, out_dir)
    return results


def summarize(results: Sequence[CellResult]) -> list[tuple[str, int, float, float]]:
    """Mean and sample standard deviation of accuracy per cell, in first-seen order."""
    by_cell: dict[str, list[float]] = {}
    for r in results:
        by_cell.setdefault(r.cell_name, []).append(r.accuracy)
    rows = []
    for name, accs in by_cell.items():
        mean = statistics.fmean(accs)
        std = statistics.stdev(accs) if len(accs) > 1 else 0.0
        rows.append((name, len(accs), mean, std))
    return rows


def write_results(results: Sequence[CellResult], out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"results": out_dir / "results.csv", "summary": out_dir / "summary.csv"}
    with open(paths["results"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULTS_HEADER)
        w.writerows(r.row() for r in results)
    with open(paths["summary"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        w.writerows(summarize(results))
    if any(r.curve for r in results):
        paths["curves"] = out_dir / "curves.csv"
        with open(paths["curves"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CURVE_HEADER)
            for r in results:
                w.writerows([r.cell_name, r.seed, it, acc] for it, acc in r.curve)
    if results:
        paths["chart"] = plot_results(results, out_dir / "accuracy.png")
    return paths


def plot_results(results: Sequence[CellResult], path) -> Path:
    """Accuracy-vs-iteration lines when curves exist, otherwise a bar per cell."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    if any(r.curve for r in results):
        by_cell: dict[str, dict[int, list[float]]] = {}
        for r in results:
            for it, acc in r.curve:
                by_cell.setdefault(r.cell_name, {}).setdefault(it, []).append(acc)
        for name, pts in by_cell.items():
            its = sorted(pts)
            ax.plot(its, [100 * statistics.fmean(pts[i]) for i in its], marker="o", label=name)
        ax.set_xlabel("iteration")
        ax.legend(fontsize=7)
    else:
        rows = summarize(results)
        ax.bar(range(len(rows)), [100 * m for _, _, m, _ in rows],
               yerr=[100 * s for _, _, _, s in rows])
        ax.set_xticks(range(len(rows)), [n for n, *_ in rows], rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("classification accuracy (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)

