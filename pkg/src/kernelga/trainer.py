"""Train a decoded genome and report its best validation accuracy as fitness."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, epoch_batches
from .errors import ConfigError, InfeasibleArchitectureError, NumericError
from .genome import KERNEL_CHOICES, Genome, NetworkTemplate, decode
from .model import build_model, evaluate_accuracy, save_model
from .nn import one_hot, softmax_cross_entropy
from .optim import RMSProp, RMSPropConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 250
    dropout: float = 0.5
    dtype: str = "float32"
    optim: RMSPropConfig = field(default_factory=RMSPropConfig)

    def __post_init__(self):
        if isinstance(self.optim, dict):
            self.optim = RMSPropConfig(**self.optim)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")


@dataclass
class EvaluationRecord:
    genome: str
    fitness: float
    best_epoch: int
    train_loss: list
    val_accuracy: list
    seed: int
    diverged: bool = False
    infeasible: bool = False
    wall_clock: float = field(default=0.0, compare=False)

    def to_dict(self, with_timing: bool = True) -> dict:
        d = asdict(self)
        if not with_timing:
            d.pop("wall_clock")
        return d


def derive_seed(master_seed: int, genome) -> int:
    """Training seed as a function of the master seed and the genome alone."""
    digest = hashlib.sha256(f"{master_seed}:{genome}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def train_individual(genome, template: NetworkTemplate, train: Dataset, val: Dataset,
                     cfg: TrainConfig, seed: int, checkpoint_path=None) -> EvaluationRecord:
    """Train from scratch with RMSProp and return the best-epoch validation accuracy.

    The learning rate starts from its initial value and decays once per epoch.
    Infeasible genomes and numeric divergence yield fitness 0 instead of raising.
    """
    genome = genome if isinstance(genome, Genome) else Genome(tuple(genome))
    t0 = time.perf_counter()
    try:
        spec = decode(genome, template)
    except InfeasibleArchitectureError as exc:
        log.warning("genome %s infeasible: %s", genome, exc)
        return EvaluationRecord(str(genome), 0.0, -1, [], [], seed, infeasible=True,
                                wall_clock=time.perf_counter() - t0)

    rng = np.random.default_rng(seed)
    model = build_model(spec, template, rng=rng, dtype=cfg.dtype, dropout_rate=cfg.dropout)
    opt = RMSProp(cfg.optim)
    x_train = train.images.astype(model.dtype, copy=False)
    y_train = one_hot(train.labels, template.num_classes, dtype=model.dtype)

    losses, accs = [], []
    best, best_epoch, best_state, diverged = -1.0, -1, None, False
    for epoch in range(cfg.epochs):
        epoch_seed = int(rng.integers(2**63))
        total, seen = 0.0, 0
        try:
            for idx in epoch_batches(len(train), cfg.batch_size, epoch_seed):
                if len(idx) < 2:
                    # batch norm needs two samples; a lone trailing sample is skipped
                    continue
                logits = model.forward(x_train[idx], train=True)
                loss, grad = softmax_cross_entropy(logits, y_train[idx])
                if not np.isfinite(loss):
                    raise NumericError(f"loss is {loss}")
                model.backward(grad)
                opt.step(model.parameters(), model.gradients())
                total += loss * len(idx)
                seen += len(idx)
            acc = evaluate_accuracy(model, val.images, val.labels)
        except NumericError as exc:
            log.warning("genome %s diverged in epoch %d: %s", genome, epoch + 1, exc)
            diverged = True
            break
        losses.append(total / max(seen, 1))
        accs.append(acc)
        if acc > best:
            best, best_epoch = acc, epoch + 1
            best_state = [a.copy() for _, a in model.state()]
        opt.decay_learning_rate(epoch + 1)

    if diverged:
        fitness = 0.0
    else:
        fitness = best
        if checkpoint_path is not None and best_state is not None:
            model.load_state(best_state)
            save_model(checkpoint_path, model, template,
                       {"best_epoch": best_epoch, "val_accuracy": best, "seed": seed})
    return EvaluationRecord(str(genome), float(fitness), best_epoch, losses, accs, seed,
                            diverged=diverged, wall_clock=time.perf_counter() - t0)


def checkpoint_name(genome) -> str:
    return "genome_" + str(genome).replace(",", "-") + ".kga"


class Fitness:
    """Picklable fitness closure handed to the GA.

    Each genome trains with a seed derived from ``(master_seed, genome)`` so the
    value does not depend on when or where it is evaluated.
    """

    def __init__(self, template: NetworkTemplate, train: Dataset, val: Dataset, cfg: TrainConfig,
                 master_seed: int = 0, log_path=None, checkpoint_dir=None):
        self.template, self.train, self.val, self.cfg = template, train, val, cfg
        self.master_seed = master_seed
        self.log_path, self.checkpoint_dir = log_path, checkpoint_dir

    def evaluate(self, genome) -> EvaluationRecord:
        path = None
        if self.checkpoint_dir is not None:
            path = os.path.join(self.checkpoint_dir, checkpoint_name(genome))
        record = train_individual(genome, self.template, self.train, self.val, self.cfg,
                                  derive_seed(self.master_seed, genome), path)
        if self.log_path is not None:
            append_record(self.log_path, record)
        log.info("evaluated %s -> %.4f (%.1fs)", record.genome, record.fitness, record.wall_clock)
        return record

    def __call__(self, genome) -> float:
        return self.evaluate(genome).fitness


def append_record(path, record: EvaluationRecord) -> None:
    with open(path, "a") as f:
        f.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")


def fixed_kernel_run(k: int, template: NetworkTemplate, train: Dataset, val: Dataset, cfg: TrainConfig,
                     master_seed: int = 0, checkpoint_path=None) -> EvaluationRecord:
    """Train the homogeneous genome with kernel ``k`` in every conv layer."""
    if k not in KERNEL_CHOICES:
        raise ConfigError(f"kernel {k} not in {set(KERNEL_CHOICES)}")
    genome = Genome.homogeneous(k, template)
    return train_individual(genome, template, train, val, cfg, derive_seed(master_seed, genome), checkpoint_path)


def fitness_fn(genome, template, train, val, cfg, master_seed=0) -> float:
    return train_individual(genome, template, train, val, cfg, derive_seed(master_seed, genome)).fitness


def reload_accuracy(path, template: NetworkTemplate, val: Dataset) -> float:
    from .model import load_model

    model, _ = load_model(path, template)
    return evaluate_accuracy(model, val.images, val.labels)
