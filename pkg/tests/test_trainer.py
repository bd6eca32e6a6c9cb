import json

import numpy as np
import pytest

from kernelga.data import SplitSpec, make_synthetic, split_train_val
from kernelga.errors import ConfigError
from kernelga.ga import evaluate_genomes
from kernelga.genome import TINY_TEMPLATE as T, Genome, NetworkTemplate
from kernelga.trainer import (
    Fitness,
    TrainConfig,
    derive_seed,
    fixed_kernel_run,
    reload_accuracy,
    train_individual,
)

CFG = TrainConfig(epochs=5, batch_size=50)


@pytest.fixture(scope="module")
def split():
    return split_train_val(make_synthetic(100, 3, seed=0), SplitSpec(60, split_seed=0))


def test_separable_data_is_learned(split):
    train, val = split
    r = train_individual(Genome((3,) * 9), T, train, val, TrainConfig(epochs=10, batch_size=50), seed=1)
    assert r.fitness >= 0.95
    assert r.fitness == max(r.val_accuracy)
    assert r.val_accuracy[r.best_epoch - 1] == r.fitness


def test_all_fives_genome(split):
    r = train_individual(Genome((5,) * 9), T, *split, CFG, seed=2)
    assert r.fitness > 0.9


def test_single_epoch_curves(split):
    r = train_individual(Genome((3, 5, 3) * 3), T, *split, TrainConfig(epochs=1, batch_size=50), seed=0)
    assert len(r.train_loss) == len(r.val_accuracy) == 1
    assert r.best_epoch == 1


def test_training_is_deterministic(split):
    g = Genome((5, 3, 5, 3, 3, 5, 5, 5, 3))
    runs = [train_individual(g, T, *split, TrainConfig(epochs=3, batch_size=50), seed=11) for _ in range(3)]
    assert runs[0] == runs[1] == runs[2]
    assert np.var([r.fitness for r in runs]) == 0


def test_different_seed_changes_curve(split):
    g = Genome((3,) * 9)
    a = train_individual(g, T, *split, TrainConfig(epochs=2, batch_size=50), seed=1)
    b = train_individual(g, T, *split, TrainConfig(epochs=2, batch_size=50), seed=2)
    assert a.train_loss != b.train_loss


def test_divergence_gives_zero_fitness(split):
    train, val = split
    bad = train.subset(np.arange(len(train)))
    bad.images = bad.images.copy()
    bad.images[:, 0, 5, 5] = np.nan
    r = train_individual(Genome((3,) * 9), T, bad, val, CFG, seed=0)
    assert r.diverged and r.fitness == 0.0


def test_infeasible_genome_gives_zero_fitness(split):
    t = NetworkTemplate(channel_plan=(8, 16, 32), fc_width=64, num_classes=3, input_side=32, padding="valid")
    r = train_individual(Genome((7,) * 9), t, *split, CFG, seed=0)
    assert r.infeasible and r.fitness == 0.0 and r.train_loss == []


def test_cached_genome_is_not_retrained(split):
    calls = []

    class Counting(Fitness):
        def __call__(self, genome):
            calls.append(str(genome))
            return super().__call__(genome)

    fit = Counting(T, *split, TrainConfig(epochs=1, batch_size=50))
    g = Genome((3,) * 9)
    cache = {}
    first, n1 = evaluate_genomes([g, g], fit, cache)
    second, n2 = evaluate_genomes([g], fit, cache)
    assert calls == [str(g)]
    assert (n1, n2) == (1, 0)
    assert first[0] == first[1] == second[0]


def test_fitness_logs_records(tmp_path, split):
    log_path = tmp_path / "ev.jsonl"
    fit = Fitness(T, *split, TrainConfig(epochs=1, batch_size=50), master_seed=4, log_path=log_path)
    value = fit(Genome((3,) * 9))
    row = json.loads(log_path.read_text())
    assert row["fitness"] == value
    assert row["seed"] == derive_seed(4, Genome((3,) * 9))


def test_derive_seed_depends_on_master_and_genome():
    g, h = Genome((3,) * 9), Genome((5,) * 9)
    assert derive_seed(0, g) == derive_seed(0, g)
    assert len({derive_seed(0, g), derive_seed(1, g), derive_seed(0, h)}) == 3


def test_fixed_kernel_run(split):
    r = fixed_kernel_run(3, T, *split, TrainConfig(epochs=1, batch_size=50))
    assert r.genome == "3,3,3,3,3,3,3,3,3"
    with pytest.raises(ConfigError):
        fixed_kernel_run(9, T, *split, CFG)


def test_best_checkpoint_reloads_to_recorded_accuracy(tmp_path, split):
    path = tmp_path / "best.kga"
    r = train_individual(Genome((3, 5, 5) * 3), T, *split, TrainConfig(epochs=4, batch_size=50),
                         seed=3, checkpoint_path=path)
    assert reload_accuracy(path, T, split[1]) == r.fitness


def test_record_equality_ignores_timing(split):
    r = train_individual(Genome((3,) * 9), T, *split, TrainConfig(epochs=1, batch_size=50), seed=0)
    assert "wall_clock" not in r.to_dict(with_timing=False)
    assert r.wall_clock > 0


def test_overfits_small_subset(split):
    train, val = split
    sub = train.subset(np.arange(32))
    r = train_individual(Genome((3,) * 9), T, sub, val, TrainConfig(epochs=200, batch_size=32, dropout=0.0), seed=1)
    assert min(r.train_loss) < 0.05


@pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(batch_size=0), dict(dropout=1.0), dict(dtype="int8")])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)
