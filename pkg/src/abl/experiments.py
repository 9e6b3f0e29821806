"""Experiment protocols shared by the acceptance suite and scripts/.

A run trains on lengths 5..8 and evaluates per length on a disjoint test set;
perception accuracy is monitored on a separately seeded labelled glyph set.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import datasets, trainer
from .equation import ADDITION_TABLE, XOR_TABLE, OpRuleSet
from .perception import GlyphFamilySpec, labeled_glyphs, perception_accuracy

TABLES = {"binary_add": ADDITION_TABLE, "xor": XOR_TABLE}


@dataclass(frozen=True)
class Protocol:
    train_lengths: tuple = (5, 6, 7, 8)
    train_per_length: int = 300
    test_lengths: tuple = tuple(range(5, 15))
    test_per_length: int = 100
    monitor_per_class: int = 100


@dataclass
class RunResult:
    semantics: str
    glyphs: str
    seed: int
    mode: str
    accuracy_by_length: dict
    has_table: bool
    initial_perception: float
    final_perception: float
    convergence: Optional[int]
    model: trainer.AbductiveModel = field(repr=False)

    def mean_accuracy(self, max_length: int = 10**9) -> float:
        return float(np.mean([a for L, a in self.accuracy_by_length.items() if L <= max_length]))


def xor_lengths(lengths) -> tuple:
    """XOR equations never have length 6 or 8; drop those."""
    return tuple(L for L in lengths if L not in (6, 8))


def train_data(semantics: str, glyphs: str, seed: int, proto: Protocol) -> datasets.Dataset:
    lengths = proto.train_lengths if semantics == "binary_add" else xor_lengths(proto.train_lengths)
    return datasets.generate(datasets.DatasetSpec(semantics, glyphs, lengths, proto.train_per_length, seed=seed))


def test_data(semantics: str, glyphs: str, seed: int, proto: Protocol) -> datasets.Dataset:
    lengths = proto.test_lengths if semantics == "binary_add" else xor_lengths(proto.test_lengths)
    spec = datasets.DatasetSpec(semantics, glyphs, lengths, proto.test_per_length, seed=seed + 1000)
    return datasets.generate(spec, check_pairs=False)


def glyph_monitor(glyphs: str, per_class: int, seed: int):
    X, y = labeled_glyphs(GlyphFamilySpec(glyphs), per_class, seed)
    return lambda p: perception_accuracy(p, X, y)


def accuracy_by_length(model: trainer.AbductiveModel, ds: datasets.Dataset) -> dict:
    correct = trainer.predict_many(model, ds.images) == ds.labels
    return {int(L): float(correct[ds.lengths == L].mean()) for L in sorted(set(ds.lengths.tolist()))}


def contains_table(features, table: OpRuleSet) -> bool:
    return any(table.is_subset(f.rules) for f in features)


def default_config(semantics: str, seed: int) -> trainer.TrainerConfig:
    cfg = replace(trainer.TrainerConfig(), seed=seed)
    if semantics == "xor":
        # curriculum caps must each have data; XOR has no length-6 or -8 equations
        cfg = replace(cfg, stages=xor_lengths(cfg.stages))
    return cfg


def run(semantics: str = "binary_add", glyphs: str = "easy", seed: int = 0, proto: Protocol = Protocol(),
        cfg: Optional[trainer.TrainerConfig] = None, mode: str = "scratch", source=None) -> RunResult:
    """Train one model (scratch or transfer) and evaluate it per length."""
    cfg = cfg or default_config(semantics, seed)
    view = train_data(semantics, glyphs, seed, proto).training_view()
    monitor = glyph_monitor(glyphs, proto.monitor_per_class, seed + 10_000)
    if mode == "scratch":
        model = trainer.fit(view, cfg, monitor)
    elif mode == "transfer_perception":
        model = trainer.transfer_perception(getattr(source, "perception", source), view, cfg, monitor)
    elif mode == "transfer_knowledge":
        model = trainer.transfer_knowledge(source, view, cfg, monitor)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    acc = accuracy_by_length(model, test_data(semantics, glyphs, seed, proto))
    return RunResult(semantics, glyphs, seed, mode, acc, contains_table(model.features, TABLES[semantics]),
                     model.initial_perception_accuracy, model.log[-1].perception_accuracy,
                     trainer.convergence_iteration(model.log), model)
