"""The abductive learning loop: perceive, search substitutions, abduce, retrain.

Relational features are the rule tables abduced along the way; the decision
network reads an instance through them (one entailment bit per feature).
"""
from __future__ import annotations

import csv
import json
import os
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import dfo, neural
from . import equation as eqn
from .equation import LabeledSeq, OpRuleSet
from .neural import Network, TrainConfig
from .perception import PerceptionModel, center_outputs, class_probs, retrain

BUNDLE_VERSION = 1


def threads() -> int:
    """Worker count from ABL_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("ABL_THREADS", "1")))
    except ValueError:
        return 1


# --------------------------------------------------------------------------
# types

@dataclass(frozen=True)
class RelationalFeature:
    rules: OpRuleSet
    created_at_iteration: int
    source_consistency: int


class FeatureBuffer:
    """Ring buffer of the latest ``capacity`` features (oldest evicted first)."""

    def __init__(self, capacity: int = 20, items: Sequence[RelationalFeature] = ()):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque = deque(items, maxlen=capacity)

    def push(self, feature: RelationalFeature) -> None:
        self._items.append(feature)

    def snapshot(self) -> list[RelationalFeature]:
        return list(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(list(self._items))


@dataclass(frozen=True)
class TrainerConfig:
    iterations: int = 120
    subsample: tuple = (5, 10)
    k: int = 2
    n_features: int = 20
    stages: tuple = (5, 6, 7, 8)
    perception: TrainConfig = TrainConfig(learning_rate=0.03, epochs=3, minibatch=8)
    decision: TrainConfig = TrainConfig(learning_rate=0.1, epochs=200, minibatch=32)
    dfo: dfo.DfoConfig = dfo.DfoConfig()
    seed: int = 0
    tie_weight: float = 0.5   # weight of the likelihood tie-break in the search score
    replay: int = 0           # retrain on abduced pairs of this many recent iterations (0: current only)
    init_spread: float = 0.3  # std of initial logits over training images
    lr_decay: float = 0.3     # perception learning-rate multiplier reached at the last iteration
    prune: bool = True        # drop blanks that do not improve the search score

    def __post_init__(self):
        lo, hi = self.subsample
        if not 1 <= lo <= hi:
            raise ValueError("subsample must be a range lo..hi with 1 <= lo <= hi")
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")
        if not self.stages or any(s < 5 for s in self.stages):
            raise ValueError("stages must be nonempty length caps >= 5")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.replay < 0:
            raise ValueError("replay must be >= 0")
        if not 0.0 <= self.tie_weight < 1.0:
            raise ValueError("tie_weight must lie in [0, 1)")
        object.__setattr__(self, "subsample", (int(lo), int(hi)))
        object.__setattr__(self, "stages", tuple(int(s) for s in self.stages))

    def stage_of(self, t: int) -> int:
        """Length cap in force at 1-based iteration t (equal split of T)."""
        n = len(self.stages)
        per = max(1, -(-self.iterations // n))
        return self.stages[min((t - 1) // per, n - 1)]

    def perception_lr(self, t: int) -> float:
        """Geometric decay from the base rate at t=1 to base*lr_decay at t=iterations."""
        frac = (t - 1) / max(1, self.iterations - 1)
        return self.perception.learning_rate * self.lr_decay ** frac

    def to_json(self) -> dict:
        d = asdict(self)
        d["subsample"] = list(self.subsample)
        d["stages"] = list(self.stages)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainerConfig":
        d = dict(d)
        d["subsample"] = tuple(d["subsample"])
        d["stages"] = tuple(d["stages"])
        d["perception"] = TrainConfig(**d["perception"])
        d["decision"] = TrainConfig(**d["decision"])
        d["dfo"] = dfo.DfoConfig(**d["dfo"])
        return cls(**d)


@dataclass
class IterationLog:
    iteration: int
    stage: int
    consistency: int
    subsample_size: int
    perception_accuracy: float
    wall_time_ms: float


LOG_COLUMNS = ("iteration", "stage", "consistency", "subsample_size", "perception_accuracy", "wall_time_ms")


@dataclass
class AbductiveModel:
    perception: PerceptionModel
    features: list
    decision: Optional[Network]
    log: list = field(default_factory=list)
    initial_perception_accuracy: float = float("nan")
    config: Optional[TrainerConfig] = None

    def __post_init__(self):
        if self.decision is not None:
            arity = self.decision.spec.input_shape[0]
            if arity != len(self.features):
                raise ValueError(f"decision arity {arity} != {len(self.features)} features")

    def feature_rules(self) -> list[OpRuleSet]:
        return [f.rules for f in self.features]


# --------------------------------------------------------------------------
# substitution search

class SubstitutionProblem:
    """One batch perceived by a frozen perception snapshot.

    ``value(S)`` is the integer consistency of abduction after blanking the
    positions where S=1; ``score(S)`` adds a sub-unit likelihood bonus that
    prefers completions agreeing with the perception probabilities.
    """

    def __init__(self, perception: PerceptionModel, batch: Sequence, base_rules=None,
                 allow_new_rules: bool = True, tie_weight: float = 0.5):
        self.batch = list(batch)
        self.lengths = [len(inst.images) for inst in self.batch]
        flat = np.concatenate([np.asarray(inst.images) for inst in self.batch])
        probs = class_probs(perception, flat)
        self.probs, self.seqs = [], []
        start = 0
        for L in self.lengths:
            p = probs[start:start + L]
            self.probs.append(p)
            self.seqs.append(tuple(int(i) for i in p.argmax(axis=1)))
            start += L
        self.logp = [np.log(np.clip(p, 1e-300, None)) for p in self.probs]
        self.labels = [bool(inst.label) for inst in self.batch]
        self.base = [OpRuleSet()] if base_rules is None else list(base_rules)
        self.allow_new_rules = allow_new_rules
        self.tie_weight = tie_weight
        self._orders: dict = {}
        self._cache: dict = {}

    @property
    def dim(self) -> int:
        return sum(self.lengths)

    def constraint(self, k: int) -> dfo.SparsityConstraint:
        return dfo.SparsityConstraint.from_lengths(self.lengths, k)

    def _order(self, i: int, blanks: tuple) -> list:
        key = (i, blanks)
        if key not in self._orders:
            seq = tuple(None if j in blanks else s for j, s in enumerate(self.seqs[i]))
            self._orders[key] = eqn.filling_order(seq, self.probs[i])
        return self._orders[key]

    def blanked(self, S) -> list[LabeledSeq]:
        out, start = [], 0
        for seq, L, lab in zip(self.seqs, self.lengths, self.labels):
            mask = S[start:start + L]
            out.append(LabeledSeq(tuple(None if m else s for s, m in zip(seq, mask)), lab))
            start += L
        return out

    def solve(self, S):
        """(abduction result, base index) for the best base rule set."""
        S = np.asarray(S, dtype=np.int8)
        key = S.tobytes()
        if key in self._cache:
            return self._cache[key]
        batch = self.blanked(S)
        orders = []
        for i, ex in enumerate(batch):
            blanks = tuple(j for j, s in enumerate(ex.seq) if s is None)
            orders.append(self._order(i, blanks))
        fallbacks = [tuple(s for s, m in zip(seq, S[start:start + L]) if m)
                     for seq, L, start in zip(self.seqs, self.lengths, np.cumsum([0] + self.lengths[:-1]))]
        best = None
        for b, base in enumerate(self.base):
            res = eqn.abduce_ordered(batch, orders, base, self.allow_new_rules, fallbacks=fallbacks)
            if best is None or res.consistency > best[0].consistency:
                best = (res, b)
        self._cache[key] = best
        return best

    def value(self, S) -> int:
        return self.solve(S)[0].consistency

    def likelihood(self, result) -> float:
        """Geometric-mean probability of the completed symbols of consistent examples."""
        total, n = 0.0, 0
        for i, (seq, ok) in enumerate(zip(result.completed, result.consistent_mask)):
            if ok:
                total += float(self.logp[i][np.arange(len(seq)), list(seq)].sum())
                n += len(seq)
        return float(np.exp(total / n)) if n else 0.0

    def score(self, S) -> float:
        res, _ = self.solve(S)
        return res.consistency + self.tie_weight * self.likelihood(res)


def substitution_objective(perception: PerceptionModel, batch: Sequence, S) -> int:
    """Consistency of greedy abduction after blanking the positions where S=1."""
    prob = SubstitutionProblem(perception, batch)
    S = np.asarray(S, dtype=np.int8)
    if len(S) != prob.dim:
        raise ValueError(f"S has {len(S)} entries, batch has {prob.dim} symbols")
    return prob.value(S)


def prune_blanks(problem: SubstitutionProblem, S) -> np.ndarray:
    """Clear each set bit of S (left to right) whose removal does not lower the score.

    A blank that is not needed still invites a relabelling, since the filling
    order tries the non-argmax symbols first; pruning keeps only revisions
    that pay for themselves.
    """
    S = np.array(S, dtype=np.int8)
    best = problem.score(S)
    for j in np.flatnonzero(S):
        S[j] = 0
        s = problem.score(S)
        if s >= best:
            best = s
        else:
            S[j] = 1
    return S


def search_substitution(problem: SubstitutionProblem, k: int, cfg: dfo.DfoConfig, prune: bool = True):
    """Run the optimizer on the tie-broken score; returns (best S, abduction result, base index)."""
    res = dfo.optimize(problem.score, problem.dim, problem.constraint(k), cfg)
    best = res.best
    zero = np.zeros(problem.dim, dtype=np.int8)
    if problem.score(zero) >= problem.score(best):
        best = zero
    if prune:
        best = prune_blanks(problem, best)
    abd, b = problem.solve(best)
    return best, abd, b


def _training_pairs(problem: SubstitutionProblem, result) -> list:
    """(image, symbol) pairs from consistent examples whose completion parses."""
    pairs = []
    for inst, seq, ok in zip(problem.batch, result.completed, result.consistent_mask):
        if ok and eqn._parse(tuple(seq)) is not None:
            pairs.extend(zip(inst.images, seq))
    return pairs


# --------------------------------------------------------------------------
# training

@dataclass
class TrainerState:
    perception: PerceptionModel
    buffer: FeatureBuffer
    rng: np.random.Generator
    log: list = field(default_factory=list)
    freeze_perception: bool = False
    base_rules: Optional[list] = None   # knowledge transfer: frozen rule tables
    pool: deque = field(default_factory=deque)


def _draw_subsample(view, cap: int, cfg: TrainerConfig, rng) -> list:
    eligible = np.flatnonzero(view.lengths <= cap)
    if len(eligible) == 0:
        raise ValueError(f"no training instances of length <= {cap}")
    lo, hi = cfg.subsample
    n = min(int(rng.integers(lo, hi + 1)), len(eligible))
    idx = rng.choice(eligible, size=n, replace=False)
    return [view[int(i)] for i in idx]


def training_iteration(state: TrainerState, view, t: int, cfg: TrainerConfig,
                       monitor: Optional[Callable] = None) -> TrainerState:
    """One subsample -> search -> abduce -> buffer -> retrain -> log step."""
    t0 = time.perf_counter()
    cap = cfg.stage_of(t)
    batch = _draw_subsample(view, cap, cfg, state.rng)
    transfer = state.base_rules is not None
    problem = SubstitutionProblem(state.perception, batch,
                                  base_rules=state.base_rules if transfer else None,
                                  allow_new_rules=not transfer, tie_weight=cfg.tie_weight)
    dcfg = replace(cfg.dfo, seed=int(state.rng.integers(2**31)))
    _, result, _ = search_substitution(problem, cfg.k, dcfg, cfg.prune)
    if result.consistency > 0 and not transfer:
        state.buffer.push(RelationalFeature(result.rules, t, result.consistency))
    if not state.freeze_perception:
        state.pool.append(_training_pairs(problem, result))
        while len(state.pool) > cfg.replay + 1:
            state.pool.popleft()
        pairs = [p for chunk in state.pool for p in chunk]
        if pairs:
            pcfg = replace(cfg.perception, learning_rate=cfg.perception_lr(t),
                           seed=int(state.rng.integers(2**31)))
            state.perception = retrain(state.perception, pairs, pcfg)
    acc = float(monitor(state.perception)) if monitor is not None else float("nan")
    state.log.append(IterationLog(t, cap, result.consistency, len(batch), acc,
                                  round((time.perf_counter() - t0) * 1000.0, 3)))
    return state


def _map(fn, items):
    n = threads()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def perceive_all(perception: PerceptionModel, images: Sequence) -> list[tuple]:
    """Argmax symbol sequences of many instances in one forward pass."""
    if len(images) == 0:
        return []
    lengths = [len(x) for x in images]
    flat = np.concatenate([np.asarray(x) for x in images])
    pred = class_probs(perception, flat).argmax(axis=1)
    out, start = [], 0
    for L in lengths:
        out.append(tuple(int(s) for s in pred[start:start + L]))
        start += L
    return out


def feature_matrix(rule_sets: Sequence[OpRuleSet], seqs: Sequence[tuple]) -> np.ndarray:
    """r_ij = 1 iff rule set j entails sequence i is a true equation."""
    rows = _map(lambda s: [eqn.entails(r, s) is True for r in rule_sets], list(seqs))
    return np.array(rows, dtype=np.float64).reshape(len(seqs), len(rule_sets))


def propositionalize(model: AbductiveModel, view):
    """Binary feature matrix |instances| x |features| and the label vector."""
    if len(model.features) == 0:
        raise ValueError("propositionalize needs at least one relational feature")
    seqs = perceive_all(model.perception, view.images)
    return feature_matrix(model.feature_rules(), seqs), np.asarray(view.labels, dtype=int)


def train_decision(features: list, X: np.ndarray, y: np.ndarray, cfg: TrainConfig, seed: int) -> Network:
    net = neural.init_network(neural.decision_spec(len(features), seed))
    net, _ = neural.train_supervised(net, X, y, cfg)
    return net


def initial_perception(view, seed: int, spread: float = 0.3, n_images: int = 2000) -> PerceptionModel:
    """Fresh network whose logits are standardised on (unlabelled) training images."""
    flat = np.concatenate([np.asarray(x) for x in view.images])
    rng = np.random.default_rng([seed, 3])
    if len(flat) > n_images:
        flat = flat[np.sort(rng.choice(len(flat), n_images, replace=False))]
    return center_outputs(PerceptionModel.fresh(seed), flat, spread)


def _run_loop(state: TrainerState, view, cfg: TrainerConfig, monitor) -> None:
    for t in range(1, cfg.iterations + 1):
        training_iteration(state, view, t, cfg, monitor)


def fit(view, cfg: TrainerConfig = TrainerConfig(), monitor: Optional[Callable] = None,
        perception: Optional[PerceptionModel] = None, freeze_perception: bool = False) -> AbductiveModel:
    """Curriculum training on a label-stripped view, then decision training.

    ``monitor`` maps a perception model to an accuracy for the log; it is
    evaluation-only and never feeds back into training.
    """
    for cap in cfg.stages:
        if not np.any(view.lengths <= cap):
            raise ValueError(f"training data has no instances for stage cap {cap}")
    rng = np.random.default_rng([cfg.seed, 7])
    if perception is None:
        perception = initial_perception(view, cfg.seed, cfg.init_spread)
    state = TrainerState(perception, FeatureBuffer(cfg.n_features), rng,
                         freeze_perception=freeze_perception)
    init_acc = float(monitor(perception)) if monitor is not None else float("nan")
    _run_loop(state, view, cfg, monitor)
    model = AbductiveModel(state.perception, state.buffer.snapshot(), None, state.log, init_acc, cfg)
    X, y = propositionalize(model, view)
    model.decision = train_decision(model.features, X, y, cfg.decision, cfg.seed)
    return model


def transfer_perception(source: PerceptionModel, view, cfg: TrainerConfig = TrainerConfig(),
                        monitor: Optional[Callable] = None) -> AbductiveModel:
    """Learn features and decision with the perception layers held fixed."""
    if source.net.output_dim != 4:
        raise ValueError("source perception must have 4 outputs")
    return fit(view, cfg, monitor, perception=PerceptionModel(source.net.copy()), freeze_perception=True)


def transfer_knowledge(source: AbductiveModel, view, cfg: TrainerConfig = TrainerConfig(),
                       monitor: Optional[Callable] = None) -> AbductiveModel:
    """Train a fresh perception against the source's frozen features and decision net."""
    if not source.features:
        raise ValueError("source model has no relational features")
    bases = []
    for f in reversed(source.features):  # most recent first
        if f.rules not in bases:
            bases.append(f.rules)
    rng = np.random.default_rng([cfg.seed, 11])
    state = TrainerState(initial_perception(view, cfg.seed, cfg.init_spread), FeatureBuffer(cfg.n_features), rng,
                         base_rules=bases)
    init_acc = float(monitor(state.perception)) if monitor is not None else float("nan")
    _run_loop(state, view, cfg, monitor)
    decision = source.decision.copy() if source.decision is not None else None
    return AbductiveModel(state.perception, list(source.features), decision, state.log, init_acc, cfg)


def predict_many(model: AbductiveModel, images: Sequence) -> np.ndarray:
    if model.decision is None:
        raise ValueError("model has no decision network")
    seqs = perceive_all(model.perception, images)
    X = feature_matrix(model.feature_rules(), seqs)
    return neural.forward(model.decision, X).argmax(axis=1).astype(bool)


def predict(model: AbductiveModel, instance) -> bool:
    images = instance.images if hasattr(instance, "images") else instance
    return bool(predict_many(model, [images])[0])


def convergence_iteration(log: Sequence[IterationLog]) -> Optional[int]:
    """First iteration whose whole subsample was consistent, or None."""
    for row in log:
        if row.consistency == row.subsample_size:
            return row.iteration
    return None


# --------------------------------------------------------------------------
# files

def write_log(log: Sequence[IterationLog], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for row in log:
            w.writerow([getattr(row, c) for c in LOG_COLUMNS])


def read_log(path) -> list[IterationLog]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [IterationLog(int(r["iteration"]), int(r["stage"]), int(r["consistency"]),
                         int(r["subsample_size"]), float(r["perception_accuracy"]),
                         float(r["wall_time_ms"])) for r in rows]


def features_to_text(features: Sequence[RelationalFeature]) -> str:
    parts = []
    for f in features:
        parts.append(f"% feature iteration={f.created_at_iteration} consistency={f.source_consistency}")
        if len(f.rules):
            parts.append(f.rules.to_text())
    return "\n".join(parts) + "\n"


def features_from_text(text: str) -> list[RelationalFeature]:
    out, header, body = [], None, []

    def flush():
        if header is not None:
            out.append(RelationalFeature(OpRuleSet.from_text("\n".join(body)), *header))

    for line in text.splitlines():
        if line.startswith("% feature"):
            flush()
            kv = dict(tok.split("=") for tok in line.split()[2:])
            header, body = (int(kv["iteration"]), int(kv["consistency"])), []
        elif line.strip():
            body.append(line)
    flush()
    return out


def save_model(model: AbductiveModel, path, extra: Optional[dict] = None) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    neural.save_network(model.perception.net, d / "perception.ablnet")
    if model.decision is not None:
        neural.save_network(model.decision, d / "decision.ablnet")
    (d / "features.pl").write_text(features_to_text(model.features))
    manifest = {
        "format": "ablmodel", "version": BUNDLE_VERSION,
        "n_features": len(model.features),
        "has_decision": model.decision is not None,
        "config": model.config.to_json() if model.config is not None else None,
        "initial_perception_accuracy": model.initial_perception_accuracy,
    }
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_model(path) -> AbductiveModel:
    d = Path(path)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("format") != "ablmodel":
        raise ValueError("not a model bundle")
    features = features_from_text((d / "features.pl").read_text())
    if len(features) != manifest["n_features"]:
        raise ValueError(f"bundle lists {manifest['n_features']} features, file has {len(features)}")
    perception = PerceptionModel(neural.load_network(d / "perception.ablnet"))
    decision = neural.load_network(d / "decision.ablnet") if manifest["has_decision"] else None
    cfg = TrainerConfig.from_json(manifest["config"]) if manifest.get("config") else None
    return AbductiveModel(perception, features, decision, [],
                          manifest.get("initial_perception_accuracy", float("nan")), cfg)
