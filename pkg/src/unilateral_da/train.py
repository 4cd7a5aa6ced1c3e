"""Two-stage training: source-only pre-training, then unilateral adversarial adaptation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import grad as G
from . import nets
from .data import Dataset
from .nets import ArchitectureSpec, ModelParams

log = logging.getLogger(__name__)


class TrainError(ValueError):
    pass


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 0.01
    batch_size: int = 64
    stage1_epochs: int = 200
    stage2_epochs: int = 200
    lambda_d: float = 1.0
    lambda_cons: float = 1.0
    consistency_norm: str = "l1"
    momentum: float = 0.0
    grl_schedule: str = "constant"  # or "dann": 2/(1+exp(-10p)) - 1 ramp
    init_gain: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise TrainError("learning_rate must be positive")
        if self.batch_size < 1:
            raise TrainError("batch_size must be >= 1")
        if self.lambda_d < 0 or self.lambda_cons < 0:
            raise TrainError("lambda_d and lambda_cons must be non-negative")
        if self.consistency_norm not in ("l1", "l2"):
            raise TrainError("consistency_norm must be 'l1' or 'l2'")
        if self.grl_schedule not in ("constant", "dann"):
            raise TrainError("grl_schedule must be 'constant' or 'dann'")
        if not 0 <= self.momentum < 1:
            raise TrainError("momentum must be in [0, 1)")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise TrainError("epoch counts must be non-negative")


class FeatureCache:
    """Read-only map from source sample id to its pre-trained feature vector."""

    def __init__(self, ids, features):
        ids = np.asarray(ids, dtype=np.int64).copy()
        features = np.asarray(features, dtype=np.float64).copy()
        if features.ndim != 2 or len(ids) != len(features):
            raise TrainError("cache ids and features disagree")
        ids.setflags(write=False)
        features.setflags(write=False)
        self.ids, self.features = ids, features
        self._row = {int(i): r for r, i in enumerate(ids)}

    def __len__(self):
        return len(self.ids)

    def __contains__(self, sample_id) -> bool:
        return int(sample_id) in self._row

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def lookup(self, ids) -> np.ndarray:
        try:
            rows = [self._row[int(i)] for i in ids]
        except KeyError as exc:
            raise TrainError(f"sample id {exc.args[0]} missing from feature cache") from None
        return self.features[rows]

    def equals(self, other: "FeatureCache") -> bool:
        return self.ids.tobytes() == other.ids.tobytes() and self.features.tobytes() == other.features.tobytes()

    def save(self, path) -> None:
        np.savez(path, ids=self.ids, features=self.features)

    @classmethod
    def load(cls, path) -> "FeatureCache":
        with np.load(path) as z:
            return cls(z["ids"], z["features"])


@dataclass
class TrainReport:
    stage: str
    loss_clf: list[float] = field(default_factory=list)
    loss_d: list[float] = field(default_factory=list)
    loss_cons: list[float] = field(default_factory=list)
    loss_total: list[float] = field(default_factory=list)
    cons_initial: Optional[float] = None
    cons_final: Optional[float] = None
    metrics: Optional[dict] = None
    seconds: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


# ------------------------------------------------------------------ helpers

def sgd_step(params: ModelParams, grads: dict, lr: float, velocity: Optional[dict] = None,
             momentum: float = 0.0) -> ModelParams:
    """In-place ``p -= lr * g`` on trainable groups; frozen groups are skipped.

    With ``momentum > 0`` a caller-owned ``velocity`` dict carries state between calls.
    """
    for (group, name), g in grads.items():
        if group in params.frozen:
            continue
        p = params.groups[group][name]
        if p.shape != g.shape:
            raise TrainError(f"gradient shape {g.shape} does not match {group}/{name} {p.shape}")
        if momentum:
            v = velocity.setdefault((group, name), np.zeros_like(p))
            v *= momentum
            v += g
            p -= lr * v
        else:
            p -= lr * g
    return params


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield perm[s:s + batch_size]


class _Cycler:
    """Endless stream of shuffled indices into the target set."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.buf = np.empty(0, dtype=np.int64)

    def take(self, k: int) -> np.ndarray:
        while len(self.buf) < k:
            self.buf = np.concatenate([self.buf, self.rng.permutation(self.n)])
        out, self.buf = self.buf[:k], self.buf[k:]
        return out


def _stage_seeds(seed: int, stage: int):
    return int(np.random.default_rng([seed, stage]).integers(2**31)), np.random.default_rng([seed, stage, 1])


def _check_labels(ds: Dataset, classes: int, what: str):
    if len(ds) == 0:
        raise TrainError(f"{what} is empty")
    if ds.y.min() < 0 or ds.y.max() >= classes:
        raise TrainError(f"{what} has labels outside [0, {classes})")


def grl_coefficient(hp: HyperParams, progress: float) -> float:
    if hp.grl_schedule == "dann":
        return hp.lambda_d * (2.0 / (1.0 + np.exp(-10.0 * progress)) - 1.0)
    return hp.lambda_d


# ------------------------------------------------------------------ stage 1

def stage1_pretrain(source: Dataset, spec: ArchitectureSpec, hp: HyperParams):
    """Source-only supervised training. Returns (frozen params, FeatureCache, TrainReport)."""
    _check_labels(source, spec.num_classes, "source set")
    if source.dim != spec.input_length:
        raise TrainError(f"source width {source.dim} != input_length {spec.input_length}")
    t0 = time.perf_counter()
    init_seed, rng = _stage_seeds(hp.seed, 1)
    params = nets.init_params(spec, init_seed, hp.init_gain)
    del params.groups["discriminator"]
    velocity: dict = {}
    report = TrainReport("stage1")
    for epoch in range(hp.stage1_epochs):
        total, n = 0.0, 0
        for idx in _batches(len(source), hp.batch_size, rng):
            g = G.Graph()
            logits = nets.classify(params, nets.feature_forward(params, source.x[idx], True, rng, g))
            loss = G.softmax_cross_entropy(logits, source.y[idx])
            grads = nets.param_gradients(g, params, G.backward(loss))
            sgd_step(params, grads, hp.learning_rate, velocity, hp.momentum)
            total += float(loss.data) * len(idx)
            n += len(idx)
        report.loss_clf.append(total / n)
        report.loss_total.append(total / n)
        if (epoch + 1) % 50 == 0:
            log.debug("stage1 epoch %d loss %.4f", epoch + 1, total / n)
    frozen = nets.freeze(params)
    cache = build_feature_cache(frozen, source)
    report.seconds = time.perf_counter() - t0
    return frozen, cache, report


def build_feature_cache(frozen: ModelParams, source: Dataset) -> FeatureCache:
    return FeatureCache(source.ids, nets.extract_features(frozen, source.x))


# ------------------------------------------------------------------ stage 2

def loss_total(batch_s: Dataset, x_t: np.ndarray, params: ModelParams, cache: FeatureCache,
               hp: HyperParams, rng: Optional[np.random.Generator] = None,
               lambda_d: Optional[float] = None, graph: Optional[G.Graph] = None,
               train: bool = True):
    """Build L_clf + L_d + lambda_cons * L_cons on one graph.

    ``x_t`` is the unlabeled target batch. Returns ``(total, components, graph)``
    where components holds the float value of each term.
    """
    ref = cache.lookup(batch_s.ids)
    g = graph or G.Graph()
    lam = hp.lambda_d if lambda_d is None else lambda_d
    # source and target share one extractor pass; rows [0, B) are source
    B = len(batch_s)
    f_all = nets.feature_forward(params, np.concatenate([batch_s.x, x_t]), train, rng, g)
    f_s = G.take_rows(f_all, 0, B)
    l_clf = G.softmax_cross_entropy(nets.classify(params, f_s, g), batch_s.y)
    domains = np.concatenate([np.zeros(B, dtype=np.int64), np.ones(len(x_t), dtype=np.int64)])
    d_logits = nets.discriminate(params, G.grad_reverse(f_all, lam), g)
    l_d = G.softmax_cross_entropy(d_logits, domains)
    # consistency branch runs dropout-free, like the cached reference
    f_s_clean = f_s if not train else nets.feature_forward(params, batch_s.x, False, None, g)
    dist = G.l1_mean_distance if hp.consistency_norm == "l1" else G.l2_mean_distance
    l_cons = dist(f_s_clean, g.constant(ref))
    total = G.add(l_clf, l_d)
    if hp.lambda_cons:
        total = G.add(total, G.scale(l_cons, hp.lambda_cons))
    comps = {"clf": float(l_clf.data), "d": float(l_d.data), "cons": float(l_cons.data),
             "total": float(total.data)}
    return total, comps, g


def consistency_gap(params: ModelParams, source: Dataset, cache: FeatureCache) -> float:
    """Mean L1 distance between current eval-mode source features and the cache."""
    feats = nets.extract_features(params, source.x)
    return float(np.abs(feats - cache.lookup(source.ids)).mean())


def stage2_adapt(source: Dataset, target: Dataset, frozen: ModelParams, cache: FeatureCache,
                 spec: ArchitectureSpec, hp: HyperParams):
    """Fresh networks trained on L_clf + L_d (reversed) + lambda_cons * L_cons.

    Target labels are never read. Returns (params, TrainReport).
    """
    _check_labels(source, spec.num_classes, "source set")
    if len(target) == 0:
        raise TrainError("target set is empty")
    if not nets.shares_backbone(frozen, nets.init_params(spec, 0)) or frozen.spec != spec:
        raise TrainError("stage-1 network does not share the stage-2 backbone architecture")
    if len(cache) != len(source) or any(int(i) not in cache for i in source.ids):
        raise TrainError("feature cache does not match the source set")
    t0 = time.perf_counter()
    init_seed, rng = _stage_seeds(hp.seed, 2)
    params = nets.init_params(spec, init_seed, hp.init_gain)
    x_t = target.x  # the only target field used
    cycler = _Cycler(len(x_t), rng)
    velocity: dict = {}
    report = TrainReport("stage2")
    report.cons_initial = consistency_gap(params, source, cache)
    steps_per_epoch = -(-len(source) // hp.batch_size)
    total_steps = max(1, hp.stage2_epochs * steps_per_epoch)
    step = 0
    for epoch in range(hp.stage2_epochs):
        sums = dict.fromkeys(("clf", "d", "cons", "total"), 0.0)
        n = 0
        for idx in _batches(len(source), hp.batch_size, rng):
            t_idx = cycler.take(len(idx))
            lam = grl_coefficient(hp, step / total_steps)
            loss, comps, g = loss_total(source.subset(idx), x_t[t_idx], params, cache, hp, rng, lam)
            grads = nets.param_gradients(g, params, G.backward(loss))
            sgd_step(params, grads, hp.learning_rate, velocity, hp.momentum)
            for k in sums:
                sums[k] += comps[k] * len(idx)
            n += len(idx)
            step += 1
        report.loss_clf.append(sums["clf"] / n)
        report.loss_d.append(sums["d"] / n)
        report.loss_cons.append(sums["cons"] / n)
        report.loss_total.append(sums["total"] / n)
    report.cons_final = consistency_gap(params, source, cache)
    report.seconds = time.perf_counter() - t0
    return params, report


# --------------------------------------------------------------- evaluation

def evaluate_predictions(pred, test: Dataset, present=None) -> dict:
    pred = np.asarray(pred)
    if len(test) == 0:
        raise TrainError("test set is empty")
    C = test.classes
    correct = pred == test.y
    per_class: list[Optional[float]] = []
    for c in range(C):
        m = test.y == c
        per_class.append(float(correct[m].mean()) if m.any() else None)
    present = tuple(range(C)) if present is None else tuple(present)
    missing = [c for c in range(C) if c not in present]

    def mean_over(classes):
        vals = [per_class[c] for c in classes if per_class[c] is not None]
        return float(np.mean(vals)) if vals else None

    return {
        "overall": float(correct.mean()),
        "balanced": mean_over(range(C)),
        "per_class": per_class,
        "present": mean_over(present),
        "missing": mean_over(missing) if missing else None,
    }


def evaluate(params: ModelParams, test: Dataset, present=None) -> dict:
    """Eval-mode accuracy on the full-label test set, split by present/missing classes."""
    if len(test) == 0:
        raise TrainError("test set is empty")
    return evaluate_predictions(nets.predict(params, test.x), test, present)
