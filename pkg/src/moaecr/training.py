"""Training loop, evaluation, and run records."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import crloss
from . import diffcore as dc
from .config import RunConfig
from .datasynth import Dataset, Split, balanced_batches, generate, intra_split, leave_one_type_out
from .encoder import DualEncoder, class_ce, embed, image_features, live_score, similarity_matrix
from .metrics import EvalReport, ScoredSet, acer_at


class NumericalAbort(RuntimeError):
    def __init__(self, iteration: int, last_bundle: crloss.LossBundle | None):
        self.iteration = iteration
        self.last_bundle = last_bundle
        super().__init__(f"non-finite loss at iteration {iteration}; last finite losses: "
                         f"{last_bundle.as_dict() if last_bundle else None}")


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.wd, self.eps = lr, weight_decay, eps
        self.b1, self.b2 = betas
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.wd * p.data
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class RunRecord:
    config: dict
    history: list = field(default_factory=list)
    report: dict | None = None
    wall_clock: float = 0.0

    def to_json(self, include_wall_clock: bool = True) -> str:
        body = {"config": self.config, "history": self.history, "report": self.report}
        if include_wall_clock:
            body["wall_clock"] = self.wall_clock
        return json.dumps(body, indent=1, sort_keys=True)


@dataclass
class TrainResult:
    record: RunRecord
    model: DualEncoder
    split: Split
    report: EvalReport


def make_split(cfg: RunConfig, dataset: Dataset | None = None) -> Split:
    ds = dataset if dataset is not None else generate(cfg.synthetic_spec())
    d = cfg.data
    if d.protocol == "loto":
        return leave_one_type_out(ds, cfg.held_type, d.test_fraction, d.dev_fraction, cfg.seed)
    return intra_split(ds, d.test_fraction, d.dev_fraction, cfg.seed)


def build_model(cfg: RunConfig) -> DualEncoder:
    return DualEncoder(cfg.encoder_config(), seed=cfg.seed)


def batch_losses(model: DualEncoder, images: np.ndarray, labels: np.ndarray, cfg: RunConfig):
    """Total loss tensor and its LossBundle for one batch."""
    feats = image_features(images, model.image)
    scores = similarity_matrix(embed(feats, model.image), model.text)
    l_ce = class_ce(scores, labels)
    lc = cfg.loss
    if lc.baseline != "none":
        fn = crloss.BASELINES[lc.baseline]
        kw = {"temperature": lc.temperature} if lc.baseline == "supcon" else {}
        if lc.baseline in ("triplet", "hard_triplet"):
            kw = {"margin": lc.margin}
        extra = fn(feats, labels, **kw)
        return crloss.total_loss(l_ce, dc.Tensor(0.0), extra)
    parts = crloss.class_regularization(feats, labels, lc.t, lc.dm, lc.cdm)
    return crloss.total_loss(l_ce, parts["l_dm"], parts["l_cdm"], parts["l_att"], parts["l_rep"])


def predict(model: DualEncoder, images: np.ndarray, chunk: int = 256):
    """(scores, pooled features) without recording a graph."""
    scores, feats = [], []
    with dc.no_grad():
        for i in range(0, images.shape[0], chunk):
            f = image_features(images[i:i + chunk], model.image)
            s = similarity_matrix(embed(f, model.image), model.text)
            scores.append(live_score(s))
            feats.append(f.data)
    return np.concatenate(scores), np.concatenate(feats)


def evaluate(model: DualEncoder, split: Split) -> EvalReport:
    dev_scores, _ = predict(model, split.dev.images())
    test_scores, _ = predict(model, split.test.images())
    return acer_at(ScoredSet(dev_scores, split.dev.labels),
                   ScoredSet(test_scores, split.test.labels))


def _rounded(bundle: crloss.LossBundle) -> dict:
    return {k: float(np.float64(v)) for k, v in bundle.as_dict().items()}


def train(cfg: RunConfig, dataset: Dataset | None = None, progress=None) -> TrainResult:
    """Adam over the total loss on balanced batches; deterministic given the config."""
    start = time.perf_counter()
    split = make_split(cfg, dataset)
    model = build_model(cfg)
    opt = Adam(model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
    images = split.train.images()
    labels = split.train.labels
    record = RunRecord(config=cfg.to_dict())
    stream = balanced_batches(split.train, cfg.optim.batch_size, seed=cfg.seed)
    last = None
    for it in range(cfg.optim.iterations):
        idx = next(stream)
        total, bundle = batch_losses(model, images[idx], labels[idx], cfg)
        if not math.isfinite(bundle.l_total):
            raise NumericalAbort(it, last)
        opt.zero_grad()
        total.backward()
        opt.step()
        last = bundle
        record.history.append(_rounded(bundle))
        if progress is not None:
            progress(it, bundle)
    report = evaluate(model, split)
    record.report = report.to_dict()
    record.wall_clock = time.perf_counter() - start
    return TrainResult(record, model, split, report)
