"""Registry of gradient checks covering every differentiable op and loss.

Each registered builder takes a seeded generator and returns ``(f, inputs)``
for :func:`diffcore.gradcheck`. Inputs are drawn away from hinge, abs and
max kinks; anything that still lands within ``eps`` of a kink is skipped by
gradcheck itself.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import crloss, encoder, moae
from . import diffcore as dc
from .diffcore import Tensor

CHECKS: dict[str, tuple[str, callable]] = {}


def register(name: str, group: str):
    def deco(fn):
        if name in CHECKS:
            raise ValueError(f"duplicate gradcheck {name!r}")
        CHECKS[name] = (group, fn)
        return fn
    return deco


def _t(a) -> Tensor:
    return Tensor(a, requires_grad=True)


def _away_from_zero(rng, shape, lo=0.1, hi=2.0):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape)


def _labels(rng, n):
    y = rng.integers(0, 2, size=n)
    y[0], y[1] = 0, 1
    return y


def _randomize(module: moae.Module, rng, scale=0.5):
    for p in module.parameters():
        p.data[...] = scale * rng.standard_normal(p.shape)


# ----------------------------------------------------------------- diffcore primitives

@register("add", "diffcore")
def _(rng):
    return (lambda a, b: dc.tsum(dc.square(a + b))), [_t(rng.standard_normal((3, 4))),
                                                     _t(rng.standard_normal(4))]


@register("sub", "diffcore")
def _(rng):
    return (lambda a, b: dc.tsum(dc.square(a - b))), [_t(rng.standard_normal((3, 4))),
                                                     _t(rng.standard_normal((3, 1)))]


@register("mul", "diffcore")
def _(rng):
    return (lambda a, b: dc.tsum(a * b * a)), [_t(rng.standard_normal((2, 3))),
                                              _t(rng.standard_normal((2, 3)))]


@register("scalar_broadcast", "diffcore")
def _(rng):
    c = float(rng.normal())
    return (lambda a: dc.tsum(dc.square(a * c + 1.5 - c))), [_t(rng.standard_normal((2, 3)))]


@register("div", "diffcore")
def _(rng):
    return (lambda a, b: dc.tsum(a / b)), [_t(rng.standard_normal((2, 3))),
                                          _t(_away_from_zero(rng, (2, 3), 0.5, 2.0))]


@register("neg", "diffcore")
def _(rng):
    return (lambda a: dc.tsum(dc.square(-a) * a)), [_t(rng.standard_normal(5))]


@register("abs", "diffcore")
def _(rng):
    w = rng.standard_normal(6)
    return (lambda a: dc.tsum(dc.tabs(a) * w)), [_t(_away_from_zero(rng, 6))]


@register("square", "diffcore")
def _(rng):
    w = rng.standard_normal((2, 2))
    return (lambda a: dc.tsum(dc.square(a) * w)), [_t(rng.standard_normal((2, 2)))]


@register("sqrt", "diffcore")
def _(rng):
    return (lambda a: dc.tsum(dc.sqrt(a))), [_t(rng.uniform(0.2, 3.0, size=5))]


@register("exp", "diffcore")
def _(rng):
    return (lambda a: dc.tsum(dc.exp(a))), [_t(rng.uniform(-2, 2, size=5))]


@register("log", "diffcore")
def _(rng):
    return (lambda a: dc.tsum(dc.log(a))), [_t(rng.uniform(0.2, 3.0, size=5))]


@register("hinge", "diffcore")
def _(rng):
    t = float(rng.uniform(-0.5, 0.5))
    w = rng.standard_normal(6)
    return (lambda a: dc.tsum(dc.hinge(a, t) * w)), [_t(t + _away_from_zero(rng, 6))]


@register("sum", "diffcore")
def _(rng):
    w = rng.standard_normal(4)
    return (lambda a: dc.tsum(dc.tsum(a, axis=0) * w)), [_t(rng.standard_normal((3, 4)))]


@register("mean", "diffcore")
def _(rng):
    w = rng.standard_normal((3, 1))
    return (lambda a: dc.tsum(dc.mean(a, axis=1, keepdims=True) * w)), \
        [_t(rng.standard_normal((3, 4)))]


@register("max", "diffcore")
def _(rng):
    # distinct entries, well separated, so no tie lies within eps
    a = rng.permutation(12).reshape(3, 4) * 0.3 + rng.uniform(0, 0.01, (3, 4))
    w = rng.standard_normal(3)
    return (lambda x: dc.tsum(dc.tmax(x, axis=1) * w)), [_t(a)]


@register("logsumexp", "diffcore")
def _(rng):
    w = rng.standard_normal(3)
    return (lambda x: dc.tsum(dc.logsumexp(x, axis=1) * w)), [_t(3 * rng.standard_normal((3, 4)))]


@register("softmax", "diffcore")
def _(rng):
    w = rng.standard_normal((3, 4))
    return (lambda x: dc.tsum(dc.softmax(x, axis=0) * w)), [_t(2 * rng.standard_normal((3, 4)))]


@register("matmul", "diffcore")
def _(rng):
    w = rng.standard_normal((2, 3, 2))
    return (lambda a, b: dc.tsum((a @ b) * w)), [_t(rng.standard_normal((2, 3, 4))),
                                                _t(rng.standard_normal((4, 2)))]


@register("transpose", "diffcore")
def _(rng):
    w = rng.standard_normal((4, 2, 3))
    return (lambda a: dc.tsum(dc.transpose(a, (2, 0, 1)) * w)), [_t(rng.standard_normal((2, 3, 4)))]


@register("reshape", "diffcore")
def _(rng):
    w = rng.standard_normal((3, 4))
    return (lambda a: dc.tsum(dc.reshape(a, (3, 4)) * w)), [_t(rng.standard_normal((2, 6)))]


@register("split_merge_heads", "diffcore")
def _(rng):
    w = rng.standard_normal((2, 2, 3, 2))
    w2 = rng.standard_normal((2, 3, 4))
    return (lambda a: dc.tsum(dc.split_heads(a, 2) * w)
            + dc.tsum(dc.merge_heads(dc.split_heads(a, 2)) * w2)), \
        [_t(rng.standard_normal((2, 3, 4)))]


@register("concat", "diffcore")
def _(rng):
    w = rng.standard_normal((2, 5))
    return (lambda a, b: dc.tsum(dc.concat([a, b], axis=1) * w)), \
        [_t(rng.standard_normal((2, 2))), _t(rng.standard_normal((2, 3)))]


@register("index", "diffcore")
def _(rng):
    idx = (np.array([0, 2, 2, 1]), np.array([1, 0, 0, 3]))
    w = rng.standard_normal(4)
    return (lambda a: dc.tsum(a[idx] * w)), [_t(rng.standard_normal((3, 4)))]


@register("broadcast_to", "diffcore")
def _(rng):
    w = rng.standard_normal((3, 2, 4))
    return (lambda a: dc.tsum(dc.broadcast_to(a, (3, 2, 4)) * w)), [_t(rng.standard_normal((1, 1, 4)))]


@register("l2_normalize", "diffcore")
def _(rng):
    w = rng.standard_normal((3, 4))
    return (lambda a: dc.tsum(dc.l2_normalize(a, axis=1) * w)), [_t(rng.standard_normal((3, 4)))]


# ----------------------------------------------------------------- moae

def _small_moae(rng, h=2, m=2, s=2, d=4):
    cfg = moae.MoAEConfig(d=d, h=h, m=m, s=s, p=3, expert_hidden=3)
    layer = moae.MoAELayer(cfg, rng)
    _randomize(layer, rng)
    return layer


@register("multi_head_attention", "moae")
def _(rng):
    layer = _small_moae(rng)
    w = rng.standard_normal((2, 2, 3, 2))
    return (lambda x, wq: dc.tsum(moae.multi_head_attention(x, wq, layer.w_k, layer.w_v, 2) * w)), \
        [_t(rng.standard_normal((2, 3, 4))), layer.w_q]


@register("dispatch_experts_combine", "moae")
def _(rng):
    layer = _small_moae(rng)

    def f(tokens, slots, w1):
        slot_in, routing = moae.soft_dispatch(tokens, slots)
        return dc.tsum(dc.square(moae.soft_combine(moae.apply_experts(slot_in, layer.experts), routing)))
    return f, [_t(rng.standard_normal((2, 2, 3, 2))), layer.slots, layer.experts.w1]


@register("moae_forward", "moae")
def _(rng):
    layer = _small_moae(rng)
    w = rng.standard_normal((2, 3, 4))
    return (lambda x, *_: dc.tsum(moae.moae_forward(x, layer) * w)), \
        [_t(rng.standard_normal((2, 3, 4))), layer.w_v, layer.w_out, layer.experts.b2]


@register("softmoe_forward", "moae")
def _(rng):
    cfg = moae.MoAEConfig(d=4, h=1, m=2, s=1, p=3, expert_hidden=3)
    layer = moae.SoftMoELayer(cfg, rng)
    _randomize(layer, rng)
    w = rng.standard_normal((2, 3, 4))
    return (lambda x, *_: dc.tsum(moae.softmoe_forward(x, layer) * w)), \
        [_t(rng.standard_normal((2, 3, 4))), layer.slots, layer.experts.w2]


@register("layer_norm", "moae")
def _(rng):
    ln = moae.LayerNorm(4)
    _randomize(ln, rng)
    w = rng.standard_normal((2, 3, 4))
    return (lambda x, *_: dc.tsum(ln(x) * w)), [_t(rng.standard_normal((2, 3, 4))), ln.gain]


@register("block_stack", "moae")
def _(rng):
    cfg = moae.MoAEConfig(d=4, h=2, m=2, s=1, p=3, expert_hidden=3)
    blocks = [moae.Block(cfg, "moae", rng, mlp_hidden=5) for _ in range(2)]
    for b in blocks:
        _randomize(b, rng, scale=0.4)
    w = rng.standard_normal((2, 3, 4))

    def f(x, *_):
        for b in blocks:
            x = moae.block_forward(x, b)
        return dc.tsum(x * w)
    return f, [_t(rng.standard_normal((2, 3, 4))), blocks[0].moe.w_q, blocks[1].mlp.w1]


# ----------------------------------------------------------------- encoder

def _tiny_encoder(rng):
    ecfg = encoder.EncoderConfig(image_side=8, patch_side=4, d=4, blocks=1, embed_dim=3,
                                 moae=moae.MoAEConfig(d=4, h=2, m=2, s=1, p=5, expert_hidden=3))
    model = encoder.DualEncoder(ecfg, seed=int(rng.integers(1 << 31)))
    _randomize(model.image, rng, scale=0.4)
    return model


@register("encode_image", "encoder")
def _(rng):
    model = _tiny_encoder(rng)
    w = rng.standard_normal((2, 3))
    return (lambda x, *_: dc.tsum(encoder.encode_image(x, model.image) * w)), \
        [_t(rng.standard_normal((2, 1, 8, 8))), model.image.pos, model.image.head]


@register("similarity_matrix", "encoder")
def _(rng):
    txt = encoder.ClassTextEmbeddings(3, rng)
    w = rng.standard_normal((4, 2))
    return (lambda img, *_: dc.tsum(encoder.similarity_matrix(dc.l2_normalize(img), txt) * w)), \
        [_t(rng.standard_normal((4, 3))), txt.vectors, txt.log_scale]


@register("contrastive_ce", "encoder")
def _(rng):
    return encoder.contrastive_ce, [_t(2 * rng.standard_normal((3, 3)))]


@register("class_ce", "encoder")
def _(rng):
    y = _labels(rng, 5)
    return (lambda s: encoder.class_ce(s, y)), [_t(2 * rng.standard_normal((5, 2)))]


# ----------------------------------------------------------------- crloss

def _features(rng, n=6, p=4):
    return _t(rng.standard_normal((n, p)) + 0.5), _labels(rng, n)


@register("class_centers", "crloss")
def _(rng):
    x, y = _features(rng)
    w = rng.standard_normal((2, 4))
    return (lambda a: dc.tsum(crloss.class_centers(a, y).centers * w)), [x]


@register("dm_loss", "crloss")
def _(rng):
    # centers with clearly positive overlap so Q > 0 away from the hinge
    base = rng.standard_normal(4)
    centers = _t(np.stack([base + 0.3 * rng.standard_normal(4), base + 0.3 * rng.standard_normal(4)])
                 * 1.5)
    c_dot = centers.data[0] @ centers.data[1] / 2.0
    t = float(min(0.5, c_dot - 0.2)) if c_dot > 0.3 else -1.0

    def f(c):
        return crloss.dm_loss(crloss.center_relation(crloss.ClassCenters(c, np.ones(2)), t))
    return f, [centers]


@register("attraction_loss", "crloss")
def _(rng):
    x, y = _features(rng)
    return (lambda a: crloss.attraction_loss(a, crloss.class_centers(a, y), y)), [x]


@register("repulsion_loss", "crloss")
def _(rng):
    x, y = _features(rng)
    return (lambda a: crloss.repulsion_loss(a, crloss.class_centers(a, y), y)), [x]


@register("cdm_loss", "crloss")
def _(rng):
    x, y = _features(rng)
    return (lambda a: crloss.cdm_loss(a, crloss.class_centers(a, y), y)[0]), [x]


@register("total_moae_dm", "crloss")
def _(rng):
    layer = _small_moae(rng)
    y = _labels(rng, 4)
    x = _t(rng.standard_normal((4, 3, 4)))

    def f(inp, *_):
        feats = dc.reshape(moae.moae_forward(inp, layer)[:, 0:1, :], (4, 4)) + inp[:, 0, :]
        parts = crloss.class_regularization(feats, y, t=-2.0)
        total, _ = crloss.total_loss(dc.mean(dc.square(feats)), parts["l_dm"], parts["l_cdm"])
        return total
    return f, [x, layer.w_out, layer.slots]


@register("triplet_loss", "crloss")
def _(rng):
    x, y = _features(rng)
    return (lambda a: crloss.triplet_loss(a, y, margin=1.0)), [x]


@register("hard_triplet_loss", "crloss")
def _(rng):
    x, y = _features(rng)
    return (lambda a: crloss.hard_triplet_loss(a, y, margin=1.0)), [x]


@register("npair_loss", "crloss")
def _(rng):
    x, y = _features(rng)
    return (lambda a: crloss.npair_loss(a, y)), [x]


@register("supcon_loss", "crloss")
def _(rng):
    x, y = _features(rng)
    return (lambda a: crloss.supcon_loss(a, y, temperature=0.5)), [x]


# ----------------------------------------------------------------- runner

@dataclass
class CheckResult:
    name: str
    group: str
    cases: int
    passed: int
    max_rel_error: float
    skipped: int
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.passed == self.cases


@dataclass
class SuiteReport:
    results: list
    seconds: float

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.results)

    def lines(self) -> list[str]:
        out = []
        for r in self.results:
            status = "PASS" if r.ok else "FAIL"
            out.append(f"{status} {r.group}.{r.name}: {r.passed}/{r.cases} cases, "
                       f"max rel err {r.max_rel_error:.2e}, {r.skipped} kink coords skipped")
        return out


def run_check(name: str, cases: int = 100, seed: int = 0, tol: float = 1e-4,
              eps: float = 1e-5, coords: int | None = 12) -> CheckResult:
    group, build = CHECKS[name]
    result = CheckResult(name, group, cases, 0, 0.0, 0)
    for case in range(cases):
        rng = np.random.default_rng([seed, case])
        f, inputs = build(rng)
        try:
            rep = dc.gradcheck(f, inputs, eps=eps, tol=tol, coords=coords, rng=rng)
        except Exception as exc:  # a crashing backward counts as a failed case
            result.failures.append(f"case {case}: {type(exc).__name__}: {exc}")
            continue
        result.max_rel_error = max(result.max_rel_error, rep.max_rel_error)
        result.skipped += len(rep.skipped)
        if rep.passed:
            result.passed += 1
        else:
            result.failures.append(f"case {case}: {rep.failure}")
    return result


def run_suite(cases: int = 100, seed: int = 0, names=None, tol: float = 1e-4) -> SuiteReport:
    start = time.perf_counter()
    results = [run_check(n, cases=cases, seed=seed, tol=tol) for n in (names or CHECKS)]
    return SuiteReport(results, time.perf_counter() - start)
