"""Seeded finite-difference checks over the adaptive layers and both loss terms."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import AttentionBank, KernelMaskBank, adaptive_attention_forward, spatial_attention_forward
from .losses import EmbeddingBatch, MarginConfig, cosface_loss, debias_terms
from .tensor import Param, Tensor

OPS = ("adaptive_conv", "adaptive_attention", "spatial_attention", "cosface", "debias")
BASE_TOL = 1e-4
BASE_EPS = 1e-4


def tolerance_for(eps: float) -> float:
    """Central differences are O(eps^2): a smaller step earns a proportionally tighter bound."""
    return BASE_TOL * min(1.0, (eps / BASE_EPS) ** 2)


def _away_from_kink(draw, preact, rng, margin=1e-2, tries=20):
    """Redraw until no ReLU input sits within ``margin`` of zero (finite differences break there)."""
    for _ in range(tries):
        args = draw(rng)
        if np.min(np.abs(preact(*args))) > margin:
            return args
    return args


def _adaptive_conv(rng, eps):
    b, ic, kc = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    nd, k = int(rng.integers(2, 5)), int(rng.choice([1, 3]))
    stride, size = int(rng.integers(1, 3)), int(rng.integers(4, 7))
    groups = rng.integers(0, nd, size=b)

    def draw(r):
        return (Param(r.normal(size=(b, ic, size, size)), "x"), Param(r.normal(size=(kc, ic, k, k)), "kernel"),
                Param(r.normal(size=(nd, ic, k, k)), "masks"))

    pre = lambda x, w, m: T.conv2d(x, w, stride, k // 2, masks=m, groups=groups).data
    x, w, m = _away_from_kink(draw, pre, rng)
    out_w = rng.normal(size=pre(x, w, m).shape)
    fn = lambda: T.tsum(T.mul(T.relu(T.conv2d(x, w, stride, k // 2, masks=m, groups=groups)), out_w))
    return T.grad_check(fn, [x, w, m], eps=eps)


def _adaptive_attention(rng, eps):
    b, kc, nd, s = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    x = Param(rng.normal(size=(b, kc, s, s)), "x")
    bank = AttentionBank(Param(rng.normal(size=(nd, kc)) * 2, "maps"))
    groups = rng.integers(0, nd, size=b)
    out_w = rng.normal(size=x.shape)
    fn = lambda: T.tsum(T.mul(adaptive_attention_forward(x, bank, groups), out_w))
    return T.grad_check(fn, [x, bank.maps], eps=eps)


def _spatial_attention(rng, eps):
    b, kc, s = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(2, 5))
    x = Param(rng.normal(size=(b, kc, s, s)), "x")
    w = Param(rng.normal(size=(1, kc, 1, 1)), "weights")
    out_w = rng.normal(size=x.shape)
    fn = lambda: T.tsum(T.mul(spatial_attention_forward(x, w), out_w))
    return T.grad_check(fn, [x, w], eps=eps)


def _cosface(rng, eps):
    b, d, c = int(rng.integers(1, 5)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
    e = Param(rng.normal(size=(b, d)), "embedding")
    w = Param(rng.normal(size=(c, d)), "class_weights")
    labels = rng.integers(0, c, size=b)
    # the training scale (64) makes the softmax nearly one-hot; a moderate scale keeps every entry informative
    cfg = MarginConfig(scale=float(rng.uniform(1, 8)), margin=float(rng.uniform(0, 0.9)))
    return T.grad_check(lambda: cosface_loss(e, w, labels, cfg), [e, w], eps=eps)


def _debias(rng, eps):
    nd = int(rng.integers(2, 4))
    per_group = int(rng.integers(1, 3))
    n_img = int(rng.integers(2, 4))
    ids = np.repeat(np.arange(nd * per_group), n_img)
    groups = ids // per_group
    e = Param(rng.normal(size=(len(ids), int(rng.integers(2, 5)))), "embedding")
    lam = float(rng.uniform(0.1, 2))
    fn = lambda: debias_terms(EmbeddingBatch(e, ids, groups), lam=lam).loss
    return T.grad_check(fn, [e], eps=eps)


_RUNNERS = {"adaptive_conv": _adaptive_conv, "adaptive_attention": _adaptive_attention,
            "spatial_attention": _spatial_attention, "cosface": _cosface, "debias": _debias}


@dataclass
class GradcheckReport:
    eps: float
    tolerance: float
    configs: int
    max_error: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(v <= self.tolerance for v in self.max_error.values())

    def lines(self) -> list[str]:
        out = [f"{op:<20s} max_rel_err={err:.3e} {'PASS' if err <= self.tolerance else 'FAIL'}"
               for op, err in self.max_error.items()]
        out.append(f"{'overall':<20s} configs={self.configs} eps={self.eps:g} tol={self.tolerance:.1e} "
                   f"{'PASS' if self.passed else 'FAIL'} ({self.seconds:.1f}s)")
        return out

    def to_dict(self) -> dict:
        return {"eps": self.eps, "tolerance": self.tolerance, "configs": self.configs,
                "max_error": self.max_error, "passed": self.passed, "seconds": self.seconds}


def run_gradcheck(configs: int = 50, eps: float = BASE_EPS, seed: int = 0, ops=OPS) -> GradcheckReport:
    """Every seeded config draws fresh shapes and values for each op."""
    t0 = time.perf_counter()
    rep = GradcheckReport(eps, tolerance_for(eps), configs, {op: 0.0 for op in ops})
    for i in range(configs):
        for j, op in enumerate(ops):
            rng = np.random.default_rng([seed, i, j])
            rep.max_error[op] = max(rep.max_error[op], float(_RUNNERS[op](rng, eps)))
    rep.seconds = time.perf_counter() - t0
    return rep
