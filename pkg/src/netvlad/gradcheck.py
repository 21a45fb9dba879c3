"""Central finite-difference checks for the NetVLAD layer and the ranking loss.

Error measure, per parameter set: max |analytic - numeric| divided by
max(max |analytic|, max |numeric|). It stays meaningful for entries whose
gradient is (close to) zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .loss import LossConfig, weak_triplet_loss
from .pooling import NetVladParams, netvlad_backward, netvlad_forward

STEP = 1e-5
TOLERANCE = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_grad(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (``x`` is perturbed in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def random_params(rng: np.random.Generator, k: int, d: int, scale: float = 1.0) -> NetVladParams:
    return NetVladParams(
        w=scale * rng.normal(size=(k, d)),
        b=scale * rng.normal(size=k),
        c=rng.normal(size=(k, d)),
    )


@dataclass
class GradcheckResult:
    name: str
    errors: dict[str, float]
    tolerance: float = TOLERANCE
    info: dict = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def check_netvlad(rng: np.random.Generator, n: int, k: int, d: int, h: float = STEP) -> GradcheckResult:
    """Gradients of a random linear functional of the NetVLAD output."""
    params = random_params(rng, k, d)
    x = rng.normal(size=(n, d))
    probe = rng.normal(size=k * d)
    arrays = {"w": np.array(params.w), "b": np.array(params.b), "c": np.array(params.c), "x": x}

    def f():
        p = NetVladParams(arrays["w"], arrays["b"], arrays["c"])
        return float(probe @ netvlad_forward(arrays["x"], p)[0])

    _, cache = netvlad_forward(x, params)
    grads = netvlad_backward(cache, probe, params)
    errors = {}
    for name in ("w", "b", "c", "x"):
        errors[name] = relative_error(getattr(grads, name), numeric_grad(f, arrays[name], h))
    return GradcheckResult("netvlad", errors, info={"n": n, "k": k, "d": d})


def loss_through_netvlad(maps: dict[str, np.ndarray], params: NetVladParams, cfg: LossConfig):
    """Loss of one tuple and its gradients w.r.t. params and every input map."""
    q, pos, neg = maps["q"], maps["pos"], maps["neg"]
    batch = np.concatenate([q[None], pos, neg])
    reprs, cache = netvlad_forward(batch, params)
    res = weak_triplet_loss(reprs[0], reprs[1 : 1 + len(pos)], reprs[1 + len(pos) :], cfg)
    g = np.concatenate([res.grad_query[None], res.grad_positives, res.grad_negatives])
    return res, netvlad_backward(cache, g, params)


def _tuple_is_smooth(maps, params, cfg, gap: float) -> bool:
    batch = np.concatenate([maps["q"][None], maps["pos"], maps["neg"]])
    reprs = netvlad_forward(batch, params)[0]
    q, rest = reprs[0], reprs[1:]
    d2 = np.sum((rest - q) ** 2, axis=1)
    npos = len(maps["pos"])
    dp, dn = np.sort(d2[:npos]), d2[npos:]
    if npos > 1 and dp[1] - dp[0] < gap:
        return False
    args = dp[0] + cfg.margin - dn
    return bool(np.all(np.abs(args) > gap) and np.any(args > 0))


def check_loss(
    rng: np.random.Generator, n: int, k: int, d: int, n_pos: int = 2, n_neg: int = 3,
    h: float = STEP, gap: float = 1e-3, max_tries: int = 200,
) -> GradcheckResult:
    """End-to-end gradients of the ranking loss composed with NetVLAD, on a
    tuple whose hinge arguments and best-positive choice are away from kinks."""
    cfg = LossConfig(margin=0.5)
    for _ in range(max_tries):
        params = random_params(rng, k, d)
        maps = {"q": rng.normal(size=(n, d)), "pos": rng.normal(size=(n_pos, n, d)),
                "neg": rng.normal(size=(n_neg, n, d))}
        if _tuple_is_smooth(maps, params, cfg, gap):
            break
    else:
        raise RuntimeError("could not draw a tuple away from the hinge kinks")

    arrays = {"w": np.array(params.w), "b": np.array(params.b), "c": np.array(params.c)}

    def f():
        p = NetVladParams(arrays["w"], arrays["b"], arrays["c"])
        return loss_through_netvlad(maps, p, cfg)[0].loss

    _, grads = loss_through_netvlad(maps, params, cfg)
    gx = grads.x
    gx_maps = {"q": gx[0], "pos": gx[1 : 1 + n_pos], "neg": gx[1 + n_pos :]}
    errors = {}
    for name in ("w", "b", "c"):
        errors[name] = relative_error(getattr(grads, name), numeric_grad(f, arrays[name], h))
    for name in ("q", "pos", "neg"):
        errors["x_" + name] = relative_error(gx_maps[name], numeric_grad(f, maps[name], h))
    return GradcheckResult("loss", errors, info={"n": n, "k": k, "d": d})


def run_suite(seed: int = 0, instances: int = 20, n_range=(3, 8), k_range=(2, 5), d_range=(3, 6)):
    """Random instances with N, K, D drawn from the inclusive ranges; one NetVLAD
    and one loss check per instance."""
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(instances):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        k = int(rng.integers(k_range[0], k_range[1] + 1))
        d = int(rng.integers(d_range[0], d_range[1] + 1))
        results.append(check_netvlad(rng, n, k, d))
        results.append(check_loss(rng, n, k, d))
    return results
