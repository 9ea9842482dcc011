"""Central finite-difference checks for every differentiable op."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import losses
from . import tensor as tc
from .model import ModelConfig, TemporalMode, forward, fuse_features, init_model, update_delayed_memory
from .tensor import Tensor

OP_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-4
STEP = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """Element-wise |a - n| / max(|a|, |n|, floor).

    The floor keeps gradients that are zero up to round-off from producing
    meaningless ratios.
    """
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


def check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = STEP) -> float:
    """Max relative error between backward() and finite differences over all inputs.

    ``fn`` must rebuild its graph from ``inputs`` on every call and return a
    scalar tensor.
    """
    for t in inputs:
        t.zero_grad()
    tc.backward(fn())
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = numeric_grad(lambda: fn().item(), t.data, step)
        worst = max(worst, float(relative_error(analytic, numeric).max()))
    return worst


def _projected(out_fn: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    """Reduce a tensor-valued op to a scalar through a fixed random projection."""
    probe = {}

    def f():
        out = out_fn()
        if "r" not in probe:
            probe["r"] = Tensor(rng.normal(size=out.shape))
        return tc.sum_all(tc.mul(out, probe["r"]))

    return f


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _leaf(rng, *shape, low=None):
    data = rng.normal(size=shape)
    if low is not None:
        # keep relu inputs clear of the kink
        data = np.where(np.abs(data) < low, np.sign(data + 1e-12) * low, data)
    return Tensor(data, requires_grad=True)


def op_cases(seed: int = 0) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    rng = np.random.default_rng(seed)
    cases = []

    x, w, b = _leaf(rng, 3, 8), _leaf(rng, 2, 3, 3), _leaf(rng, 2)
    for d in (1, 2):
        cases.append((f"conv1d_causal(dilation={d})",
                      _projected(lambda d=d: tc.conv1d_causal(x, w, b, dilation=d), rng), [x, w, b]))

    xl, wl, bl = _leaf(rng, 5, 4), _leaf(rng, 3, 5), _leaf(rng, 3)
    cases.append(("linear", _projected(lambda: tc.linear(xl, wl, bl), rng), [xl, wl, bl]))

    xr = _leaf(rng, 4, 6, low=0.05)
    cases.append(("relu", _projected(lambda: tc.relu(xr), rng), [xr]))

    xs = _leaf(rng, 5, 6)
    cases.append(("softmax_cols", _projected(lambda: tc.softmax_cols(xs), rng), [xs]))

    xd = _leaf(rng, 4, 6)
    cases.append(("dropout(train, p=0.3)",
                  _projected(lambda: tc.dropout(xd, 0.3, True, np.random.default_rng(11)), rng), [xd]))

    xa, ya = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    cases.append(("add", _projected(lambda: tc.add(xa, ya), rng), [xa, ya]))

    xc, vc = _leaf(rng, 3, 5), _leaf(rng, 3)
    cases.append(("add_columns", _projected(lambda: tc.add_columns(xc, vc), rng), [xc, vc]))

    xm, ym = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    cases.append(("mul", _projected(lambda: tc.mul(xm, ym), rng), [xm, ym]))

    c, t = 5, 12
    z = _leaf(rng, c, t)
    labels = rng.integers(0, c, t)
    mask = rng.random(t) > 0.25
    counts = [40, 10, 25, 5, 60]
    cases.append(("cross_entropy", lambda: losses.cross_entropy(z, labels, mask), [z]))
    cases.append(("weighted_cross_entropy",
                  lambda: losses.cross_entropy(z, labels, mask, weights=losses.class_weights(counts)), [z]))
    for gamma in (0.5, 2.0):
        cases.append((f"focal_loss(gamma={gamma})", lambda g=gamma: losses.focal_loss(z, labels, mask, g), [z]))
    cases.append(("ldam_loss(s=1)", lambda: losses.ldam_loss(z, labels, mask, counts, ldam_s=1.0), [z]))
    cases.append(("ldam_loss(s=30, reweighted)",
                  lambda: losses.ldam_loss(scale_small(z), labels, mask, counts, ldam_s=30.0,
                                           weights=losses.class_weights(counts)), [z]))
    spec = losses.LossSpec(kind="focal", gamma=2.0)
    z2 = _leaf(rng, c, t)
    cases.append(("multistage_loss", lambda: losses.multistage_loss([z, z2], labels, mask, spec), [z, z2]))
    return cases


def scale_small(z: Tensor) -> Tensor:
    # s=30 saturates the softmax for unit-scale logits; check it on a gentler range
    return tc.scale(z, 0.05)


def model_case(seed: int = 0, temporal_mode: TemporalMode | str = TemporalMode.DELAYED):
    """Tiny full model: fusion, temporal context, two stages, summed loss."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(audio_dim=2, audio_channels=3, visual_dim=2, hidden_dim=6, num_classes=4,
                      num_stages=2, num_blocks=2, kernel_size=3, dropout_p=0.0, temporal_mode=temporal_mode)
    model = init_model(cfg, seed)
    t = 10
    audio = Tensor(rng.normal(size=(6, t)))
    visual = Tensor(rng.normal(size=(2, t)))
    labels = rng.integers(0, 4, t)
    mask = np.ones(t, dtype=bool)
    mask[3] = False
    if cfg.temporal_mode is TemporalMode.DELAYED:
        update_delayed_memory(Tensor(rng.dirichlet(np.ones(4), size=5).T), model)
    spec = losses.LossSpec(kind="weighted_ce", class_counts=[30, 5, 12, 8])

    def fn():
        outs = forward(model, fuse_features(audio, visual, model), start_pos=7)
        return losses.multistage_loss(outs, labels, mask, spec)

    return fn, list(model.parameters.values())


def run_suite(seed: int = 0) -> list[GradCheckResult]:
    results = [GradCheckResult(name, check(fn, inputs), OP_TOLERANCE) for name, fn, inputs in op_cases(seed)]
    for mode in TemporalMode:
        fn, params = model_case(seed, mode)
        results.append(GradCheckResult(f"full model ({mode.value})", check(fn, params), MODEL_TOLERANCE))
    return results


def format_table(results: Sequence[GradCheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  {'max rel err':>12}  {'tol':>7}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_error:12.3e}  {r.tolerance:7.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
