"""Central finite-difference checks of every differentiable operation.

Each check reduces an operation's output to a scalar with a fixed random
projection ``sum(out * R)`` and compares the analytic gradient of every
input element against ``(f(x + h) - f(x - h)) / 2h`` in float64.  The
error measure is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)``.
The finite-difference side only ever evaluates forward passes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STEP = 1e-5
OP_TOLERANCE = 1e-6
NETWORK_TOLERANCE = 1e-4
ERROR_FLOOR = 1e-3


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    checked: int

    @property
    def passed(self) -> bool:
        return bool(self.max_error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<34} max rel err {self.max_error:.2e}  (tol {self.tolerance:.0e}, {self.checked} elems)"


def relative_error(analytic, numeric) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ERROR_FLOOR)
    return np.abs(analytic - numeric) / denom


def check_gradients(name: str, fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                    rng: np.random.Generator, tolerance: float = OP_TOLERANCE,
                    samples: int | None = None, h: float = STEP) -> CheckResult:
    """Compare analytic and numeric gradients of ``fn`` w.r.t. every input.

    ``samples`` limits the check to that many randomly chosen elements
    (across all inputs); by default every element is checked.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    probe = fn(*[Tensor(x) for x in inputs])
    proj = rng.standard_normal(probe.shape) if probe.data.size > 1 else np.ones(probe.shape)

    def scalar(arrays) -> float:
        return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * proj))

    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    ad.backward(ad.sum_all(ad.mul(out, Tensor(proj))))

    positions = [(i, j) for i, x in enumerate(inputs) for j in range(x.size)]
    if samples is not None and samples < len(positions):
        chosen = rng.choice(len(positions), size=samples, replace=False)
        positions = [positions[c] for c in sorted(chosen)]

    worst = 0.0
    for i, j in positions:
        plus = [x.copy() for x in inputs]
        minus = [x.copy() for x in inputs]
        plus[i].flat[j] += h
        minus[i].flat[j] -= h
        numeric = (scalar(plus) - scalar(minus)) / (2 * h)
        worst = max(worst, float(relative_error(leaves[i].grad.flat[j], numeric)))
    return CheckResult(name, worst, tolerance, len(positions))


def _away_from_zero(rng, shape, margin=0.05) -> np.ndarray:
    """Gaussian values with |x| >= margin, so kinks stay out of reach of h."""
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def op_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    results = []

    def run(name, fn, *inputs):
        results.append(check_gradients(name, fn, inputs, rng))

    x = r((1, 2, 8, 8))
    run("conv2d same stride1", lambda a, k, b: ad.conv2d(a, k, b), x, r((3, 2, 3, 3)), r(3))
    run("conv2d same stride2", lambda a, k, b: ad.conv2d(a, k, b, stride=2), r((2, 2, 7, 6)), r((3, 2, 3, 3)), r(3))
    run("conv2d valid", lambda a, k, b: ad.conv2d(a, k, b, padding="valid"), x, r((2, 2, 3, 3)), r(2))
    run("depthwise_conv2d stride2", lambda a, k: ad.depthwise_conv2d(a, k, stride=2), r((1, 3, 6, 6)), r((3, 3, 3)))
    run("separable_conv2d", lambda a, d, p, b: ad.separable_conv2d(a, d, p, b),
        r((2, 3, 6, 6)), r((3, 3, 3)), r((4, 3, 1, 1)), r(4))
    run("separable_conv2d stride2", lambda a, d, p, b: ad.separable_conv2d(a, d, p, b, stride=2),
        r((1, 3, 8, 8)), r((3, 3, 3)), r((2, 3, 1, 1)), r(2))
    run("upsample_bilinear x2", lambda a: ad.upsample_bilinear(a, 2), r((1, 2, 3, 4)))
    run("upsample_bilinear x4", lambda a: ad.upsample_bilinear(a, 4), r((2, 1, 3, 2)))
    run("concat_channels", ad.concat_channels, r((1, 2, 4, 4)), r((1, 3, 4, 4)))
    run("slice_channels", lambda a: ad.slice_channels(a, 1, 3), r((1, 4, 3, 3)))
    run("repeat_channels", lambda a: ad.repeat_channels(a, 3), r((2, 1, 3, 3)))
    run("max_pool2d", ad.max_pool2d, r((1, 2, 6, 6)))
    run("max_pool2d odd extent", ad.max_pool2d, r((1, 2, 5, 3)))
    run("relu", ad.relu, _away_from_zero(rng, (3, 4)))
    run("sigmoid", ad.sigmoid, 3 * r((3, 4)))
    run("add", ad.add, r((2, 3)), r((2, 3)))
    run("sub", ad.sub, r((2, 3)), r((2, 3)))
    run("mul", ad.mul, r((2, 3)), r((2, 3)))
    run("scalar_mul", lambda a: ad.scalar_mul(a, -1.7), r((2, 3)))
    run("sum_all", ad.sum_all, r((2, 3, 2)))
    a = r((2, 3, 4))
    run("reduce_mean_abs", ad.reduce_mean_abs, a, a + _away_from_zero(rng, a.shape))
    run("reduce_mean_sq", ad.reduce_mean_sq, r((2, 3, 4)), r((2, 3, 4)))
    return results


def network_checks(seed: int = 0, extent: int = 16, base_channels: int = 8,
                   params_checked: int = 20) -> list[CheckResult]:
    """End-to-end L_o gradients w.r.t. network parameters and predictions."""
    from .losses import FeatureExtractor, LossWeights, total_loss
    from .network import ModelConfig, init_weights, forward
    from .synth import make_sample

    rng = np.random.default_rng(seed)
    sample = make_sample(seed, (extent, extent))
    nchw = {"image": sample.image.data, "alpha": sample.alpha.data, "fg": sample.foreground.data,
            "bg": sample.background.data}
    batch = {k: v.transpose(2, 0, 1)[None] for k, v in nchw.items()}
    extractor = FeatureExtractor(dtype=np.float64)
    weights_ = LossWeights()
    results = []
    for share in (True, False):
        cfg = ModelConfig(share_encoder=share, use_perceptual=True, base_channels=base_channels,
                          input_extent=(extent, extent))
        net = init_weights(cfg, seed, dtype=np.float64)
        names = list(net.params)

        def loss_of(*arrays, cfg=cfg, names=names):
            params = {n: a for n, a in zip(names, arrays)}
            net.params.update(params)
            alpha, fg = forward(net, cfg, Tensor(batch["image"]))
            return total_loss(weights_, cfg, batch, alpha, fg, extractor)[0]

        originals = dict(net.params)
        results.append(check_gradients(
            f"L_o wrt params (SE={'yes' if share else 'no'})", loss_of,
            [p.data for p in originals.values()], rng, NETWORK_TOLERANCE, samples=params_checked))
        net.params.update(originals)

    cfg = ModelConfig(True, True, base_channels, (extent, extent))

    def loss_of_preds(pa, pf):
        return total_loss(weights_, cfg, batch, pa, pf, extractor)[0]

    pred_a = rng.uniform(0.05, 0.95, batch["alpha"].shape)
    pred_f = rng.uniform(0.05, 0.95, batch["fg"].shape)
    results.append(check_gradients("L_o wrt predictions", loss_of_preds, [pred_a, pred_f], rng,
                                   NETWORK_TOLERANCE, samples=200))
    return results


def run_all(seed: int = 0) -> list[CheckResult]:
    return op_checks(seed) + network_checks(seed)
