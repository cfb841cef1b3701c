"""Training objectives for the alpha and foreground branches.

    L_o     = L_alpha + L_f
    L_alpha = w_ab_a * l_ab_a + w_c_a * l_c_a + w_p_a * l_p_a
    L_f     = w_ab_f * l_ab_f + w_p_f * l_p_f

Pixel losses are means over all elements.  Perceptual terms sum, over the
five levels of a frozen feature extractor, the mean squared feature
difference.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import fileio
from .autodiff import Tensor
from .errors import ConfigError, ContractViolation
from .network import ModelConfig

EXTRACTOR_WIDTHS = (8, 16, 32, 32, 32)
EXTRACTOR_SEED = 16


@dataclass(frozen=True)
class LossWeights:
    lambda_ab_alpha: float = 0.5
    lambda_c_alpha: float = 0.5
    lambda_p_alpha: float = 0.001
    lambda_ab_fg: float = 1.0
    lambda_p_fg: float = 0.001

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ConfigError("loss weights must be non-negative")


class FeatureExtractor:
    """Frozen stack of five [conv3x3, relu, conv3x3, relu, maxpool2] blocks.

    Stands in for a pretrained VGG-16.  Weights are He-normal from a fixed
    seed unless given explicitly, and never require gradients.
    """

    def __init__(self, arrays: dict[str, np.ndarray] | None = None, seed: int = EXTRACTOR_SEED,
                 dtype=np.float32):
        if arrays is None:
            arrays = self.random_arrays(seed)
        expected = self.shapes()
        if [(k, tuple(v.shape)) for k, v in arrays.items()] != expected:
            raise ConfigError("feature extractor weights have unexpected names or shapes")
        self.params = {k: Tensor(np.asarray(v, dtype=dtype), name=k) for k, v in arrays.items()}

    @staticmethod
    def shapes() -> list[tuple[str, tuple[int, ...]]]:
        out = []
        cin = 3
        for i, c in enumerate(EXTRACTOR_WIDTHS, start=1):
            out += [(f"block{i}.conv1.w", (c, cin, 3, 3)), (f"block{i}.conv1.b", (c,)),
                    (f"block{i}.conv2.w", (c, c, 3, 3)), (f"block{i}.conv2.b", (c,))]
            cin = c
        return out

    @classmethod
    def random_arrays(cls, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in cls.shapes():
            if name.endswith(".b"):
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = rng.standard_normal(shape) * np.sqrt(2.0 / np.prod(shape[1:]))
        return arrays

    @classmethod
    def load(cls, path, dtype=np.float32) -> "FeatureExtractor":
        arrays, _ = fileio.load_checkpoint(path)
        return cls(arrays, dtype=dtype)

    def save(self, path) -> None:
        fileio.save_checkpoint(path, {k: v.data for k, v in self.params.items()},
                               {"kind": "feature_extractor"})

    def astype(self, dtype) -> "FeatureExtractor":
        return FeatureExtractor({k: v.data for k, v in self.params.items()}, dtype=dtype)

    def __call__(self, x: Tensor) -> list[Tensor]:
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise ContractViolation(f"feature extractor expects (B,3,H,W), got {x.shape}")
        p = self.params
        feats = []
        for i in range(1, len(EXTRACTOR_WIDTHS) + 1):
            x = ad.relu(ad.conv2d(x, p[f"block{i}.conv1.w"], p[f"block{i}.conv1.b"]))
            x = ad.relu(ad.conv2d(x, p[f"block{i}.conv2.w"], p[f"block{i}.conv2.b"]))
            x = ad.max_pool2d(x)
            feats.append(x)
        return feats


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def alpha_absolute_loss(pred_alpha, gt_alpha) -> Tensor:
    return ad.reduce_mean_abs(_as_tensor(pred_alpha), _as_tensor(gt_alpha))


def foreground_absolute_loss(pred_fg, gt_fg) -> Tensor:
    return ad.reduce_mean_abs(_as_tensor(pred_fg), _as_tensor(gt_fg))


def composite_tensor(alpha: Tensor, fg: Tensor, bg: Tensor) -> Tensor:
    """alpha*F + (1 - alpha)*B for (B,1,H,W) alpha and (B,3,H,W) layers."""
    a3 = ad.repeat_channels(alpha, fg.shape[1])
    return ad.add(bg, ad.mul(a3, ad.sub(fg, bg)))


def alpha_compositional_loss(pred_alpha, gt_alpha, fg, bg) -> Tensor:
    """Mean |composite(F, B, pred) - composite(F, B, gt)|."""
    pred_alpha, gt_alpha = _as_tensor(pred_alpha), _as_tensor(gt_alpha)
    fg, bg = _as_tensor(fg), _as_tensor(bg)
    if pred_alpha.shape != gt_alpha.shape:
        raise ContractViolation(f"alpha shape mismatch {pred_alpha.shape} vs {gt_alpha.shape}")
    if fg.shape != bg.shape or fg.shape[0] != pred_alpha.shape[0] or fg.shape[2:] != pred_alpha.shape[2:]:
        raise ContractViolation(f"layer shapes {fg.shape}/{bg.shape} incompatible with alpha {pred_alpha.shape}")
    return ad.reduce_mean_abs(composite_tensor(pred_alpha, fg, bg), composite_tensor(gt_alpha, fg, bg))


def perceptual_loss(extractor: FeatureExtractor, pred, gt) -> Tensor:
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    if pred.shape != gt.shape:
        raise ContractViolation(f"perceptual_loss: shape mismatch {pred.shape} vs {gt.shape}")
    if pred.shape[1] == 1:
        pred, gt = ad.repeat_channels(pred, 3), ad.repeat_channels(gt, 3)
    gt = gt.detach()
    total = None
    for fp, fg in zip(extractor(pred), extractor(gt)):
        term = ad.reduce_mean_sq(fp, fg)
        total = term if total is None else ad.add(total, term)
    return total


def assemble(terms: dict[str, Tensor], weights: LossWeights, use_perceptual: bool):
    """Weight and sum component losses; returns ``(L_o, L_alpha, L_f)``.

    Perceptual entries are ignored entirely when ``use_perceptual`` is false.
    """
    l_alpha = ad.add(ad.scalar_mul(terms["l_ab_a"], weights.lambda_ab_alpha),
                     ad.scalar_mul(terms["l_c_a"], weights.lambda_c_alpha))
    l_f = ad.scalar_mul(terms["l_ab_f"], weights.lambda_ab_fg)
    if use_perceptual:
        l_alpha = ad.add(l_alpha, ad.scalar_mul(terms["l_p_a"], weights.lambda_p_alpha))
        l_f = ad.add(l_f, ad.scalar_mul(terms["l_p_f"], weights.lambda_p_fg))
    return ad.add(l_alpha, l_f), l_alpha, l_f


def total_loss(weights: LossWeights, config: ModelConfig, sample: dict, pred_alpha: Tensor,
               pred_fg: Tensor, extractor: FeatureExtractor | None):
    """Full objective for one batch.

    ``sample`` maps 'alpha', 'fg', 'bg' to NCHW arrays or tensors.
    Returns ``(L_o, L_alpha, L_f, breakdown)`` where ``breakdown`` holds
    floats for every component and sum.
    """
    gt_alpha, gt_fg, bg = (_as_tensor(sample[k]) for k in ("alpha", "fg", "bg"))
    terms = {
        "l_ab_a": alpha_absolute_loss(pred_alpha, gt_alpha),
        "l_c_a": alpha_compositional_loss(pred_alpha, gt_alpha, gt_fg, bg),
        "l_ab_f": foreground_absolute_loss(pred_fg, gt_fg),
    }
    if config.use_perceptual:
        if extractor is None:
            raise ConfigError("perceptual loss enabled but no feature extractor given")
        terms["l_p_a"] = perceptual_loss(extractor, pred_alpha, gt_alpha)
        terms["l_p_f"] = perceptual_loss(extractor, pred_fg, gt_fg)
    l_o, l_alpha, l_f = assemble(terms, weights, config.use_perceptual)
    breakdown = {k: v.item() for k, v in terms.items()}
    breakdown.setdefault("l_p_a", 0.0)
    breakdown.setdefault("l_p_f", 0.0)
    breakdown.update(L_o=l_o.item(), L_alpha=l_alpha.item(), L_f=l_f.item())
    return l_o, l_alpha, l_f, breakdown
