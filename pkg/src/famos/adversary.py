"""Patch discriminator and the training losses.

The discriminator is a stack of stride-2 convolutions whose last layer
emits one raw score channel, so a patch maps to a spatial grid of
scores, each judging the receptive field beneath it. Two adversarial
families are provided: a saturating-safe cross-entropy pair and a
critic pair with a gradient penalty computed through an explicit
input-gradient graph (so the penalty backpropagates into the kernels).

Content preservation is measured as a mean squared error between
correspondence-map projections of the content patch and the output:
grey value blurring, grey value downsampling, or a small learned 1x1
reconstruction network trained alongside the generator. Four
regularizers shape the mixture weights and the blend mask.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import substrate as S
from .image_ops import GREY_WEIGHTS, gaussian_kernel
from .substrate import DiffArray, Parameter, RngState

__all__ = [
    "AdversaryError",
    "DiscConfig",
    "Discriminator",
    "adv_losses_dcgan",
    "adv_losses_wgan_gp",
    "GaussianGreyMap",
    "DownsampleGreyMap",
    "LearnedReconstructionMap",
    "content_loss",
    "RegTerms",
    "regularizers",
    "LossConfig",
    "total_generator_loss",
]

LOSS_KINDS = ("dcgan", "wgan_gp")
MAP_KINDS = ("gaussian_grey", "downsample_grey", "learned_reconstruction")

# Probabilities are clamped away from {0, 1} before any logarithm.
_CLAMP = 1e-7

# Channel growth stops at 8x the base width, as in the generator.
_CAP = 8


class AdversaryError(Exception):
    pass


def _const(values: np.ndarray) -> DiffArray:
    return DiffArray(np.ascontiguousarray(values, dtype=np.float32))


def _zero() -> DiffArray:
    return DiffArray(np.zeros((1, 1, 1, 1), dtype=np.float32))


# -- discriminator -----------------------------------------------------


@dataclass(frozen=True)
class DiscConfig:
    base_channels: int = 32
    layers: int = 4
    kernel: int = 5
    loss_kind: str = "dcgan"
    gp_weight: float = 10.0

    def validate(self) -> "DiscConfig":
        if self.layers < 2:
            raise AdversaryError(f"layers must be >= 2, got {self.layers}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise AdversaryError(f"kernel must be odd and positive, got {self.kernel}")
        if self.base_channels < 1:
            raise AdversaryError(
                f"base_channels must be positive, got {self.base_channels}"
            )
        if self.loss_kind not in LOSS_KINDS:
            raise AdversaryError(
                f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}"
            )
        if self.gp_weight < 0:
            raise AdversaryError(f"gp_weight must be >= 0, got {self.gp_weight}")
        return self

    def stage_width(self, k: int) -> int:
        """Output channels of layer k (1-based); the last layer has 1."""
        if k == self.layers:
            return 1
        return min(self.base_channels * 2 ** (k - 1), _CAP * self.base_channels)

    def receptive_field(self) -> int:
        """Input extent feeding one score (all layers stride 2)."""
        rf, jump = 1, 1
        for _ in range(self.layers):
            rf += (self.kernel - 1) * jump
            jump *= 2
        return rf


class Discriminator:
    """Stride-2 conv stack scoring overlapping patch neighbourhoods.

    In the cross-entropy family the middle layers are batch-normalized
    (neither the first layer nor the score layer is). The critic family
    keeps the stack normalization-free, because the gradient penalty
    must see a per-sample function of the input alone.
    """

    def __init__(self, cfg: DiscConfig, rng: RngState, name: str = "d"):
        self.cfg = cfg.validate()
        self.convs: list[S.Conv2d] = []
        self.norms: dict[int, S.BatchNorm2d] = {}
        in_ch = 3
        for k in range(1, cfg.layers + 1):
            out_ch = cfg.stage_width(k)
            self.convs.append(
                S.Conv2d(f"{name}.l{k}.conv", in_ch, out_ch, cfg.kernel, 2, rng)
            )
            if cfg.loss_kind == "dcgan" and 1 < k < cfg.layers:
                self.norms[k - 1] = S.BatchNorm2d(f"{name}.l{k}.bn", out_ch)
            in_ch = out_ch

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for conv in self.convs:
            out.extend(conv.parameters())
        for bn in self.norms.values():
            out.extend(bn.parameters())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for bn in self.norms.values():
            out.update(bn.buffers())
        return out

    def _check_patch(self, shape) -> None:
        b, c, h, w = shape
        if c != 3:
            raise AdversaryError(f"patch must have 3 channels, got {c}")
        rf = self.cfg.receptive_field()
        if h < rf or w < rf:
            raise AdversaryError(
                f"patch extents {h}x{w} are smaller than the receptive field "
                f"{rf} of one score"
            )

    def raw_scores(self, patch, train: bool, preacts: list | None = None) -> DiffArray:
        """(B, 1, H/2^layers, W/2^layers) raw score grid."""
        x = patch if isinstance(patch, DiffArray) else _const(patch)
        self._check_patch(x.shape)
        last = len(self.convs) - 1
        for k, conv in enumerate(self.convs):
            x = conv(x)
            if k in self.norms:
                x = self.norms[k](x, train)
            if k < last:
                if preacts is not None:
                    preacts.append(x.values)
                x = S.leaky_relu(x, 0.2)
        return x

    def scores(self, patch, train: bool) -> DiffArray:
        """Probabilities in the cross-entropy family, raw critic values otherwise."""
        raw = self.raw_scores(patch, train)
        if self.cfg.loss_kind == "dcgan":
            return S.sigmoid(raw)
        return raw

    def input_gradient(self, patch: np.ndarray) -> DiffArray:
        """d(sum of scores)/d(patch) as a value differentiable in the kernels.

        Built from explicit conv-input-gradient ops with the activation
        masks of the forward pass held constant (exact for the
        piecewise-linear stack), so a penalty on this gradient reaches
        the kernels when backpropagated.
        """
        if self.norms:
            raise AdversaryError(
                "input gradients need the normalization-free (wgan_gp) stack"
            )
        x = np.ascontiguousarray(patch, dtype=np.float32)
        self._check_patch(x.shape)
        sizes: list[tuple[int, int]] = []
        pre: list[np.ndarray] = []
        last = len(self.convs) - 1
        with S.no_grad():
            cur = DiffArray(x)
            for k, conv in enumerate(self.convs):
                sizes.append((cur.shape[2], cur.shape[3]))
                cur = conv(cur)
                if k < last:
                    pre.append(cur.values)
                    cur = S.leaky_relu(cur, 0.2)
            score_shape = cur.shape

        g = _const(np.ones(score_shape, dtype=np.float32))
        for k in range(last, -1, -1):
            g = S.conv2d_input_grad(g, self.convs[k].weight, sizes[k], stride=2)
            if k > 0:
                mask = np.where(pre[k - 1] > 0, 1.0, 0.2).astype(np.float32)
                g = S.mul(g, _const(mask))
        return g

    def interpolate_grad_norms(
        self, real: np.ndarray, fake: np.ndarray, rng: RngState
    ) -> DiffArray:
        """Per-sample L2 input-gradient norms at random convex mixes."""
        real = np.asarray(real, dtype=np.float32)
        fake = np.asarray(fake, dtype=np.float32)
        if real.shape != fake.shape:
            raise AdversaryError(
                f"real/fake patch shapes differ: {real.shape} vs {fake.shape}"
            )
        u = rng.uniform((real.shape[0], 1, 1, 1), low=0.0, high=1.0)
        mixed = u * real + (1.0 - u) * fake
        g = self.input_gradient(mixed)
        sq = S.reduce_sum(S.mul(g, g), (1, 2, 3))
        return S.sqrt(S.add(sq, 1e-12))


# -- adversarial losses -------------------------------------------------


def adv_losses_dcgan(scores_real: DiffArray, scores_fake: DiffArray):
    """(loss_D, loss_G) from probability score grids.

    loss_D = -mean log D(real) - mean log(1 - D(fake)); the generator
    term is the non-saturating -mean log D(fake). Arguments are clamped
    to [1e-7, 1 - 1e-7], so confident scores stop emitting gradient
    instead of overflowing.
    """
    sr = S.clip(scores_real, _CLAMP, 1.0 - _CLAMP)
    sf = S.clip(scores_fake, _CLAMP, 1.0 - _CLAMP)
    loss_d = S.sub(0.0, S.add(S.mean_all(S.log(sr)), S.mean_all(S.log(S.sub(1.0, sf)))))
    loss_g = S.sub(0.0, S.mean_all(S.log(sf)))
    return loss_d, loss_g


def adv_losses_wgan_gp(
    scores_real: DiffArray,
    scores_fake: DiffArray,
    interpolate_grad_norms: DiffArray,
    gp_weight: float,
):
    """(loss_D, loss_G) for the critic family.

    loss_D = mean(fake) - mean(real) + gp_weight * mean((norm - 1)^2);
    loss_G = -mean(fake). Non-finite gradient norms are rejected so the
    caller can skip the step with the state intact.
    """
    if not np.all(np.isfinite(interpolate_grad_norms.values)):
        raise AdversaryError("non-finite interpolate gradient norm")
    dev = S.sub(interpolate_grad_norms, 1.0)
    penalty = S.mean_all(S.mul(dev, dev))
    loss_d = S.add(
        S.sub(S.mean_all(scores_fake), S.mean_all(scores_real)),
        S.mul(float(gp_weight), penalty),
    )
    loss_g = S.sub(0.0, S.mean_all(scores_fake))
    return loss_d, loss_g


# -- correspondence maps -------------------------------------------------


def _grey_weight() -> DiffArray:
    w = np.asarray(GREY_WEIGHTS, dtype=np.float32).reshape(1, 3, 1, 1)
    return _const(w)


class GaussianGreyMap:
    """Grey projection followed by a normalized blur; a smooth, fixed
    linear map, so only coarse luminance structure is compared."""

    kind = "gaussian_grey"

    def __init__(self, sigma: float = 1.0):
        if sigma <= 0:
            raise AdversaryError(f"sigma must be positive, got {sigma}")
        self.sigma = float(sigma)
        k1 = gaussian_kernel(self.sigma).astype(np.float32)
        k2 = np.outer(k1, k1).astype(np.float32)
        self._grey = _grey_weight()
        self._kernel = _const(k2[None, None])

    def apply(self, image: DiffArray) -> DiffArray:
        grey = S.conv2d(image, self._grey)
        return S.conv2d(grey, self._kernel, padding_mode="reflect")


class DownsampleGreyMap:
    """Grey projection followed by a box mean over factor x factor cells."""

    kind = "downsample_grey"

    def __init__(self, factor: int = 4):
        if factor not in (4, 8, 16):
            raise AdversaryError(f"factor must be one of (4, 8, 16), got {factor}")
        self.factor = int(factor)
        self._grey = _grey_weight()

    def apply(self, image: DiffArray) -> DiffArray:
        return S.avg_pool(S.conv2d(image, self._grey), self.factor)


class LearnedReconstructionMap:
    """Per-pixel 1x1 network (3 -> 8 -> 3) with its own optimizer.

    The map is trained each step to reconstruct the content patch from
    the generated output; the generator's content loss is then measured
    under this map, and its gradient reaches the generator through the
    map's (frozen-for-that-pass) weights.
    """

    kind = "learned_reconstruction"

    def __init__(self, rng: RngState, name: str = "phi_rec",
                 lr: float = 2e-4, beta1: float = 0.5, beta2: float = 0.999):
        self.conv1 = S.Conv2d(f"{name}.l1.conv", 3, 8, 1, 1, rng)
        self.conv2 = S.Conv2d(f"{name}.l2.conv", 8, 3, 1, 1, rng)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)

    def parameters(self) -> list[Parameter]:
        return [*self.conv1.parameters(), *self.conv2.parameters()]

    def apply(self, image: DiffArray) -> DiffArray:
        return self.conv2(S.leaky_relu(self.conv1(image), 0.2))

    def train_step(self, content: np.ndarray, output: np.ndarray) -> float:
        """One reconstruction update: min ||content - map(output)||^2."""
        target = _const(content)
        recon = self.apply(_const(output))
        diff = S.sub(target, recon)
        loss = S.mean_all(S.mul(diff, diff))
        for p in self.parameters():
            p.zero_grad()
        S.backward(loss)
        S.adam_step(self.parameters(), self.lr, self.beta1, self.beta2)
        return float(loss.values.reshape(()))


def content_loss(content, output: DiffArray, cmap) -> DiffArray:
    """Mean squared error between map projections of content and output."""
    c = content if isinstance(content, DiffArray) else _const(content)
    pc = cmap.apply(c)
    po = cmap.apply(output)
    if pc.shape != po.shape:
        raise AdversaryError(
            f"map projections disagree in shape: {pc.shape} vs {po.shape}"
        )
    d = S.sub(pc, po)
    return S.mean_all(S.mul(d, d))


# -- regularizers --------------------------------------------------------


@dataclass
class RegTerms:
    ent_a: DiffArray
    tv_a: DiffArray
    norm_alpha: DiffArray
    tv_alpha: DiffArray


def _tv(x: DiffArray) -> DiffArray:
    """Anisotropic total variation: mean |dx| + mean |dy|."""
    total = _zero()
    h, w = x.shape[2], x.shape[3]
    if w >= 2:
        dx = S.sub(S.narrow(x, 3, 1, w - 1), S.narrow(x, 3, 0, w - 1))
        total = S.add(total, S.mean_all(S.abs_(dx)))
    if h >= 2:
        dy = S.sub(S.narrow(x, 2, 1, h - 1), S.narrow(x, 2, 0, h - 1))
        total = S.add(total, S.mean_all(S.abs_(dy)))
    return total


def regularizers(mixture: DiffArray | None, logits: DiffArray | None,
                 alpha: DiffArray) -> RegTerms:
    """(ent_A, tv_A, norm_alpha, tv_alpha) as differentiable scalars.

    Entropy and total variation act on the normalized mixture (the
    logits enter only through it); without a memory path both are zero.
    ent_A averages the per-pixel entropy -sum_n m ln m, with 0 ln 0 = 0.
    """
    if mixture is None:
        ent = _zero()
        tv_a = _zero()
    else:
        n = mixture.shape[1]
        plogp = S.mul(mixture, S.log(S.add(mixture, 1e-12)))
        ent = S.mul(-float(n), S.mean_all(plogp))
        tv_a = _tv(mixture)
    return RegTerms(
        ent_a=ent,
        tv_a=tv_a,
        norm_alpha=S.mean_all(S.mul(alpha, alpha)),
        tv_alpha=_tv(alpha),
    )


# -- total objective ------------------------------------------------------


@dataclass(frozen=True)
class LossConfig:
    lam: float = 3.0
    map_kind: str = "gaussian_grey"
    map_sigma: float = 1.0
    map_factor: int = 4
    w_ent_a: float = 0.1
    w_tv_a: float = 0.1
    w_norm_alpha: float = 0.5
    w_tv_alpha: float = 0.1
    ent_ramp_steps: int = 0

    def validate(self) -> "LossConfig":
        if self.lam < 0:
            raise AdversaryError(f"lam must be >= 0, got {self.lam}")
        if self.map_kind not in MAP_KINDS:
            raise AdversaryError(
                f"map_kind must be one of {MAP_KINDS}, got {self.map_kind!r}"
            )
        if self.map_sigma <= 0:
            raise AdversaryError(f"map_sigma must be positive, got {self.map_sigma}")
        if self.map_factor not in (4, 8, 16):
            raise AdversaryError(
                f"map_factor must be one of (4, 8, 16), got {self.map_factor}"
            )
        for field in ("w_ent_a", "w_tv_a", "w_norm_alpha", "w_tv_alpha"):
            if getattr(self, field) < 0:
                raise AdversaryError(f"{field} must be >= 0, got {getattr(self, field)}")
        if self.ent_ramp_steps < 0:
            raise AdversaryError(
                f"ent_ramp_steps must be >= 0, got {self.ent_ramp_steps}"
            )
        return self

    def make_map(self, rng: RngState | None = None):
        if self.map_kind == "gaussian_grey":
            return GaussianGreyMap(self.map_sigma)
        if self.map_kind == "downsample_grey":
            return DownsampleGreyMap(self.map_factor)
        if rng is None:
            raise AdversaryError("learned_reconstruction map needs an RngState")
        return LearnedReconstructionMap(rng)

    def ent_weight(self, step: int) -> float:
        """Entropy weight, optionally ramped linearly over the first steps."""
        if self.ent_ramp_steps <= 0:
            return self.w_ent_a
        return self.w_ent_a * min(1.0, step / self.ent_ramp_steps)


def total_generator_loss(adv: DiffArray, content: DiffArray, regs: RegTerms,
                         cfg: LossConfig, ent_weight: float | None = None) -> DiffArray:
    """adv + lam*content + weighted regularizers, rejecting non-finite parts."""
    w_ent = cfg.w_ent_a if ent_weight is None else float(ent_weight)
    parts = [
        ("loss_G_adv", adv, 1.0),
        ("content", content, cfg.lam),
        ("ent_A", regs.ent_a, w_ent),
        ("tv_A", regs.tv_a, cfg.w_tv_a),
        ("norm_alpha", regs.norm_alpha, cfg.w_norm_alpha),
        ("tv_alpha", regs.tv_alpha, cfg.w_tv_alpha),
    ]
    total: DiffArray | None = None
    for name, part, weight in parts:
        if not np.all(np.isfinite(part.values)):
            raise AdversaryError(f"non-finite generator loss part '{name}'")
        if name != "loss_G_adv" and weight == 0.0:
            continue
        term = part if weight == 1.0 else S.mul(float(weight), part)
        total = term if total is None else S.add(total, term)
    return total
