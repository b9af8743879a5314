"""Mosaic generator: one U-Net, a softmax template mixer, and blending.

The U-Net maps (content patch, canvas grid, noise) to N+4 raw channels:
N mixture logits, one blending-mask channel (sigmoid), three image
channels (tanh). The mixer contracts the softmaxed logits against the
cropped template stack position by position, so its cost is linear in
the number of templates and gradients flow only through the mixture
weights; templates are data. The final image is the exact convex blend
alpha * parametric + (1 - alpha) * memory.

With n_templates == 0 the memory path is disabled: the network still
emits 4 channels, the mask channel is ignored, alpha reports as all
ones and the output is the parametric image alone.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import substrate as S
from .substrate import DiffArray, Parameter, RngState

__all__ = [
    "GeneratorError",
    "UnetConfig",
    "GeneratorOutput",
    "Unet",
    "split_heads",
    "mix_templates",
    "blend",
    "generate",
]

NOISE_SITES = ("input", "bottleneck", "both")

# Channel growth stops at 8x the base width.
_CAP = 8


class GeneratorError(Exception):
    pass


@dataclass(frozen=True)
class UnetConfig:
    n_templates: int
    depth: int = 4
    base_channels: int = 32
    kernel: int = 5
    noise_channels: int = 8
    noise_site: str = "bottleneck"
    coord_injection: bool = True

    def validate(self) -> "UnetConfig":
        if self.n_templates < 0:
            raise GeneratorError(f"n_templates must be >= 0, got {self.n_templates}")
        if self.depth < 2:
            raise GeneratorError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1:
            raise GeneratorError(f"base_channels must be positive, got {self.base_channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise GeneratorError(f"kernel must be odd and positive, got {self.kernel}")
        if self.noise_channels < 0:
            raise GeneratorError(f"noise_channels must be >= 0, got {self.noise_channels}")
        if self.noise_site not in NOISE_SITES:
            raise GeneratorError(f"noise_site must be one of {NOISE_SITES}, got {self.noise_site!r}")
        return self

    @property
    def out_channels(self) -> int:
        return self.n_templates + 4

    def stage_width(self, k: int) -> int:
        """Encoder output channels at stage k (1-based)."""
        return min(self.base_channels * 2 ** (k - 1), _CAP * self.base_channels)


@dataclass
class GeneratorOutput:
    logits: DiffArray | None  # (B, N, H, W) raw mixture logits
    mixture: DiffArray | None  # (B, N, H, W) softmax weights
    alpha: DiffArray  # (B, 1, H, W) in [0, 1]
    parametric: DiffArray  # (B, 3, H, W) in [-1, 1]
    memory: DiffArray | None  # (B, 3, H, W) template mix
    image: DiffArray  # (B, 3, H, W)


def check_patch_extents(h: int, w: int, depth: int) -> None:
    div = 1 << depth
    if h % div or w % div:
        hint_h = -(-h // div) * div
        hint_w = -(-w // div) * div
        raise GeneratorError(
            f"patch extents {h}x{w} are not divisible by 2^depth = {div}; "
            f"pad the patch to {hint_h}x{hint_w}"
        )


def _constant(values: np.ndarray) -> DiffArray:
    return DiffArray(np.ascontiguousarray(values, dtype=np.float32))


def _pool_coords(psi: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return psi
    b, c, h, w = psi.shape
    blocks = psi.reshape(b, c, h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(3, 5), dtype=np.float64).astype(np.float32)


class Unet:
    """Encoder/decoder with skip concatenations and a linear head.

    Every encoder stage is stride-2 conv + batch norm + leaky relu; every
    decoder stage is nearest-upsample conv + batch norm + relu, with the
    matching encoder activation concatenated after upsampling. The canvas
    grid always enters with the content patch; with coord_injection it is
    also box-pooled and concatenated to each deeper encoder stage input.
    """

    def __init__(self, cfg: UnetConfig, rng: RngState, name: str = "g"):
        self.cfg = cfg.validate()
        coord_extra = 2 if cfg.coord_injection else 0
        noise_in = cfg.noise_channels if cfg.noise_site in ("input", "both") else 0
        noise_bot = cfg.noise_channels if cfg.noise_site in ("bottleneck", "both") else 0
        self._noise_split = (noise_in, noise_bot)

        self.enc_convs: list[S.Conv2d] = []
        self.enc_norms: list[S.BatchNorm2d] = []
        in_ch = 3 + 2 + noise_in
        for k in range(1, cfg.depth + 1):
            out_ch = cfg.stage_width(k)
            self.enc_convs.append(
                S.Conv2d(f"{name}.enc{k}.conv", in_ch, out_ch, cfg.kernel, 2, rng)
            )
            self.enc_norms.append(S.BatchNorm2d(f"{name}.enc{k}.bn", out_ch))
            in_ch = out_ch + (coord_extra if k < cfg.depth else 0)

        self.dec_convs: list[S.UpsampleConv2d] = []
        self.dec_norms: list[S.BatchNorm2d] = []
        in_ch = cfg.stage_width(cfg.depth) + noise_bot
        for j in range(cfg.depth, 0, -1):
            out_ch = cfg.stage_width(j - 1) if j > 1 else cfg.base_channels
            self.dec_convs.append(
                S.UpsampleConv2d(f"{name}.dec{j}.conv", in_ch, out_ch, cfg.kernel, rng)
            )
            self.dec_norms.append(S.BatchNorm2d(f"{name}.dec{j}.bn", out_ch))
            in_ch = out_ch + (cfg.stage_width(j - 1) if j > 1 else 0)

        self.head = S.Conv2d(f"{name}.head.conv", in_ch, cfg.out_channels, cfg.kernel, 1, rng)

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for mod in (*self.enc_convs, *self.enc_norms, *self.dec_convs, *self.dec_norms, self.head):
            out.extend(mod.parameters())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for bn in (*self.enc_norms, *self.dec_norms):
            out.update(bn.buffers())
        return out

    def forward(
        self,
        content,
        psi: np.ndarray,
        noise: np.ndarray | None,
        train: bool,
        preacts: list | None = None,
    ) -> DiffArray:
        """Raw (B, N+4, H, W) head output.

        When a list is passed as `preacts`, the float32 values entering
        each nonlinearity are appended to it (diagnostics; also lets
        gradient oracles detect kink crossings).
        """
        cfg = self.cfg
        x = content if isinstance(content, DiffArray) else _constant(content)
        b, c, h, w = x.shape
        if c != 3:
            raise GeneratorError(f"content patch must have 3 channels, got {c}")
        check_patch_extents(h, w, cfg.depth)
        psi = np.asarray(psi, dtype=np.float32)
        if psi.shape != (b, 2, h, w):
            raise GeneratorError(
                f"canvas grid shape {psi.shape} does not match patch {(b, 2, h, w)}"
            )
        noise_in, noise_bot = self._noise_split
        if noise_in or noise_bot:
            noise = np.asarray(noise, dtype=np.float32)
            if noise.shape != (b, cfg.noise_channels):
                raise GeneratorError(
                    f"noise shape {noise.shape} does not match ({b}, {cfg.noise_channels})"
                )

        def noise_plane(hh: int, ww: int) -> DiffArray:
            plane = np.broadcast_to(noise[:, :, None, None], (b, cfg.noise_channels, hh, ww))
            return _constant(plane)

        def act(pre: DiffArray, kind: str) -> DiffArray:
            if preacts is not None:
                preacts.append(pre.values)
            return S.leaky_relu(pre, 0.2) if kind == "leaky" else S.relu(pre)

        parts = [x, _constant(psi)]
        if noise_in:
            parts.append(noise_plane(h, w))
        feat = S.concat(parts, axis=1)

        skips: list[DiffArray] = []
        for k in range(1, cfg.depth + 1):
            feat = act(self.enc_norms[k - 1](self.enc_convs[k - 1](feat), train), "leaky")
            if k < cfg.depth:
                skips.append(feat)
                if cfg.coord_injection:
                    pooled = _pool_coords(psi, 1 << k)
                    feat = S.concat([feat, _constant(pooled)], axis=1)

        if noise_bot:
            feat = S.concat([feat, noise_plane(h >> cfg.depth, w >> cfg.depth)], axis=1)

        for idx, j in enumerate(range(cfg.depth, 0, -1)):
            feat = act(self.dec_norms[idx](self.dec_convs[idx](feat), train), "relu")
            if j > 1:
                feat = S.concat([feat, skips[j - 2]], axis=1)

        return self.head(feat)


def split_heads(raw: DiffArray, n: int) -> tuple[DiffArray, DiffArray, DiffArray]:
    """Raw channels -> (logits, alpha, parametric image)."""
    if n < 1:
        raise GeneratorError(f"split_heads needs n >= 1 mixture channels, got {n}")
    if raw.shape[1] != n + 4:
        raise GeneratorError(
            f"expected {n + 4} raw channels for n = {n}, got {raw.shape[1]}"
        )
    logits = S.narrow(raw, 1, 0, n)
    alpha = S.sigmoid(S.narrow(raw, 1, n, 1))
    parametric = S.tanh(S.narrow(raw, 1, n + 1, 3))
    return logits, alpha, parametric


def mix_templates(mixture: DiffArray, templates: np.ndarray) -> DiffArray:
    """Position-wise contraction of mixture weights with template crops.

    mixture: (B, N, H, W); templates: (B, N, 3, H, W) plain data.
    Returns (B, 3, H, W). Linear in N; gradients reach only the mixture.
    """
    templates = np.asarray(templates, dtype=np.float32)
    b, n, h, w = mixture.shape
    if templates.shape != (b, n, 3, h, w):
        raise GeneratorError(
            f"template stack shape {templates.shape} does not match mixture "
            f"{(b, n, 3, h, w)}"
        )

    values = np.einsum("bnhw,bnchw->bchw", mixture.values, templates, optimize=True)

    def grad_fn(gout: np.ndarray):
        return (np.einsum("bchw,bnchw->bnhw", gout, templates, optimize=True),)

    return S.make_op(values.astype(np.float32, copy=False), (mixture,), grad_fn)


def blend(alpha: DiffArray, parametric: DiffArray, memory: DiffArray) -> DiffArray:
    """Exact convex combination alpha*parametric + (1-alpha)*memory."""
    return S.add(S.mul(alpha, parametric), S.mul(S.sub(1.0, alpha), memory))


def generate(
    unet: Unet,
    content,
    templates: np.ndarray | None,
    psi: np.ndarray,
    noise: np.ndarray | None,
    train: bool,
    preacts: list | None = None,
) -> GeneratorOutput:
    """Full pipeline: U-Net -> heads -> softmax -> mix -> blend."""
    n = unet.cfg.n_templates
    raw = unet.forward(content, psi, noise, train, preacts)
    if n == 0:
        parametric = S.tanh(S.narrow(raw, 1, 1, 3))
        ones = _constant(np.ones((raw.shape[0], 1, raw.shape[2], raw.shape[3]), np.float32))
        return GeneratorOutput(
            logits=None,
            mixture=None,
            alpha=ones,
            parametric=parametric,
            memory=None,
            image=parametric,
        )
    logits, alpha, parametric = split_heads(raw, n)
    mixture = S.softmax_channels(logits)
    memory = mix_templates(mixture, templates)
    image = blend(alpha, parametric, memory)
    return GeneratorOutput(
        logits=logits,
        mixture=mixture,
        alpha=alpha,
        parametric=parametric,
        memory=memory,
        image=image,
    )
