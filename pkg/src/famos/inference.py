"""Chunked roll-out of a trained generator over arbitrarily large images.

The generator is fully convolutional, so a large mosaic can be
assembled from overlapping windows processed one at a time: each chunk
reads a core region plus a halo of context at least half the receptive
field wide, and only the core of its output is kept. Source windows are
clipped at image borders — the convolution stack then pads there
exactly as a whole-image pass would — and extended past ragged
bottom/right edges by symmetric reflection only as far as the next
downsampling-alignment boundary. Noise is drawn once per run, the
canvas grid each chunk sees is a window of one global field, and
normalization layers stay on their running statistics, so the seams
carry no trace of the decomposition and peak working memory is bounded
by a single chunk.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import generator as G
from . import substrate as S
from .generator import UnetConfig
from .substrate import RngState
from .template_memory import MemoryBank, tiling_grid

__all__ = [
    "InferenceError",
    "ChunkSpec",
    "ChunkPlan",
    "receptive_field_chain",
    "receptive_field",
    "aligned_halo",
    "plan_chunks",
    "InferenceResult",
    "infer_full",
    "format_sidecar",
]


class InferenceError(Exception):
    pass


def receptive_field_chain(layers) -> int:
    """Receptive field of a layer chain: rf += (k - 1) * jump, jump *= stride.

    `layers` is a sequence of (kernel, stride) pairs in forward order;
    upsampling stages enter as kernel 1 with stride Fraction(1, 2).
    """
    rf = Fraction(1)
    jump = Fraction(1)
    for kernel, stride in layers:
        rf += (kernel - 1) * jump
        jump *= Fraction(stride)
    return math.ceil(rf)


def _unet_chain(cfg: UnetConfig) -> list[tuple[int, Fraction | int]]:
    chain: list[tuple[int, Fraction | int]] = [(cfg.kernel, 2)] * cfg.depth
    for _ in range(cfg.depth):
        chain.append((1, Fraction(1, 2)))
        chain.append((cfg.kernel, 1))
    chain.append((cfg.kernel, 1))
    return chain


def receptive_field(cfg: UnetConfig) -> int:
    """Receptive field of the generator's encoder-decoder path."""
    return receptive_field_chain(_unet_chain(cfg.validate()))


def aligned_halo(cfg: UnetConfig) -> int:
    """Smallest halo >= half the receptive field that keeps windows aligned.

    Alignment to 2^depth keeps every source window offset on the global
    downsampling grid, which is what makes chunk outputs match the
    whole-image pass in the interior.
    """
    align = 1 << cfg.depth
    need = -(-receptive_field(cfg) // 2)
    return -(-need // align) * align


@dataclass(frozen=True)
class ChunkSpec:
    """One window: where to read, which part is authoritative, where it goes.

    `source` may overhang the bottom/right image edge by less than the
    alignment; the overhang is filled by symmetric reflection. `core` is
    always fully inside the output and `dest` is its top-left corner.
    """

    source: tuple[int, int, int, int]  # (r0, r1, c0, c1)
    core: tuple[int, int, int, int]  # (r0, r1, c0, c1)
    dest: tuple[int, int]  # (row, col)


@dataclass(frozen=True)
class ChunkPlan:
    extents: tuple[int, int]
    core_size: int
    halo: int
    alignment: int
    chunks: tuple[ChunkSpec, ...]


def _spans(extent: int, step: int) -> list[tuple[int, int]]:
    return [(start, min(start + step, extent)) for start in range(0, extent, step)]


def plan_chunks(extents: tuple[int, int], core: int, cfg: UnetConfig) -> ChunkPlan:
    """Tile `extents` into `core`-sized output windows plus context halos.

    Core windows partition the output exactly (the last row/column may
    be narrower). Source windows add `halo` pixels of real context on
    interior sides, stop at image borders so border chunks pad exactly
    like a whole-image pass, and are rounded up past ragged bottom/right
    edges to the next multiple of 2^depth.
    """
    cfg = cfg.validate()
    h, w = int(extents[0]), int(extents[1])
    if h < 1 or w < 1:
        raise InferenceError(f"content extents must be positive, got {tuple(extents)}")
    align = 1 << cfg.depth
    if core < 1 or core % align:
        lower = (core // align) * align
        if lower >= align and (core - lower) <= (lower + align - core):
            nearest = lower
        else:
            nearest = max(align, lower + align)
        raise InferenceError(
            f"chunk core size {core} is infeasible: core + 2*halo must be "
            f"divisible by 2^depth = {align}; nearest feasible core size is {nearest}"
        )
    halo = aligned_halo(cfg)
    chunks: list[ChunkSpec] = []
    for r0, r1 in _spans(h, core):
        for c0, c1 in _spans(w, core):
            s_r0 = max(0, r0 - halo)
            s_r1 = min(h, r1 + halo)
            s_r1 += -(s_r1 - s_r0) % align
            s_c0 = max(0, c0 - halo)
            s_c1 = min(w, c1 + halo)
            s_c1 += -(s_c1 - s_c0) % align
            chunks.append(
                ChunkSpec((s_r0, s_r1, s_c0, s_c1), (r0, r1, c0, c1), (r0, c0))
            )
    return ChunkPlan((h, w), core, halo, align, tuple(chunks))


@dataclass
class InferenceResult:
    """The five assembled maps plus per-chunk allocation accounting."""

    image: np.ndarray  # (3, H, W) blended mosaic
    memory: np.ndarray  # (3, H, W) template mix
    parametric: np.ndarray  # (3, H, W) free synthesis
    alpha: np.ndarray  # (1, H, W) blending mask
    entropy: np.ndarray  # (1, H, W) per-pixel mixture entropy
    alloc_per_chunk: tuple[int, ...]  # float32 elements allocated per chunk

    def maps(self) -> dict[str, np.ndarray]:
        """Maps keyed like training snapshots."""
        return {
            "I": self.image,
            "I_M": self.memory,
            "I_G": self.parametric,
            "alpha": self.alpha,
            "entropy": self.entropy,
        }


def _crop_reflect(
    field: np.ndarray, window: tuple[int, int, int, int], extents: tuple[int, int]
) -> np.ndarray:
    """Window of a (..., H, W) field, symmetric-reflected past the edges."""
    r0, r1, c0, c1 = window
    h, w = extents
    part = field[..., r0 : min(r1, h), c0 : min(c1, w)]
    pad_r = max(0, r1 - h)
    pad_c = max(0, c1 - w)
    if pad_r or pad_c:
        widths = [(0, 0)] * (field.ndim - 2) + [(0, pad_r), (0, pad_c)]
        part = np.pad(part, widths, mode="symmetric")
    return np.ascontiguousarray(part, dtype=np.float32)


def _run_chunk(
    unet: G.Unet,
    chunk: ChunkSpec,
    content: np.ndarray,
    templates: np.ndarray | None,
    coords: np.ndarray,
    noise: np.ndarray,
    extents: tuple[int, int],
) -> dict[str, np.ndarray]:
    patch = _crop_reflect(content, chunk.source, extents)[None]
    psi = _crop_reflect(coords, chunk.source, extents)[None]
    tpl = None
    if templates is not None:
        tpl = _crop_reflect(templates, chunk.source, extents)[None]
    out = G.generate(unet, patch, tpl, psi, noise, train=False)

    r0, r1, c0, c1 = chunk.core
    lr0, lc0 = r0 - chunk.source[0], c0 - chunk.source[2]
    lr1, lc1 = lr0 + (r1 - r0), lc0 + (c1 - c0)

    def core(arr: S.DiffArray) -> np.ndarray:
        return arr.values[0, :, lr0:lr1, lc0:lc1]

    piece = {
        "image": core(out.image),
        "parametric": core(out.parametric),
        "alpha": core(out.alpha),
    }
    if out.memory is not None:
        piece["memory"] = core(out.memory)
        m = core(out.mixture).astype(np.float64)
        ent = -(m * np.log(m + 1e-12)).sum(axis=0, keepdims=True)
        piece["entropy"] = ent.astype(np.float32)
    else:
        piece["memory"] = np.zeros((3, r1 - r0, c1 - c0), np.float32)
        piece["entropy"] = np.zeros((1, r1 - r0, c1 - c0), np.float32)
    return piece


def infer_full(
    unet: G.Unet,
    content: np.ndarray,
    bank: MemoryBank | None,
    plan: ChunkPlan,
    rng: RngState,
) -> InferenceResult:
    """Assemble all five output maps chunk by chunk with frozen statistics.

    The content image may have arbitrary extents. Noise is drawn once up
    front and shared by every chunk; the canvas grid and template crops
    each chunk sees are windows of the global fields restricted to the
    content extents. Any chunk failure aborts the whole run — partial
    mosaics are never returned.
    """
    cfg = unet.cfg
    h, w = plan.extents
    content = np.asarray(content, dtype=np.float32)
    if content.shape != (3, h, w):
        raise InferenceError(
            f"content shape {content.shape} does not match the plan extents {(3, h, w)}"
        )
    align = 1 << cfg.depth
    if plan.alignment != align:
        raise InferenceError(
            f"plan alignment {plan.alignment} does not match the generator's "
            f"2^depth = {align}"
        )
    if plan.halo % align:
        raise InferenceError(
            f"plan halo {plan.halo} is not a multiple of the alignment {align}"
        )
    need = -(-receptive_field(cfg) // 2)
    if plan.halo < need:
        raise InferenceError(
            f"plan halo {plan.halo} is smaller than half the receptive field "
            f"({need} pixels)"
        )

    n = cfg.n_templates
    if n > 0:
        if bank is None:
            raise InferenceError(
                f"the generator mixes {n} templates but no memory bank was given"
            )
        if bank.n != n:
            raise InferenceError(
                f"memory bank holds {bank.n} templates, the generator expects {n}"
            )
        bh, bw = bank.extents
        if bh < h or bw < w:
            raise InferenceError(
                f"memory bank extents {(bh, bw)} do not cover the content "
                f"extents {(h, w)}"
            )
        field_coords = bank.coords[:, :h, :w]
        field_templates = bank.templates[:, :, :h, :w]
    else:
        if bank is not None:
            raise InferenceError(
                f"memory bank holds {bank.n} templates, the generator expects 0"
            )
        field_coords = tiling_grid(h, w)
        field_templates = None

    noise = rng.normal((1, cfg.noise_channels))
    out = {
        "image": np.zeros((3, h, w), np.float32),
        "memory": np.zeros((3, h, w), np.float32),
        "parametric": np.zeros((3, h, w), np.float32),
        "alpha": np.zeros((1, h, w), np.float32),
        "entropy": np.zeros((1, h, w), np.float32),
    }
    allocs: list[int] = []
    for idx, chunk in enumerate(plan.chunks):
        before = S.alloc_count()
        try:
            with S.no_grad():
                piece = _run_chunk(
                    unet, chunk, content, field_templates, field_coords, noise, (h, w)
                )
        except Exception as exc:
            r0, r1, c0, c1 = chunk.core
            raise InferenceError(
                f"chunk {idx + 1}/{len(plan.chunks)} covering rows [{r0}, {r1}) "
                f"cols [{c0}, {c1}) failed; no outputs were produced: {exc}"
            ) from exc
        allocs.append(S.alloc_count() - before)
        r0, r1, c0, c1 = chunk.core
        for key, canvas in out.items():
            canvas[:, r0:r1, c0:c1] = piece[key]
    return InferenceResult(
        image=out["image"],
        memory=out["memory"],
        parametric=out["parametric"],
        alpha=out["alpha"],
        entropy=out["entropy"],
        alloc_per_chunk=tuple(allocs),
    )


def format_sidecar(plan: ChunkPlan, rng: RngState) -> str:
    """Plain-text record of the plan geometry and noise-stream state.

    Passing the recorded seed and counter back through RngState replays
    the run's noise exactly.
    """
    lines = [
        f"extents: {plan.extents[0]} {plan.extents[1]}",
        f"core: {plan.core_size}",
        f"halo: {plan.halo}",
        f"alignment: {plan.alignment}",
        f"rng_seed: {rng.seed}",
        f"rng_counter: {rng.counter}",
        f"chunks: {len(plan.chunks)}",
    ]
    for i, ch in enumerate(plan.chunks, start=1):
        s, k = ch.source, ch.core
        lines.append(
            f"chunk {i}: source {s[0]} {s[1]} {s[2]} {s[3]} "
            f"core {k[0]} {k[1]} {k[2]} {k[3]} dest {ch.dest[0]} {ch.dest[1]}"
        )
    return "\n".join(lines) + "\n"
