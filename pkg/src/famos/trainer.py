"""Alternating adversarial training over random patch crops.

Each step updates the discriminator one or more times on fresh real and
fake score grids, then the generator once on its total loss. All
randomness flows through a single counter-based RngState, so a run is
fully determined by its seed, and a checkpoint (a versioned binary of
every parameter, optimizer slot, normalization statistic, the RngState
and the step counter) resumes the metric stream bit-identically.

A non-finite loss aborts the step and rolls parameters, optimizer
slots and normalization buffers back to the pre-step snapshot; the
random stream keeps advancing so a retry sees a fresh batch instead of
deterministically reproducing the same failure.
"""
from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adversary as A
from . import generator as G
from . import image_ops
from . import substrate as S
from .substrate import DiffArray, Parameter, RngState
from .template_memory import MemoryBank, crop_with_coords

__all__ = [
    "TrainerError",
    "DivergenceError",
    "TrainConfig",
    "TrainState",
    "TrainMetrics",
    "CollapseReport",
    "METRIC_COLUMNS",
    "SNAPSHOT_KINDS",
    "make_state",
    "sample_batch",
    "train_step",
    "monitor_collapse",
    "write_snapshots",
    "save_checkpoint",
    "load_checkpoint",
    "restore_state",
    "run_training",
]

log = logging.getLogger("famos.trainer")

CROP_MODES = ("aligned", "independent")
SNAPSHOT_KINDS = ("I", "I_M", "I_G", "alpha", "entropy")
METRIC_COLUMNS = (
    "step", "loss_D", "loss_G_adv", "content",
    "ent_A", "tv_A", "norm_alpha", "tv_alpha",
)

# Collapse verdict thresholds as fractions of ln N, and the step count
# before a persistently uniform mixture starts counting as a failure.
_COLLAPSE_LOW = 0.05
_COLLAPSE_HIGH = 0.9
_COLLAPSE_WARMUP = 200

# Decay of the running loss averages kept in TrainState.
_EMA_DECAY = 0.99

# The snapshot probe draws its noise from a counter region disjoint
# from the training stream (which starts at 0 and only increments), so
# probing never perturbs training randomness and survives resume.
_PROBE_COUNTER_BASE = 1 << 62

_MAGIC = b"FAMO"
_VERSION = 1
_TAG_F32 = 0
_TAG_U64 = 1


class TrainerError(Exception):
    pass


class DivergenceError(TrainerError):
    """A training step produced a non-finite loss and was rolled back."""


# -- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    patch: int = 64
    batch: int = 4
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    steps: int = 500
    crop_mode: str = "aligned"
    snapshot_every: int = 100
    seed: int = 0
    d_steps_per_g: int = 0  # 0 picks the loss-family default (1 or 5)

    def validate(self) -> "TrainConfig":
        if self.patch < 1:
            raise TrainerError(f"patch must be positive, got {self.patch}")
        if self.batch < 1:
            raise TrainerError(f"batch must be >= 1, got {self.batch}")
        if self.lr <= 0:
            raise TrainerError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise TrainerError(
                f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}"
            )
        if self.steps < 0:
            raise TrainerError(f"steps must be >= 0, got {self.steps}")
        if self.crop_mode not in CROP_MODES:
            raise TrainerError(
                f"crop_mode must be one of {CROP_MODES}, got {self.crop_mode!r}"
            )
        if self.snapshot_every < 1:
            raise TrainerError(
                f"snapshot_every must be >= 1, got {self.snapshot_every}"
            )
        if self.d_steps_per_g < 0:
            raise TrainerError(
                f"d_steps_per_g must be >= 0, got {self.d_steps_per_g}"
            )
        return self

    def resolved_d_steps(self, loss_kind: str) -> int:
        if self.d_steps_per_g > 0:
            return self.d_steps_per_g
        return 5 if loss_kind == "wgan_gp" else 1


@dataclass
class CollapseReport:
    mean_entropy: float
    usage: np.ndarray  # mean mixture weight per template, sums to 1
    verdict: str  # healthy | collapse_low | collapse_high


@dataclass
class TrainMetrics:
    step: int
    loss_d: float
    loss_g_adv: float
    content: float
    ent_a: float
    tv_a: float
    norm_alpha: float
    tv_alpha: float
    collapse: CollapseReport

    def row(self) -> list:
        return [self.step, self.loss_d, self.loss_g_adv, self.content,
                self.ent_a, self.tv_a, self.norm_alpha, self.tv_alpha]


@dataclass
class TrainState:
    """Everything a checkpoint must capture to resume bit-identically."""

    unet: G.Unet
    disc: A.Discriminator
    cmap: object
    rng: RngState
    step: int = 0
    running: dict[str, float] = field(default_factory=dict)

    def parameters(self) -> list[Parameter]:
        out = [*self.unet.parameters(), *self.disc.parameters()]
        if isinstance(self.cmap, A.LearnedReconstructionMap):
            out.extend(self.cmap.parameters())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = dict(self.unet.buffers())
        out.update(self.disc.buffers())
        return out


def make_state(
    unet_cfg: G.UnetConfig,
    disc_cfg: A.DiscConfig,
    loss_cfg: A.LossConfig,
    train_cfg: TrainConfig,
) -> TrainState:
    train_cfg.validate()
    loss_cfg.validate()
    if train_cfg.patch % (1 << unet_cfg.depth) != 0:
        raise TrainerError(
            f"patch {train_cfg.patch} is not divisible by 2^depth = "
            f"{1 << unet_cfg.depth}"
        )
    rf = disc_cfg.receptive_field()
    if train_cfg.patch < rf:
        raise TrainerError(
            f"patch {train_cfg.patch} is smaller than the discriminator "
            f"receptive field {rf}"
        )
    rng = RngState(train_cfg.seed)
    unet = G.Unet(unet_cfg, rng)
    disc = A.Discriminator(disc_cfg, rng)
    cmap = loss_cfg.make_map(rng)
    return TrainState(unet=unet, disc=disc, cmap=cmap, rng=rng)


# -- patch sampling --------------------------------------------------------


def _usable(images: list[np.ndarray], patch: int, role: str) -> list[np.ndarray]:
    kept = []
    for i, img in enumerate(images):
        if img.shape[-2] < patch or img.shape[-1] < patch:
            warnings.warn(
                f"{role} source {i} with extents {img.shape[-2]}x"
                f"{img.shape[-1]} is smaller than the patch {patch}; skipped"
            )
            continue
        kept.append(img)
    if not kept:
        raise TrainerError(f"all {role} sources are smaller than the patch {patch}")
    return kept


def sample_batch(
    content: list[np.ndarray],
    styles: list[np.ndarray],
    bank: MemoryBank,
    cfg: TrainConfig,
    rng: RngState,
):
    """Uniform random patch crops for one step.

    Returns (content batch, texture batch, (template batch, coord
    batch)). In aligned mode the memory window reuses the content crop
    coordinates; in independent mode both are drawn separately. The
    texture (real) crop is always its own draw. Per batch element the
    stream is consumed in a fixed order - content source, style source,
    positions, texture position - so a given RngState reproduces the
    batch exactly.
    """
    p = cfg.patch
    content = _usable(content, p, "content")
    styles = _usable(styles, p, "style")
    bh, bw = bank.extents
    if bh < p or bw < p:
        raise TrainerError(
            f"memory bank extents {bh}x{bw} are smaller than the patch {p}"
        )

    ic = np.empty((cfg.batch, 3, p, p), np.float32)
    it = np.empty((cfg.batch, 3, p, p), np.float32)
    tpl = np.empty((cfg.batch, bank.n, 3, p, p), np.float32)
    psi = np.empty((cfg.batch, 2, p, p), np.float32)
    for b in range(cfg.batch):
        src = content[rng.integer(0, len(content))]
        tex = styles[rng.integer(0, len(styles))]
        ch, cw = src.shape[-2], src.shape[-1]
        if cfg.crop_mode == "aligned":
            r = rng.integer(0, min(ch, bh) - p + 1)
            c = rng.integer(0, min(cw, bw) - p + 1)
            rm, cm = r, c
        else:
            r = rng.integer(0, ch - p + 1)
            c = rng.integer(0, cw - p + 1)
            rm = rng.integer(0, bh - p + 1)
            cm = rng.integer(0, bw - p + 1)
        rt = rng.integer(0, tex.shape[-2] - p + 1)
        ct = rng.integer(0, tex.shape[-1] - p + 1)
        ic[b] = src[:, r:r + p, c:c + p]
        it[b] = tex[:, rt:rt + p, ct:ct + p]
        templates, coords = crop_with_coords(bank, (rm, cm), (p, p))
        tpl[b] = templates
        psi[b] = coords
    return ic, it, (tpl, psi)


# -- collapse monitoring ---------------------------------------------------


def monitor_collapse(
    mixture: np.ndarray | None,
    n: int,
    step: int,
    warmup: int = _COLLAPSE_WARMUP,
) -> CollapseReport:
    """Entropy / usage health of the mixture weights.

    collapse_low fires at any step once the mean per-pixel entropy
    drops under 0.05 ln N; collapse_high (everything mixed to an
    average) only counts after the warmup, because early training is
    legitimately near-uniform.
    """
    if mixture is None or n == 0:
        return CollapseReport(0.0, np.zeros((0,), np.float64), "healthy")
    m = mixture.astype(np.float64)
    ent = float(-(m * np.log(m + 1e-12)).sum(axis=1).mean())
    usage = m.mean(axis=(0, 2, 3))
    ln_n = float(np.log(n)) if n > 1 else 0.0
    if n > 1 and ent < _COLLAPSE_LOW * ln_n:
        verdict = "collapse_low"
    elif n > 1 and step >= warmup and ent > _COLLAPSE_HIGH * ln_n:
        verdict = "collapse_high"
    else:
        verdict = "healthy"
    return CollapseReport(ent, usage, verdict)


# -- one optimization step -------------------------------------------------


def _capture(state: TrainState) -> dict:
    params = {
        p.name: (p.values.copy(), p.m.copy(), p.v.copy(), p.t)
        for p in state.parameters()
    }
    buffers = {name: buf.copy() for name, buf in state.buffers().items()}
    return {
        "params": params,
        "buffers": buffers,
        "step": state.step,
        "running": dict(state.running),
    }


def _restore(state: TrainState, snap: dict) -> None:
    for p in state.parameters():
        values, m, v, t = snap["params"][p.name]
        p.array.values[...] = values
        p.m[...] = m
        p.v[...] = v
        p.t = t
    live = state.buffers()
    for name, buf in snap["buffers"].items():
        live[name][...] = buf
    state.step = snap["step"]
    state.running = dict(snap["running"])


def _scalar(x: DiffArray) -> float:
    return float(x.values.reshape(()))


def _check_finite(value: float, name: str) -> None:
    if not np.isfinite(value):
        raise A.AdversaryError(f"non-finite {name}")


def train_step(
    state: TrainState,
    batch,
    loss_cfg: A.LossConfig,
    train_cfg: TrainConfig,
) -> TrainMetrics:
    """One alternation: D updated d_steps times, then G once.

    On any non-finite loss or gradient the step is rolled back (random
    stream excepted) and DivergenceError is raised.
    """
    snap = _capture(state)
    try:
        return _train_step_inner(state, batch, loss_cfg, train_cfg)
    except (A.AdversaryError, S.SubstrateError) as exc:
        _restore(state, snap)
        log.warning("step %d aborted and rolled back: %s", state.step, exc)
        raise DivergenceError(
            f"step {state.step} aborted and rolled back: {exc}"
        ) from exc


def _train_step_inner(
    state: TrainState,
    batch,
    loss_cfg: A.LossConfig,
    train_cfg: TrainConfig,
) -> TrainMetrics:
    ic, it, (tpl, psi) = batch
    unet, disc = state.unet, state.disc
    wgan = disc.cfg.loss_kind == "wgan_gp"
    b = ic.shape[0]
    nc = unet.cfg.noise_channels

    loss_d_val = float("nan")
    real_vals: np.ndarray | None = None
    for _ in range(train_cfg.resolved_d_steps(disc.cfg.loss_kind)):
        noise = state.rng.normal((b, nc))
        with S.no_grad():
            fake = G.generate(unet, ic, tpl, psi, noise, train=True).image.values
        real_scores = disc.scores(it, train=True)
        fake_scores = disc.scores(fake, train=True)
        if wgan:
            norms = disc.interpolate_grad_norms(it, fake, state.rng)
            loss_d, _ = A.adv_losses_wgan_gp(
                real_scores, fake_scores, norms, disc.cfg.gp_weight
            )
        else:
            loss_d, _ = A.adv_losses_dcgan(real_scores, fake_scores)
        loss_d_val = _scalar(loss_d)
        _check_finite(loss_d_val, "loss_D")
        for p in disc.parameters():
            p.zero_grad()
        S.backward(loss_d)
        S.adam_step(disc.parameters(), train_cfg.lr, train_cfg.beta1,
                    train_cfg.beta2)
        real_vals = real_scores.values

    noise = state.rng.normal((b, nc))
    out = G.generate(unet, ic, tpl, psi, noise, train=True)
    fake_scores = disc.scores(out.image, train=True)
    real_const = DiffArray(real_vals)
    if wgan:
        ones = DiffArray(np.ones((b, 1, 1, 1), np.float32))
        _, loss_g_adv = A.adv_losses_wgan_gp(real_const, fake_scores, ones, 0.0)
    else:
        _, loss_g_adv = A.adv_losses_dcgan(real_const, fake_scores)
    content_term = A.content_loss(ic, out.image, state.cmap)
    regs = A.regularizers(out.mixture, out.logits, out.alpha)
    total = A.total_generator_loss(
        loss_g_adv, content_term, regs, loss_cfg,
        ent_weight=loss_cfg.ent_weight(state.step),
    )
    for p in unet.parameters():
        p.zero_grad()
    S.backward(total)
    S.adam_step(unet.parameters(), train_cfg.lr, train_cfg.beta1,
                train_cfg.beta2)
    if isinstance(state.cmap, A.LearnedReconstructionMap):
        state.cmap.train_step(ic, out.image.values)

    if __debug__:
        for p in state.parameters():
            if not np.all(np.isfinite(p.values)):
                raise S.SubstrateError(
                    f"non-finite values in parameter '{p.name}' after update"
                )

    collapse = monitor_collapse(
        out.mixture.values if out.mixture is not None else None,
        unet.cfg.n_templates,
        state.step,
    )
    metrics = TrainMetrics(
        step=state.step,
        loss_d=loss_d_val,
        loss_g_adv=_scalar(loss_g_adv),
        content=_scalar(content_term),
        ent_a=_scalar(regs.ent_a),
        tv_a=_scalar(regs.tv_a),
        norm_alpha=_scalar(regs.norm_alpha),
        tv_alpha=_scalar(regs.tv_alpha),
        collapse=collapse,
    )
    for key, value in zip(METRIC_COLUMNS[1:], metrics.row()[1:]):
        old = state.running.get(key, value)
        # Float32 arithmetic keeps the averages exactly representable in
        # the checkpoint, so a resumed run carries identical state.
        state.running[key] = float(
            np.float32(_EMA_DECAY) * np.float32(old)
            + np.float32(1.0 - _EMA_DECAY) * np.float32(value)
        )
    state.step += 1
    return metrics


# -- snapshots -------------------------------------------------------------


def make_probe(
    content: list[np.ndarray],
    bank: MemoryBank,
    unet_cfg: G.UnetConfig,
    train_cfg: TrainConfig,
):
    """Fixed inputs for periodic snapshots: the top-left content patch,
    the matching memory window, and noise from a reserved counter
    region so probing never consumes training randomness."""
    p = train_cfg.patch
    src = _usable(content, p, "content")[0]
    templates, coords = crop_with_coords(bank, (0, 0), (p, p))
    probe_rng = RngState(train_cfg.seed, _PROBE_COUNTER_BASE)
    noise = probe_rng.normal((1, unet_cfg.noise_channels))
    return {
        "content": np.ascontiguousarray(src[None, :, :p, :p], dtype=np.float32),
        "templates": np.ascontiguousarray(templates[None], dtype=np.float32),
        "psi": np.ascontiguousarray(coords[None], dtype=np.float32),
        "noise": noise,
    }


def write_snapshots(state: TrainState, probe: dict, out_dir: Path) -> list[Path]:
    """Evaluate the generator on the probe and write the five maps.

    An I/O failure is logged and skipped so training continues.
    """
    with S.no_grad():
        out = G.generate(
            state.unet, probe["content"], probe["templates"], probe["psi"],
            probe["noise"], train=False,
        )
    p = probe["content"].shape[-1]
    n = state.unet.cfg.n_templates
    zeros = np.zeros((3, p, p), np.float32)
    memory = out.memory.values[0] if out.memory is not None else zeros
    alpha = out.alpha.values[0]
    if out.mixture is not None and n > 1:
        m = out.mixture.values[0].astype(np.float64)
        ent = -(m * np.log(m + 1e-12)).sum(axis=0) / np.log(n)
    else:
        ent = np.zeros((p, p), np.float64)
    images = {
        "I": out.image.values[0],
        "I_M": memory,
        "I_G": out.parametric.values[0],
        "alpha": (2.0 * alpha - 1.0).astype(np.float32),
        "entropy": (2.0 * ent[None] - 1.0).astype(np.float32),
    }
    written = []
    for kind in SNAPSHOT_KINDS:
        path = Path(out_dir) / f"snap_{state.step:08d}_{kind}.png"
        try:
            image_ops.save_image(images[kind], str(path))
        except OSError as exc:
            log.warning("snapshot %s failed: %s", path, exc)
            continue
        written.append(path)
    return written


# -- checkpointing ---------------------------------------------------------


def _checkpoint_entries(state: TrainState) -> list[tuple[str, object]]:
    """Stable, ordered inventory of everything a resume needs."""
    entries: list[tuple[str, object]] = []
    for p in state.parameters():
        entries.append((p.name, p.values))
        entries.append((p.name + ".adam.m", p.m))
        entries.append((p.name + ".adam.v", p.v))
        entries.append((p.name + ".adam.t", int(p.t)))
    for name, buf in state.buffers().items():
        entries.append((name, buf))
    for key in sorted(state.running):
        entries.append((f"running.{key}", np.asarray([state.running[key]], np.float32)))
    entries.append(("rng.seed", int(state.rng.seed)))
    entries.append(("rng.counter", int(state.rng.counter)))
    entries.append(("step", int(state.step)))
    return entries


def save_checkpoint(state: TrainState, path) -> None:
    """Versioned binary: magic, version, then one named entry per
    parameter, Adam slot, normalization statistic, running average,
    RngState field, and the step counter."""
    blobs = [_MAGIC, struct.pack("<I", _VERSION)]
    entries = _checkpoint_entries(state)
    blobs.append(struct.pack("<I", len(entries)))
    for name, value in entries:
        raw_name = name.encode("utf-8")
        blobs.append(struct.pack("<I", len(raw_name)))
        blobs.append(raw_name)
        if isinstance(value, (int, np.integer)):
            blobs.append(struct.pack("<BB", _TAG_U64, 0))
            blobs.append(struct.pack("<Q", int(value)))
        else:
            arr = np.ascontiguousarray(value, dtype="<f4")
            blobs.append(struct.pack("<BB", _TAG_F32, arr.ndim))
            blobs.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            blobs.append(arr.tobytes())
    data = b"".join(blobs)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_checkpoint(path) -> dict[str, object]:
    """Parse a checkpoint into {entry name: array or int}.

    Bad magic or version is rejected by name; a short file is rejected
    with the byte offset where the payload ran out.
    """
    data = Path(path).read_bytes()
    off = 0

    def take(count: int) -> bytes:
        nonlocal off
        if off + count > len(data):
            raise TrainerError(
                f"truncated checkpoint: needed {count} bytes at offset {off}, "
                f"file has {len(data)}"
            )
        piece = data[off:off + count]
        off += count
        return piece

    magic = take(4)
    if magic != _MAGIC:
        raise TrainerError(f"bad checkpoint magic {magic!r}, expected {_MAGIC!r}")
    version = struct.unpack("<I", take(4))[0]
    if version != _VERSION:
        raise TrainerError(
            f"unsupported checkpoint version {version}, expected {_VERSION}"
        )
    count = struct.unpack("<I", take(4))[0]
    entries: dict[str, object] = {}
    for _ in range(count):
        name_len = struct.unpack("<I", take(4))[0]
        name = take(name_len).decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2))
        if tag == _TAG_U64:
            entries[name] = struct.unpack("<Q", take(8))[0]
        elif tag == _TAG_F32:
            extents = struct.unpack(f"<{rank}I", take(4 * rank))
            size = int(np.prod(extents, dtype=np.int64)) if rank else 1
            payload = take(4 * size)
            entries[name] = np.frombuffer(payload, "<f4").reshape(extents).copy()
        else:
            raise TrainerError(f"unknown dtype tag {tag} in entry '{name}'")
    return entries


def restore_state(state: TrainState, entries: dict[str, object]) -> TrainState:
    """Apply a parsed checkpoint in place, validating names and extents."""

    def fetch(name: str) -> object:
        if name not in entries:
            raise TrainerError(f"checkpoint is missing entry '{name}'")
        return entries[name]

    def fetch_array(name: str, want_shape) -> np.ndarray:
        value = fetch(name)
        if not isinstance(value, np.ndarray):
            raise TrainerError(f"checkpoint entry '{name}' is not an array")
        if tuple(value.shape) != tuple(want_shape):
            raise TrainerError(
                f"checkpoint entry '{name}' has extents {tuple(value.shape)}, "
                f"the model expects {tuple(want_shape)}"
            )
        return value

    for p in state.parameters():
        p.array.values[...] = fetch_array(p.name, p.values.shape)
        p.m[...] = fetch_array(p.name + ".adam.m", p.m.shape)
        p.v[...] = fetch_array(p.name + ".adam.v", p.v.shape)
        p.t = int(fetch(p.name + ".adam.t"))
    for name, buf in state.buffers().items():
        buf[...] = fetch_array(name, buf.shape)
    state.running = {
        name[len("running."):]: float(value[0])
        for name, value in entries.items()
        if name.startswith("running.") and isinstance(value, np.ndarray)
    }
    state.rng.seed = int(fetch("rng.seed"))
    state.rng.counter = int(fetch("rng.counter"))
    state.step = int(fetch("step"))
    return state


# -- training loop ---------------------------------------------------------


def _append_metrics(path: Path, rows: list[list]) -> None:
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            fh.write(",".join(METRIC_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def run_training(
    content: list[np.ndarray],
    styles: list[np.ndarray],
    bank: MemoryBank,
    unet_cfg: G.UnetConfig,
    disc_cfg: A.DiscConfig,
    loss_cfg: A.LossConfig,
    train_cfg: TrainConfig,
    out_dir,
    state: TrainState | None = None,
    max_retries: int = 5,
    on_metrics=None,
) -> TrainState:
    """Train until cfg.steps, writing metrics, snapshots and checkpoints.

    Passing a restored state resumes from its step counter. A diverged
    step is retried on a fresh batch up to max_retries consecutive
    times; past that the error propagates with the last good checkpoint
    intact on disk.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if state is None:
        state = make_state(unet_cfg, disc_cfg, loss_cfg, train_cfg)
    probe = make_probe(content, bank, unet_cfg, train_cfg)
    metrics_path = out_dir / "metrics.csv"
    last_path = out_dir / "checkpoint_last.bin"
    if state.step == 0:
        write_snapshots(state, probe, out_dir)
        save_checkpoint(state, last_path)
    failures = 0
    while state.step < train_cfg.steps:
        batch = sample_batch(content, styles, bank, train_cfg, state.rng)
        try:
            metrics = train_step(state, batch, loss_cfg, train_cfg)
        except DivergenceError:
            failures += 1
            log.warning(
                "divergence %d/%d at step %d", failures, max_retries, state.step
            )
            if failures >= max_retries:
                raise
            continue
        failures = 0
        _append_metrics(metrics_path, [metrics.row()])
        if on_metrics is not None:
            on_metrics(metrics)
        if state.step % train_cfg.snapshot_every == 0:
            write_snapshots(state, probe, out_dir)
            save_checkpoint(state, last_path)
    save_checkpoint(state, out_dir / "checkpoint_final.bin")
    return state
