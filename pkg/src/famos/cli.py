"""Command-line entry point for the mosaic pipeline.

Subcommands: `templates` (build and export a memory bank), `train`,
`infer` (chunked roll-out of a checkpoint), `bench` (template-mixing
timings), and `inspect` (dump a checkpoint's entries).

All settings live in one flat registry of dotted keys, each with a
documented default. A run is configured by layering, in order: the
defaults, a `--config` file of `key = value` lines, and `--<key> value`
flags. Unknown keys and flags are hard errors. The only environment
variable consulted is FAMOS_OUT_DIR, the fallback output directory.

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 I/O error.
"""
from __future__ import annotations

import argparse
import os
import sys
import time
import timeit
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import adversary as A
from . import generator as G
from . import image_ops
from . import inference as I
from . import template_memory as TM
from . import trainer as T
from .substrate import DiffArray, RngState, SubstrateError

__all__ = ["ConfigError", "InputError", "FIELDS", "main"]

OUT_DIR_ENV = "FAMOS_OUT_DIR"

# The memory bank draws its template offsets from a counter region
# disjoint from both the training stream (counter 0..) and the snapshot
# probe (1 << 62), so bank construction never perturbs either.
_BANK_COUNTER_BASE = 1 << 61


class ConfigError(Exception):
    """Invalid or contradictory configuration; exits with code 2."""


class InputError(Exception):
    """Unreadable or corrupt input data; exits with code 4."""


# -- the settings registry --------------------------------------------------


@dataclass(frozen=True)
class Field:
    key: str
    default: object
    kind: str  # int | float | str | bool
    help: str
    choices: tuple[str, ...] | None = None
    aliases: tuple[str, ...] = ()


FIELDS: tuple[Field, ...] = (
    Field("paths.content", "", "str",
          "comma-separated content image PNGs (training) / one PNG (infer)",
          aliases=("--content",)),
    Field("paths.style", "", "str", "comma-separated style image PNGs",
          aliases=("--style",)),
    Field("paths.out", "", "str",
          f"output directory (default: ${OUT_DIR_ENV} or 'out')",
          aliases=("--out",)),
    Field("paths.manifest", "", "str",
          "template-bank directory with a manifest.json to rebuild offsets from"),
    Field("memory.n", 4, "int", "number of memory templates; 0 disables the "
          "template path (pure parametric synthesis)"),
    Field("memory.mode", "mirror", "str", "style tiling rule",
          choices=TM.MODES),
    Field("memory.target", "", "str",
          "bank extents as HxW; empty = first content image's extents"),
    Field("generator.depth", 4, "int", "encoder/decoder stages"),
    Field("generator.base_channels", 32, "int", "first-stage channel width"),
    Field("generator.kernel", 5, "int", "convolution kernel (odd)"),
    Field("generator.noise_channels", 8, "int", "spatially-constant noise channels"),
    Field("generator.noise_site", "bottleneck", "str", "where noise enters",
          choices=G.NOISE_SITES),
    Field("generator.coord_injection", True, "bool",
          "feed pooled canvas coordinates to deeper encoder stages"),
    Field("disc.base_channels", 32, "int", "discriminator first-stage width"),
    Field("disc.layers", 4, "int", "discriminator stride-2 layers"),
    Field("disc.kernel", 5, "int", "discriminator kernel (odd)"),
    Field("loss.kind", "dcgan", "str", "adversarial family",
          choices=A.LOSS_KINDS),
    Field("loss.gp_weight", 10.0, "float", "gradient-penalty weight (wgan_gp)"),
    Field("loss.lam", 3.0, "float", "content-loss weight lambda"),
    Field("loss.map_kind", "gaussian_grey", "str", "correspondence map",
          choices=A.MAP_KINDS),
    Field("loss.map_sigma", 1.0, "float", "blur sigma (gaussian_grey map)"),
    Field("loss.map_factor", 4, "int", "downsample factor (downsample_grey map)"),
    Field("loss.w_ent_a", 0.1, "float", "mixture entropy regularizer weight"),
    Field("loss.w_tv_a", 0.1, "float", "mixture total-variation weight"),
    Field("loss.w_norm_alpha", 0.5, "float", "blend-mask norm penalty weight"),
    Field("loss.w_tv_alpha", 0.1, "float", "blend-mask total-variation weight"),
    Field("loss.ent_ramp_steps", 0, "int",
          "steps to ramp the entropy weight from 0 to full (0 = constant)"),
    Field("train.patch", 64, "int", "training crop size"),
    Field("train.batch", 4, "int", "batch size"),
    Field("train.lr", 2e-4, "float", "Adam learning rate"),
    Field("train.beta1", 0.5, "float", "Adam beta1"),
    Field("train.beta2", 0.999, "float", "Adam beta2"),
    Field("train.steps", 500, "int", "generator update steps",
          aliases=("--steps",)),
    Field("train.crop_mode", "aligned", "str",
          "how content and memory crop positions relate",
          choices=T.CROP_MODES),
    Field("train.snapshot_every", 100, "int",
          "steps between snapshots and checkpoints"),
    Field("train.seed", 0, "int", "seed for every random stream",
          aliases=("--seed",)),
    Field("train.d_steps_per_g", 0, "int",
          "discriminator updates per generator step (0 = family default)"),
    Field("train.max_retries", 5, "int",
          "consecutive rolled-back steps tolerated before giving up"),
    Field("infer.checkpoint", "", "str", "checkpoint file to roll out",
          aliases=("--checkpoint",)),
    Field("infer.chunk", 0, "int",
          "chunk core size in pixels; 0 = whole image in one chunk",
          aliases=("--chunk",)),
    Field("infer.decompose", False, "bool",
          "also write the template-mix, parametric, blend-mask and entropy maps",
          aliases=("--decompose",)),
    Field("infer.sidecar", False, "bool",
          "write a text sidecar with the chunk plan and noise-stream state",
          aliases=("--sidecar",)),
    Field("infer.seed", 0, "int", "noise seed for inference"),
    Field("bench.repeats", 3, "int", "timing repetitions (the best is kept)"),
)

_BY_KEY = {f.key: f for f in FIELDS}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def parse_value(field: Field, text: str) -> object:
    text = text.strip()
    try:
        if field.kind == "int":
            return int(text)
        if field.kind == "float":
            return float(text)
        if field.kind == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
    except ValueError as exc:
        raise ConfigError(f"bad value for {field.key}: {exc}") from None
    if field.choices and text not in field.choices:
        raise ConfigError(
            f"bad value for {field.key}: must be one of {field.choices}, "
            f"got {text!r}"
        )
    return text


def load_config_file(path: str) -> dict[str, object]:
    """Parse `key = value` lines; unknown keys are hard errors."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read config file {path}: {exc}") from exc
    values: dict[str, object] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(
                f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}"
            )
        key, text = (part.strip() for part in line.split("=", 1))
        if key not in _BY_KEY:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = parse_value(_BY_KEY[key], text)
    return values


def resolve_config(args: argparse.Namespace) -> dict[str, object]:
    """Defaults, then the --config file, then command-line overrides."""
    conf = {f.key: f.default for f in FIELDS}
    raw = vars(args)
    if raw.get("config"):
        conf.update(load_config_file(raw["config"]))
    for field in FIELDS:
        value = raw.get(field.key)
        if value is not None:
            conf[field.key] = parse_value(field, value)
    return conf


# -- shared plumbing ---------------------------------------------------------


def _out_dir(conf) -> Path:
    out = conf["paths.out"] or os.environ.get(OUT_DIR_ENV, "") or "out"
    return Path(out)


def _load_images(spec: str, role: str) -> list[np.ndarray]:
    if not spec:
        raise ConfigError(f"paths.{role} is required for this command")
    images = []
    for name in spec.split(","):
        name = name.strip()
        try:
            images.append(image_ops.load_image(name))
        except (OSError, image_ops.ImageError) as exc:
            raise InputError(f"cannot read {role} image {name}: {exc}") from exc
    return images


def _parse_extents(text: str, key: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        h, w = (int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{key} must look like 96x128, got {text!r}") from None
    return h, w


def _bank_target(conf, content: list[np.ndarray] | None) -> tuple[int, int]:
    if conf["memory.target"]:
        return _parse_extents(conf["memory.target"], "memory.target")
    if content:
        return content[0].shape[1], content[0].shape[2]
    raise ConfigError(
        "memory.target is required when no content image sets the extents"
    )


def _make_bank(conf, styles: list[np.ndarray], target: tuple[int, int]) -> TM.MemoryBank:
    n = conf["memory.n"]
    mode = conf["memory.mode"]
    if n == 0:
        # Pure parametric mode: the bank carries only the canvas grid.
        h, w = target
        return TM.MemoryBank(
            templates=np.zeros((0, 3, h, w), np.float32),
            offsets=np.zeros((0, 2), np.float64),
            mode=mode,
            source_ids=(),
            coords=TM.tiling_grid(h, w),
        )
    if conf["paths.manifest"]:
        manifest = TM.read_manifest(conf["paths.manifest"])
        entries = manifest["templates"]
        if len(entries) != n:
            raise ConfigError(
                f"manifest holds {len(entries)} templates, memory.n is {n}"
            )
        return TM.build_memory(
            styles, n=n, target=target, mode=manifest["mode"],
            offsets=[e["offset"] for e in entries],
            source_ids=[e["source_id"] for e in entries],
        )
    rng = RngState(conf["train.seed"], _BANK_COUNTER_BASE)
    return TM.build_memory(styles, n=n, target=target, mode=mode, rng=rng)


def _model_configs(conf):
    unet_cfg = G.UnetConfig(
        n_templates=conf["memory.n"],
        depth=conf["generator.depth"],
        base_channels=conf["generator.base_channels"],
        kernel=conf["generator.kernel"],
        noise_channels=conf["generator.noise_channels"],
        noise_site=conf["generator.noise_site"],
        coord_injection=conf["generator.coord_injection"],
    ).validate()
    disc_cfg = A.DiscConfig(
        base_channels=conf["disc.base_channels"],
        layers=conf["disc.layers"],
        kernel=conf["disc.kernel"],
        loss_kind=conf["loss.kind"],
        gp_weight=conf["loss.gp_weight"],
    ).validate()
    loss_cfg = A.LossConfig(
        lam=conf["loss.lam"],
        map_kind=conf["loss.map_kind"],
        map_sigma=conf["loss.map_sigma"],
        map_factor=conf["loss.map_factor"],
        w_ent_a=conf["loss.w_ent_a"],
        w_tv_a=conf["loss.w_tv_a"],
        w_norm_alpha=conf["loss.w_norm_alpha"],
        w_tv_alpha=conf["loss.w_tv_alpha"],
        ent_ramp_steps=conf["loss.ent_ramp_steps"],
    ).validate()
    train_cfg = T.TrainConfig(
        patch=conf["train.patch"],
        batch=conf["train.batch"],
        lr=conf["train.lr"],
        beta1=conf["train.beta1"],
        beta2=conf["train.beta2"],
        steps=conf["train.steps"],
        crop_mode=conf["train.crop_mode"],
        snapshot_every=conf["train.snapshot_every"],
        seed=conf["train.seed"],
        d_steps_per_g=conf["train.d_steps_per_g"],
    ).validate()
    return unet_cfg, disc_cfg, loss_cfg, train_cfg


# -- subcommands -------------------------------------------------------------


def cmd_templates(conf, args) -> int:
    if conf["memory.n"] < 1:
        raise ConfigError("the templates command needs memory.n >= 1")
    styles = _load_images(conf["paths.style"], "style")
    content = None
    if conf["paths.content"]:
        content = _load_images(conf["paths.content"], "content")
    target = _bank_target(conf, content)
    bank = _make_bank(conf, styles, target)
    out = _out_dir(conf) / "templates"
    TM.export_bank(bank, out)
    print(f"wrote {bank.n} template PNGs and manifest.json to {out}")
    return 0


def cmd_train(conf, args) -> int:
    content = _load_images(conf["paths.content"], "content")
    styles = _load_images(conf["paths.style"], "style")
    unet_cfg, disc_cfg, loss_cfg, train_cfg = _model_configs(conf)
    bank = _make_bank(conf, styles, _bank_target(conf, content))
    out = _out_dir(conf)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    state = T.run_training(
        content, styles, bank, unet_cfg, disc_cfg, loss_cfg, train_cfg, out,
        max_retries=conf["train.max_retries"],
    )
    print(
        f"trained {state.step} steps in {time.time() - started:.1f}s; "
        f"metrics, snapshots and checkpoints in {out}"
    )
    return 0


def _restored_state(conf):
    """Build the configured model and load the checkpoint into it."""
    path = conf["infer.checkpoint"]
    if not path:
        raise ConfigError("infer.checkpoint is required")
    unet_cfg, disc_cfg, loss_cfg, train_cfg = _model_configs(conf)
    state = T.make_state(unet_cfg, disc_cfg, loss_cfg, train_cfg)
    try:
        entries = T.load_checkpoint(path)
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    except T.TrainerError as exc:
        raise InputError(f"corrupt checkpoint {path}: {exc}") from exc
    try:
        T.restore_state(state, entries)
    except T.TrainerError as exc:
        raise ConfigError(
            f"checkpoint {path} does not match the configured model: {exc}"
        ) from exc
    return state, unet_cfg


def _map_to_png(kind: str, arr: np.ndarray, n: int) -> np.ndarray:
    """Rescale a map to [-1, 1] the same way training snapshots do."""
    if kind == "alpha":
        return (2.0 * arr - 1.0).astype(np.float32)
    if kind == "entropy":
        if n <= 1:
            return np.zeros_like(arr, dtype=np.float32)
        return (2.0 * arr / np.log(n) - 1.0).astype(np.float32)
    return arr


def cmd_infer(conf, args) -> int:
    contents = _load_images(conf["paths.content"], "content")
    if len(contents) != 1:
        raise ConfigError("infer takes exactly one content image")
    content = contents[0]
    state, unet_cfg = _restored_state(conf)
    h, w = content.shape[1:]
    bank = None
    if conf["memory.n"] > 0:
        styles = _load_images(conf["paths.style"], "style")
        bank = _make_bank(conf, styles, (h, w))
    core = conf["infer.chunk"]
    align = 1 << unet_cfg.depth
    if core == 0:
        core = -(-max(h, w) // align) * align
    plan = I.plan_chunks((h, w), core, unet_cfg)
    rng = RngState(conf["infer.seed"])
    out = _out_dir(conf)
    out.mkdir(parents=True, exist_ok=True)
    if conf["infer.sidecar"]:
        (out / "mosaic_sidecar.txt").write_text(I.format_sidecar(plan, rng))
    result = I.infer_full(state.unet, content, bank, plan, rng)
    kinds = list(T.SNAPSHOT_KINDS) if conf["infer.decompose"] else ["I"]
    written = []
    for kind in kinds:
        arr = _map_to_png(kind, result.maps()[kind], unet_cfg.n_templates)
        path = out / f"mosaic_{kind}.png"
        image_ops.save_image(arr, path)
        written.append(path.name)
    print(
        f"rolled out {len(plan.chunks)} chunk(s) over {h}x{w}; "
        f"wrote {', '.join(written)} to {out}"
    )
    return 0


def _time_call(fn, repeats: int) -> float:
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=max(1, repeats), number=number)) / number


def cmd_bench(conf, args) -> int:
    """Time aligned template mixing against a full-attention reference.

    Aligned mixing is linear in the template count N; the reference
    attends over every spatial position and scales with (H*W)^2, which
    is why it only runs at a reduced size. The per-N timings land in a
    CSV with one row per N plus one row for the reference.
    """
    repeats = conf["bench.repeats"]
    rng = np.random.default_rng(0)
    rows = []
    h = w = 64
    for n in (8, 16, 32, 64):
        logits = rng.standard_normal((1, n, h, w)).astype(np.float32)
        mix = np.exp(logits)
        mix /= mix.sum(axis=1, keepdims=True)
        mixture = DiffArray(mix)
        templates = rng.uniform(-1.0, 1.0, (1, n, 3, h, w)).astype(np.float32)
        seconds = _time_call(lambda: G.mix_templates(mixture, templates), repeats)
        rows.append(("aligned", n, h, w, seconds))
    ref_h = ref_w = 32
    ref_n = 8
    positions = ref_h * ref_w
    logits = rng.standard_normal((ref_n, positions, positions)).astype(np.float32)
    attention = np.exp(logits - logits.max())
    attention /= attention.sum(axis=(0, 2), keepdims=True)
    flat = rng.uniform(-1.0, 1.0, (ref_n, 3, positions)).astype(np.float32)
    seconds = _time_call(
        lambda: np.einsum("npq,ncq->cp", attention, flat, optimize=True), repeats
    )
    rows.append(("full_attention", ref_n, ref_h, ref_w, seconds))

    out = _out_dir(conf)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bench.csv"
    with open(path, "w") as fh:
        fh.write("kind,n,height,width,seconds\n")
        for kind, n, hh, ww, seconds in rows:
            fh.write(f"{kind},{n},{hh},{ww},{seconds!r}\n")
    for kind, n, hh, ww, seconds in rows:
        print(f"{kind:>15} n={n:<3d} {hh}x{ww}  {seconds * 1e6:10.1f} us/call")
    aligned = {n: s for kind, n, _, _, s in rows if kind == "aligned"}
    print(f"aligned scaling N=64/N=8: {aligned[64] / aligned[8]:.2f}x")
    ref = rows[-1][4]
    # The reference at matched N is slower by roughly the H*W factor the
    # aligned formulation removes; reported for context, not asserted.
    print(f"full attention vs aligned at N=8: {ref / aligned[8]:.0f}x slower")
    print(f"wrote {path}")
    return 0


def cmd_inspect(conf, args) -> int:
    path = args.checkpoint
    try:
        entries = T.load_checkpoint(path)
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    except T.TrainerError as exc:
        raise InputError(f"corrupt checkpoint {path}: {exc}") from exc
    scalars = {k: v for k, v in entries.items() if isinstance(v, (int, np.integer))}
    arrays = {k: v for k, v in entries.items() if isinstance(v, np.ndarray)}
    print(f"checkpoint {path}: {len(entries)} entries")
    counters = 0
    for key in sorted(scalars):
        if key.endswith(".adam.t"):
            counters += 1
        else:
            print(f"  {key} = {scalars[key]}")
    if counters:
        print(f"  ({counters} per-parameter optimizer step counters)")
    hints = []
    head = arrays.get("g.head.conv.w")
    if head is not None:
        hints.append(f"n_templates={head.shape[0] - 4}")
    enc = [k for k in arrays if k.startswith("g.enc") and k.endswith(".conv.w")]
    if enc:
        hints.append(f"generator depth={len(enc)}")
        first = arrays.get("g.enc1.conv.w")
        if first is not None:
            hints.append(f"generator base_channels={first.shape[0]}")
    disc = [k for k in arrays if k.startswith("d.l") and k.endswith(".conv.w")]
    if disc:
        hints.append(f"disc layers={len(disc)}")
    if hints:
        print("inferred model: " + ", ".join(hints))
    for key in sorted(arrays):
        shape = "x".join(str(s) for s in arrays[key].shape)
        print(f"  {key}  f32 {shape}")
    return 0


# -- argument parsing --------------------------------------------------------


_COMMANDS = {
    "templates": (cmd_templates, "build a template memory bank and export it"),
    "train": (cmd_train, "train a mosaic generator"),
    "infer": (cmd_infer, "roll a trained checkpoint over a content image"),
    "bench": (cmd_bench, "time template mixing against a full-attention reference"),
    "inspect": (cmd_inspect, "dump a checkpoint's entries and inferred model"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="famos",
        description="Adversarial mosaic stylization with a template memory.",
        allow_abbrev=False,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (func, help_text) in _COMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text, allow_abbrev=False)
        sub.set_defaults(func=func)
        if name == "inspect":
            sub.add_argument("checkpoint", help="checkpoint file to inspect")
            continue
        sub.add_argument(
            "--config", metavar="FILE",
            help="flat 'key = value' settings file applied before flag overrides",
        )
        for field in FIELDS:
            flag = f"--{field.key}"
            extra: dict = {}
            if field.kind == "bool":
                # A bare flag means true; an explicit value still works.
                extra = {"nargs": "?", "const": "true"}
            sub.add_argument(
                flag, *field.aliases, dest=field.key, metavar=field.kind.upper(),
                help=f"{field.help} (default: {field.default})", **extra,
            )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "inspect":
            conf = None
        else:
            conf = resolve_config(args)
        return args.func(conf, args)
    except ConfigError as exc:
        print(f"famos: config error: {exc}", file=sys.stderr)
        return 2
    except T.DivergenceError as exc:
        print(f"famos: training diverged: {exc}", file=sys.stderr)
        return 3
    except InputError as exc:
        print(f"famos: i/o error: {exc}", file=sys.stderr)
        return 4
    except (OSError, image_ops.ImageError) as exc:
        print(f"famos: i/o error: {exc}", file=sys.stderr)
        return 4
    except (G.GeneratorError, A.AdversaryError, TM.TemplateError,
            I.InferenceError, T.TrainerError, SubstrateError) as exc:
        print(f"famos: config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
