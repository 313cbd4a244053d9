"""``octaquant`` command-line entry point.

Option values resolve as: command-line flag, then the ``--config`` INI file
(section named after the subcommand, plus ``[common]``), then environment
variables (default paths only), then built-in defaults. Every
artifact-producing run writes ``run_<command>.json`` next to its outputs.

Exit codes: 0 success, 2 usage, 3 I/O or format error, 4 computation error.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import augment as aug
from . import imageio, phantom, quantify, segment, training, unet
from .evaluate import accuracy, confusion, dice

log = logging.getLogger("octaquant")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_COMPUTE = 0, 2, 3, 4

# option dest -> environment variable supplying its default path
ENV_PATHS = {
    "weights": "OCTAQUANT_WEIGHTS",
    "normdb": "OCTAQUANT_NORMDB",
    "out_dir": "OCTAQUANT_OUT_DIR",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# value parsers


def _extent(text: str) -> tuple:
    parts = str(text).lower().replace("x", ",").split(",")
    try:
        vals = tuple(int(p) for p in parts if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or HxW, got {text!r}") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected N or HxW with positive extents, got {text!r}")
    return vals


def _pair_range(text: str) -> tuple:
    lo, _, hi = str(text).partition("-")
    try:
        return int(lo), int(hi or lo)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MIN-MAX, got {text!r}") from None


def _grid(text: str) -> list:
    """'1e-4:1e-5,1e-3:1e-5' -> [(1e-4, 1e-5), (1e-3, 1e-5)]"""
    out = []
    for item in str(text).split(","):
        if not item.strip():
            continue
        lr, _, eps = item.partition(":")
        try:
            out.append((float(lr), float(eps)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"grid entries must be LR:EPS, got {item!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty grid")
    return out


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _path(text) -> Path:
    return Path(text)


def _paths(text) -> list:
    if isinstance(text, (list, tuple)):
        return [Path(t) for t in text]
    return [Path(t) for t in str(text).split()]


# --------------------------------------------------------------------------
# option registry


@dataclass
class Opt:
    dest: str
    type: object
    default: object = None
    required: bool = False
    help: str = ""
    choices: tuple | None = None
    multi: bool = False
    flag: bool = False
    name: str | None = None

    @property
    def option(self) -> str:
        return "--" + (self.name or self.dest.replace("_", "-"))


SPECS: dict = {}


def _register(parser, command, opts):
    SPECS[command] = {o.dest: o for o in opts}
    for o in opts:
        name = o.option
        help_text = o.help + (f" (default: {o.default})" if o.default not in (None, False) else "")
        if o.flag:
            parser.add_argument(name, dest=o.dest, action=argparse.BooleanOptionalAction, default=None, help=help_text)
        elif o.multi:
            parser.add_argument(name, dest=o.dest, nargs="+", type=_path, default=None, help=help_text)
        else:
            parser.add_argument(name, dest=o.dest, type=o.type, default=None, choices=o.choices,
                                help=help_text + (" [required]" if o.required else ""))


COMMON = [
    Opt("seed", int, 0, help="master random seed"),
    Opt("jobs", int, 1, help="parallel workers for per-image work"),
]

PHANTOM = [
    Opt("out_dir", _path, required=True, help="output directory"),
    Opt("plexus", str, "SCP", choices=("SCP", "DVC"), help="morphology style"),
    Opt("size", _extent, (512, 512), help="raster size N or HxW"),
    Opt("count", int, 1, help="number of phantoms"),
    Opt("density", float, 0.30, help="vessel density target"),
    Opt("snr", float, None, help="speckle SNR (default per plexus)"),
    Opt("frames", int, 10, help="frames averaged into the averaged image"),
    Opt("faz_radius", float, None, help="FAZ radius in px (default 5%% of side + 5)"),
    Opt("bands", int, None, help="projection band count (DVC)"),
    Opt("pathology_fraction", float, 0.0, help="fraction of items with nonperfusion lesions"),
    Opt("format", str, "png", choices=("png", "pgm"), help="raster format"),
]

AUGMENT = [
    Opt("manifest", _path, required=True, help="input dataset manifest"),
    Opt("out_dir", _path, required=True, help="output directory"),
    Opt("plain_rotations", int, 3, help="plain quarter-turn copies"),
    Opt("contrast_rotations", int, 5, help="contrast-adjusted rotated copies"),
    Opt("contrast_ops", str, "clahe,percentile_remap", help="comma-separated contrast operations"),
    Opt("strips", _pair_range, (4, 12), help="strip count range MIN-MAX"),
    Opt("shuffle_contrast", _bool, False, flag=True, help="also strip-shuffle contrast variants"),
    Opt("clahe_tiles", _extent, (8, 8), help="CLAHE tile grid"),
    Opt("clahe_clip", float, 2.0, help="CLAHE clip limit"),
    Opt("format", str, "png", choices=("png", "pgm"), help="raster format"),
]

TRAIN = [
    Opt("manifest", _path, required=True, help="training set manifest (image, mask, tag)"),
    Opt("out", _path, required=True, help="output weight file (cv: results CSV)"),
    Opt("init", _path, None, help="starting weights (required for stage1/stage2)"),
    Opt("intermediate", _path, None, help="stage-1 weights used for pseudo-labelling (stage2)"),
    Opt("pool", _path, None, help="manifest of single frames with averaged images (stage2)"),
    Opt("gate", float, 0.7, help="pseudo-label Dice gate"),
    Opt("history", _path, None, help="per-epoch history CSV"),
    Opt("epochs", int, None, help="epochs (default per stage preset)"),
    Opt("lr", float, None, help="learning rate (default per stage preset)"),
    Opt("eps", float, None, help="Adam epsilon (default per stage preset)"),
    Opt("batch_size", int, 4, help="tiles per batch"),
    Opt("tile_grid", _extent, (2, 2), help="tiling of each image, RxC"),
    Opt("depth", int, 4, help="U-Net depth for freshly built weights"),
    Opt("base_channels", int, 16, help="first-level channel count"),
    Opt("dropout", float, 0.5, help="dropout probability"),
    Opt("augment", _bool, False, flag=True, help="expand the set with the default augmentation plan"),
    Opt("grid", _grid, None, help="cv candidates LR:EPS,LR:EPS,..."),
    Opt("folds", int, 3, help="cv folds"),
]

SEGMENT = [
    Opt("inputs", _paths, required=True, multi=True, help="input image(s)", name="in"),
    Opt("out", _path, None, help="output mask (single input)"),
    Opt("out_dir", _path, None, help="output directory (several inputs)"),
    Opt("method", str, "unet", choices=("unet", "otsu"), help="segmenter"),
    Opt("weights", _path, None, help="weight file (unet method)"),
    Opt("threshold", float, 0.5, help="probability cut-off"),
    Opt("min_cluster", int, 30, help="smallest kept cluster in px"),
    Opt("connectivity", int, 8, choices=(4, 8), help="cluster connectivity"),
    Opt("tile", _extent, None, help="inference tile size"),
]

QUANTIFY = [
    Opt("out_dir", _path, required=True, help="output directory"),
    Opt("mask", _path, None, help="vessel mask to quantify"),
    Opt("image", _path, None, help="image to segment (with --weights) and underlay the overlay"),
    Opt("weights", _path, None, help="weight file for segmenting --image"),
    Opt("plexus", str, "SCP", choices=("SCP", "DVC"), help="plexus of the input"),
    Opt("normdb", _path, None, help="normative database file"),
    Opt("id", str, None, help="image identifier (default: file stem)"),
    Opt("px_per_mm", float, None, help="scale (default: side / 6 mm)"),
    Opt("laterality", str, "OD", choices=("OD", "OS"), help="eye"),
    Opt("artifacts", str, "auto", choices=("auto", "on", "off"), help="exclude projection artifacts (auto: DVC only)"),
    Opt("artifact_radius", int, 6, help="opening radius for projection artifacts"),
    Opt("window_fraction", float, 0.2, help="central FAZ search window"),
    Opt("threshold", float, 0.5, help="probability cut-off"),
    Opt("min_cluster", int, 30, help="smallest kept cluster in px"),
    Opt("tile", _extent, None, help="inference tile size"),
]

EVAL = [
    Opt("pred", _path, None, help="predicted mask"),
    Opt("ref", _path, None, help="reference mask"),
    Opt("manifest", _path, None, help="manifest of pairs (image column = prediction, mask column = reference)"),
    Opt("out", _path, None, help="output CSV (default: stdout)"),
]

NORMDB = [
    Opt("manifest", _path, required=True, help="cohort manifest"),
    Opt("out", _path, required=True, help="database file to write"),
    Opt("plexus", str, "SCP", choices=("SCP", "DVC"), help="plexus of the cohort"),
    Opt("tags", str, "control", help="comma-separated manifest tags to include"),
    Opt("weights", _path, None, help="segment images with these weights instead of reading masks"),
    Opt("merge", _bool, False, flag=True, help="merge into an existing database at --out"),
    Opt("px_per_mm", float, None, help="scale (default: side / 6 mm)"),
    Opt("window_fraction", float, 0.2, help="central FAZ search window"),
]


def build_parser() -> argparse.ArgumentParser:
    SPECS.clear()
    p = _Parser(prog="octaquant", description="OCT-A vessel segmentation and inter-capillary area quantification")
    p.add_argument("--version", action="version", version=f"octaquant {__version__}")
    p.add_argument("--config", type=_path, default=None, help="INI file with per-subcommand defaults")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, opts, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        _register(sp, name, COMMON + opts)
        return sp

    add("phantom", PHANTOM, "generate synthetic phantoms with a dataset manifest")
    add("augment", AUGMENT, "expand a dataset with rotations, contrast copies and strip shuffles")
    tp = add("train", TRAIN, "train or fine-tune the U-Net, or cross-validate hyperparameters")
    tp.add_argument("stage", choices=("initial", "stage1", "stage2", "cv"))
    add("segment", SEGMENT, "segment images into binary vessel masks")
    add("quantify", QUANTIFY, "ICA/FAZ/ETDRS quantification with SD map")
    add("eval", EVAL, "pixel-wise accuracy and Dice between masks")
    np_ = sub.add_parser("normdb", help="normative database tools")
    nsub = np_.add_subparsers(dest="action", metavar="ACTION", parser_class=_Parser)
    nsub.required = True
    _register(nsub.add_parser("build", help="build a database from control images"), "normdb", COMMON + NORMDB)
    return p


# --------------------------------------------------------------------------
# resolution


@dataclass
class RunConfig:
    command: str
    options: dict
    stage: str | None = None
    config_file: Path | None = None
    verbosity: int = 0
    sources: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.options["seed"]

    @property
    def jobs(self) -> int:
        return self.options["jobs"]

    def replay_argv(self) -> list:
        """Command line that re-executes this run without a config file."""
        argv = ["octaquant", *self.command.split()]
        if self.stage:
            argv.append(self.stage)
        for dest, spec in SPECS[self.command.split()[0]].items():
            v = self.options.get(dest)
            if v is None:
                continue
            name = spec.option
            if spec.flag:
                argv.append(name if v else "--no-" + name[2:])
            elif spec.multi:
                argv += [name, *map(str, v)]
            else:
                argv += [name, _render(v, spec)]
        return argv


def _render(v, spec: Opt) -> str:
    if spec.type is _extent:
        return f"{v[0]}x{v[1]}"
    if spec.type is _pair_range:
        return f"{v[0]}-{v[1]}"
    if spec.type is _grid:
        return ",".join(f"{a!r}:{b!r}" for a, b in v)
    return str(v)


def _read_config(path: Path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise UsageError(f"config file {path}: {exc}") from None
    return cp


def parse_args(argv) -> RunConfig:
    parser = build_parser()
    ns = parser.parse_args(list(argv))
    command = ns.command if ns.command != "normdb" else "normdb"
    specs = SPECS[command]
    aliases = {o.name.replace("-", "_"): d for d, o in specs.items() if o.name}
    file_vals: dict = {}
    if ns.config is not None:
        if not ns.config.is_file():
            raise UsageError(f"config file not found: {ns.config}")
        cp = _read_config(ns.config)
        for section in ("common", command):
            if not cp.has_section(section):
                continue
            for key, raw in cp.items(section):
                dest = key.replace("-", "_")
                dest = aliases.get(dest, dest)
                if dest not in specs:
                    if section == "common":
                        continue
                    raise UsageError(f"config file {ns.config}: unknown option '{key}' in [{section}]")
                file_vals[dest] = raw
    options, sources = {}, {}
    for dest, spec in specs.items():
        val = getattr(ns, dest, None)
        src = "flag"
        if val is None and dest in file_vals:
            raw = file_vals[dest]
            conv = _bool if spec.flag else (_paths if spec.multi else spec.type)
            try:
                val = conv(raw)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config file {ns.config}: option '{dest}': {exc}") from None
            if spec.choices and val not in spec.choices:
                raise UsageError(f"config file {ns.config}: option '{dest}' must be one of {spec.choices}")
            src = "file"
        if val is None and dest in ENV_PATHS and os.environ.get(ENV_PATHS[dest]):
            val, src = Path(os.environ[ENV_PATHS[dest]]), "env"
        if val is None:
            val, src = spec.default, "default"
        if spec.required and val is None:
            raise UsageError(f"{parser.format_usage()}octaquant {command}: error: the option "
                             f"{spec.option} is required")
        options[dest], sources[dest] = val, src
    if options["jobs"] < 1:
        raise UsageError("--jobs must be >= 1")
    verbosity = -1 if ns.quiet else ns.verbose
    cmd = "normdb build" if command == "normdb" else command
    return RunConfig(cmd, options, getattr(ns, "stage", None), ns.config, verbosity, sources)


# --------------------------------------------------------------------------
# helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_run_manifest(cfg: RunConfig, out_dir: Path, artifacts) -> Path:
    """Atomically record the resolved configuration and artifact digests of a run."""
    def plain(v):
        if isinstance(v, Path):
            return str(v)
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v

    doc = {
        "tool": "octaquant",
        "version": __version__,
        "command": cfg.command,
        "stage": cfg.stage,
        "options": {k: plain(v) for k, v in cfg.options.items()},
        "sources": cfg.sources,
        "config_file": str(cfg.config_file) if cfg.config_file else None,
        "replay": cfg.replay_argv(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "artifacts": {str(Path(a)): _sha256(a) for a in artifacts},
    }
    path = Path(out_dir) / f"run_{cfg.command.split()[0]}.json"
    imageio.atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _pmap(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _require(cond: bool, message: str):
    if not cond:
        raise UsageError(message)


def _load_samples(manifest: Path) -> list:
    samples = []
    for e in imageio.read_manifest(manifest):
        if e.mask is None:
            raise imageio.ManifestError(f"{manifest}: entry {e.image} has no mask")
        samples.append(training.Sample(imageio.load_image(e.image), imageio.load_mask(e.mask), e.tag,
                                       {"image": str(e.image)}))
    return samples


def _post(o) -> segment.PostProcessConfig:
    return segment.PostProcessConfig(binarize_threshold=o["threshold"], min_cluster_px=o["min_cluster"],
                                     connectivity=o.get("connectivity", 8))


# --------------------------------------------------------------------------
# subcommands


def cmd_phantom(cfg: RunConfig) -> int:
    o = cfg.options
    out = o["out_dir"]
    template = phantom.PhantomSpec(o["plexus"], o["size"], cfg.seed, o["density"], o["snr"], o["frames"],
                                   o["faz_radius"], o["bands"])
    seeds = phantom.item_seeds(cfg.seed, o["count"])
    n_ctrl = o["count"] - int(round(o["count"] * o["pathology_fraction"]))

    def make(i):
        spec = replace(template, seed=seeds[i])
        tag = "control"
        if i >= n_ctrl:
            spec = replace(spec, dropout_lesions=phantom.random_lesions(spec, np.random.default_rng([seeds[i], 9])))
            tag = "dr"
        return phantom.generate(spec, tag)

    items = _pmap(make, range(o["count"]), cfg.jobs)
    ext = "." + o["format"]
    entries, artifacts = [], []
    for i, ph in enumerate(items):
        stem = f"{o['plexus'].lower()}_{i:04d}"
        paths = {k: out / f"{stem}_{k}{ext}" for k in ("single", "averaged", "mask")}
        imageio.save_image(ph.single, paths["single"])
        imageio.save_image(ph.averaged, paths["averaged"])
        imageio.save_mask(ph.truth, paths["mask"])
        artifacts += paths.values()
        if ph.bands.any():
            bp = out / f"{stem}_bands{ext}"
            imageio.save_mask(ph.bands, bp)
            artifacts.append(bp)
        entries.append(imageio.ManifestEntry(paths["single"], paths["mask"], ph.tag, paths["averaged"]))
    mpath = out / "manifest.txt"
    imageio.atomic_write_text(mpath, imageio.manifest_text(entries, out))
    artifacts.append(mpath)
    write_run_manifest(cfg, out, artifacts)
    log.info("wrote %d phantoms to %s", len(items), out)
    return EXIT_OK


def cmd_augment(cfg: RunConfig) -> int:
    o = cfg.options
    out = o["out_dir"]
    ops = tuple(s.strip() for s in o["contrast_ops"].split(",") if s.strip())
    plan = aug.AugmentPlan(cfg.seed, o["plain_rotations"], o["contrast_rotations"], o["strips"], ops,
                           True, o["shuffle_contrast"], o["clahe_tiles"], o["clahe_clip"])
    entries = imageio.read_manifest(o["manifest"])
    ext = "." + o["format"]

    def work(arg):
        n, e = arg
        if e.mask is None:
            raise imageio.ManifestError(f"{o['manifest']}: entry {e.image} has no mask")
        pairs = aug.expand((imageio.load_image(e.image), imageio.load_mask(e.mask)), plan, seed=cfg.seed + n)
        return n, e, pairs

    new, artifacts = [], []
    for n, e, pairs in _pmap(work, enumerate(entries), cfg.jobs):
        for i, (img, msk) in enumerate(pairs):
            ip, mp = out / f"{e.image.stem}_a{i:02d}{ext}", out / f"{e.image.stem}_a{i:02d}_mask{ext}"
            imageio.save_image(img, ip)
            imageio.save_mask(msk, mp)
            artifacts += [ip, mp]
            new.append(imageio.ManifestEntry(ip, mp, e.tag))
    mpath = out / "manifest.txt"
    imageio.atomic_write_text(mpath, imageio.manifest_text(new, out))
    artifacts.append(mpath)
    write_run_manifest(cfg, out, artifacts)
    log.info("expanded %d pairs into %d (factor %d)", len(entries), len(new), plan.expansion_factor())
    return EXIT_OK


def _train_config(cfg: RunConfig, preset) -> training.TrainConfig:
    o = cfg.options
    kw = {"batch_size": o["batch_size"], "seed": cfg.seed, "tile_grid": o["tile_grid"]}
    if o["epochs"] is not None:
        kw["epochs"] = o["epochs"]
    if o["lr"] is not None:
        kw["learning_rate"] = o["lr"]
    if o["eps"] is not None:
        kw["adam_epsilon"] = o["eps"]
    if o["augment"]:
        kw["augment"] = aug.AugmentPlan(seed=cfg.seed)
    return preset(**kw)


def cmd_train(cfg: RunConfig) -> int:
    o = cfg.options
    stage = cfg.stage
    samples = _load_samples(o["manifest"])
    if o["init"] is not None:
        start = unet.load_weights(o["init"])
    else:
        _require(stage in ("initial", "cv"), f"train {stage} needs --init weights")
        start = unet.build(unet.UnetConfig(depth=o["depth"], base_channels=o["base_channels"],
                                           dropout_p=o["dropout"]), cfg.seed)
    out = o["out"]
    artifacts = []
    if stage == "cv":
        _require(o["grid"] is not None, "train cv needs --grid LR:EPS,...")
        res = training.cross_validate(samples, o["grid"], _train_config(cfg, training.TrainConfig.initial),
                                      o["folds"], start)
        rows = [[r["learning_rate"], r["adam_epsilon"], r["fold"], r["dice"]] for r in res.table]
        imageio.save_csv(out, ["learning_rate", "adam_epsilon", "fold", "dice"], rows)
        artifacts.append(out)
        print(f"best learning_rate={res.best[0]!r} adam_epsilon={res.best[1]!r} "
              f"mean_dice={res.means[res.best]:.4f}")
    else:
        preset = training.TrainConfig.initial if stage == "initial" else training.TrainConfig.fine_tune
        tcfg = _train_config(cfg, preset)
        data = samples
        if stage == "stage2":
            _require(o["intermediate"] is not None and o["pool"] is not None,
                     "train stage2 needs --intermediate weights and a --pool manifest")
            inter = unet.load_weights(o["intermediate"], start.config)
            pool_entries = imageio.read_manifest(o["pool"])
            for e in pool_entries:
                if e.averaged is None:
                    raise imageio.ManifestError(f"{o['pool']}: entry {e.image} has no averaged image")
            pool = [(imageio.load_image(e.averaged), imageio.load_image(e.image)) for e in pool_entries]
            accepted = training.pseudo_label_expand(inter, pool, o["gate"])
            chosen = {s.meta["pool_index"]: s.meta["gate_dice"] for s in accepted}
            report = out.parent / f"{out.stem}_pseudo.csv"
            imageio.save_csv(report, ["pool_index", "image", "gate_dice", "accepted"],
                             [[i, str(e.image), chosen.get(i), int(i in chosen)] for i, e in enumerate(pool_entries)])
            artifacts.append(report)
            data = samples + accepted
            print(f"pseudo-labelling accepted {len(accepted)} of {len(pool)}")
        res = training.train(start, data, tcfg)
        unet.save_weights(res.weights, out)
        artifacts.append(out)
        hist = o["history"] or out.parent / f"{out.stem}_history.csv"
        imageio.save_csv(hist, ["epoch", "loss", "dice"], [[h["epoch"], h["loss"], h["dice"]] for h in res.history])
        artifacts.append(hist)
        if res.history:
            print(f"final epoch {res.history[-1]['epoch']}: loss {res.history[-1]['loss']:.4f} "
                  f"dice {res.history[-1]['dice']:.4f}")
    write_run_manifest(cfg, out.parent, artifacts)
    return EXIT_OK


def cmd_segment(cfg: RunConfig) -> int:
    o = cfg.options
    inputs = o["inputs"]
    _require(o["out"] is not None or o["out_dir"] is not None, "segment needs --out or --out-dir")
    _require(len(inputs) == 1 or o["out_dir"] is not None, "several inputs need --out-dir")
    weights = None
    if o["method"] == "unet":
        _require(o["weights"] is not None, "segment --method unet needs --weights (or OCTAQUANT_WEIGHTS)")
        weights = unet.load_weights(o["weights"])
    post = _post(o)

    def work(path):
        img = imageio.load_image(path)
        if weights is None:
            return segment.remove_small_components(segment.otsu(img), post.min_cluster_px, post.connectivity)
        return segment.segment_image(weights, img, post, o["tile"])[1]

    masks = _pmap(work, inputs, cfg.jobs)
    if o["out"] is not None and len(inputs) == 1:
        targets = [o["out"]]
    else:
        targets = [o["out_dir"] / f"{Path(p).stem}_mask.png" for p in inputs]
    for m, t in zip(masks, targets):
        imageio.save_mask(m, t)
    out_dir = o["out_dir"] if o["out_dir"] is not None else Path(targets[0]).parent
    write_run_manifest(cfg, out_dir, targets)
    return EXIT_OK


def pipeline_run(cfg: RunConfig) -> int:
    """Dispatch a resolved run configuration to its subcommand."""
    handlers = {
        "phantom": cmd_phantom, "augment": cmd_augment, "train": cmd_train, "segment": cmd_segment,
        "quantify": cmd_quantify, "eval": cmd_eval, "normdb build": cmd_normdb,
    }
    return handlers[cfg.command](cfg)


def cmd_quantify(cfg: RunConfig) -> int:
    o = cfg.options
    have_mask, have_image = o["mask"] is not None, o["image"] is not None
    _require(have_mask or (have_image and o["weights"] is not None),
             "quantify needs --mask, or --image with --weights")
    out = o["out_dir"]
    artifacts = []
    image = imageio.load_image(o["image"]) if have_image else None
    if have_mask:
        mask = imageio.load_mask(o["mask"])
        if image is not None and image.shape != mask.shape:
            raise ValueError(f"image {image.shape} and mask {mask.shape} differ in extent")
    else:
        weights = unet.load_weights(o["weights"])
        post = _post(o)
        _, mask = segment.segment_image(weights, image, post, o["tile"])
        mp = out / "mask.png"
        imageio.save_mask(mask, mp)
        artifacts.append(mp)
    artifacts_on = o["artifacts"] == "on" or (o["artifacts"] == "auto" and o["plexus"] == "DVC")
    art = segment.remove_projection_artifacts(mask, o["artifact_radius"])[1] if artifacts_on else None
    image_id = o["id"] or Path(o["mask"] or o["image"]).stem
    report = quantify.quantify(mask, o["plexus"], image_id, o["px_per_mm"], art, o["window_fraction"],
                               o["laterality"])
    db = quantify.NormativeDb.loads(Path(o["normdb"]).read_text()) if o["normdb"] is not None else None
    underlay = image if image is not None else np.where(mask, 255, 0).astype(np.uint8)
    if db is not None:
        rgb, rows = quantify.sd_map(report, db, underlay)
    else:
        rows = quantify.sd_rows(report, None)
        rgb = np.repeat(underlay[..., None], 3, axis=2)
    rp, dp, op = out / "report.csv", out / "density.csv", out / "overlay.png"
    imageio.save_csv(rp, quantify.REPORT_COLUMNS, [r.as_list() for r in rows])
    imageio.save_csv(dp, ["region", "density"], [[k, v] for k, v in report.densities.items()])
    imageio.save_overlay(rgb, op)
    artifacts += [rp, dp, op]
    write_run_manifest(cfg, out, artifacts)
    log.info("%s: %d ICAs, FAZ centroid (%.1f, %.1f)", image_id, len(report.icas()), *report.faz_centroid)
    return EXIT_OK


EVAL_COLUMNS = ("pair_id", "TP", "FP", "FN", "TN", "accuracy", "dice")


def cmd_eval(cfg: RunConfig) -> int:
    o = cfg.options
    if o["manifest"] is not None:
        _require(o["pred"] is None and o["ref"] is None, "use either --manifest or --pred/--ref")
        pairs = []
        for e in imageio.read_manifest(o["manifest"]):
            if e.mask is None:
                raise imageio.ManifestError(f"{o['manifest']}: entry {e.image} has no reference mask")
            pairs.append((e.image.stem, e.image, e.mask))
    else:
        _require(o["pred"] is not None and o["ref"] is not None, "eval needs --pred and --ref, or --manifest")
        pairs = [(o["pred"].stem, o["pred"], o["ref"])]

    def work(item):
        pid, p, r = item
        c = confusion(imageio.load_mask(p), imageio.load_mask(r))
        return [pid, c.TP, c.FP, c.FN, c.TN, accuracy(c), dice(c)]

    rows = _pmap(work, pairs, cfg.jobs)
    if o["out"] is not None:
        imageio.save_csv(o["out"], EVAL_COLUMNS, rows)
        write_run_manifest(cfg, o["out"].parent, [o["out"]])
    else:
        sys.stdout.write(imageio.csv_text(EVAL_COLUMNS, rows))
    return EXIT_OK


def cmd_normdb(cfg: RunConfig) -> int:
    o = cfg.options
    tags = {t.strip() for t in o["tags"].split(",") if t.strip()}
    entries = [e for e in imageio.read_manifest(o["manifest"]) if e.tag in tags]
    if not entries:
        raise ValueError(f"no manifest entries tagged {sorted(tags)}")
    weights = unet.load_weights(o["weights"]) if o["weights"] is not None else None

    def work(e):
        if weights is not None:
            _, mask = segment.segment_image(weights, imageio.load_image(e.image))
        else:
            if e.mask is None:
                raise imageio.ManifestError(f"{o['manifest']}: entry {e.image} has no mask")
            mask = imageio.load_mask(e.mask)
        return quantify.quantify(mask, o["plexus"], e.image.stem, o["px_per_mm"], None, o["window_fraction"])

    db = quantify.build_normative_db(_pmap(work, entries, cfg.jobs))
    if o["merge"] and o["out"].is_file():
        db = quantify.NormativeDb.loads(o["out"].read_text()).merged(db)
    imageio.atomic_write_text(o["out"], db.dumps())
    write_run_manifest(cfg, o["out"].parent, [o["out"]])
    log.info("normative database from %d reports written to %s", len(entries), o["out"])
    return EXIT_OK


# --------------------------------------------------------------------------


def _setup_logging(verbosity: int):
    level = logging.WARNING if verbosity < 0 else (logging.INFO if verbosity == 0 else logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    _setup_logging(cfg.verbosity)
    try:
        return pipeline_run(cfg)
    except UsageError as exc:
        print(f"octaquant {cfg.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, imageio.ImageFormatError, imageio.ManifestError, unet.WeightFileError) as exc:
        print(f"octaquant {cfg.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"octaquant {cfg.command}: computation error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
