"""Command-line pipeline: synth -> tile -> pretrain -> embed -> train-mil -> eval / heatmap.

Every command writes a ``run.json`` provenance record next to its outputs.
Exit codes: 0 ok, 2 usage, 3 I/O, 4 validation or version mismatch, 5 numerical abort.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, checkpoint
from . import evaluate as ev
from . import preprocess as pp
from .dino import DinoConfig, NumericalError, pretrain
from .mil import Bag, MilModel, MilTrainConfig, predict, train_mil
from .tensor import UsageError, ValidationError
from .vit import ViTConfig, ViTModel, embed_tiles

logger = logging.getLogger("selfvitmil")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4, 5

# MIL width in the paper-scale model: (4 + 1) * 768
PAPER_FEATURE_WIDTH = 3840


@dataclass
class RunConfig:
    preset: str = "paper"
    patch_size: int = 224
    min_foreground: float = 0.25
    normalize: bool = False
    vit: dict = field(default_factory=lambda: ViTConfig.vit_b16().to_dict())
    dino: dict = field(default_factory=lambda: DinoConfig().to_dict())
    pretrain_tiles: int | None = None
    k_last: int = 4
    mil: dict = field(default_factory=lambda: _mil_dict(MilTrainConfig()))
    z_cap: float = 2.0
    z_mode: str = "clamp"

    @classmethod
    def paper(cls) -> "RunConfig":
        return cls()

    @classmethod
    def desk(cls) -> "RunConfig":
        """Small ViT on 32 px tiles; runs end to end on one CPU core in minutes.

        The aggregator lr is rescaled by the feature-width ratio: Adam moves each
        weight by about ``lr`` per step, so a score over 80 features moves ~48x
        slower than one over 3840 at the same lr. Small batches give the EMA
        teacher enough steps to move away from its initialisation within a few
        thousand tiles.
        """
        vit = ViTConfig.desk()
        width = (4 + 1) * vit.embed_dim
        dino = DinoConfig(epochs=30, warmup_epochs=3, batch_size=8)
        mil = MilTrainConfig(lr=round(MilTrainConfig().lr * PAPER_FEATURE_WIDTH / width, 6))
        return cls(preset="desk", patch_size=vit.image_size, vit=vit.to_dict(), dino=dino.to_dict(),
                   pretrain_tiles=2000, mil=_mil_dict(mil))

    def validate(self) -> "RunConfig":
        vit = self.vit_config()
        if vit.image_size != self.patch_size:
            raise ValidationError(f"ViT image_size {vit.image_size} must equal tile size {self.patch_size}")
        if not 0.0 <= self.min_foreground <= 1.0:
            raise ValidationError(f"min_foreground must be in [0, 1], got {self.min_foreground}")
        if not 1 <= self.k_last <= vit.num_blocks:
            raise ValidationError(f"k_last must be in [1, {vit.num_blocks}], got {self.k_last}")
        if self.z_mode not in ("clamp", "zero"):
            raise ValidationError(f"z_mode must be 'clamp' or 'zero', got {self.z_mode!r}")
        self.dino_config()
        self.mil_config()
        return self

    def vit_config(self) -> ViTConfig:
        return ViTConfig(**self.vit)

    def dino_config(self) -> DinoConfig:
        return DinoConfig.from_dict(self.dino)

    def mil_config(self) -> MilTrainConfig:
        d = dict(self.mil)
        d["betas"] = tuple(d.get("betas", MilTrainConfig().betas))
        return MilTrainConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _mil_dict(cfg: MilTrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(d["betas"])
    return d


PRESETS = {"paper": RunConfig.paper, "desk": RunConfig.desk}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in out:
            raise ValidationError(f"unknown config key {k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            for kk in v:
                if kk not in out[k]:
                    raise ValidationError(f"unknown config key {k}.{kk}")
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    return out


def resolve_config(args) -> RunConfig:
    """Preset defaults, then the JSON file, then command-line flags."""
    d = PRESETS[args.preset]().to_dict()
    if args.config:
        d = _merge(d, json.loads(Path(args.config).read_text()))
    flags = {
        "patch_size": getattr(args, "patch_size", None),
        "min_foreground": getattr(args, "min_foreground", None),
        "k_last": getattr(args, "k_last", None),
        "z_cap": getattr(args, "z_cap", None),
        "z_mode": getattr(args, "mode", None),
    }
    d.update({k: v for k, v in flags.items() if v is not None})
    if getattr(args, "normalize", False):
        d["normalize"] = True
    if getattr(args, "epochs", None) is not None:
        if args.command == "pretrain":
            # a shorter run keeps its warm-up inside the schedule
            warm = min(d["dino"]["warmup_epochs"], args.epochs)
            d["dino"] = {**d["dino"], "epochs": args.epochs, "warmup_epochs": warm}
        else:
            d["mil"] = {**d["mil"], "epochs": args.epochs}
    if getattr(args, "lr", None) is not None:
        d["mil"] = {**d["mil"], "lr": args.lr}
    return RunConfig(**d).validate()


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def write_run_record(out_dir: Path, args, cfg: RunConfig, extra: dict | None = None) -> None:
    record = {
        "command": args.command,
        "config_hash": checkpoint.config_hash(cfg.to_dict()),
        "seed": getattr(args, "seed", None),
        "version": version_string(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **(extra or {}),
    }
    (out_dir / "run.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def read_labels(path) -> dict[str, int]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not {"slide_id", "label"} <= set(rows[0]):
        raise ValidationError(f"{path} needs slide_id and label columns")
    return {r["slide_id"]: int(r["label"]) for r in rows}


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _tile_dirs(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"tile directory {root} not found")
    return sorted(p.parent for p in root.glob("*/manifest.json"))


# -- commands ---------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    rows, cols = args.grid
    if not 0.0 <= args.positive_fraction <= 1.0:
        raise ValidationError("--positive-fraction must be in [0, 1]")
    out = _out_dir(args.out)
    slide_dir = _out_dir(out / "slides")
    rng = np.random.default_rng(args.seed)
    n_pos = int(round(args.n_slides * args.positive_fraction))
    positive = np.zeros(args.n_slides, dtype=bool)
    positive[rng.permutation(args.n_slides)[:n_pos]] = True
    labels = []
    for i in range(args.n_slides):
        slide_seed = int(rng.integers(2**31))
        cells = []
        if positive[i]:
            k = int(rng.integers(1, args.max_planted + 1))
            cells = [divmod(int(j), cols) for j in rng.choice(rows * cols, size=k, replace=False)]
        slide = pp.synth_slide(slide_seed, (rows, cols), bool(positive[i]), cells, cfg.patch_size,
                               slide_id=f"slide_{i:04d}")
        pp.save_slide(slide, slide_dir)
        labels.append((slide.slide_id, slide.label))
    train, test = [], []
    for cls_ in (0, 1):
        ids = [s for s, y in labels if y == cls_]
        n_test = int(round(len(ids) * args.test_fraction))
        order = rng.permutation(len(ids))
        test += [ids[j] for j in order[:n_test]]
        train += [ids[j] for j in order[n_test:]]
    lookup = dict(labels)
    _write_csv(out / "labels.csv", ["slide_id", "label"], labels)
    _write_csv(out / "train.csv", ["slide_id", "label"], [(s, lookup[s]) for s in sorted(train)])
    _write_csv(out / "test.csv", ["slide_id", "label"], [(s, lookup[s]) for s in sorted(test)])
    write_run_record(out, args, cfg, {"n_slides": args.n_slides, "n_positive": n_pos})
    return EXIT_OK


def _tile_one(job):
    path, patch_size, min_fg, reference, out = job
    slide = pp.load_slide(path)
    ts = pp.filter_tiles(slide, patch_size, min_fg)
    if reference is not None:
        profile = pp.StainProfile.from_json(reference)
        flags = []
        for i, t in enumerate(ts.tiles):
            ts.tiles[i], degenerate = pp.macenko_normalize(t, profile)
            flags.append(bool(degenerate))
        ts.normalized = True
        ts.degenerate = flags
    pp.write_tileset(ts, out)
    return ts.slide_id, len(ts), ts.status


def cmd_tile(args, cfg: RunConfig) -> int:
    src = Path(args.slides)
    paths = sorted(src.glob("*.png")) if src.is_dir() else []
    if not paths:
        raise FileNotFoundError(f"no slide PNGs under {src}")
    out = _out_dir(args.out)
    reference = None
    if cfg.normalize:
        if args.reference:
            ref_pixels = np.asarray(Image.open(args.reference).convert("RGB"))
        else:
            first = pp.filter_tiles(pp.load_slide(paths[0]), cfg.patch_size, cfg.min_foreground)
            if not first.tiles:
                raise ValidationError(f"{paths[0].name} has no tissue tile to fit a reference profile")
            ref_pixels = first.tiles[0]
        reference = pp.fit_stain_profile(ref_pixels).to_json()
        (out / "reference.json").write_text(json.dumps(reference, indent=1) + "\n")
    jobs = [(p, cfg.patch_size, cfg.min_foreground, reference, out) for p in paths]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_tile_one, jobs))
    else:
        results = [_tile_one(j) for j in jobs]
    for slide_id, n, status in results:
        logger.info("%s: %d tiles (%s)", slide_id, n, status)
    write_run_record(out, args, cfg, {"n_slides": len(results), "n_tiles": sum(r[1] for r in results)})
    return EXIT_OK


def cmd_pretrain(args, cfg: RunConfig) -> int:
    dirs = _tile_dirs(args.tiles)
    if args.split:
        keep = set(read_labels(args.split))
        dirs = [d for d in dirs if d.name in keep]
    tiles = [t for d in dirs for t in pp.read_tileset(d).tiles]
    if not tiles:
        raise ValidationError(f"no tiles found under {args.tiles}")
    vit_cfg, dino_cfg = cfg.vit_config(), cfg.dino_config()
    if tiles[0].shape[0] != vit_cfg.image_size:
        raise ValidationError(f"tiles are {tiles[0].shape[0]} px but the ViT expects {vit_cfg.image_size}")
    rng = np.random.default_rng(args.seed)
    if cfg.pretrain_tiles is not None and len(tiles) > cfg.pretrain_tiles:
        tiles = [tiles[i] for i in sorted(rng.permutation(len(tiles))[:cfg.pretrain_tiles])]
    out = _out_dir(args.out)

    def progress(epoch, rec):
        logger.info("epoch %d loss %.4f teacher entropy %.4f", epoch, rec["loss"], rec["teacher_entropy"])

    state = pretrain(tiles, vit_cfg, dino_cfg, seed=args.seed, progress=progress)
    stage = {"vit": cfg.vit, "dino": cfg.dino}
    state.teacher.backbone.save(out / "teacher.ckpt", {"config_hash": checkpoint.config_hash(stage),
                                                       "seed": args.seed, "n_tiles": len(tiles)})
    keys = ["step", "loss", "teacher_entropy", "lr", "tau_t", "lambda"]
    _write_csv(out / "loss.csv", keys, ([r[k] for k in keys] for r in state.trace))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    write_run_record(out, args, cfg, {"n_tiles": len(tiles), "steps": state.step})
    return EXIT_OK


def cmd_embed(args, cfg: RunConfig) -> int:
    model, _ = ViTModel.load(args.checkpoint)
    digest = checkpoint.file_digest(args.checkpoint)
    out = _out_dir(args.out)
    for d in _tile_dirs(args.tiles):
        ts = pp.read_tileset(d)
        emb = embed_tiles(ts.tiles, model, cfg.k_last)
        checkpoint.save_embeddings(out / f"{ts.slide_id}.emb", ts.slide_id, emb,
                                   {"checkpoint": digest, "k_last": cfg.k_last})
        side = {"slide_id": ts.slide_id, "checkpoint": digest, "patch_size": ts.patch_size,
                "grid": list(ts.grid), "bag_label": ts.label, "coords": [list(c) for c in ts.coords],
                "instance_labels": ts.instance_labels}
        (out / f"{ts.slide_id}.coords.json").write_text(json.dumps(side) + "\n")
    write_run_record(out, args, cfg, {"checkpoint": digest})
    return EXIT_OK


def load_bag(emb_dir: Path, slide_id: str, label: int | None = None) -> tuple[Bag, dict]:
    header, emb = checkpoint.load_embeddings(emb_dir / f"{slide_id}.emb")
    side = json.loads((emb_dir / f"{slide_id}.coords.json").read_text())
    coords = [tuple(c) for c in side["coords"]]
    y = side.get("bag_label") if label is None else label
    return Bag(emb, y, slide_id, coords, side.get("instance_labels")), {**header, **side}


def cmd_train_mil(args, cfg: RunConfig) -> int:
    emb_dir = Path(args.embeddings)
    labels = read_labels(args.labels)
    bags, sources = [], set()
    for sid, y in labels.items():
        bag, meta = load_bag(emb_dir, sid, y)
        bags.append(bag)
        sources.add(meta["checkpoint"])
    if len(sources) > 1:
        raise checkpoint.VersionError(f"embeddings come from several checkpoints: {sorted(sources)}")
    out = _out_dir(args.out)

    def progress(epoch, rec):
        logger.info("epoch %d loss %.4f", epoch, rec["loss"])

    model, trace = train_mil(bags, cfg.mil_config(), seed=args.seed, progress=progress)
    model.save(out / "mil.ckpt", {"embedding_checkpoint": sources.pop() if sources else None,
                                  "config_hash": checkpoint.config_hash(cfg.mil), "seed": args.seed})
    _write_csv(out / "loss.csv", ["epoch", "loss"], ((r["epoch"], r["loss"]) for r in trace))
    write_run_record(out, args, cfg, {"n_bags": len(bags)})
    return EXIT_OK


def _check_source(header: dict, meta: dict) -> None:
    want, got = header.get("embedding_checkpoint"), meta.get("checkpoint")
    if want is not None and want != got:
        raise checkpoint.VersionError(f"{meta['slide_id']}: embeddings from checkpoint {got} but the "
                                      f"model was trained on checkpoint {want}")


def cmd_eval(args, cfg: RunConfig) -> int:
    model, header = MilModel.load(args.model)
    emb_dir = Path(args.embeddings)
    labels = read_labels(args.labels)
    rows, scores, ys, atts, inst = [], [], [], [], []
    for sid, y in labels.items():
        bag, meta = load_bag(emb_dir, sid, y)
        _check_source(header, meta)
        pred = predict(bag, model)
        scores.append(pred.final_score)
        ys.append(y)
        atts.append(pred.attention)
        inst.append(bag.instance_labels)
        rows.append((sid, y, f"{pred.final_score:.10g}", f"{pred.probability:.10g}", pred.label,
                     bag.coords[pred.critical_index][0], bag.coords[pred.critical_index][1]))
    curve = ev.roc_auc(scores, ys)
    metrics = {"accuracy": ev.accuracy(ev.predicted_labels(scores), ys), "auc": curve.auc,
               "n_test": len(ys), "threshold": 0.5}
    if all(lab is not None for lab in inst) and any(ys):
        metrics["localization_hit_rate"] = ev.localization_hit_rate(atts, inst, ys)
    out = _out_dir(args.out)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    ev.write_roc_dat(out / "roc.dat", curve)
    _write_csv(out / "predictions.csv",
               ["slide_id", "label", "final_score", "probability", "predicted", "critical_row", "critical_col"],
               rows)
    write_run_record(out, args, cfg, {"model": checkpoint.file_digest(args.model)})
    return EXIT_OK


def cmd_heatmap(args, cfg: RunConfig) -> int:
    model, header = MilModel.load(args.model)
    slide = pp.load_slide(args.slide)
    emb = Path(args.embeddings)
    emb_dir = emb.parent if emb.suffix == ".emb" else emb
    bag, meta = load_bag(emb_dir, slide.slide_id)
    _check_source(header, meta)
    pred = predict(bag, model)
    patch = meta["patch_size"]
    grid = (slide.pixels.shape[0] // patch, slide.pixels.shape[1] // patch)
    intensity = ev.z_filter(pred.attention, cfg.z_cap, cfg.z_mode) if len(bag) > 1 else np.ones(len(bag))
    heat = ev.Heatmap.from_scores(intensity, bag.coords, grid, slide.slide_id)
    annotation = None
    if slide.instance_labels is not None:
        annotation = np.asarray(slide.instance_labels).reshape(grid).astype(bool)
    overlay = ev.render_overlay(slide.pixels, heat, patch, annotation)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay).save(out)
    write_run_record(out.parent, args, cfg, {"slide_id": slide.slide_id,
                                             "final_score": pred.final_score})
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "tile": cmd_tile,
    "pretrain": cmd_pretrain,
    "embed": cmd_embed,
    "train-mil": cmd_train_mil,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
}


def _grid(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 8x8, got {text!r}") from None
    if r < 1 or c < 1:
        raise argparse.ArgumentTypeError("grid extents must be positive")
    return r, c


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file overriding preset values")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    common.add_argument("--show-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="selfvitmil", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic slide corpus")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-slides", type=int, default=200)
    p.add_argument("--grid", type=_grid, default=(8, 8))
    p.add_argument("--positive-fraction", type=float, default=0.5)
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.add_argument("--max-planted", type=int, default=4)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("tile", parents=[common], help="tissue-filter slides into tiles")
    p.add_argument("--slides", required=True)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--min-foreground", type=float)
    p.add_argument("--normalize", action="store_true", help="Macenko-normalise every tile")
    p.add_argument("--reference", help="reference tile PNG for stain normalisation")
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="self-distillation pre-training")
    p.add_argument("--tiles", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--split", help="CSV of slide ids whose tiles may be used")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("embed", parents=[common], help="extract per-tile features")
    p.add_argument("--tiles", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k-last", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-mil", parents=[common], help="train the MIL aggregator")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="slide-level metrics on held-out bags")
    p.add_argument("--model", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("heatmap", parents=[common], help="attention overlay for one slide")
    p.add_argument("--model", required=True)
    p.add_argument("--slide", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--z-cap", type=float)
    p.add_argument("--mode", choices=("clamp", "zero"))
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.show_config:
            print(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
            return EXIT_OK
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
