"""Command line entry point: ``mmseq <command> ...``.

Results go to stdout as JSON, artifacts go to files. Exit codes: 0 success,
1 verification failure, 2 usage or validation error. ``MMSEQ_SEED`` in the
environment overrides any configured seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

EXIT_OK, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2

RECIPES = Path(__file__).parent / "recipes"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run manifests


def blob_hash(data: bytes) -> str:
    """Git's blob object id for ``data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_inputs(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        if p.is_file():
            out[str(p)] = blob_hash(p.read_bytes())
        elif p.is_dir():
            for f in sorted(q for q in p.rglob("*") if q.is_file()):
                out[str(f)] = blob_hash(f.read_bytes())
    return out


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "run_manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True) + "\n")
        return path


def env_seed(default: int) -> int:
    v = os.environ.get("MMSEQ_SEED")
    return int(v) if v else default


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_plan_grid(args) -> int:
    from .dynres import plan_grid
    if min(args.height, args.width, args.tile) <= 0 or (args.tile_width is not None and args.tile_width <= 0):
        raise UsageError("height, width and tile must be positive")
    plan = plan_grid(args.height, args.width, args.tile, args.tile_width or args.tile)
    _emit(plan.to_json())
    return EXIT_OK


def cmd_tile(args) -> int:
    from .dynres import partition
    from .image import read_netpbm, write_netpbm
    img = read_netpbm(args.image)
    out = Path(args.out)
    RunManifest("tile", {"tile": args.tile, "tile_width": args.tile_width}, None,
                hash_inputs([args.image]), ["plan.json", "tiles/", "global.ppm"]).write(out)
    plan, tiles, glob = partition(img, args.tile, args.tile_width or args.tile)
    (out / "tiles").mkdir(parents=True, exist_ok=True)
    ext = ".ppm" if img.channels == 3 else ".pgm"
    names = []
    for cell, t in zip(plan.cells, tiles):
        name = f"tiles/tile_r{cell.row}_c{cell.col}{ext}"
        write_netpbm(out / name, t)
        names.append(name)
    write_netpbm(out / f"global{ext}", glob)
    info = plan.to_json() | {"tiles": names, "global": f"global{ext}", "source": str(args.image)}
    (out / "plan.json").write_text(json.dumps(info, indent=1) + "\n")
    _emit(info)
    return EXIT_OK


def cmd_codec_encode_box(args) -> int:
    from .codec import BBox, encode_box, render
    toks = encode_box(BBox(args.x, args.y, args.w, args.h))
    _emit({"tokens": toks, "text": render(toks)})
    return EXIT_OK


def _read_tokens(arg: str | None) -> list[int]:
    text = arg if arg is not None else sys.stdin.read()
    text = text.strip()
    try:
        vals = json.loads(text) if text.startswith("[") else [int(t) for t in text.replace(",", " ").split()]
    except ValueError as e:
        raise UsageError(f"could not read token ids: {e}") from None
    if not all(isinstance(v, int) for v in vals):
        raise UsageError("token ids must be integers")
    return vals


def cmd_codec_parse(args) -> int:
    from .codec import parse_box_spans
    toks = _read_tokens(args.tokens)
    boxes, errors = parse_box_spans(toks)
    _emit({"boxes": [{"position": p, "box": list(b.astuple())} for p, b in boxes],
           "errors": [{"position": e.position, "reason": e.reason} for e in errors]})
    return EXIT_OK if not errors else EXIT_VERIFY


def cmd_make_corpus(args) -> int:
    from .corpus import build_sample_corpus, build_task_corpus
    out = Path(args.out)
    RunManifest("make-corpus", {"which": args.which}, None, {}, ["manifest.jsonl", "images/"]).write(out)
    (build_sample_corpus if args.which == "sample" else build_task_corpus)(out)
    _emit({"corpus": args.which, "manifest": str(out / "manifest.jsonl")})
    return EXIT_OK


def _vit_from_args(args):
    from .vitsim import VisualTokenizer, VisualTokenizerConfig
    return VisualTokenizer(VisualTokenizerConfig(tile=args.vit_tile, patch_size=args.patch_size,
                                                 embed_dim=args.visual_dim, seed=args.vit_seed))


def cmd_pack(args) -> int:
    from .seqpack import dir_resolver, pack, read_manifest, save_corpus, validate
    from .trainer import PACK_META
    vit = _vit_from_args(args)
    out = Path(args.out)
    manifest = Path(args.manifest)
    RunManifest("pack", {"vit_tile": args.vit_tile, "patch_size": args.patch_size, "visual_dim": args.visual_dim,
                         "vit_seed": args.vit_seed, "eos": not args.no_eos}, args.vit_seed,
                hash_inputs([manifest]), ["sequences.jsonl", "blobs/", PACK_META, "validation.json"]).write(out)
    docs = read_manifest(manifest)
    if not docs:
        raise UsageError(f"{manifest}: no documents")
    resolve = dir_resolver(manifest.parent)
    seqs, report = [], {}
    for d in docs:
        try:
            s = pack(d, vit, resolve, eos=not args.no_eos)
        except (OSError, ValueError) as e:
            raise UsageError(f"document {d.doc_id}: {e}") from None
        seqs.append(s)
        report[d.doc_id] = validate(s, vit.embed_dim)
    save_corpus(seqs, out)
    (out / PACK_META).write_text(json.dumps({"vit_checksum": vit.checksum(), "visual_dim": vit.embed_dim,
                                             "documents": len(seqs), "eos": not args.no_eos}, indent=1) + "\n")
    bad = {k: v for k, v in report.items() if v}
    (out / "validation.json").write_text(json.dumps(report, indent=1) + "\n")
    _emit({"sequences": len(seqs), "invalid": bad, "out": str(out)})
    return EXIT_VERIFY if bad else EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import OP_CASES, run_suite
    if args.inject_fault is not None and args.inject_fault not in OP_CASES:
        raise UsageError(f"unknown op {args.inject_fault!r}")
    report = run_suite(range(args.seeds), fault=args.inject_fault)
    _emit(report)
    return EXIT_OK if report["ok"] else EXIT_VERIFY


def _train_config(args):
    from .trainer import apply_env, load_config, parse_config
    cfg = load_config(args.config, env={})
    if args.set:
        cfg = parse_config("\n".join(args.set), base=cfg)
    if getattr(args, "corpus", None):
        cfg.corpus = args.corpus
    if args.out:
        cfg.out_dir = args.out
    return apply_env(cfg)


def cmd_pretrain(args) -> int:
    from .trainer import pretrain
    cfg = _train_config(args)
    if args.resume and not (Path(args.resume) / "manifest.json").is_file():
        raise UsageError(f"no checkpoint at {args.resume}")
    RunManifest("pretrain", dataclasses.asdict(cfg), cfg.seed,
                hash_inputs([args.config, cfg.corpus, args.resume]),
                ["config.txt", "metrics.csv", "final/"]).write(cfg.out_dir)
    res = pretrain(cfg, resume_from=args.resume)
    _emit({"checkpoint": str(res.checkpoint), "steps": len(res.metrics),
           "initial_ce": res.metrics[0]["ce"] if res.metrics else None} | res.final)
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .trainer import finetune
    cfg = _train_config(args)
    base = args.base or cfg.base_checkpoint
    if not base or not (Path(base) / "manifest.json").is_file():
        raise UsageError(f"base checkpoint not found: {base!r}")
    cfg.base_checkpoint = str(base)
    RunManifest("finetune", dataclasses.asdict(cfg), cfg.seed,
                hash_inputs([args.config, cfg.corpus, base]), ["config.txt", "metrics.csv", "adapter/"]).write(cfg.out_dir)
    res = finetune(cfg, base)
    _emit({"adapter": str(res.checkpoint), "steps": len(res.metrics)} | res.final)
    return EXIT_OK


def detok_dataset(manifests, vit):
    """Every distinct image of one or more corpus manifests, resized to one tile, with its visual features."""
    from . import detok
    from .dynres import upsample
    from .seqpack import ImageItem, dir_resolver, read_manifest, target_features
    if isinstance(manifests, (str, Path)):
        manifests = [manifests]
    data, seen = [], set()
    t = vit.cfg.tile
    for manifest in manifests:
        resolve = dir_resolver(Path(manifest).parent)
        for d in read_manifest(manifest):
            for it in d.items:
                key = (Path(manifest).parent / it.ref).resolve() if isinstance(it, ImageItem) else None
                if key is None or key in seen:
                    continue
                seen.add(key)
                img = resolve(it.ref)
                data.append(detok.DetokExample(target_features(img, vit), upsample(img, (t, t))))
    if not data:
        raise UsageError(f"{', '.join(map(str, manifests))}: no images to train on")
    return data


def cmd_train_detok(args) -> int:
    from . import detok
    from .vitsim import VisualTokenizer, VisualTokenizerConfig
    seed = env_seed(args.seed)
    out = Path(args.out)
    vit = VisualTokenizer(VisualTokenizerConfig(tile=args.vit_tile, patch_size=args.patch_size,
                                                embed_dim=args.visual_dim, seed=args.vit_seed))
    config = {k: v for k, v in vars(args).items() if k != "func"}
    RunManifest("train-detok", config, seed, hash_inputs(args.corpus),
                ["stage1/", "stage2/", "metrics.csv"]).write(out)
    data = detok_dataset(args.corpus, vit)
    metrics = out / "metrics.csv"
    if metrics.exists():
        metrics.unlink()
    m1 = detok.Detokenizer(detok.DetokConfig(tile=args.vit_tile, visual_dim=args.visual_dim, seed=seed))
    h1 = detok.train_detok(m1, data, steps=args.steps, lr=args.lr, seed=seed, metrics_csv=metrics)
    m1.save(out / "stage1")
    # stage 2: the condition is the target itself; every fourth example trains with a zero condition
    data2 = [dataclasses.replace(d, condition=None if i % 4 == 0 else d.target) for i, d in enumerate(data)]
    m2 = detok.expand_to_stage2(m1)
    h2 = detok.train_detok(m2, data2, steps=args.steps, lr=args.lr, seed=seed + 1, metrics_csv=metrics)
    m2.save(out / "stage2")
    _emit({"images": len(data), "stage1": {"initial_loss": h1[0]["loss"], "final_loss": h1[-1]["loss"]},
           "stage2": {"initial_loss": h2[0]["loss"], "final_loss": h2[-1]["loss"]},
           "mean_image_baseline": detok.mean_image_baseline(data), "out": str(out)})
    return EXIT_OK


def cmd_decode(args) -> int:
    from . import codec, detok
    from .image import read_netpbm, write_netpbm
    from .mllm import ImageFeatures, MultimodalLM, TokenEvent, generate, prompt_from_tokens
    from .trainer import load_finetuned
    seed = env_seed(args.seed)
    for p, what in ((args.checkpoint, "checkpoint"), (args.adapter, "adapter"), (args.detok, "de-tokenizer")):
        if p is not None and not (Path(p) / "manifest.json").is_file():
            raise UsageError(f"{what} not found: {p}")
    out = Path(args.out)
    config = {k: v for k, v in vars(args).items() if k != "func"}
    RunManifest("decode", config, seed, hash_inputs([args.checkpoint, args.adapter, args.detok, args.condition]),
                ["transcript.txt", "transcript.json", "image_*.ppm"]).write(out)
    model = load_finetuned(args.checkpoint, args.adapter) if args.adapter else MultimodalLM.load(args.checkpoint)
    dt = detok.Detokenizer.load(args.detok) if args.detok else None
    cond = read_netpbm(args.condition) if args.condition else None
    if cond is not None and (dt is None or dt.cfg.stage != 2):
        raise UsageError("--condition needs a stage-2 de-tokenizer")
    prompt = codec.tokenize_text(args.prompt)
    events = generate(model, prompt_from_tokens(prompt), max_new=args.max_new)
    tokens, images = [], []
    for ev in events:
        if isinstance(ev, TokenEvent):
            tokens.append(ev.id)
        elif isinstance(ev, ImageFeatures):
            tokens.append(codec.IMG_END)
            if dt is None:
                raise UsageError("the model emitted an image; pass --detok")
            img = dt.decode(ev.features, cond, seed=seed + len(images))
            name = f"image_{len(images):03d}.ppm"
            write_netpbm(out / name, img)
            images.append(name)
    text = codec.render(prompt + tokens)
    (out / "transcript.txt").write_text(text + "\n")
    (out / "transcript.json").write_text(json.dumps({"prompt": prompt, "generated": tokens, "images": images}) + "\n")
    _emit({"transcript": text, "generated": codec.render(tokens), "images": images, "out": str(out)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_vit_flags(p):
    p.add_argument("--vit-tile", type=int, default=16, help="visual tokenizer tile size (default 16)")
    p.add_argument("--patch-size", type=int, default=2)
    p.add_argument("--visual-dim", type=int, default=16)
    p.add_argument("--vit-seed", type=int, default=0)


def _add_train_flags(p, default_cfg):
    p.add_argument("--config", default=str(RECIPES / default_cfg), help=f"run config (default: bundled {default_cfg})")
    p.add_argument("--corpus", help="corpus manifest or packed corpus directory (overrides the config)")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmseq", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan-grid", help="minimal sub-image grid for an image size")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--tile", type=int, default=224)
    p.add_argument("--tile-width", type=int, help="tile width if different from --tile")
    p.set_defaults(func=cmd_plan_grid)

    p = sub.add_parser("tile", help="split a PPM/PGM image into sub-image tiles plus a global tile")
    p.add_argument("image")
    p.add_argument("--tile", type=int, default=224)
    p.add_argument("--tile-width", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("codec", help="bounding-box token codec helpers")
    csub = p.add_subparsers(dest="codec_command", required=True)
    q = csub.add_parser("encode-box", help="token ids for a normalized (x, y, w, h) box")
    for k in ("x", "y", "w", "h"):
        q.add_argument(k, type=float)
    q.set_defaults(func=cmd_codec_encode_box)
    q = csub.add_parser("parse", help="find box spans in a token id stream (argument or stdin)")
    q.add_argument("--tokens", help="ids as JSON list or whitespace/comma separated; default: stdin")
    q.set_defaults(func=cmd_codec_parse)

    p = sub.add_parser("make-corpus", help="write a bundled toy corpus")
    p.add_argument("--which", choices=("sample", "task"), default="sample")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("pack", help="pack a JSONL document manifest into training sequences")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--no-eos", action="store_true", help="do not end documents with a trainable EOS")
    _add_vit_flags(p)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("gradcheck", help="finite-difference check of all ops and the training loss")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--inject-fault", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pretrain", help="pre-train the model on a corpus")
    _add_train_flags(p, "pretrain.cfg")
    p.add_argument("--resume", help="training checkpoint directory to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train adapters on top of a frozen base checkpoint")
    _add_train_flags(p, "finetune.cfg")
    p.add_argument("--base", help="base checkpoint directory (overrides base_checkpoint)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("train-detok", help="train both de-tokenizer stages on a corpus's images")
    p.add_argument("--corpus", required=True, action="append", help="corpus manifest (JSONL); repeatable")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=300, help="steps per stage")
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=0)
    _add_vit_flags(p)
    p.set_defaults(func=cmd_train_detok)

    p = sub.add_parser("decode", help="generate from a text prompt; images go through the de-tokenizer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--adapter", help="fine-tuned adapter directory")
    p.add_argument("--detok", help="de-tokenizer checkpoint (stage1/ or stage2/)")
    p.add_argument("--condition", help="condition image for a stage-2 de-tokenizer")
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"mmseq {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, KeyError) as e:
        print(f"mmseq {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE

if __name__ == "__main__":
    sys.exit(main())
