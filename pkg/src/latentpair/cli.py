"""Command-line interface: ``latentpair <subcommand> ...``.

Exit codes: 0 success, 2 input error, 3 pipeline-stage failure.
"""

from __future__ import annotations

import argparse
import ast
import csv
import json
import logging
import sys
import time
from dataclasses import fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import GrayImage, load_image
from .errors import InputError, StageError
from .net.persist import load_hybrid, save_hybrid
from .net.train import TrainConfig, train_phases, _split_pairs
from .pipeline import (ABLATIONS, GalleryIndex, PreprocessConfig, ablation_config, align_fingerprints,
                       cmc, dump_feature_maps, identify, match_fingerprints, prepare_training_pairs,
                       preprocess_fingerprint, scoring_benchmark)
from .net.ensemble import hybrid_score
from .synth import DatasetManifest, build_dataset, load_noise_dir, make_finger, make_noise_bank

IMAGE_SUFFIXES = (".png", ".pgm")


# ---------------------------------------------------------------------------
# Configuration


def parse_kv(text: str) -> Dict[str, object]:
    """``key = value`` lines; ``#`` starts a comment. Values are Python literals or bare strings."""
    out: Dict[str, object] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"config line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            out[key] = value
    return out


def apply_overrides(obj, values: Dict[str, object], prefix: str):
    """Replace dataclass fields named ``<prefix>.<field>`` (or bare ``<field>``) from ``values``."""
    names = {f.name for f in fields(obj)}
    changes = {}
    for key, v in values.items():
        scope, _, name = key.rpartition(".")
        if scope in ("", prefix) and name in names:
            if name == "model_ids":
                v = tuple(tuple(m) for m in v)
            changes[name] = v
    return replace(obj, **changes)


def load_config(path: Optional[str], seed: int) -> Tuple[PreprocessConfig, TrainConfig]:
    values = parse_kv(Path(path).read_text()) if path else {}
    known = {f.name for f in fields(PreprocessConfig)} | {f.name for f in fields(TrainConfig)}
    unknown = [k for k in values if k.rpartition(".")[2] not in known]
    if unknown:
        raise InputError(f"unknown config keys: {', '.join(sorted(unknown))}")
    pre = apply_overrides(PreprocessConfig(seed=seed), values, "preprocess")
    train = apply_overrides(TrainConfig(seed=seed), values, "train")
    return pre, train


# ---------------------------------------------------------------------------
# Helpers


def _image(path: str) -> GrayImage:
    if not Path(path).is_file():
        raise InputError(f"{path}: no such image")
    return load_image(path)


def read_gallery(directory: str) -> Dict[str, GrayImage]:
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"{directory}: not a directory")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise InputError(f"{directory}: no PNG or PGM images")
    return {p.stem: load_image(p) for p in files}


def manifest_protocol(manifest: DatasetManifest) -> Tuple[List[Tuple[str, str]], Dict[str, str]]:
    """Probes ``(latent path, mate id)`` and gallery ``{finger id: reference path}``.

    Probes are the impression-``f`` latents; each finger's gallery image is
    the other impression, as in the genuine pairs.
    """
    probes, gallery = [], {}
    for e in manifest.entries:
        if e.pair_label == "genuine" and e.impression_label == "f":
            probes.append((e.latent_path, e.finger_id))
            gallery[e.finger_id] = e.reference_path
    return probes, gallery


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth_dataset(args, pre, train) -> int:
    rng = np.random.default_rng(args.seed)
    bank = load_noise_dir(args.noise_dir) if args.noise_dir else make_noise_bank(
        np.random.default_rng([args.seed, 7]), args.noise_count, args.size, args.size)
    fingers = [make_finger(args.seed, i, args.size, args.size) for i in range(args.fingers)]
    manifest = build_dataset([(f.f, f.s) for f in fingers], bank, rng, args.out,
                             [f.finger_id for f in fingers])
    if args.gallery_out:
        # impression-s references keyed by finger id, for identify/evaluate
        g = Path(args.gallery_out)
        g.mkdir(parents=True, exist_ok=True)
        from .core import save_image
        for f in fingers:
            save_image(f.s, g / f"{f.finger_id}.png")
    print(f"{len(manifest.entries)} pairs written to {Path(args.out) / 'manifest.json'}")
    return 0


def cmd_train(args, pre, train) -> int:
    manifest = DatasetManifest.load(args.manifest)
    if args.ablation:
        train = replace(train, model_ids=tuple(ablation_config(args.ablation)))
    pairs, splits = prepare_training_pairs(manifest, pre, args.workers)
    cnn, rbm = _split_pairs(pairs, splits)
    model, hist = train_phases(cnn, rbm, train, workers=args.workers)
    model.metadata["preprocess"] = pre.__dict__
    save_hybrid(model, args.out)
    _emit({"pairs": len(pairs), "phase2_loss": hist.phase2_loss, "phase3_loss": hist.phase3_loss,
           "models": len(model.models), "out": str(args.out)})
    return 0


def cmd_identify(args, pre, train) -> int:
    model = load_hybrid(args.model)
    gallery = GalleryIndex.build(read_gallery(args.gallery), pre, args.workers)
    ranked = identify(_image(args.latent), gallery, model, args.workers, pre)
    for rid, score in ranked[:args.top] if args.top else ranked:
        print(f"{rid},{score:.6g}")
    return 0


def cmd_evaluate(args, pre, train) -> int:
    model = load_hybrid(args.model)
    if args.manifest:
        manifest = DatasetManifest.load(args.manifest)
        probes, gpaths = manifest_protocol(manifest)
        gallery_imgs = {k: load_image(manifest.resolve(v)) for k, v in gpaths.items()}
        probe_imgs = [(load_image(manifest.resolve(p)), m) for p, m in probes]
    else:
        if not (args.gallery and args.probes):
            raise InputError("evaluate needs --manifest, or --gallery with --probes")
        gallery_imgs = read_gallery(args.gallery)
        with open(args.probes, newline="") as fh:
            probe_imgs = [(_image(r[0]), r[1]) for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if args.limit:
        probe_imgs = probe_imgs[:args.limit]
    gallery = GalleryIndex.build(gallery_imgs, pre, args.workers)
    ranked = [identify(img, gallery, model, args.workers, pre) for img, _ in probe_imgs]
    curve = cmc(ranked, [m for _, m in probe_imgs])
    text = curve.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_align(args, pre, train) -> int:
    lf = preprocess_fingerprint(_image(args.latent), pre, args.debug_dir, "latent")
    rf = preprocess_fingerprint(_image(args.reference), pre, args.debug_dir, "reference")
    al = align_fingerprints(lf, rf, pre)
    t = al.transform
    _emit({"dx": t.dx, "dy": t.dy, "dtheta_deg": t.dtheta_deg, "cost": al.cost})
    return 0


def cmd_match_pair(args, pre, train) -> int:
    model = load_hybrid(args.model)
    lf = preprocess_fingerprint(_image(args.latent), pre, args.debug_dir, "latent")
    rf = preprocess_fingerprint(_image(args.reference), pre, args.debug_dir, "reference")
    res = match_fingerprints(lf, rf, pre)
    _emit({"score": hybrid_score(model, res.tensors), "transform": res.alignment.transform.to_dict()})
    return 0


def cmd_dump_features(args, pre, train) -> int:
    model = load_hybrid(args.model)
    lf = preprocess_fingerprint(_image(args.latent), pre)
    rf = preprocess_fingerprint(_image(args.reference), pre)
    res = match_fingerprints(lf, rf, pre)
    try:
        layers = [int(v) for v in args.layers.split(",")]
        mid = tuple(int(v) for v in args.model_id.split(","))
    except ValueError:
        raise InputError("--layers and --model-id take comma-separated integers") from None
    if mid not in model.model_ids:
        raise InputError(f"model {mid} is not part of {args.model}")
    for p in dump_feature_maps(model, res.tensors, layers, args.out, mid):
        print(p)
    return 0


def cmd_bench(args, pre, train) -> int:
    from .net.ensemble import make_ensemble
    from .net.rbm import RbmParams
    from .net.ensemble import HybridModel
    if args.model:
        model = load_hybrid(args.model)
    else:
        models = make_ensemble(train.model_ids, train.width_base, args.seed)
        model = HybridModel(models, RbmParams.init(len(models), train.rbm_hidden, np.random.default_rng(args.seed)))
    bank = make_noise_bank(np.random.default_rng([args.seed, 7]), 4, 256, 256)
    from .synth import synthesize_latent
    fingers = [make_finger(args.seed, i) for i in range(args.gallery_size)]
    latent = synthesize_latent(fingers[0].f, bank, np.random.default_rng([args.seed, 11]))
    gallery = GalleryIndex.build({f.finger_id: f.s for f in fingers}, pre, 1)
    _emit(scoring_benchmark(preprocess_fingerprint(latent, pre), gallery, model, args.workers, pre))
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    def global_flags(parser, suppress: bool):
        # Subcommands repeat the global flags without defaults, so values given
        # before the subcommand name survive.
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        parser.add_argument("--seed", type=int, default=d(0))
        parser.add_argument("--workers", type=int, default=d(1))
        parser.add_argument("--config", default=d(None),
                            help="key = value file overriding preprocessing/training settings")
        parser.add_argument("--debug-dir", default=d(None), help="write intermediate artifacts here")
        parser.add_argument("-v", "--verbose", action="store_true", default=d(False))

    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, True)
    p = argparse.ArgumentParser(prog="latentpair",
                                description="Latent fingerprint pair-relationship recognition.")
    global_flags(p, False)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-dataset", parents=[common], help="generate a synthetic training dataset")
    s.add_argument("--fingers", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--noise-dir")
    s.add_argument("--noise-count", type=int, default=8)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--gallery-out", help="also write one reference per finger here")
    s.set_defaults(func=cmd_synth_dataset)

    s = sub.add_parser("train", parents=[common], help="train the hybrid model on a dataset manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ablation", choices=ABLATIONS)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("identify", parents=[common], help="rank a gallery against one latent")
    s.add_argument("--latent", required=True)
    s.add_argument("--gallery", required=True, help="directory of reference images (id = file stem)")
    s.add_argument("--model", required=True)
    s.add_argument("--top", type=int, default=0)
    s.set_defaults(func=cmd_identify)

    s = sub.add_parser("evaluate", parents=[common], help="CMC curve as CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest")
    s.add_argument("--gallery")
    s.add_argument("--probes", help="CSV of latent_path,mate_id")
    s.add_argument("--limit", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    for name, fn, helptext in (("align", cmd_align, "coarse alignment of a pair as JSON"),
                               ("match-pair", cmd_match_pair, "hybrid score of a pair as JSON")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--latent", required=True)
        s.add_argument("--reference", required=True)
        if name == "match-pair":
            s.add_argument("--model", required=True)
        s.set_defaults(func=fn)

    s = sub.add_parser("dump-features", parents=[common], help="write activation contact sheets")
    s.add_argument("--latent", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--layers", default="0,1")
    s.add_argument("--model-id", default="4,1")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dump_features)

    s = sub.add_parser("bench", parents=[common], help="sequential vs parallel scoring time")
    s.add_argument("--gallery-size", type=int, default=32)
    s.add_argument("--model")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        pre, train = load_config(args.config, args.seed)
        return args.func(args, pre, train)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        print(f"error at stage {e.stage}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
