"""``rdn synth|train|describe|match|eval``.

Configuration keys may come from ``rdn.conf``, ``RDN_<KEY>`` environment
variables or flags, in increasing precedence.  Failures print one line,
``error: <category>: <detail>``, and exit nonzero.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from rdnkit import _backend, formats
from rdnkit.config import RunConfig
from rdnkit.errors import ContractError, RdnError
from rdnkit.evaluate import FLAT_ENERGY, evaluate_pair
from rdnkit.geometry import FUNDAMENTAL, HOMOGRAPHY, ransac
from rdnkit.matching import mutual_nn_match, uniform_grid
from rdnkit.model import (RdnConfig, config_from_weights, describe, init_weights, load_weights,
                          sample_descriptors, save_weights)
from rdnkit.synth import (PAIR_MARGIN, WarpSpec, flat_fixture, make_pair, patchy_texture,
                          random_texture)
from rdnkit.trainer import TrainConfig, format_curve, train

log = logging.getLogger("rdn")

WARP_KEYS = ("max_rotation", "max_scale_log", "max_translation", "max_perspective",
             "brightness", "contrast", "noise_sigma")


class UsageError(RdnError):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def _source(cfg, args, i, rng):
    size, seed = cfg["size"], cfg["seed"]
    if args.image is not None:
        img = formats.read_image(args.image)
    elif args.fixture == "flat":
        return flat_fixture(size, seed + i)
    elif args.fixture == "patchy":
        img = patchy_texture(size, seed)
    else:
        img = random_texture(size, seed)
    crop = cfg["crop"]
    if crop:
        h, w = img.shape[:2]
        if crop > min(h, w):
            raise ContractError(f"crop {crop} exceeds source size {w}x{h}")
        y, x = rng.integers(0, h - crop + 1), rng.integers(0, w - crop + 1)
        img = img[y:y + crop, x:x + crop]
    return img


def cmd_synth(args, cfg) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = WarpSpec(**{k: cfg[k] for k in WARP_KEYS})
    rng = np.random.default_rng(cfg["seed"])
    lines = []
    for i in range(args.count):
        img = _source(cfg, args, i, rng)
        pair = make_pair(img, base.with_seed(cfg["seed"] * 100003 + i), grid_stride=cfg["grid_stride"])
        stem = f"pair_{i:05d}"
        names = [f"{stem}_1.pgm", f"{stem}_2.pgm", f"{stem}.model", f"{stem}.corr"]
        formats.write_image(out / names[0], pair.image1)
        formats.write_image(out / names[1], pair.image2)
        (out / names[2]).write_text(formats.format_model(pair.model))
        (out / names[3]).write_text(formats.format_correspondences(pair.correspondences))
        lines.append("\t".join(names) + "\n")
    (out / "manifest.tsv").write_text("".join(lines))
    print(f"wrote {args.count} pairs to {out / 'manifest.tsv'}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args, cfg) -> int:
    entries = formats.read_manifest(args.manifest)
    dataset = []
    for e in entries:
        im1, im2, _, corr = formats.load_entry(e)
        dataset.append((im1, im2, corr))
    config = RdnConfig.profile(cfg["profile"], seed=cfg["seed"])
    tconfig = TrainConfig(epochs=cfg["epochs"], lr0=cfg["lr"], seed=cfg["seed"])
    if dataset:
        weights, curve = train(dataset, config, tconfig)
    elif tconfig.epochs == 0:
        weights, curve = init_weights(config), []
    else:
        raise ContractError(f"manifest {args.manifest} lists no pairs")
    save_weights(weights, args.weights_out)
    curve_path = Path(args.curve_out or f"{args.weights_out}.curve")
    curve_path.write_text(format_curve(curve))
    print(f"wrote {args.weights_out} and {curve_path}")
    return 0


# ---------------------------------------------------------------------------
# describe / match
# ---------------------------------------------------------------------------


def _load_model(path):
    weights = load_weights(path)
    return weights, config_from_weights(weights)


def cmd_describe(args, cfg) -> int:
    weights, config = _load_model(args.weights)
    image = formats.read_image(args.image)
    field = describe(image, weights, config)
    kps = uniform_grid(*field.shape[:2], cfg["stride"], cfg["margin"])
    formats.write_descriptors(args.out, kps, sample_descriptors(field, kps) if len(kps)
                              else np.empty((0, field.shape[2])))
    print(f"wrote {len(kps)} descriptors of dimension {field.shape[2]} to {args.out}")
    return 0


def cmd_match(args, cfg) -> int:
    if args.overlay and not (args.image_a and args.image_b):
        raise UsageError("--overlay needs --image-a and --image-b")
    a = formats.read_descriptors(args.a)
    b = formats.read_descriptors(args.b)
    if len(a) == 0 or len(b) == 0:
        matches = []
    else:
        matches = mutual_nn_match(a.descriptors, b.descriptors, mutual=not args.no_mutual, ratio=args.ratio)
    kind = cfg["model"]
    if kind != "none" and matches:
        src = a.keypoints[[m.idx_a for m in matches]]
        dst = b.keypoints[[m.idx_b for m in matches]]
        kind = HOMOGRAPHY if kind == "homography" else FUNDAMENTAL
        res = ransac(src, dst, kind, threshold=cfg["threshold"], max_iterations=cfg["max_iterations"],
                     seed=cfg["seed"])
        raw = len(matches)
        matches = [matches[i] for i in res.inliers]
        log.info("%d of %d matches kept after %d iterations", len(matches), raw, res.iterations)
        if args.model_out:
            Path(args.model_out).write_text(formats.format_model(res.model))
    elif kind != "none" and not matches:
        raise ContractError("no matches to screen with RANSAC")
    Path(args.out).write_text(formats.format_matches(matches, a.keypoints, b.keypoints))
    if args.overlay:
        pa = a.keypoints[[m.idx_a for m in matches]].reshape(-1, 2)
        pb = b.keypoints[[m.idx_b for m in matches]].reshape(-1, 2)
        canvas = formats.match_overlay(formats.read_image(args.image_a), formats.read_image(args.image_b), pa, pb)
        formats.write_image(args.overlay, canvas)
    print(f"wrote {len(matches)} matches to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _fmt(num, den):
    return f"{num / den:.6f}" if den else "nan"


def eval_report(entries, weights, config, thresholds, stride, ablation) -> str:
    low_only = ablation == "fen-only"
    th = tuple(thresholds)
    cols = ["pair", "region", "keypoints", "matches"] + [f"acc@{t:g}" for t in th] + \
           [f"rate@{t:g}" for t in th]
    out = [f"# flat: mean gradient magnitude over 9x9 < {FLAT_ENERGY:g}; ablation={ablation}; "
           f"stride={stride}; acc = correct/matches; rate = correct/keypoints\n",
           "#" + "\t".join(cols) + "\n"]
    totals = {r: np.zeros(2 + 2 * len(th)) for r in ("all", "flat", "textured")}
    for i, e in enumerate(entries):
        im1, im2, model, _ = formats.load_entry(e)
        if model.kind != HOMOGRAPHY:
            raise ContractError(f"{e.model}: evaluation needs a homography ground truth")
        pe = evaluate_pair(im1, im2, model.m, weights, config, th, stride, PAIR_MARGIN, low_only)
        rows = {
            "all": (pe.flat_keypoints + pe.textured_keypoints, pe.n_matches, pe.correct),
            "flat": (pe.flat_keypoints, pe.flat_matches, pe.flat_correct),
            "textured": (pe.textured_keypoints, pe.textured_matches, pe.textured_correct),
        }
        for region, (nk, nm, ok) in rows.items():
            totals[region] += np.concatenate([[nk, nm], ok, ok])
            out.append("\t".join([str(i), region, str(nk), str(nm)] + [_fmt(c, nm) for c in ok]
                                 + [_fmt(c, nk) for c in ok]) + "\n")
    for region, t in totals.items():
        nk, nm, ok = int(t[0]), int(t[1]), t[2:2 + len(th)]
        out.append("\t".join(["total", region, str(nk), str(nm)] + [_fmt(c, nm) for c in ok]
                             + [_fmt(c, nk) for c in ok]) + "\n")
    return "".join(out)


def cmd_eval(args, cfg) -> int:
    weights, config = _load_model(args.weights)
    text = eval_report(formats.read_manifest(args.manifest), weights, config, cfg["thresholds"],
                       cfg["stride"], cfg["ablation"])
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _conf(p, *keys):
    for key in keys:
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar=key.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rdn", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="configuration file (default: ./rdn.conf if present)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic pair corpus and manifest")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--image", help="PGM/PPM source image")
    src.add_argument("--fixture", choices=("texture", "patchy", "flat"), default="texture")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    _conf(p, "seed", "size", "crop", "grid_stride", "backend", *WARP_KEYS)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights-out", required=True)
    p.add_argument("--curve-out", help="loss curve path (default: <weights-out>.curve)")
    _conf(p, "epochs", "lr", "seed", "profile", "backend")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("describe", help="write sparse grid descriptors for an image")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    _conf(p, "stride", "margin", "backend")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("match", help="match two descriptor files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model-out")
    p.add_argument("--no-mutual", action="store_true")
    p.add_argument("--ratio", type=float)
    p.add_argument("--overlay", help="write a side-by-side PPM of the kept matches")
    p.add_argument("--image-a")
    p.add_argument("--image-b")
    _conf(p, "model", "threshold", "seed", "max_iterations", "backend")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="matching accuracy over a manifest, split flat/textured")
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out")
    _conf(p, "thresholds", "ablation", "stride", "backend")
    p.set_defaults(func=cmd_eval)
    return parser


_NOT_CONFIG = {"command", "func", "config", "verbose", "image", "fixture", "count", "out_dir",
               "manifest", "weights_out", "curve_out", "weights", "out", "a", "b", "model_out",
               "no_mutual", "ratio", "overlay", "image_a", "image_b"}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        flags = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
        cfg = RunConfig.load(flags, path=args.config)
        if cfg.get("backend") is not None:
            _backend.set_backend(cfg["backend"])
        return args.func(args, cfg)
    except RdnError as exc:
        category, detail = exc.category, exc
    except OSError as exc:
        name = exc.filename if exc.filename is not None else ""
        category, detail = "io", f"{name}: {exc.strerror or exc}"
    except (ValueError, RuntimeError) as exc:
        category, detail = "error", exc
    print(f"error: {category}: {' '.join(str(detail).split())}", file=sys.stderr)
    return 2 if category == "usage" else 1


if __name__ == "__main__":
    sys.exit(main())
