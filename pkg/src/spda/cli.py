"""``spda`` command-line entry point.

Every subcommand is a thin shell over library calls: it parses flags, loads
files, calls the module operation and writes results.  Errors raised by the
library become a one-line diagnostic on stderr and exit status 1; argument
errors exit with status 2.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .analysis import AnalysisError, distribution_comparison, flatten_images, neighborhood_check, pca_fit
from .augment import SpdaParams, generate_augmented_set, superpixelize
from .core import DataError, DatasetManifest, ManifestEntry, read_image, read_label, read_raw, save_sample, write_image, write_raw
from .metrics import (
    MetricError,
    adb,
    boundary_recall,
    boundary_set,
    combined_score_s,
    compactness,
    dice,
    hausdorff_symmetric,
    mean_iu,
)
from .nn import Checkpoint, Network, NetworkError, fcn_spec, network_from_checkpoint
from .slic import SlicError, SlicParams, boundary_overlay, segment
from .synthetic import SyntheticConfig, generate_synthetic
from .train import SpCache, TrainConfig, TrainingError, evaluate_miou, split_train_val, train_segmentation
from .vae import VaeSpec, VaeTrainConfig

MODULE_ERRORS = (DataError, SlicError, NetworkError, TrainingError, AnalysisError, MetricError, OSError, FloatingPointError)


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _report(pairs, out=None) -> None:
    """Print ``key: value`` lines (floats with 6 decimals)."""
    out = out or sys.stdout
    for key, val in pairs:
        if isinstance(val, float):
            val = "nan" if np.isnan(val) else f"{val:.6f}"
        print(f"{key}: {val}", file=out)


def _threads() -> int:
    raw = os.environ.get("SPDA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise CliError(f"SPDA_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise CliError("SPDA_THREADS must be >= 1")
    return n


def _slic_params(args, s: int | None = None) -> SlicParams:
    return SlicParams(
        int(args.s if s is None else s),
        compactness=args.compactness,
        max_iters=args.max_iters,
        min_cell_fraction=args.min_cell_fraction,
        enforce_connectivity=not args.no_connectivity,
    )


def _add_slic_flags(p, with_s=True):
    if with_s:
        p.add_argument("--s", type=int, required=True, help="requested number of superpixels")
    p.add_argument("--compactness", type=float, default=20.0, help="SLIC compactness m (default 20, as in the original setup)")
    p.add_argument("--max-iters", type=int, default=10, help="k-means iterations (default 10)")
    p.add_argument("--min-cell-fraction", type=float, default=0.25, help="merge components smaller than this fraction of N/s (default 0.25)")
    p.add_argument("--no-connectivity", action="store_true", help="skip connectivity enforcement")


def _relpath(path: Path, start: Path) -> str:
    return os.path.relpath(path, start)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_slic(args) -> None:
    image = read_image(args.input)
    params = _slic_params(args)
    cells = segment(image, params)
    write_raw(args.out, cells.astype(np.float32))
    report = [("input", args.input), ("s", params.s), ("cells", int(cells.max()) + 1), ("out", args.out)]
    if image.ndim == 3 and not args.no_overlay:
        overlay = args.overlay or str(Path(args.out).with_suffix("")) + "_overlay.png"
        write_image(overlay, boundary_overlay(image, cells))
        report.append(("overlay", overlay))
    _report(report)


def cmd_superpixelize(args) -> None:
    image = read_image(args.input)
    if (args.cells is None) == (args.s is None):
        raise CliError("give exactly one of --cells or --s")
    if args.cells is not None:
        raw = read_raw(args.cells)
        cells = raw[..., 0] if raw.ndim == image.ndim else raw
        if not np.all(cells == np.round(cells)):
            raise DataError(f"{args.cells}: cell ids must be integers")
        cells = cells.astype(np.int64)
    else:
        cells = segment(image, _slic_params(args))
    write_image(args.out, superpixelize(image, cells))
    _report([("input", args.input), ("cells", len(np.unique(cells))), ("out", args.out)])


def cmd_synth(args) -> None:
    cfg = SyntheticConfig(size=args.size, num_classes=args.classes, num_samples=args.num, noise_sigma=args.noise)
    m = generate_synthetic(cfg, args.seed, args.out_dir, prefix=args.prefix)
    _report([("samples", m.n), ("manifest", str(Path(args.out_dir) / "manifest.json"))])


def cmd_augment(args) -> None:
    manifest = DatasetManifest.read(args.manifest)
    out_dir = Path(args.out_dir) if args.out_dir else manifest.root
    out_dir.mkdir(parents=True, exist_ok=True)
    s_values = tuple(args.s_values) if args.s_values else None
    params = SpdaParams(args.s_lo, args.s_hi, offline_s_values=s_values, count=args.count)
    params.validate()
    slic_params = SlicParams(args.s_lo, compactness=args.compactness)
    originals = manifest.originals()

    # SP(x, s) is deterministic, so the result never depends on scheduling
    def work(entry: ManifestEntry) -> list[ManifestEntry]:
        smp = manifest.load(entry)
        return [save_sample(a, out_dir, a.id) for a in generate_augmented_set(smp, params, slic_params)]

    n_threads = min(_threads(), max(1, len(originals)))
    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            produced = list(pool.map(work, originals))
    else:
        produced = [work(e) for e in originals]
    entries = []
    for e in manifest.entries:
        entries.append(
            ManifestEntry(e.id, _relpath(manifest.root / e.image, out_dir), _relpath(manifest.root / e.label, out_dir), e.provenance)
        )
    for group in produced:
        entries.extend(group)
    out_manifest = Path(args.out_manifest) if args.out_manifest else out_dir / "augmented.json"
    if out_manifest.parent.resolve() != out_dir.resolve():
        raise CliError("--out-manifest must live in the output directory")
    DatasetManifest(entries, manifest.num_classes, out_dir).save(out_manifest)
    _report(
        [
            ("originals", len(originals)),
            ("s_values", " ".join(str(s) for s in params.s_values())),
            ("augmented", sum(len(g) for g in produced)),
            ("manifest", str(out_manifest)),
        ]
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        s_lo=args.s_lo,
        s_hi=args.s_hi,
        lam=args.lam,
        batch_size=args.batch,
        lr=args.lr,
        lr_decayed=args.lr_decayed,
        lr_boundary=args.lr_boundary,
        max_steps=args.max_steps,
        seed=args.seed,
        input_size=None if args.input_size == [0] else tuple(args.input_size),
        compactness=args.compactness,
        spda=not args.no_spda,
        basic_aug=not args.no_basic_aug,
        plateau_window=args.plateau_window,
        plateau_tol=args.plateau_tol,
        val_every=args.val_every,
        width=args.width,
    )


def cmd_train(args) -> None:
    cfg = _train_config(args)
    cfg.validate()
    manifest = DatasetManifest.read(args.manifest)
    data = manifest.load_all("original")
    train, val = split_train_val(data, args.val_fraction)
    if args.include_augmented:
        held = {s.id for s in val}
        train += [s for s in manifest.load_all("spda") if s.provenance.source not in held]
    channels = data[0].image.shape[-1]
    if data[0].image.ndim != 3:
        raise CliError("the toy FCN trains on 2D images only")
    net = Network(fcn_spec(channels, manifest.num_classes, cfg.width), cfg.seed)
    res = train_segmentation(train, net, cfg, val_set=val or None, cache=SpCache(cfg.slic_params()), log_file=args.log)
    res.checkpoint.save(args.out)
    last = res.log[-1]
    _report(
        [
            ("train_samples", len(train)),
            ("val_samples", len(val)),
            ("steps", last["step"]),
            ("stopped", res.stopped),
            ("final_loss", float(last["loss"])),
            ("checkpoint", args.out),
        ]
    )


def cmd_eval(args) -> None:
    net = network_from_checkpoint(Checkpoint.load(args.checkpoint))
    manifest = DatasetManifest.read(args.manifest)
    samples = manifest.load_all(None if args.all else "original")
    transform = None
    if args.sp_s is not None:
        cache = SpCache(SlicParams(args.sp_s, compactness=args.compactness))
        transform = lambda smp: cache.get(smp, args.sp_s)  # noqa: E731
    miou = evaluate_miou(net, samples, manifest.num_classes, transform)
    _report([("samples", len(samples)), ("input", "raw" if args.sp_s is None else f"SP(s={args.sp_s})"), ("mean_iu", miou)])


def cmd_metrics(args) -> None:
    pred, gt = read_label(args.pred), read_label(args.gt)
    if pred.shape != gt.shape:
        raise MetricError(f"prediction shape {pred.shape} differs from ground truth {gt.shape}")
    k = args.classes or int(max(pred.max(), gt.max())) + 1
    per, miou = mean_iu(pred, gt, k)
    lines = [("num_classes", k), ("mean_iu", miou)]
    per_class = {}
    for c in range(k):
        lines.append((f"class{c}.iou", float(per[c])))
        if c == 0 and not args.include_background:
            continue
        d = dice(pred, gt, c)
        lines.append((f"class{c}.dice", d))
        bp, bg = boundary_set(pred, c), boundary_set(gt, c)
        if len(bp) and len(bg):
            h, a = hausdorff_symmetric(bp, bg), adb(bp, bg)
            lines += [(f"class{c}.hausdorff", h), (f"class{c}.adb", a)]
            per_class[f"class{c}"] = (d, a, h)
        else:
            lines.append((f"class{c}.boundary", "undefined (empty class)"))
    if per_class:
        lines.append(("combined_score_s", combined_score_s(per_class)))
    if args.cells:
        raw = read_raw(args.cells)
        cells = (raw[..., 0] if raw.shape[-1] == 1 and raw.ndim == gt.ndim + 1 else raw).astype(np.int64)
        lines += [("boundary_recall", boundary_recall(cells, gt, args.tolerance)), ("compactness", compactness(cells))]
    _report(lines)


def _group_rows(manifest: DatasetManifest, size: int | None):
    """Flattened originals plus (source index, flattened SP copies) groups."""
    originals = manifest.load_all("original")
    index = {s.id: i for i, s in enumerate(originals)}
    X = flatten_images([s.image for s in originals], size)
    groups: dict[int, list] = {}
    tags = []
    for smp in manifest.load_all("spda"):
        if smp.provenance.source not in index:
            raise DataError(f"{smp.id}: source {smp.provenance.source!r} not among originals")
        groups.setdefault(index[smp.provenance.source], []).append(smp)
    out = []
    for i, smps in sorted(groups.items()):
        out.append((i, flatten_images([s.image for s in smps], size)))
        tags += [(i, s.provenance.s) for s in smps]
    if not out:
        raise AnalysisError("manifest holds no SP-augmented samples")
    return originals, X, out, tags


def cmd_analyze_pca(args) -> None:
    manifest = DatasetManifest.read(args.manifest)
    originals, X, groups, tags = _group_rows(manifest, args.size)
    pca = pca_fit(X, args.components)
    rep = neighborhood_check(X, groups, pca=pca)
    total = float(np.sum(np.var(X, axis=0, ddof=1)))
    lines = [("originals", len(X)), ("components", args.components)]
    for i, v in enumerate(pca.explained_variance):
        lines.append((f"pc{i + 1}.explained_fraction", float(v / total)))
    lines.append(("neighborhood_fraction_pca", rep.fraction))
    _report(lines)
    if args.scatter:
        with open(args.scatter, "w", encoding="utf-8") as fh:
            fh.write("# pc1 pc2 group\n")
            P = pca.transform(X)
            for smp, row in zip(originals, P):
                fh.write(f"{row[0]:.6f} {row[1] if len(row) > 1 else 0.0:.6f} {smp.id}\n")
            Z = pca.transform(np.concatenate([g for _, g in groups]))
            for (src, s), row in zip(tags, Z):
                fh.write(f"{row[0]:.6f} {row[1] if len(row) > 1 else 0.0:.6f} {originals[src].id}_sp{s}\n")


def cmd_analyze_nn_check(args) -> None:
    manifest = DatasetManifest.read(args.manifest)
    originals, X, groups, _ = _group_rows(manifest, args.size)
    pca = pca_fit(X, args.components) if args.components else None
    rep = neighborhood_check(X, groups, pca=pca)
    lines = [("space", "pixels" if pca is None else f"pca{args.components}"), ("fraction", rep.fraction)]
    for r in rep.per_image:
        ok = sum(r["satisfied"])
        lines.append((originals[r["source"]].id, f"{ok}/{len(r['satisfied'])} nearest_other={r['nearest_other']:.4f}"))
    _report(lines)


def cmd_analyze_kl(args) -> None:
    ori = [s.image for s in DatasetManifest.read(args.train).load_all("original")]
    aug = [s.image for s in DatasetManifest.read(args.aug).load_all()]
    test = [s.image for s in DatasetManifest.read(args.test).load_all("original")]
    spec = VaeSpec(patch=args.patch, hidden=args.hidden, latent=args.latent)
    cfg = VaeTrainConfig(steps=args.steps, batch_size=args.batch, lr=args.lr, seed=args.seed)
    rep = distribution_comparison(ori, aug, test, spec, cfg)
    _report(
        [
            ("kl_test_vs_ori", rep.kl_test_vs_ori),
            ("kl_test_vs_aug", rep.kl_test_vs_aug),
            ("kl_ori_vs_test", rep.kl_ori_vs_test),
            ("kl_aug_vs_test", rep.kl_aug_vs_test),
            ("aug_closer_forward", rep.kl_test_vs_aug < rep.kl_test_vs_ori),
            ("aug_closer_reverse", rep.kl_aug_vs_test < rep.kl_ori_vs_test),
        ]
    )
    print(rep.summary())


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    seed_parent = argparse.ArgumentParser(add_help=False)
    seed_parent.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root seed for all randomness (default 0)")

    ap = argparse.ArgumentParser(
        prog="spda",
        description="Superpixel-based data augmentation for segmentation: SLIC, SP(x, s), training and analysis.",
    )
    ap.add_argument("--seed", type=int, default=0, help="root seed for all randomness (default 0)")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("slic", parents=[seed_parent], help="segment an image or volume into superpixels/supervoxels")
    p.add_argument("--in", dest="input", required=True, help="input image (.png) or volume (.vol)")
    p.add_argument("--out", required=True, help="output cell map (.vol, C=1)")
    p.add_argument("--overlay", help="boundary overlay PNG (default: <out>_overlay.png for 2D input)")
    p.add_argument("--no-overlay", action="store_true", help="do not write the overlay")
    _add_slic_flags(p)
    p.set_defaults(func=cmd_slic)

    p = sub.add_parser("superpixelize", parents=[seed_parent], help="replace every pixel by its cell mean")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cells", help="cell map (.vol) from `spda slic`")
    p.add_argument("--s", type=int, help="segment on the fly with this many superpixels")
    _add_slic_flags(p, with_s=False)
    p.set_defaults(func=cmd_superpixelize)

    p = sub.add_parser("augment", parents=[seed_parent], help="write SP copies of every original in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--s-lo", type=int, default=800, help="lower end of the s range (default 800)")
    p.add_argument("--s-hi", type=int, default=2000, help="upper end of the s range (default 2000)")
    p.add_argument("--count", type=int, help="number of evenly spaced s values in [s-lo, s-hi]")
    p.add_argument("--s-values", type=int, nargs="+", help="explicit s values (override --count)")
    p.add_argument("--compactness", type=float, default=20.0, help="SLIC compactness m (default 20)")
    p.add_argument("--out-dir", help="directory for augmented files (default: next to the manifest)")
    p.add_argument("--out-manifest", help="output manifest path (default: <out-dir>/augmented.json)")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("synth", parents=[seed_parent], help="generate a synthetic segmentation dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--num", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--prefix", default="img")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[seed_parent], help="train the toy FCN with online SP augmentation")
    d = TrainConfig()
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default="model.ckpt", help="checkpoint path (default model.ckpt)")
    p.add_argument("--log", help="metrics log path")
    p.add_argument("--s-lo", type=int, default=d.s_lo, help="lower end of the s range (default 800)")
    p.add_argument("--s-hi", type=int, default=d.s_hi, help="upper end of the s range (default 2000)")
    p.add_argument("--lam", type=float, default=None, help="SP loss weight (default 1/(s_hi - s_lo + 1))")
    p.add_argument("--batch", type=int, default=d.batch_size, help="mini-batch size, even (default 8: 4 originals + 4 SP)")
    p.add_argument("--lr", type=float, default=d.lr, help="initial Adam learning rate (default 5e-4)")
    p.add_argument("--lr-decayed", type=float, default=d.lr_decayed, help="learning rate after the boundary (default 5e-5)")
    p.add_argument("--lr-boundary", type=int, default=d.lr_boundary, help="last step at the initial rate (default 30000)")
    p.add_argument("--max-steps", type=int, default=d.max_steps)
    p.add_argument("--input-size", type=int, nargs="+", default=list(d.input_size), help="training crop (default 192 192; 0 = full image)")
    p.add_argument("--compactness", type=float, default=d.compactness, help="SLIC compactness m (default 20)")
    p.add_argument("--width", type=int, default=d.width, help="FCN base channel width")
    p.add_argument("--no-spda", action="store_true", help="baseline: plain mini-batches without SP copies")
    p.add_argument("--no-basic-aug", action="store_true", help="disable random flips/rotations")
    p.add_argument("--plateau-window", type=int, default=None)
    p.add_argument("--plateau-tol", type=float, default=d.plateau_tol)
    p.add_argument("--val-every", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.0)
    p.add_argument("--include-augmented", action="store_true", help="also train on offline SP samples in the manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[seed_parent], help="mean IU of a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sp-s", type=int, help="evaluate on SP(x, s) instead of raw images")
    p.add_argument("--compactness", type=float, default=20.0)
    p.add_argument("--all", action="store_true", help="include non-original manifest entries")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("metrics", parents=[seed_parent], help="segmentation metrics of a prediction against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--include-background", action="store_true")
    p.add_argument("--cells", help="cell map (.vol) for boundary recall and compactness")
    p.add_argument("--tolerance", type=int, default=2, help="boundary recall tolerance in pixels (default 2)")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("analyze", parents=[seed_parent], help="distribution analyses of SP-augmented data")
    asub = p.add_subparsers(dest="analysis", required=True, metavar="ANALYSIS")
    q = asub.add_parser("pca", parents=[seed_parent], help="PCA of originals and their SP copies")
    q.add_argument("--manifest", required=True, help="manifest with originals and SP copies")
    q.add_argument("--components", type=int, default=2)
    q.add_argument("--size", type=int, default=64, help="resize images to size x size before flattening")
    q.add_argument("--scatter", help="write 'pc1 pc2 group' rows for plotting")
    q.set_defaults(func=cmd_analyze_pca)
    q = asub.add_parser("nn-check", parents=[seed_parent], help="is every SP image nearest its own source?")
    q.add_argument("--manifest", required=True)
    q.add_argument("--components", type=int, default=0, help="compare in PCA space (0 = raw pixels)")
    q.add_argument("--size", type=int, default=64)
    q.set_defaults(func=cmd_analyze_nn_check)
    q = asub.add_parser("kl", parents=[seed_parent], help="VAE latent KL between training and test distributions")
    q.add_argument("--train", required=True, help="manifest of original training images")
    q.add_argument("--aug", required=True, help="manifest of the augmented training set")
    q.add_argument("--test", required=True)
    q.add_argument("--patch", type=int, default=16)
    q.add_argument("--hidden", type=int, default=64)
    q.add_argument("--latent", type=int, default=8)
    q.add_argument("--steps", type=int, default=1500)
    q.add_argument("--batch", type=int, default=32)
    q.add_argument("--lr", type=float, default=1e-3)
    q.set_defaults(func=cmd_analyze_kl)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (CliError, *MODULE_ERRORS) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"spda: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
