"""Command-line entry point: ``segeval <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
import warnings
from collections import Counter

import numpy as np

from . import __version__
from .formats import (
    IGNORE,
    FormatError,
    read_attention,
    read_centroids,
    read_embedding,
    read_manifest,
    read_mask,
    write_bank,
    write_centroids,
    write_mask,
)
from .labelgen import (
    DEFAULT_MAX_ITERS,
    DEFAULT_TAU,
    PRNG_NAME,
    AttentionParams,
    assign_pixels,
    attended_pool_raw,
    foreground_gate,
    kmeans,
    pixel_attention,
    upsample_nearest,
)
from .losses import gradient_suite
from .metrics import DEFAULT_D_FRAC, BETA_SQ, EvalAccumulator, SizeBucket, evaluate_image, size_bucket
from .parallel import map_reduce, pmap, resolve_workers
from .protocols import (
    DEFAULT_K,
    build_bank,
    build_matching_matrix,
    hungarian_max,
    knn_assign,
    predicted_categories,
    relabel_mask,
)
from .report import Report
from .tensor import normalize_rows

log = logging.getLogger("segeval")


class CliError(Exception):
    """User-facing failure; printed without a traceback."""


def _emb_path(emb_dir, image_id):
    return os.path.join(emb_dir, f"{image_id}.lemb")


def _load_manifest(path, override_c=None):
    try:
        manifest = read_manifest(path)
    except FileNotFoundError:
        raise CliError(f"manifest not found: {path}") from None
    except FormatError as exc:
        raise CliError(f"{path}: {exc}") from None
    if override_c is not None:
        if override_c < manifest.category_count:
            raise CliError(f"-C {override_c} is below the manifest's category count {manifest.category_count}")
        manifest.category_count = override_c
    return manifest


def _require_files(paths):
    missing = [p for p in dict.fromkeys(paths) if not os.path.isfile(p)]
    if missing:
        listing = "\n  ".join(missing)
        raise CliError(f"{len(missing)} missing file(s):\n  {listing}")


def _read(reader, path):
    try:
        return reader(path)
    except FormatError as exc:
        raise CliError(f"{path}: {exc}") from None


def _attention_for(path, dim):
    if path is None:
        return AttentionParams.zeros(dim)
    params = _read(read_attention, path)
    if params.dim != dim:
        raise CliError(f"{path}: attention is for {params.dim} channels, embeddings have {dim}")
    return params


def _write_out(path, labels):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    write_mask(labels, path)


def _header(report, args, config):
    report.section("run", {"command": args.command, "version": __version__, "prng": PRNG_NAME})
    report.section("config", config)


# -- evaluate ---------------------------------------------------------------

def _evaluate_one(task):
    image_id, gt_path, pred_path, cats, n_categories, d_frac = task
    gt = _read(read_mask, gt_path)
    pred = _read(read_mask, pred_path)
    if gt.shape != pred.shape:
        raise CliError(f"{image_id}: gt is {gt.shape[1]}x{gt.shape[0]}, prediction is {pred.shape[1]}x{pred.shape[0]}")
    try:
        return evaluate_image(gt, pred, n_categories, cats, d_frac)
    except ValueError as exc:
        raise CliError(f"{image_id}: {exc}") from None


def cmd_evaluate(args, report):
    manifest = _load_manifest(args.manifest, args.C)
    c = manifest.category_count
    tasks = [
        (e.image_id, os.path.join(args.gt, e.mask_path), os.path.join(args.pred, e.mask_path), e.gt_categories, c, args.d_frac)
        for e in manifest
    ]
    _require_files([p for t in tasks for p in t[1:3]])
    acc = map_reduce(_evaluate_one, tasks, args.workers, EvalAccumulator(c))
    s = acc.summary()
    _header(report, args, {
        "gt": args.gt, "pred": args.pred, "manifest": args.manifest, "categories": c,
        "d_frac": args.d_frac, "beta_sq": BETA_SQ,
    })
    report.section("results", {
        "images": s["images"], "pixels": s["pixels"], "miou": s["miou"], "b_miou": s["b_miou"],
        "img_acc": s["img_acc"], "f_beta": s["f_beta"],
    })
    report.table("size_buckets", ["bucket", "miou", "b_miou"], [
        [b.value, s[f"miou[{b.value}]"], s[f"b_miou[{b.value}]"]] for b in SizeBucket
    ])
    iou = acc.confusion.iou_counts()
    rows = []
    for k in range(c + 1):
        if iou.union[k] == 0:
            continue
        b_iou = acc.boundary.inter[k] / acc.boundary.union[k] if acc.boundary.union[k] else float("nan")
        rows.append([k, int(iou.inter[k]), int(iou.union[k]), 100.0 * iou.inter[k] / iou.union[k], 100.0 * b_iou])
    report.table("classes", ["class", "inter", "union", "iou", "b_iou"], rows)
    return 0


# -- match ------------------------------------------------------------------

def _predicted_set(path):
    return predicted_categories(_read(read_mask, path))


def _relabel_one(task):
    src, dst, mapping = task
    _write_out(dst, relabel_mask(_read(read_mask, src), mapping))
    return 1


def cmd_match(args, report):
    manifest = _load_manifest(args.manifest, args.C)
    c = manifest.category_count
    paths = [os.path.join(args.pred, e.mask_path) for e in manifest]
    _require_files(paths)
    pred_sets = pmap(_predicted_set, paths, args.workers)
    for e, p in zip(manifest, pred_sets):
        bad = sorted(k for k in p if k > c)
        if bad:
            raise CliError(f"{e.image_id}: generated id {bad[0]} exceeds {c}; reduce clusters to C before matching")
    s = build_matching_matrix(pred_sets, [e.gt_categories for e in manifest], c)
    if not s.any():
        warnings.warn("matching matrix is all zero; falling back to the identity mapping", stacklevel=2)
    f = hungarian_max(s)
    with open(args.mapping, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f.to_text())
    if args.out:
        pmap(_relabel_one, [(src, os.path.join(args.out, e.mask_path), f) for src, e in zip(paths, manifest)], args.workers)
    failed = [i + 1 for i in range(c) if s[i, f.mapping[i] - 1] == 0]
    _header(report, args, {"pred": args.pred, "manifest": args.manifest, "categories": c, "mapping": args.mapping, "out": args.out})
    report.section("results", {
        "images": len(manifest),
        "matrix_total": int(s.sum()),
        "matched_score": f.total,
        "identity": f.is_identity(),
        "failed_matches": len(failed),
    })
    report.table("mapping", ["generated", "gt", "score"], [[i + 1, int(j), int(s[i, j - 1])] for i, j in enumerate(f.mapping)])
    return 0


# -- cluster / assign -------------------------------------------------------

def _pooled_one(task):
    emb_path, att_path = task
    z = _read(read_embedding, emb_path)
    params = _attention_for(att_path, z.shape[0])
    return attended_pool_raw(z, pixel_attention(params, z))


def cmd_cluster(args, report):
    manifest = _load_manifest(args.manifest, args.C)
    k = args.clusters or manifest.category_count
    paths = [_emb_path(args.emb, e.image_id) for e in manifest]
    _require_files(paths)
    pooled = np.vstack(pmap(_pooled_one, [(p, args.attention) for p in paths], args.workers))
    vectors = normalize_rows(pooled)
    try:
        result = kmeans(vectors, k, seed=args.seed, max_iters=args.max_iters)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    write_centroids(result.centers, args.centroids)
    _header(report, args, {
        "emb": args.emb, "manifest": args.manifest, "attention": args.attention, "clusters": k,
        "seed": args.seed, "max_iters": args.max_iters, "centroids": args.centroids,
    })
    sizes = np.bincount(result.labels, minlength=k)
    report.section("results", {
        "vectors": vectors.shape[0], "dim": vectors.shape[1], "iterations": result.iterations,
        "converged": result.converged, "objective": result.objective,
        "empty_clusters": int(np.sum(sizes == 0)),
    })
    report.table("clusters", ["cluster", "size"], [[i + 1, int(n)] for i, n in enumerate(sizes)])
    return 0


def _assign_one(task):
    emb_path, att_path, centroids, tau, gt_path, out_path = task
    z = _read(read_embedding, emb_path)
    params = _attention_for(att_path, z.shape[0])
    gate = foreground_gate(pixel_attention(params, z), tau)
    labels = assign_pixels(z, centroids, gate)
    if gt_path is not None:
        gh, gw = _read(read_mask, gt_path).shape
        labels = upsample_nearest(labels, gw, gh)
    _write_out(out_path, labels)
    return Counter(labels.ravel().tolist())


def cmd_assign(args, report):
    manifest = _load_manifest(args.manifest, args.C)
    centroids = _read(read_centroids, args.centroids)
    paths = [_emb_path(args.emb, e.image_id) for e in manifest]
    gts = [os.path.join(args.gt, e.mask_path) for e in manifest] if args.gt else [None] * len(paths)
    _require_files(paths + [g for g in gts if g])
    tasks = [
        (p, args.attention, centroids, args.tau, g, os.path.join(args.out, e.mask_path))
        for p, g, e in zip(paths, gts, manifest)
    ]
    hist = map_reduce(_assign_one, tasks, args.workers, Counter())
    _header(report, args, {
        "emb": args.emb, "manifest": args.manifest, "centroids": args.centroids, "attention": args.attention,
        "tau": args.tau, "gt": args.gt, "out": args.out,
    })
    total = sum(hist.values())
    report.section("results", {"images": len(manifest), "clusters": centroids.shape[0], "pixels": total,
                               "other_fraction": hist.get(0, 0) / total if total else float("nan")})
    report.table("labels", ["label", "pixels"], [[k, hist[k]] for k in sorted(hist)])
    return 0


# -- distance matching ------------------------------------------------------

def _bank_pair(task):
    emb_path, mask_path = task
    return _read(read_embedding, emb_path), _read(read_mask, mask_path)


def _knn_one(task):
    emb_path, bank, k, gt_path, out_path = task
    z = _read(read_embedding, emb_path)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        labels = knn_assign(z, bank, k)
    if gt_path is not None:
        gh, gw = _read(read_mask, gt_path).shape
        labels = upsample_nearest(labels, gw, gh)
    _write_out(out_path, labels)
    return Counter(labels.ravel().tolist())


def cmd_distmatch(args, report):
    train = _load_manifest(args.train_manifest, args.C)
    query = _load_manifest(args.manifest, args.C)
    train_tasks = [(_emb_path(args.train_emb, e.image_id), os.path.join(args.train_gt, e.mask_path)) for e in train]
    _require_files([p for t in train_tasks for p in t])
    pairs = pmap(_bank_pair, train_tasks, args.workers)
    bank = build_bank(pairs, [e.image_id for e in train])
    if len(bank) == 0:
        raise CliError("training masks produced an empty embedding bank")
    if args.bank:
        write_bank(bank, args.bank)
    k = args.k
    if k > len(bank):
        log.warning("k=%d exceeds bank size %d; clamping", k, len(bank))
        k = len(bank)
    paths = [_emb_path(args.emb, e.image_id) for e in query]
    gts = [os.path.join(args.gt, e.mask_path) for e in query] if args.gt else [None] * len(paths)
    _require_files(paths + [g for g in gts if g])
    tasks = [(p, bank, k, g, os.path.join(args.out, e.mask_path)) for p, g, e in zip(paths, gts, query)]
    hist = map_reduce(_knn_one, tasks, args.workers, Counter())
    _header(report, args, {
        "train_manifest": args.train_manifest, "train_emb": args.train_emb, "train_gt": args.train_gt,
        "manifest": args.manifest, "emb": args.emb, "k": args.k, "gt": args.gt, "out": args.out,
    })
    report.section("results", {"bank_entries": len(bank), "bank_dim": bank.dim, "k_used": k, "images": len(query)})
    report.table("labels", ["label", "pixels"], [[lab, hist[lab]] for lab in sorted(hist)])
    return 0


# -- losscheck --------------------------------------------------------------

def cmd_losscheck(args, report):
    rows = gradient_suite(instances=args.instances, seed=args.seed)
    _header(report, args, {"seed": args.seed, "instances": args.instances, "eps": 1e-5, "tolerance": 1e-4, "zero_tolerance": 1e-8})
    report.table("kernels", ["kernel", "instances", "max_rel_error", "max_zero_path", "status"], [
        [r.kernel, r.instances, f"{r.max_rel_error:.3e}", f"{r.max_zero_path:.3e}", "PASS" if r.passed else "FAIL"]
        for r in rows
    ])
    report.section("results", {"passed": all(r.passed for r in rows)})
    return 0 if all(r.passed for r in rows) else 1


# -- stats ------------------------------------------------------------------

def _stats_one(path):
    gt = _read(read_mask, path)
    pixels = Counter({int(k): int(n) for k, n in zip(*np.unique(gt, return_counts=True))})
    buckets = Counter(size_bucket(gt, k).value for k in pixels if k not in (0, IGNORE))
    return Counter({("pixels", k): n for k, n in pixels.items()}) + Counter({("bucket", b): n for b, n in buckets.items()}) \
        + Counter({("images", None): 1, ("area", None): gt.size})


def cmd_stats(args, report):
    manifest = _load_manifest(args.manifest, args.C)
    paths = [os.path.join(args.gt, e.mask_path) for e in manifest]
    _require_files(paths)
    agg = map_reduce(_stats_one, paths, args.workers, Counter())
    area = agg[("area", None)]
    _header(report, args, {"gt": args.gt, "manifest": args.manifest, "categories": manifest.category_count})
    label_sets = Counter(len(e.gt_categories) for e in manifest)
    report.section("results", {
        "images": agg[("images", None)],
        "pixels": area,
        "other_fraction": agg[("pixels", 0)] / area if area else float("nan"),
        "ignore_fraction": agg[("pixels", IGNORE)] / area if area else float("nan"),
        "mean_labels_per_image": sum(n * k for k, n in label_sets.items()) / len(manifest) if len(manifest) else float("nan"),
    })
    objects = sum(agg[("bucket", b.value)] for b in SizeBucket)
    report.table("size_buckets", ["bucket", "objects", "fraction"], [
        [b.value, agg[("bucket", b.value)], agg[("bucket", b.value)] / objects if objects else float("nan")] for b in SizeBucket
    ])
    cats = sorted(k for kind, k in agg if kind == "pixels" and k not in (0, IGNORE))
    report.table("categories", ["category", "pixels"], [[k, agg[("pixels", k)]] for k in cats])
    return 0


# -- argument parsing -------------------------------------------------------

COMMANDS = {
    "evaluate": cmd_evaluate,
    "match": cmd_match,
    "cluster": cmd_cluster,
    "assign": cmd_assign,
    "distmatch": cmd_distmatch,
    "losscheck": cmd_losscheck,
    "stats": cmd_stats,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--report", default=None, help="write the report here instead of stdout")
    common.add_argument("--format", choices=("text", "records"), default="text", help="report layout")
    common.add_argument("--workers", type=int, default=None, help="worker processes (default: $SEGEVAL_WORKERS or 1)")
    common.add_argument("-C", type=int, default=None, help="override the manifest's category count")
    common.add_argument("--timing", action="store_true", help="add wall time to the report (breaks byte-identity)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="segeval", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evaluate", parents=[common], help="mIoU, b-mIoU, Img-Acc and F-beta of predicted masks")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--d-frac", type=float, default=DEFAULT_D_FRAC, help="boundary width as a fraction of the image diagonal")

    p = sub.add_parser("match", parents=[common], help="Hungarian matching of generated to gt categories")
    p.add_argument("--pred", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mapping", default="mapping.txt", help="where to write 'gen_id -> gt_id' lines")
    p.add_argument("--out", default=None, help="write relabeled masks under this directory")

    p = sub.add_parser("cluster", parents=[common], help="k-means over attention-pooled image embeddings")
    p.add_argument("--emb", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--attention", default=None)
    p.add_argument("--clusters", type=int, default=None, help="cluster count (default: C)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=DEFAULT_MAX_ITERS)
    p.add_argument("--centroids", required=True)

    p = sub.add_parser("assign", parents=[common], help="per-pixel pseudo labels from centroids")
    p.add_argument("--emb", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--centroids", required=True)
    p.add_argument("--attention", default=None)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--gt", default=None, help="upsample labels to these masks' resolution")
    p.add_argument("--out", required=True)

    p = sub.add_parser("distmatch", parents=[common], help="k-NN labeling against a labeled embedding bank")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--train-emb", required=True)
    p.add_argument("--train-gt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("-k", type=int, default=DEFAULT_K)
    p.add_argument("--gt", default=None, help="upsample labels to these masks' resolution")
    p.add_argument("--bank", default=None, help="also write the bank to this file")
    p.add_argument("--out", required=True)

    p = sub.add_parser("losscheck", parents=[common], help="finite-difference check of every loss kernel")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=100)

    p = sub.add_parser("stats", parents=[common], help="category and object-size statistics of gt masks")
    p.add_argument("--gt", required=True)
    p.add_argument("--manifest", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args.workers = resolve_workers(args.workers)
    except ValueError as exc:
        print(f"segeval: {exc}", file=sys.stderr)
        return 2
    report = Report(args.command)
    start = time.perf_counter()
    try:
        code = COMMANDS[args.command](args, report)
    except CliError as exc:
        print(f"segeval {args.command}: {exc}", file=sys.stderr)
        return 2
    elapsed = time.perf_counter() - start
    log.info("%s finished in %.3fs", args.command, elapsed)
    if args.timing:
        report.section("timing", {"wall_seconds": elapsed})
    report.write(args.report, args.format)
    return code


if __name__ == "__main__":
    sys.exit(main())
