import json
import os
from fractions import Fraction

import numpy as np
import pytest

import oracles
import synth
from segeval.cli import main
from segeval.formats import (
    Manifest,
    ManifestEntry,
    read_centroids,
    read_mask,
    write_embedding,
    write_manifest,
    write_mask,
)


def run(args, tmp_path, name="report.txt"):
    path = tmp_path / name
    code = main(args + ["--report", str(path)])
    return code, path.read_text(encoding="utf-8") if path.exists() else ""


def value(report, key):
    for line in report.splitlines():
        if " : " in line and line.split(" : ")[0].strip() == key:
            return line.split(" : ", 1)[1].strip()
    raise KeyError(key)


@pytest.fixture
def corpus(tmp_path):
    root = tmp_path / "data"
    manifest = synth.write_corpus(str(root), n_images=12, seed=1)
    return root, manifest


def write_masks(root, masks, c):
    os.makedirs(root / "gt", exist_ok=True)
    os.makedirs(root / "pred", exist_ok=True)
    entries = []
    for i, (gt, pred) in enumerate(masks):
        write_mask(gt, root / "gt" / f"{i}.lsmk")
        write_mask(pred, root / "pred" / f"{i}.lsmk")
        cats = frozenset(int(k) for k in np.unique(gt) if k not in (0, 65535)) or frozenset({1})
        entries.append(ManifestEntry(f"im{i}", f"{i}.lsmk", cats))
    write_manifest(Manifest(c, entries), root / "m.txt")
    return str(root / "m.txt")


def test_evaluate_perfect(corpus, tmp_path):
    root, manifest = corpus
    code, rep = run(["evaluate", "--gt", str(root / "gt"), "--pred", str(root / "gt"), "--manifest", manifest], tmp_path)
    assert code == 0
    assert value(rep, "miou") == "100.000000"
    assert value(rep, "f_beta") == "100.000000"
    assert value(rep, "d_frac") == "0.030000"
    assert value(rep, "beta_sq") == "0.300000"
    assert value(rep, "prng") == "numpy.random.PCG64"


def test_evaluate_against_oracle(tmp_path):
    rng = np.random.default_rng(11)
    masks = []
    for _ in range(4):
        gt = rng.integers(0, 4, size=(10, 12)).astype(np.uint16)
        gt[0, :3] = 65535
        masks.append((gt, rng.integers(0, 4, size=(10, 12)).astype(np.uint16)))
    manifest = write_masks(tmp_path, masks, 3)
    args = ["evaluate", "--gt", str(tmp_path / "gt"), "--pred", str(tmp_path / "pred"), "--manifest", manifest]
    code, rep = run(args + ["--d-frac", "0.1"], tmp_path)
    assert code == 0
    r = oracles.radius(10, 12, 0.1)
    assert float(value(rep, "miou")) == pytest.approx(float(oracles.miou(masks, 3)), abs=5e-7)
    assert float(value(rep, "b_miou")) == pytest.approx(float(oracles.boundary_miou(masks, 3, r)), abs=5e-7)
    from segeval.formats import read_manifest
    sets = [e.gt_categories for e in read_manifest(manifest)]
    acc = 100 * Fraction(sum(oracles.img_acc(p, s) for (_, p), s in zip(masks, sets)), 4)
    assert float(value(rep, "img_acc")) == pytest.approx(float(acc), abs=5e-7)
    scores = [oracles.f_beta(g, p) for g, p in masks]
    scores = [s for s in scores if s is not None]
    assert float(value(rep, "f_beta")) == pytest.approx(float(100 * sum(scores) / len(scores)), abs=5e-7)
    _, sat = run(args + ["--d-frac", "2.0"], tmp_path, "sat.txt")
    assert value(sat, "b_miou") == value(sat, "miou")


def test_evaluate_missing_files_listed(corpus, tmp_path, capsys):
    root, manifest = corpus
    os.remove(root / "gt" / "img0003.lsmk")
    os.remove(root / "gt" / "img0007.lsmk")
    code = main(["evaluate", "--gt", str(root / "gt"), "--pred", str(root / "gt"), "--manifest", manifest])
    err = capsys.readouterr().err
    assert code != 0
    assert "2 missing" in err and "img0003.lsmk" in err and "img0007.lsmk" in err


def test_evaluate_dimension_mismatch(tmp_path, capsys):
    manifest = write_masks(tmp_path, [(np.ones((4, 4), dtype=np.uint16), np.ones((4, 5), dtype=np.uint16))], 1)
    code = main(["evaluate", "--gt", str(tmp_path / "gt"), "--pred", str(tmp_path / "pred"), "--manifest", manifest])
    assert code != 0
    assert "im0" in capsys.readouterr().err


def test_match_identity_and_permutation(corpus, tmp_path):
    root, manifest = corpus
    mapping = tmp_path / "map.txt"
    code, rep = run(["match", "--pred", str(root / "gt"), "--manifest", manifest, "--mapping", str(mapping)], tmp_path)
    assert code == 0 and value(rep, "identity") == "yes"
    assert mapping.read_text() == "".join(f"{i} -> {i}\n" for i in range(1, 6))

    perm = np.array([0, 3, 5, 1, 2, 4], dtype=np.uint16)  # generated id -> scrambled id
    os.makedirs(root / "scrambled")
    for name in os.listdir(root / "gt"):
        write_mask(perm[read_mask(root / "gt" / name)], root / "scrambled" / name)
    code, rep = run(["match", "--pred", str(root / "scrambled"), "--manifest", manifest,
                     "--mapping", str(mapping), "--out", str(root / "fixed")], tmp_path)
    assert code == 0
    inverse = {int(perm[k]): k for k in range(1, 6)}
    assert mapping.read_text() == "".join(f"{i} -> {inverse[i]}\n" for i in range(1, 6))
    _, ev = run(["evaluate", "--gt", str(root / "gt"), "--pred", str(root / "fixed"), "--manifest", manifest], tmp_path, "ev.txt")
    assert value(ev, "miou") == "100.000000"


def test_match_empty_predictions_warns(tmp_path):
    gt = np.ones((3, 3), dtype=np.uint16)
    manifest = write_masks(tmp_path, [(gt, np.zeros_like(gt)), (2 * gt, np.zeros_like(gt))], 2)
    with pytest.warns(UserWarning, match="all zero"):
        code, rep = run(["match", "--pred", str(tmp_path / "pred"), "--manifest", manifest,
                         "--mapping", str(tmp_path / "map.txt")], tmp_path)
    assert code == 0 and value(rep, "matrix_total") == "0"
    assert (tmp_path / "map.txt").read_text() == "1 -> 1\n2 -> 2\n"


def test_match_rejects_overclustered_ids(tmp_path, capsys):
    manifest = write_masks(tmp_path, [(np.ones((2, 2), dtype=np.uint16), np.full((2, 2), 3, dtype=np.uint16))], 2)
    code = main(["match", "--pred", str(tmp_path / "pred"), "--manifest", manifest, "--mapping", str(tmp_path / "m")])
    assert code != 0 and "exceeds" in capsys.readouterr().err


def test_cluster_n_equals_c(tmp_path):
    rng = np.random.default_rng(0)
    os.makedirs(tmp_path / "emb")
    entries = []
    for i in range(3):
        write_embedding(rng.normal(size=(4, 2, 2)), tmp_path / "emb" / f"im{i}.lemb")
        entries.append(ManifestEntry(f"im{i}", f"{i}.lsmk", frozenset({i + 1})))
    write_manifest(Manifest(3, entries), tmp_path / "m.txt")
    code, rep = run(["cluster", "--emb", str(tmp_path / "emb"), "--manifest", str(tmp_path / "m.txt"),
                     "--centroids", str(tmp_path / "c.lctr")], tmp_path)
    assert code == 0
    assert value(rep, "objective") == "0.000000"
    assert read_centroids(tmp_path / "c.lctr").shape == (3, 4)


def test_cluster_assign_pipeline(corpus, tmp_path):
    root, manifest = corpus
    cent = tmp_path / "c.lctr"
    assert main(["cluster", "--emb", str(root / "emb"), "--manifest", manifest, "--centroids", str(cent),
                 "--report", str(tmp_path / "r1")]) == 0
    code, rep = run(["assign", "--emb", str(root / "emb"), "--manifest", manifest, "--centroids", str(cent),
                     "--gt", str(root / "gt"), "--out", str(tmp_path / "pred")], tmp_path)
    assert code == 0
    out = read_mask(tmp_path / "pred" / "img0000.lsmk")
    assert out.shape == (32, 32) and out.min() >= 1
    # Raising tau past the constant 0.5 attention gates everything off.
    code, rep = run(["assign", "--emb", str(root / "emb"), "--manifest", manifest, "--centroids", str(cent),
                     "--tau", "0.6", "--out", str(tmp_path / "off")], tmp_path, "off.txt")
    assert value(rep, "other_fraction") == "1.000000"
    assert read_mask(tmp_path / "off" / "img0000.lsmk").shape == (8, 8)


def test_distmatch_single_entry_bank(tmp_path):
    os.makedirs(tmp_path / "emb")
    os.makedirs(tmp_path / "gt")
    write_embedding(np.ones((2, 2, 2)), tmp_path / "emb" / "t.lemb")
    write_mask(np.full((4, 4), 2, dtype=np.uint16), tmp_path / "gt" / "t.lsmk")
    write_embedding(np.random.default_rng(0).normal(size=(2, 3, 3)), tmp_path / "emb" / "q.lemb")
    write_manifest(Manifest(2, [ManifestEntry("t", "t.lsmk", frozenset({2}))]), tmp_path / "train.txt")
    write_manifest(Manifest(2, [ManifestEntry("q", "q.lsmk", frozenset({1}))]), tmp_path / "query.txt")
    code, rep = run(["distmatch", "--train-manifest", str(tmp_path / "train.txt"), "--train-emb", str(tmp_path / "emb"),
                     "--train-gt", str(tmp_path / "gt"), "--manifest", str(tmp_path / "query.txt"),
                     "--emb", str(tmp_path / "emb"), "-k", "1", "--out", str(tmp_path / "dm"),
                     "--bank", str(tmp_path / "b.lbnk")], tmp_path)
    assert code == 0
    assert np.all(read_mask(tmp_path / "dm" / "q.lsmk") == 2)
    assert value(rep, "bank_entries") == "1"


def test_distmatch_recovers_labels(corpus, tmp_path):
    root, manifest = corpus
    code, rep = run(["distmatch", "--train-manifest", manifest, "--train-emb", str(root / "emb"),
                     "--train-gt", str(root / "gt"), "--manifest", manifest, "--emb", str(root / "emb"),
                     "-k", "3", "--gt", str(root / "gt"), "--out", str(tmp_path / "dm")], tmp_path)
    assert code == 0
    _, ev = run(["evaluate", "--gt", str(root / "gt"), "--pred", str(tmp_path / "dm"), "--manifest", manifest], tmp_path, "e.txt")
    assert float(value(ev, "miou")) == 100.0


def test_losscheck(tmp_path):
    code, rep = run(["losscheck", "--instances", "3"], tmp_path)
    assert code == 0
    assert value(rep, "passed") == "yes"
    assert rep.count("PASS") == 4


def test_stats(corpus, tmp_path):
    root, manifest = corpus
    code, rep = run(["stats", "--gt", str(root / "gt"), "--manifest", manifest], tmp_path)
    assert code == 0
    assert value(rep, "images") == "12"
    assert value(rep, "other_fraction") == "0.000000"
    assert "[size_buckets]" in rep


def test_records_format(corpus, tmp_path):
    root, manifest = corpus
    code, rep = run(["evaluate", "--gt", str(root / "gt"), "--pred", str(root / "gt"), "--manifest", manifest,
                     "--format", "records"], tmp_path)
    recs = [json.loads(line) for line in rep.splitlines()]
    assert {"section": "results", "key": "miou", "value": "100.000000"} in recs
    assert any(r.get("table") == "size_buckets" for r in recs)


def test_timing_is_opt_in(corpus, tmp_path):
    root, manifest = corpus
    args = ["stats", "--gt", str(root / "gt"), "--manifest", manifest]
    _, plain = run(args, tmp_path, "a.txt")
    _, timed = run(args + ["--timing"], tmp_path, "b.txt")
    assert "wall_seconds" not in plain and "wall_seconds" in timed


def test_workers_env(corpus, tmp_path, monkeypatch):
    root, manifest = corpus
    args = ["evaluate", "--gt", str(root / "gt"), "--pred", str(root / "gt"), "--manifest", manifest]
    _, one = run(args, tmp_path, "a.txt")
    monkeypatch.setenv("SEGEVAL_WORKERS", "2")
    _, two = run(args, tmp_path, "b.txt")
    assert one == two
    monkeypatch.setenv("SEGEVAL_WORKERS", "0")
    assert main(args) == 2


def test_bad_manifest(tmp_path, capsys):
    (tmp_path / "m.txt").write_text("C=2\na\tx\t1\na\ty\t2\n")
    assert main(["stats", "--gt", str(tmp_path), "--manifest", str(tmp_path / "m.txt")]) != 0
    assert "line 3" in capsys.readouterr().err
    assert main(["stats", "--gt", str(tmp_path), "--manifest", str(tmp_path / "nope.txt")]) != 0
