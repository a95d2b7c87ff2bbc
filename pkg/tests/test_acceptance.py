"""Acceptance suite: one test per criterion, each emitting a single verdict line.

Verdict lines look like ``criterion 3: PASS superpixelize exactness (...)`` and
are collected into an "acceptance criteria" section of the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from gradcheck import all_layer_errors, fcn_error, vae_error
from oracles import brute_lloyd, canonical, components
from spda.analysis import DiagGaussian, distribution_comparison, kl_diag_gaussian
from spda.augment import sp, superpixelize
from spda.cli import main as cli_main
from spda.experiment import NeighborhoodConfig, ToyConfig, run_neighborhood_study, run_toy_experiment
from spda.metrics import combined_score_s
from spda.nn import Network, fcn_spec
from spda.slic import SlicParams, slic_segment, slic_segment_3d
from spda.synthetic import SyntheticConfig, generate_samples
from spda.train import SpCache, TrainConfig, build_minibatch, eq6_terms, sample_loss
from spda.vae import VaeSpec, VaeTrainConfig


def verdict(record_property, n, title, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {title} ({detail})"
    record_property("acceptance", line)
    print(line)
    return ok


# --------------------------------------------------------------------------
# 1. combined score
# --------------------------------------------------------------------------


def test_criterion_1_combined_score(record_property):
    rows = {
        "densevoxnet_spda": ({"myocardium": (0.817, 0.723, 3.639), "blood_pool": (0.938, 0.778, 5.548)}, 0.196),
        "densevoxnet": ({"myocardium": (0.821, 0.964, 7.294), "blood_pool": (0.931, 0.938, 9.533)}, -0.161),
    }
    got = {k: combined_score_s(v) for k, (v, _) in rows.items()}
    ok = all(abs(got[k] - e) <= 1e-3 for k, (_, e) in rows.items())
    detail = ", ".join(f"{k}={got[k]:.4f} vs {e}" for k, (_, e) in rows.items())
    assert verdict(record_property, 1, "combined score reproduction", ok, detail)


# --------------------------------------------------------------------------
# 2. SLIC correctness
# --------------------------------------------------------------------------


def blob_volume(gen, size=32):
    """Random 3D analogue of the synthetic images: 1-3 spheres/boxes on a background, plus noise."""
    zz, yy, xx = np.mgrid[:size, :size, :size]
    vol = np.full((size, size, size), 0.3)
    for _ in range(int(gen.integers(1, 4))):
        c = gen.uniform(6, size - 6, 3)
        r = gen.uniform(4, 9)
        if gen.random() < 0.5:
            m = (zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2 <= r * r
        else:
            m = (np.abs(zz - c[0]) <= r) & (np.abs(yy - c[1]) <= r) & (np.abs(xx - c[2]) <= r)
        vol[m] = gen.uniform(0.5, 0.9)
    vol += gen.normal(0, 0.05, vol.shape)
    return np.clip(vol, 0, 1)[..., None].astype(np.float32)


def _partition_ok(cells):
    ids = np.unique(cells)
    contiguous = ids.tolist() == list(range(len(ids)))
    _, n_comp = components(cells)
    return contiguous and n_comp == len(ids)


def _oracle_cases():
    ok = True
    # constant image -> 2x2 grid, identical to unwindowed Lloyd from the same centers
    img = np.full((16, 16, 1), 0.3, np.float32)
    cells = slic_segment(img, SlicParams(4))
    centers = [(3.5, 3.5), (3.5, 11.5), (11.5, 3.5), (11.5, 11.5)]
    ok &= np.array_equal(cells, canonical(brute_lloyd(img * 100.0, centers, [[30.0]] * 4, 20, 8.0, 10)))
    # two-half image -> the two halves
    img = np.zeros((8, 8, 1), np.float32)
    img[:, 4:] = 1.0
    cells = slic_segment(img, SlicParams(2))
    oracle = brute_lloyd(img * 100.0, [(3.5, 1.5), (3.5, 5.5)], [[0.0], [100.0]], 20, math.sqrt(32), 10)
    ok &= np.array_equal(cells, canonical(oracle)) and np.array_equal(cells[:, 4:], np.ones((8, 4)))
    # the same two cases as volumes
    vol = np.full((16, 16, 16, 1), 0.5, np.float32)
    centers = [(z, y, x) for z in (3.5, 11.5) for y in (3.5, 11.5) for x in (3.5, 11.5)]
    ok &= np.array_equal(slic_segment_3d(vol, SlicParams(8)), canonical(brute_lloyd(vol * 100.0, centers, [[50.0]] * 8, 20, 8.0, 10)))
    vol = np.zeros((8, 8, 8, 1), np.float32)
    vol[4:] = 1.0
    oracle = brute_lloyd(vol * 100.0, [(1.5, 3.5, 3.5), (5.5, 3.5, 3.5)], [[0.0], [100.0]], 20, 256 ** (1 / 3), 10)
    ok &= np.array_equal(slic_segment_3d(vol, SlicParams(2)), canonical(oracle))
    return bool(ok)


def test_criterion_2_slic(record_property):
    t0 = time.perf_counter()
    gen = np.random.default_rng(2024)
    # cells of ~7-20 px, finer than the blobs and stripes of the synthetic images
    images = generate_samples(SyntheticConfig(size=64, num_samples=200), 2024)
    failures, worst = [], 0.0
    for smp in images:
        s = int(gen.integers(200, 601))
        cells = slic_segment(smp.image, SlicParams(s))
        err = abs(cells.max() + 1 - s) / s
        worst = max(worst, err)
        if not _partition_ok(cells) or err > 0.2:
            failures.append((smp.id, s))
    for i in range(20):
        vgen = np.random.default_rng(i)
        vol = blob_volume(vgen)
        s = int(vgen.integers(100, 401))
        cells = slic_segment_3d(vol, SlicParams(s))
        err = abs(cells.max() + 1 - s) / s
        worst = max(worst, err)
        if not _partition_ok(cells) or err > 0.2:
            failures.append((f"vol{i}", s))
    oracle_ok = _oracle_cases()
    secs = time.perf_counter() - t0
    ok = not failures and oracle_ok and secs < 60
    detail = f"failures={failures[:5]}, worst count error={worst:.3f}, oracle cases {'match' if oracle_ok else 'DIFFER'}, {secs:.1f}s"
    assert verdict(record_property, 2, "SLIC correctness", ok, detail)


# --------------------------------------------------------------------------
# 3. superpixelize exactness
# --------------------------------------------------------------------------


def test_criterion_3_superpixelize(record_property):
    t0 = time.perf_counter()
    gen = np.random.default_rng(3)
    bad = []
    for trial in range(100):
        h, w = (int(v) for v in gen.integers(4, 40, size=2))
        img = gen.random((h, w, int(gen.choice([1, 3])))).astype(np.float32)
        # coarse Voronoi partition Q and a refinement P splitting each Q cell in two
        k = int(gen.integers(1, min(h * w, 30) + 1))
        seeds = gen.random((k, 2)) * (h, w)
        yy, xx = np.mgrid[:h, :w]
        Q = np.argmin((yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2, axis=-1)
        P = Q * 2 + (gen.random((h, w)) < 0.5)
        out = superpixelize(img, P)
        flat, lab = out.reshape(-1, out.shape[-1]), P.reshape(-1)
        var_zero = all(np.ptp(flat[lab == c], axis=0).max() == 0 for c in np.unique(lab))
        m0, m1 = img.reshape(-1, img.shape[-1]).astype(np.float64).mean(0), flat.astype(np.float64).mean(0)
        mean_ok = np.all(np.abs(m1 - m0) <= 1e-5 * np.maximum(np.abs(m0), 1e-12))
        idem = np.array_equal(superpixelize(out, P), out)
        refine = np.allclose(superpixelize(out, Q), superpixelize(img, Q), rtol=1e-6, atol=0)
        if not (var_zero and mean_ok and idem and refine):
            bad.append((trial, var_zero, bool(mean_ok), idem, refine))
    secs = time.perf_counter() - t0
    ok = not bad and secs < 10
    assert verdict(record_property, 3, "superpixelize exactness", ok, f"100 pairs, violations={bad[:3]}, {secs:.1f}s")


# --------------------------------------------------------------------------
# 4. gradients
# --------------------------------------------------------------------------


def test_criterion_4_gradients(record_property):
    t0 = time.perf_counter()
    errs = dict(all_layer_errors(0))
    errs["fcn"] = fcn_error(0)
    errs["vae"] = vae_error(0)
    secs = time.perf_counter() - t0
    ok = all(e < 1e-3 for e in errs.values()) and secs < 60
    detail = ", ".join(f"{k}={v:.1e}" for k, v in errs.items()) + f", {secs:.1f}s"
    assert verdict(record_property, 4, "gradient suite", ok, detail)


# --------------------------------------------------------------------------
# 5. mini-batch sampling is unbiased for the SP term
# --------------------------------------------------------------------------


def test_criterion_5_unbiasedness(record_property):
    t0 = time.perf_counter()
    data = generate_samples(SyntheticConfig(size=32, num_samples=4), 5, prefix="u")
    net = Network(fcn_spec(1, 3, 4), 11)
    cfg = TrainConfig(s_lo=10, s_hi=19, basic_aug=False, input_size=None)
    cache = SpCache(cfg.slic_params())
    _, exact = eq6_terms(net, data, cfg, cache)
    gen = np.random.default_rng(5)
    losses: dict[tuple[str, int], float] = {}  # the frozen network makes each (image, s) loss a constant
    draws = []
    while len(draws) < 10_000:
        for smp in build_minibatch(data, cfg, gen, cache)[1::2]:
            key = (smp.provenance.source, smp.provenance.s)
            if key not in losses:
                losses[key] = sample_loss(net, smp.image, smp.label)
            draws.append(losses[key])
    mc = float(np.mean(draws[:10_000]))
    rel = abs(mc - exact) / exact
    secs = time.perf_counter() - t0
    ok = rel < 0.01 and secs < 300
    detail = f"MC={mc:.5f}, exact={exact:.5f}, rel err={rel:.4f}, {len(losses)} distinct (image, s), {secs:.1f}s"
    assert verdict(record_property, 5, "mini-batch unbiasedness", ok, detail)


# --------------------------------------------------------------------------
# 6. toy experiment
# --------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_toy_experiment(record_property):
    t0 = time.perf_counter()
    rep = run_toy_experiment(ToyConfig())
    secs = time.perf_counter() - t0
    print(rep.summary())
    a_ok = rep.spda_raw >= rep.baseline_raw - 0.01
    b_ok = rep.spda_sp - rep.baseline_sp >= 0.05
    ok = a_ok and b_ok and secs < 15 * 60
    detail = (
        f"(a) raw mIoU spda {rep.spda_raw:.4f} vs baseline {rep.baseline_raw:.4f}: {'ok' if a_ok else 'fail'}; "
        f"(b) SP-test mIoU spda {rep.spda_sp:.4f} vs baseline {rep.baseline_sp:.4f}, "
        f"gap {rep.spda_sp - rep.baseline_sp:+.4f}: {'ok' if b_ok else 'fail'}; {secs:.0f}s"
    )
    assert verdict(record_property, 6, "toy SPDA experiment", ok, detail)


# --------------------------------------------------------------------------
# 7. neighborhood property
# --------------------------------------------------------------------------


def test_criterion_7_neighborhood(record_property):
    t0 = time.perf_counter()
    rep = run_neighborhood_study(NeighborhoodConfig(s_lo=200, s_hi=800))
    secs = time.perf_counter() - t0
    n = sum(len(r["satisfied"]) for r in rep.per_image)
    ok = rep.fraction >= 0.9 and secs < 120
    assert verdict(record_property, 7, "neighborhood property", ok, f"fraction={rep.fraction:.3f} over {n} SP images, {secs:.1f}s")


# --------------------------------------------------------------------------
# 8. KL machinery
# --------------------------------------------------------------------------


def test_criterion_8_kl(record_property):
    t0 = time.perf_counter()
    p = DiagGaussian([0.2, -1.0, 3.0], [0.5, 1.0, 2.0])
    self_kl = kl_diag_gaussian(p, p)
    unit = kl_diag_gaussian(DiagGaussian([0.0], [1.0]), DiagGaussian([1.0], [1.0]))
    train = generate_samples(SyntheticConfig(size=64, num_samples=20), 1, "tr")
    test = generate_samples(SyntheticConfig(size=64, num_samples=20), 2, "te")
    ori = [s.image for s in train]
    aug = ori + [sp(s.image, k) for s in train for k in (50, 100, 150)]
    rep = distribution_comparison(
        ori, aug, [s.image for s in test], VaeSpec(patch=16, hidden=64, latent=8), VaeTrainConfig(steps=600, seed=0)
    )
    finite = all(np.isfinite(v) and v >= 0 for v in rep.values())
    secs = time.perf_counter() - t0
    print(rep.summary())
    ok = self_kl == 0.0 and abs(unit - 0.5) < 1e-10 and finite and secs < 300
    detail = (
        f"KL(p||p)={self_kl}, KL(N(0,1)||N(1,1))={unit:.12f}, four KLs "
        f"{', '.join(f'{v:.4f}' for v in rep.values())} finite and >= 0: {finite}; "
        f"direction: test||aug {'<' if rep.kl_test_vs_aug < rep.kl_test_vs_ori else '>='} test||ori, "
        f"aug||test {'<' if rep.kl_aug_vs_test < rep.kl_ori_vs_test else '>='} ori||test (reported only); {secs:.0f}s"
    )
    assert verdict(record_property, 8, "KL machinery", ok, detail)


# --------------------------------------------------------------------------
# 9. determinism of the CLI pipeline
# --------------------------------------------------------------------------


def _tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(record_property, tmp_path, capsys):
    data = tmp_path / "data"
    assert cli_main(["--seed", "7", "synth", "--out-dir", str(data), "--num", "6", "--size", "64"]) == 0
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        codes = [
            cli_main(["augment", "--manifest", str(data / "manifest.json"), "--s-lo", "50", "--s-hi", "150",
                      "--count", "5", "--out-dir", str(out / "aug")]),
            cli_main(["train", "--manifest", str(out / "aug" / "augmented.json"), "--batch", "8", "--seed", "7",
                      "--s-lo", "50", "--s-hi", "150", "--max-steps", "30", "--input-size", "32", "32",
                      "--val-fraction", "0.2", "--val-every", "10",
                      "--out", str(out / "model.ckpt"), "--log", str(out / "train.log")]),
        ]  # fmt: skip
        assert codes == [0, 0]
        outputs.append(_tree(out))
    capsys.readouterr()
    same = outputs[0] == outputs[1]
    n_files = len(outputs[0])
    ok = same and "train.log" in outputs[0] and "model.ckpt" in outputs[0]
    assert verdict(record_property, 9, "determinism", ok, f"{n_files} files (SP images, manifest, log, checkpoint) bit-identical: {same}")
