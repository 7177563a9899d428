"""Acceptance gate: one test per criterion, each printing a PASS line.

Run with ``pytest -s tests/test_acceptance.py`` to see the per-criterion
lines. The regression thresholds in P4 were frozen from the first audited
run of the pinned suite (mean QQ accuracy 0.5727, min 0.50; mean QK
accuracy 0.0148, max 0.0625).
"""

import time

import numpy as np
import pytest

from conftest import brute_reweighted, fm, random_fm
from qalign.aggregation import (
    AggregationMatrix,
    AlignmentMatrix,
    STAGE_REWEIGHTED,
    apply_fallback,
    build_aggregation,
    compute_alignment,
    qq_align_pipeline,
    reweight_softmax,
)
from qalign.attention import cross_image_attention, rearrange_kv, rearranged_attention
from qalign.cli import main
from qalign.diagnostics import (
    MODE_QUERY_KEY,
    MODE_QUERY_QUERY,
    PatchSelection,
    attention_diff_map,
    full_attention_map,
    patch_attention_map,
    write_heatmap,
)
from qalign.metrics import BinaryMask, gram_loss, mask_iou
from qalign.simulate import (
    NOISELESS_SUITE,
    PINNED_SUITE,
    SUITE_SEEDS,
    generate_scene,
    make_projections,
    project_features,
    run_suite,
)
from qalign.tensor import load_tensor, save_tensor, tensor_bytes


@pytest.fixture(scope="module")
def pinned_reports():
    t0 = time.monotonic()
    reports = run_suite(PINNED_SUITE, SUITE_SEEDS)
    return reports, time.monotonic() - t0


@pytest.fixture(scope="module")
def pinned_scenes():
    scenes = []
    for seed in SUITE_SEEDS:
        scene = generate_scene(
            n=PINNED_SUITE["n"], n_labels=PINNED_SUITE["n_labels"],
            d_latent=PINNED_SUITE["d_latent"], d=PINNED_SUITE["d"],
            sigma=PINNED_SUITE["sigma"], seed=seed,
            background_labels=PINNED_SUITE["background_labels"],
        )
        proj = make_projections(
            PINNED_SUITE["d_latent"], PINNED_SUITE["d"], seed=seed,
            init=PINNED_SUITE["init"],
        )
        scenes.append((scene, proj))
    return scenes


def test_p1_oracle_equivalence():
    rng = np.random.default_rng(101)
    sizes = (4, 16, 64)
    ks = (1, 2, 4)
    t0 = time.monotonic()
    for i in range(200):
        n = sizes[i % len(sizes)]
        k = ks[(i // len(sizes)) % len(ks)]
        s = rng.standard_normal((n, n)).astype(np.float32)
        got = (
            reweight_softmax(apply_fallback(build_aggregation(AlignmentMatrix(s), k)))
            .to_dense().data.astype(np.float64)
        )
        want = brute_reweighted(s, k)
        assert np.max(np.abs(got - want)) < 1e-6, f"instance {i} (n={n}, k={k})"
    elapsed = time.monotonic() - t0
    assert elapsed < 10.0, f"P1 took {elapsed:.1f}s"
    print(f"\nP1 oracle equivalence (200 instances, {elapsed:.2f}s): PASS")


def test_p2_identity_reduction():
    rng = np.random.default_rng(102)
    n, d = 32, 16
    identity = AggregationMatrix(n, [(i, i, 1.0) for i in range(n)], STAGE_REWEIGHTED)
    t0 = time.monotonic()
    for _ in range(100):
        q = random_fm(rng, n, d)
        k = random_fm(rng, n, d)
        v = random_fm(rng, n, d)
        a = rearranged_attention(q, rearrange_kv(identity, k, v), 1.0)
        b = cross_image_attention(q, k, v, 1.0)
        assert np.array_equal(a.map.data, b.map.data)
        assert np.array_equal(a.output.data, b.output.data)
    elapsed = time.monotonic() - t0
    assert elapsed < 5.0, f"P2 took {elapsed:.1f}s"
    print(f"P2 identity reduction (100 instances, bitwise, {elapsed:.2f}s): PASS")


def test_p3_structural_invariants():
    rng = np.random.default_rng(103)
    equivariance_checked = 0
    for trial in range(120):
        n = int(rng.choice([4, 8, 16]))
        k = int(rng.choice([1, 2, min(4, n)]))
        q_app = random_fm(rng, n, 6)
        q_str = random_fm(rng, n, 6)
        s = compute_alignment(q_app, q_str)
        raw = build_aggregation(s, k)

        # pre-fallback column-regularity: exactly k nonzeros per column
        dense_raw = raw.to_dense().data
        assert np.all(np.count_nonzero(dense_raw, axis=0) == k)

        # fallback totality: no empty rows afterwards
        filled = apply_fallback(raw)
        assert filled.row_sums().min() > 0.0

        # reweighted stage: row stochastic and uniform over support
        p = reweight_softmax(filled)
        dense = p.to_dense().data.astype(np.float64)
        assert np.max(np.abs(dense.sum(axis=1) - 1.0)) <= 1e-6
        for r in range(n):
            nz = dense[r][dense[r] != 0.0]
            assert nz.max() - nz.min() < 1e-7

    # Permutation equivariance of the full pipeline, on instances whose
    # top-1 selection is a bijection with unique maxima (the diagonal
    # fallback intentionally pins original appearance indices, so it is
    # exercised elsewhere and excluded here by construction).
    for _ in range(100):
        n = int(rng.choice([4, 8, 16]))
        q_str = fm(2.0 * np.eye(n) + 0.05 * rng.standard_normal((n, n)))
        sigma = rng.permutation(n)
        q_app = fm(q_str.data[sigma] + 0.01 * rng.standard_normal((n, n)))
        raw = build_aggregation(compute_alignment(q_app, q_str), 1)
        assert len({r for r, _, _ in raw.entries}) == n, "instance not fallback-free"
        p = qq_align_pipeline(q_app, q_str, 1)
        k_app = random_fm(rng, n, n)
        v_app = random_fm(rng, n, 3)
        base = rearranged_attention(q_str, rearrange_kv(p, k_app, v_app), 1.0)
        perm = rng.permutation(n)
        p2 = qq_align_pipeline(fm(q_app.data[perm]), q_str, 1)
        permuted = rearranged_attention(
            q_str,
            rearrange_kv(p2, fm(k_app.data[perm]), fm(v_app.data[perm])),
            1.0,
        )
        assert np.array_equal(base.output.data, permuted.output.data)
        equivariance_checked += 1
    assert equivariance_checked >= 100
    print(f"P3 structural invariants (120 seeds, {equivariance_checked} equivariance cases): PASS")


def test_p4_query_query_superiority(pinned_reports):
    reports, elapsed = pinned_reports
    assert elapsed < 30.0, f"pinned suite took {elapsed:.1f}s"

    qq = np.array([r.top1_accuracy_qq for r in reports])
    qk = np.array([r.top1_accuracy_qk for r in reports])
    assert np.all(qq > qk), "query-query must beat query-key on every seed"

    # Frozen regression values from the first audited run of this suite.
    assert qq.mean() >= 0.55
    assert qk.mean() <= 0.05
    assert qq.min() >= 0.45
    assert qk.max() <= 0.10

    noiseless = run_suite(NOISELESS_SUITE, SUITE_SEEDS)
    assert all(r.top1_accuracy_qq == 1.0 for r in noiseless)
    print(
        f"P4 query-query superiority (20 seeds, mean QQ {qq.mean():.4f} vs "
        f"QK {qk.mean():.4f}; noiseless exactly 1.0; {elapsed:.2f}s): PASS"
    )


def test_p5_leakage_mitigation(pinned_reports, pinned_scenes, tmp_path):
    reports, _ = pinned_reports
    for r in reports:
        assert r.leakage_qalign <= r.leakage_baseline, f"seed {r.seed}"
        assert r.purity_qalign >= r.purity_baseline, f"seed {r.seed}"

    # Query-query maps concentrate at least as much mass on the true
    # correspondence as query-key maps, on every seeded instance.
    rng = np.random.default_rng(105)
    for scene, proj in pinned_scenes:
        q_str, _, _ = project_features(scene.z_str, proj)
        q_app, k_app, _ = project_features(scene.z_app, proj)
        m_qq = full_attention_map(q_str, q_app)
        m_qk = full_attention_map(q_str, k_app)
        inv_gt = np.empty(scene.n, dtype=np.int64)
        inv_gt[scene.gt_map] = np.arange(scene.n)
        rows = np.arange(scene.n)
        mass_qq = m_qq.data[rows, inv_gt[rows]].mean()
        mass_qk = m_qk.data[rows, inv_gt[rows]].mean()
        assert mass_qq >= mass_qk, f"seed {scene.seed}"

        # Diff maps respect the masking rule exactly on emitted patches.
        patches = PatchSelection(list(rng.choice(scene.n, size=4, replace=False)))
        maps_qk = patch_attention_map(q_str, k_app, MODE_QUERY_KEY, patches)
        maps_qq = patch_attention_map(q_str, q_app, MODE_QUERY_QUERY, patches)
        for a, b in zip(maps_qk, maps_qq):
            d = attention_diff_map(a, b, 0.2).data
            assert np.all((d == 0.0) | (d >= 0.2))

    # Same rule via the CLI emission path.
    scene, proj = pinned_scenes[0]
    q_str, _, _ = project_features(scene.z_str, proj)
    q_app, k_app, _ = project_features(scene.z_app, proj)
    paths = {}
    for name, m in (("qs", q_str), ("qa", q_app), ("ka", k_app)):
        p = tmp_path / f"{name}.qaln"
        save_tensor(m, p)
        paths[name] = str(p)
    rc = main([
        "diffmap", "--q-str", paths["qs"], "--q-app", paths["qa"],
        "--k-app", paths["ka"], "--patch", "0,1", "--threshold", "0.2",
        "--out-prefix", str(tmp_path / "d"),
    ])
    assert rc == 0
    for j in (0, 1):
        vals = load_tensor(tmp_path / f"d_patch{j:04d}.qaln").data
        assert np.all((vals == 0.0) | (vals >= 0.2))
    print("P5 leakage mitigation (20 seeds; masking rule exact): PASS")


def test_p6_metrics_sanity():
    rng = np.random.default_rng(106)
    feats = [random_fm(rng, 5, 4), random_fm(rng, 7, 3)]
    assert gram_loss(feats, feats) == 0.0
    assert gram_loss([fm([[1.0, 0.0]])], [fm([[0.0, 1.0]])]) == pytest.approx(
        0.125, abs=1e-7
    )

    full = BinaryMask((2, 2), np.array([1, 1, 1, 1]))
    half = BinaryMask((2, 2), np.array([1, 1, 0, 0]))
    other = BinaryMask((2, 2), np.array([0, 0, 1, 1]))
    assert mask_iou(full, full) == 1.0
    assert mask_iou(half, other) == 0.0
    assert mask_iou(full, half) == 0.5
    print("P6 metrics sanity: PASS")


def test_p7_interface_exactness(tmp_path):
    rng = np.random.default_rng(107)

    # Tensor file round trip is byte-identical (2-D and grid-tagged 3-D).
    for m in (random_fm(rng, 6, 5), fm(rng.standard_normal((6, 5)), grid=(2, 3))):
        p1, p2 = tmp_path / "a.qaln", tmp_path / "b.qaln"
        save_tensor(m, p1)
        save_tensor(load_tensor(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    # PGM output matches the golden bytes for the 2x2 example.
    golden = b"P5\n2 2\n255\n" + bytes([0, 255, 255, 0])
    heat = tmp_path / "h.pgm"
    write_heatmap(np.array([0.0, 1.0, 1.0, 0.0]), heat, "pgm", grid=(2, 2))
    assert heat.read_bytes() == golden

    # CLI results equal direct library calls bit-for-bit.
    q_app = random_fm(rng, 8, 4)
    q_str = random_fm(rng, 8, 4)
    qa, qs = tmp_path / "qa.qaln", tmp_path / "qs.qaln"
    save_tensor(q_app, qa)
    save_tensor(q_str, qs)
    s_path = tmp_path / "S.qaln"
    assert main(["align", "--q-app", str(qa), "--q-str", str(qs),
                 "--out", str(s_path)]) == 0
    s = compute_alignment(q_app, q_str)
    assert s_path.read_bytes() == tensor_bytes(fm(s.data))

    p_path = tmp_path / "P.qaln"
    assert main(["aggregate", "--sim", str(s_path), "-k", "1",
                 "--out", str(p_path)]) == 0
    p_prime = qq_align_pipeline(q_app, q_str, 1)
    assert p_path.read_bytes() == tensor_bytes(p_prime.to_dense())

    # Error exits create no output files.
    bad = tmp_path / "bad.qaln"
    bad.write_bytes(b"JUNKJUNKJUNK")
    never = tmp_path / "never.qaln"
    assert main(["aggregate", "--sim", str(bad), "--out", str(never)]) == 2
    assert not never.exists()
    assert main(["align", "--q-app", str(qa), "--oops", "1"]) == 1
    print("P7 interface exactness: PASS")
