"""Acceptance criteria 1-8.

Each test prints one ``PASS``/``FAIL`` line. Criteria 6-8 share two full
desk-scale ``pipeline`` runs (8 families x 50 models, seed 42, 2048
points, 30 epochs), made once per session through the CLI.
"""

import json
import math
import time

import numpy as np
import pytest

from _oracles import is_closed_manifold
from featuredex import cli, datagen, descriptor, net, pooling, retrieval
from featuredex.datagen import FeatureParams, occupancy_grid
from featuredex.errors import FeaturedexError
from featuredex.mesh_io import TriangleMesh, parse_stl, write_stl
from featuredex.workflow import file_digest

SLOT = datagen.get_family("circular_end_blind_slot").id


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}  criterion {number}: {detail}")
        return ok
    return emit


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    runs = []
    for n in range(2):
        root = tmp_path_factory.mktemp(f"desk{n}")
        cfg = root / "pipeline.cfg"
        cfg.write_text(f"out = {root / 'run'}\nseed = 42\nper_family = 50\npoints = 2048\nepochs = 30\n")
        t0 = time.perf_counter()
        code = cli.run(["pipeline", str(cfg)])
        runs.append({"root": root / "run", "code": code, "seconds": time.perf_counter() - t0})
    return runs


# -- 1 ----------------------------------------------------------------------------------

def test_criterion_1_format_roundtrips(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    bad = []
    for k in range(100):
        mesh = TriangleMesh(rng.normal(scale=10, size=(int(rng.integers(1, 64)), 3, 3)).astype(np.float32))
        data = write_stl(mesh)
        back = parse_stl(data)
        if back.vertices.tobytes() != mesh.vertices.tobytes() or write_stl(back) != data:
            bad.append(("stl", k))

        n, d = int(rng.integers(1, 300)), 32
        fm = descriptor.FeatureMatrix(rng.normal(size=(n, d)).astype(np.float32),
                                      rng.uniform(0, 10, (n, 3)).astype(np.float32).astype(np.float64))
        blob = descriptor.encode_fmat(fm)
        if descriptor.encode_fmat(descriptor.decode_fmat(blob)) != blob:
            bad.append(("fmat", k))

        entries = [(int(i), int(rng.integers(0, 12)), rng.normal(size=int(d)))
                   for i in rng.permutation(5000)[:int(rng.integers(1, 200))]]
        blob = retrieval.encode_index(retrieval.build_index(entries, "raw", bytes(range(32))))
        if retrieval.encode_index(retrieval.decode_index(blob)) != blob:
            bad.append(("fidx", k))

        params = net.init_params(int(rng.integers(2, 12)), seed=k)
        params.arrays["x_mean"] = rng.normal(size=32).astype(np.float32)
        blob = net.encode_fnet(params)
        back = net.decode_fnet(blob)
        if net.encode_fnet(back) != blob or any(back.arrays[a].tobytes() != params.arrays[a].tobytes()
                                                 for a in params.arrays):
            bad.append(("fnet", k))

    crashes = 0
    decoders = [parse_stl, descriptor.decode_fmat, retrieval.decode_index, net.decode_fnet]
    prefixes = [b"", b"solid ", b"FMAT", b"FIDX", b"FNET"]
    for k in range(2000):
        payload = prefixes[k % len(prefixes)] + rng.bytes(int(rng.integers(0, 300)))
        for dec in decoders:
            try:
                dec(payload)
            except FeaturedexError:
                pass
            except Exception:  # noqa: BLE001 - anything else is a crash
                crashes += 1
    elapsed = time.perf_counter() - t0
    ok = not bad and crashes == 0 and elapsed < 30
    verdict(1, ok, f"400 roundtrips, {len(bad)} mismatches; 8000 fuzz decodes, {crashes} crashes; "
                   f"{elapsed:.1f}s (< 30s)")
    assert ok


# -- 2 ----------------------------------------------------------------------------------

def test_criterion_2_frobenius_unit_suite(verdict):
    def oracle(a):
        return math.sqrt(sum(x * x for row in a for x in row))

    cases = [([[0.0, 0.0], [0.0, 0.0]], 0.0), (np.eye(3).tolist(), math.sqrt(3)),
             ([[1.0, 2.0], [3.0, 4.0]], math.sqrt(30))]
    errs = []
    for m, expected in cases:
        got = retrieval.frobenius_norm(np.array(m))
        ref = oracle(m)
        errs.append(0.0 if ref == got == 0 else abs(got - ref) / ref)
        errs.append(0.0 if expected == got == 0 else abs(got - expected) / expected)
    ok = max(errs) <= 1e-12
    verdict(2, ok, f"||0||, ||I3||, ||[[1,2],[3,4]]|| max relative error {max(errs):.1e} (<= 1e-12)")
    assert ok


# -- 3 ----------------------------------------------------------------------------------

def test_criterion_3_spp_fixed_dimension(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    cfg = pooling.SppConfig()
    params = net.init_params(8, seed=1)
    lengths, perm_ok = set(), True
    for n in (10, 100, 2048, 5000):
        pts = rng.uniform(0, 10, (n, 3))
        X = rng.normal(size=(n, 32))
        perm = rng.permutation(n)
        raw = pooling.spp_pool(pts, X, cfg)
        learned, _ = net.forward(params, pts, X)
        lengths |= {raw.shape[0], learned.shape[0]}
        perm_ok &= raw.tobytes() == pooling.spp_pool(pts[perm], X[perm], cfg).tobytes()
        perm_ok &= learned.tobytes() == net.forward(params, pts[perm], X[perm])[0].tobytes()
    elapsed = time.perf_counter() - t0
    ok = lengths == {2336} and perm_ok and elapsed < 30
    verdict(3, ok, f"lengths {sorted(lengths)} (expect [2336]); permutation bit-exact {perm_ok}; "
                   f"{elapsed:.1f}s (< 30s)")
    assert ok


# -- 4 ----------------------------------------------------------------------------------

def test_criterion_4_gradient_check(verdict):
    t0 = time.perf_counter()
    worst, checked = 0.0, []
    for s in range(5):
        rng = np.random.default_rng(100 + s)
        params = net.init_params(8, seed=s)
        params.arrays["x_mean"] = rng.normal(scale=0.2, size=32).astype(np.float32)
        params.arrays["x_scale"] = rng.uniform(0.5, 2, size=32).astype(np.float32)
        sample = (rng.uniform(0, 10, (512, 3)), rng.normal(size=(512, 32)), s % 8)
        err, info = net.grad_check(params, sample, eps=1e-5, n_params=200, seed=s, return_details=True)
        worst = max(worst, err)
        checked.append(info["checked"])
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and min(checked) >= 200 and elapsed < 120
    verdict(4, ok, f"max relative error {worst:.2e} (< 1e-5) over {checked} parameters x 5 samples; "
                   f"{elapsed:.1f}s (< 120s)")
    assert ok


# -- 5 ----------------------------------------------------------------------------------

def test_criterion_5_retrieval_oracle(verdict):
    rng = np.random.default_rng(5)
    mismatches = 0
    for variant in ("integer", "float"):
        if variant == "integer":  # small integers: exact ties everywhere
            emb = rng.integers(-2, 3, size=(1000, 8)).astype(np.float32)
        else:
            emb = rng.normal(size=(1000, 24)).astype(np.float32)
            emb[500:520] = emb[0:20]  # duplicate vectors -> distance ties
        ids = rng.permutation(100000)[:1000]
        fams = rng.integers(0, 8, size=1000)
        index = retrieval.build_index(list(zip(ids, fams, emb)))
        for q in range(100):
            qv = (emb[rng.integers(1000)].astype(np.float64) if q % 4 == 0
                  else rng.integers(-2, 3, size=emb.shape[1]).astype(np.float64) if variant == "integer"
                  else rng.normal(size=emb.shape[1]))
            excl = int(ids[q]) if q % 5 == 0 else None
            rows = []
            for i, f, e in zip(ids, fams, emb):
                if excl is not None and i == excl:
                    continue
                diff = e.astype(np.float64) - qv
                rows.append((float(np.sqrt(np.sum(diff * diff))), int(i), int(f)))
            rows.sort()
            want = [(i, f, d) for d, i, f in rows]
            got = retrieval.query(index, qv, k=len(want), exclude_id=excl)
            mismatches += got != want
    ok = mismatches == 0
    verdict(5, ok, f"{mismatches} of 200 queries differ from the exhaustive scan (full ranking, "
                   f"1000-entry indexes, ties by id)")
    assert ok


# -- 6 ----------------------------------------------------------------------------------

def test_criterion_6_generator_validity(verdict, pipeline_runs):
    root = pipeline_runs[0]["root"]
    records = datagen.read_manifest(root)
    leaky = [r.id for r in records if not is_closed_manifold(parse_stl((root / r.path).read_bytes()).vertices)]

    grid = occupancy_grid("through_hole", FeatureParams({"radius": 2.0}, 5.0, 5.0, 10.0), 64)
    removed = float((~grid.occupied).sum()) * grid.cell_size ** 3
    analytic = math.pi * 2.0 ** 2 * 10.0
    vol_err = abs(removed - analytic) / analytic

    counts = [sum(r.split == s for r in records) for s in ("train", "val", "test")]
    ok = not leaky and vol_err <= 0.03 and counts == [280, 60, 60]
    verdict(6, ok, f"{len(records) - len(leaky)}/{len(records)} meshes watertight; through-hole volume "
                   f"error {100 * vol_err:.2f}% (<= 3%); splits {counts} (expect [280, 60, 60])")
    assert ok


# -- 7 ----------------------------------------------------------------------------------

def test_criterion_7_end_to_end(verdict, pipeline_runs):
    run = pipeline_runs[0]
    assert run["code"] == 0
    report = json.loads((run["root"] / "report.json").read_text())
    loss = report["history"]["train_loss"]
    base, spp = report["baseline"], report["spp_learned"]
    slot = spp["per_family"][str(SLOT)]

    a = loss[-1] <= 0.5 * loss[0]
    b = spp["top1"] > base["top1"]
    c = base["topk"] >= base["top1"] and spp["topk"] >= spp["top1"]
    d_frac = slot["top1_hits"] / slot["queries"]
    d = d_frac >= 0.6
    fast = run["seconds"] < 600
    ok = a and b and c and d and fast
    raw = report["spp_raw"]
    verdict(7, ok,
            f"(a) loss {loss[0]:.3f} -> {loss[-1]:.3f} [{'ok' if a else 'no'}]; "
            f"(b) learned SPP top-1 {spp['top1']:.3f} vs baseline {base['top1']:.3f} [{'ok' if b else 'no'}]; "
            f"(c) top-5 {spp['topk']:.3f}/{base['topk']:.3f} >= top-1 [{'ok' if c else 'no'}]; "
            f"(d) slot same-family NN {slot['top1_hits']}/{slot['queries']} = {d_frac:.0%} (>= 60%) "
            f"[{'ok' if d else 'no'}]; runtime {run['seconds']:.0f}s (< 600s) "
            f"| raw SPP top-1 {raw['top1']:.3f}, slot {raw['per_family'][str(SLOT)]['top1_hits']}"
            f"/{raw['per_family'][str(SLOT)]['queries']}")
    assert ok


# -- 8 ----------------------------------------------------------------------------------

def test_criterion_8_determinism(verdict, pipeline_runs):
    r1, r2 = (r["root"] for r in pipeline_runs)
    same_report = (r1 / "report.json").read_bytes() == (r2 / "report.json").read_bytes()
    same_index = all(file_digest(r1 / f"index-{m}.fidx") == file_digest(r2 / f"index-{m}.fidx")
                     for m in ("raw", "learned"))
    same_net = file_digest(r1 / "net.fnet") == file_digest(r2 / "net.fnet")
    ok = same_report and same_index and all(r["code"] == 0 for r in pipeline_runs)
    verdict(8, ok, f"reports identical {same_report}; FIDX digests identical {same_index}; "
                   f"FNET identical {same_net}")
    assert ok
