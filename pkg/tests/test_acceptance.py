"""Acceptance suite: one PASS/FAIL line per criterion, repeated in the terminal summary."""
import os
import shutil
import subprocess
import time
import tracemalloc

import numpy as np
import pytest

from queenwatch.cli import main, split_for_training
from queenwatch.config import RunConfig
from queenwatch.errors import ModelError
from queenwatch.evaluate import (
    ENERGY_PRESETS,
    estimate_energy,
    kfold_indices,
    render_ablation,
    run_ablation,
    split_indices,
    stratified_split,
)
from queenwatch.features import feature_matrix
from queenwatch.gbdt import TrainConfig, best_split, logistic_grad_hess, train
from queenwatch.infer import eval_quant, infer_sample
from queenwatch.ingest import SynthConfig, generate_synthetic, parse_dataset_csv, write_dataset_csv
from queenwatch.modelfmt import deserialize, emit_static_source, interpret_source, serialize, write_model
from queenwatch.quantize import QuantForest, QuantSpec, parity_report, quantize_forest
from queenwatch.wire import FRAME_BYTES, DecoderState, decode_stream, encode_sample, payload_bytes

from oracles import brute_force_split, fd_grad_hess, random_quant_forest, random_split_instance
from test_modelfmt import HARNESS, _single_leaf


@pytest.fixture(scope="module")
def parity_run():
    """10k synthetic rows; 2000-row stratified test split, the rest trains with a validation hold-out."""
    t0 = time.perf_counter()
    d = generate_synthetic(SynthConfig(n_samples=10000, seed=0))
    tr, va, te = split_for_training(d, RunConfig())
    forest = train(tr, va)
    q = quantize_forest(forest)
    return forest, q, te, time.perf_counter() - t0


def test_criterion_01_quantization_parity(parity_run, criterion):
    c = criterion(1, "quantization parity on the synthetic test split")
    forest, q, te, fit_s = parity_run
    t0 = time.perf_counter()
    rep = parity_report(forest, q, feature_matrix(te))
    secs = time.perf_counter() - t0
    ok = (len(te) >= 2000 and rep.agreement >= 0.995 and rep.max_abs_error <= 2.0 ** -10 and secs < 10)
    c.verdict(ok, f"rows={rep.n_rows} agreement={100 * rep.agreement:.2f}% max_dev={rep.max_abs_error:.2e} "
                  f"parity_s={secs:.2f} fit_s={fit_s:.2f}")
    assert ok


def test_criterion_02_trainer_power(criterion):
    c = criterion(2, "default trainer reaches >= 99.0% on 5000/1000 synthetic")
    t0 = time.perf_counter()
    d = generate_synthetic(SynthConfig())
    rest, test = stratified_split(d, 1000 / len(d), 0)
    tr, va = stratified_split(rest, 0.2, 1)
    forest = train(tr, va, TrainConfig())
    X = feature_matrix(test)
    Z = (X - np.asarray(forest.scaler.mean)) / np.asarray(forest.scaler.std)
    acc = float(np.mean((forest.raw_score(Z) >= 0) == test.labels))
    secs = time.perf_counter() - t0
    ok = len(rest) == 5000 and len(test) == 1000 and acc >= 0.99 and secs < 60
    c.verdict(ok, f"test_acc={100 * acc:.2f}% trees={len(forest.trees)} {secs:.1f}s")
    assert ok


def test_criterion_03_gradient_oracle(criterion):
    c = criterion(3, "grad/hess match central differences, 1000 triples")
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        raw, label, w = float(rng.uniform(-20, 20)), int(rng.integers(2)), float(rng.uniform(0.1, 10))
        g, h = logistic_grad_hess(raw, label, w)
        g_fd, h_fd = fd_grad_hess(raw, label, w)
        worst = max(worst, abs(g - g_fd) / abs(g_fd), abs(h - h_fd) / abs(h_fd))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-6 and secs < 1
    c.verdict(ok, f"max_rel_err={worst:.2e} {secs:.2f}s")
    assert ok


def test_criterion_04_split_oracle(criterion):
    c = criterion(4, "best_split equals exhaustive enumeration, 200 instances")
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(200):
        inst = random_split_instance(rng)
        cfg = TrainConfig(min_samples_leaf=inst["msl"], l2_lambda=inst["lam"])
        got = best_split(inst["idx"], inst["g"], inst["h"], inst["binned"], cfg, inst["B"])
        ref = brute_force_split(inst["idx"], inst["g"], inst["h"], inst["binned"], inst["B"],
                                inst["msl"], inst["lam"], cfg.min_child_weight)
        got = None if got is None else (got.feature, got.bin, got.gain)
        bad += got != ref
    secs = time.perf_counter() - t0
    ok = bad == 0 and secs < 5
    c.verdict(ok, f"mismatches={bad} {secs:.2f}s")
    assert ok


def test_criterion_05_serialization(criterion):
    c = criterion(5, "500 round trips and every bit flip of the minimal blob rejected")
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    trips = 0
    for _ in range(500):
        mask = [(0, 1, 2), (0, 2), (1,), (0, 1, 2, 3)][int(rng.integers(4))]
        spec = QuantSpec(int(rng.integers(4, 13)), int(rng.integers(8, 25)))
        q = random_quant_forest(rng, n_features=len(mask), mask=mask, spec=spec)
        trips += deserialize(serialize(q)) == q
    blob = serialize(_single_leaf())
    rejected = 0
    for i in range(len(blob) * 8):
        bad = bytearray(blob)
        bad[i // 8] ^= 1 << (i % 8)
        try:
            deserialize(bytes(bad))
        except ModelError:
            rejected += 1
    secs = time.perf_counter() - t0
    ok = trips == 500 and len(blob) == 56 and rejected == 448 and secs < 30
    c.verdict(ok, f"round_trips={trips}/500 blob={len(blob)}B flips_rejected={rejected}/{len(blob) * 8} {secs:.1f}s")
    assert ok


def _decode_chunks(stream, cuts):
    state = DecoderState()
    frames = []
    peak = 0
    prev = 0
    for cut in list(cuts) + [len(stream)]:
        got, state = decode_stream(state, stream[prev:cut])
        frames += got
        peak = max(peak, len(state.buffer))
        prev = cut
    return frames, state.errors, peak


def test_criterion_06_protocol(criterion):
    c = criterion(6, "chunking invariance over 1000 partitions and 1e6-byte decoder fuzz")
    rng = np.random.default_rng(6)
    t0 = time.perf_counter()
    frames = [encode_sample([float(np.float32(v)) for v in rng.normal([34, 20, 55, 50, 1013, 1012], 3)])
              for _ in range(100)]
    stream = bytearray(b"".join(frames))
    # a few faults so error counts are part of the comparison
    stream[10 * FRAME_BYTES + 25] = 0x00
    del stream[40 * FRAME_BYTES + 5: 40 * FRAME_BYTES + 8]
    stream[70 * FRAME_BYTES: 70 * FRAME_BYTES] = b"\x01\x02\x03"
    stream = bytes(stream)
    ref = _decode_chunks(stream, [])
    same = 0
    for _ in range(1000):
        k = int(rng.integers(0, 200))
        cuts = np.sort(rng.integers(0, len(stream) + 1, size=k))
        got = _decode_chunks(stream, cuts)
        same += got[:2] == ref[:2]
    crashes = 0
    peak = 0
    tracemalloc.start()
    try:
        for alphabet in (None, np.array([0x00, 0xFF, 0x3F, 0x80], dtype=np.uint8)):
            data = (rng.integers(0, 256, 500_000, dtype=np.uint8) if alphabet is None
                    else rng.choice(alphabet, 500_000))
            data = data.tobytes()
            cuts = np.cumsum(rng.integers(1, 300, size=4000))
            cuts = cuts[cuts < len(data)]
            try:
                peak = max(peak, _decode_chunks(data, cuts)[2])
            except Exception:
                crashes += 1
        _, mem_peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    secs = time.perf_counter() - t0
    ok = same == 1000 and ref[1] == 3 and len(ref[0]) >= 97 and crashes == 0 and peak <= FRAME_BYTES and secs < 30
    c.verdict(ok, f"identical={same}/1000 frames={len(ref[0])} errors={ref[1]} fuzz_crashes={crashes} "
                  f"max_buffer={peak}B {secs:.1f}s")
    assert ok


def test_criterion_07_end_to_end_loopback(parity_run, tmp_path, criterion, capsys):
    c = criterion(7, "serve + host client over loopback match in-process decisions")
    _, q, te, _ = parity_run
    write_model(q, tmp_path / "m.qbf")
    write_dataset_csv(te, tmp_path / "test.csv")
    capsys.readouterr()
    code = main(["serve", "--model", str(tmp_path / "m.qbf"), "--data", str(tmp_path / "test.csv"),
                 "--timeout", "5"])
    out, err = capsys.readouterr()
    rows = [l.split("\t") for l in out.splitlines()[1:]]
    back = parse_dataset_csv(tmp_path / "test.csv")
    want = [infer_sample(q, s.env) for s in back]
    mism = sum((int(r[1]), int(r[2])) != (d.label, d.score_q) for r, d in zip(rows, want))
    mism += abs(len(rows) - len(want))
    ok = code == 0 and len(rows) == len(te) and mism == 0 and "mismatches=0" in err
    c.verdict(ok, f"frames={len(rows)} mismatches={mism}")
    assert ok


def test_criterion_08_footprint(parity_run, criterion):
    c = criterion(8, "model <= 10240 bytes, sample payload 24 bytes")
    _, q, _, _ = parity_run
    n = len(serialize(q))
    payload = len(encode_sample([1.0] * 6)) - 4
    ok = n <= 10240 and payload == 24 == payload_bytes()
    c.verdict(ok, f"model={n}B trees={q.n_trees} nodes={q.n_nodes} payload={payload}B")
    assert ok


def test_criterion_09_energy(criterion):
    c = criterion(9, "paper-48mhz preset gives ~98 mJ per inference")
    e = estimate_energy(ENERGY_PRESETS["paper-48mhz"])
    ok = abs(e - 97.9) < 1e-9 and abs(e - 98.0) <= 0.2
    c.verdict(ok, f"{e:.2f} mJ")
    assert ok


def _within_one(y_part, ratio):
    n1 = int(np.sum(y_part == 1))
    return abs(n1 - ratio * y_part.size) <= 1


def test_criterion_10_stratification(criterion):
    c = criterion(10, "80/20 split and every CV fold keep class ratio within one sample")
    y = generate_synthetic(SynthConfig(n_samples=10000, seed=10)).labels
    ratio = y.mean()
    t0 = time.perf_counter()
    bad = 0
    checks = 0
    for seed in range(100):
        tr, te = split_indices(y, 0.2, seed)
        checks += 2
        bad += not _within_one(y[te], ratio)
        bad += not _within_one(y[tr], ratio)
        ytr = y[tr]
        for _, va in kfold_indices(ytr, 5, seed):
            checks += 1
            bad += not _within_one(ytr[va], ytr.mean())
    ok = bad == 0
    c.verdict(ok, f"violations={bad}/{checks} {time.perf_counter() - t0:.1f}s")
    assert ok


def test_criterion_11_table_reproduction(criterion):
    c = criterion(11, "8-row ablation on the external dataset")
    path = os.environ.get("QUEENWATCH_DATASET")
    if not path or not os.path.exists(path):
        c.skip("external dataset absent; set QUEENWATCH_DATASET to a sensor CSV")
    d = parse_dataset_csv(path)
    rows = run_ablation(d, n_seeds=10, n_jobs=os.cpu_count() or 1)
    print(render_ablation(rows))
    by = {r.subset: 100 * r.test_mean for r in rows}
    env, audio = by[(0, 1, 2)], by.get((0, 1, 2, 3))
    singles = [by[(i,)] for i in range(3)]
    ok = env >= 97.9 and all(84.7 <= s <= 88.9 for s in singles)
    if audio is not None:
        ok = ok and audio <= env + 1.0
    c.verdict(ok, f"env={env:.1f} singles={[round(s, 1) for s in singles]} audio={audio}")
    assert ok


def _compiled_scores(q, X, workdir, tag):
    src = workdir / f"h{tag}.c"
    exe = workdir / f"h{tag}"
    src.write_text(HARNESS % emit_static_source(q))
    subprocess.run(["cc", "-std=c89", "-O1", "-o", str(exe), str(src)], check=True, capture_output=True)
    out = subprocess.run([str(exe)], input="\n".join(" ".join(map(str, r)) for r in X),
                         capture_output=True, text=True, check=True).stdout.split()
    return [int(v) for v in out]


def test_criterion_12_emitted_source_parity(tmp_path, criterion):
    c = criterion(12, "engine vs emitted source on 1000 inputs x 20 models")
    rng = np.random.default_rng(12)
    have_cc = shutil.which("cc") is not None
    t0 = time.perf_counter()
    bad = 0
    models = 0
    while models < 20:
        q = random_quant_forest(rng, max_trees=16, max_leaves=16, leaf_range=1 << 28)
        if q.n_trees == 0:
            continue
        models += 1
        X = rng.integers(-32768, 32768, size=(1000, q.n_features))
        X[:4] = [[32767] * q.n_features, [-32768] * q.n_features, [0] * q.n_features, [-1] * q.n_features]
        engine = [eval_quant(q, tuple(int(v) for v in r)).score_q for r in X]
        score = interpret_source(emit_static_source(q))
        bad += sum(score(tuple(int(v) for v in r)) != e for r, e in zip(X, engine))
        if have_cc:
            bad += sum(a != b for a, b in zip(_compiled_scores(q, X, tmp_path, models), engine))
    secs = time.perf_counter() - t0
    ok = bad == 0
    c.verdict(ok, f"mismatches={bad} compiled={'yes' if have_cc else 'no (interpreter only)'} {secs:.1f}s")
    assert ok
