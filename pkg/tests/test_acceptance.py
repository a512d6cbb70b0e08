"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line in the
terminal summary (see conftest.py) before asserting, so a red criterion still
reports its measured numbers.

Training runs use lr 1e-3: the default 1e-4 does not converge within 30
epochs of 100 videos.
"""
import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from conftest import record
from hoic import cli, dataio, train
from hoic import evaluate as ev
from hoic import losses as L
from hoic.autograd import Tensor
from hoic.model import init_params

SEEDS = (0, 1, 2)
EPOCHS = 30
LR = 1e-3
PLANTED = dict(frames=4, humans=5, objects=20, dim=32, signal=0.8)
N_TRAIN, N_TEST = 100, 20
HELD_OUT_OBJECTS = (0, 1)

# tolerances and thresholds
GRAD_TOL = 1e-4
GRADCHECK_SECONDS = 30.0
VALUE_TOL = 1e-9
ORACLE_TOL = 1e-9
REL_MIN, PHR_MIN, UNTRAINED_MAX = 0.9, 0.95, 0.2
RUN_SECONDS = 300.0


# --------------------------------------------------------------------------
# shared training runs (criteria 4, 5, 6)

_CACHE: dict = {}


def _recall(params, ds):
    return ev.evaluate(params, ds, ev.EvalConfig(iou_thresh=0.5, setting="ko")).recall_at_1


def planted_run(seed, **flags):
    key = ("planted", seed, tuple(sorted(flags.items())))
    if key not in _CACHE:
        ds = dataio.generate_synthetic(dataio.SyntheticConfig(videos=N_TRAIN + N_TEST, seed=seed, **PLANTED))
        dtr, dte = dataio.subset(ds, ds.videos[:N_TRAIN]), dataio.subset(ds, ds.videos[N_TRAIN:])
        t0 = time.perf_counter()
        ck = train.train_loop(dtr, train.TrainConfig(epochs=EPOCHS, lr_main=LR, seed=seed, **flags))
        secs = time.perf_counter() - t0
        finite = all(np.isfinite(t.data).all() for t in ck.params.values())
        _CACHE[key] = {"trained": _recall(ck.params, dte), "untrained": _recall(init_params(32, seed=seed), dte),
                       "seconds": secs, "finite": finite}
    return _CACHE[key]


def zero_shot_run(seed):
    key = ("zero-shot", seed)
    if key not in _CACHE:
        ds = dataio.generate_synthetic(dataio.SyntheticConfig(videos=160, seed=seed, **PLANTED))
        held = [v for v in ds.videos if v.label[1] in HELD_OUT_OBJECTS]
        seen = [v for v in ds.videos if v.label[1] not in HELD_OUT_OBJECTS][:N_TRAIN]
        dtr, dte = dataio.subset(ds, seen), dataio.subset(ds, held)
        ck = train.train_loop(dtr, train.TrainConfig(epochs=EPOCHS, lr_main=LR, seed=seed))
        dets = ev.infer(ck.params, dte, None)
        _CACHE[key] = {"trained": _recall(ck.params, dte), "untrained": _recall(init_params(32, seed=seed), dte),
                       "n_held_dets": sum(d.label[1] in HELD_OUT_OBJECTS for d in dets), "n_videos": len(held)}
    return _CACHE[key]


# --------------------------------------------------------------------------


def test_criterion_1_gradient_audit(capsys):
    t0 = time.perf_counter()
    code = cli.run(["gradcheck", "--dim", "8", "--seed", "1", "--instances", "10", "--negatives", "3",
                    "--tol", str(GRAD_TOL)])
    secs = time.perf_counter() - t0
    out = capsys.readouterr().out
    worst = max(float(line.split("error")[1].split()[0]) for line in out.splitlines() if "max rel error" in line)
    ok = record(1, code == 0 and worst < GRAD_TOL and secs < GRADCHECK_SECONDS,
                f"max rel error {worst:.2e} (< {GRAD_TOL:g}), gradcheck {secs:.1f} s (< {GRADCHECK_SECONDS:g} s)")
    assert ok, out


def _u(v):
    v = np.asarray(v, dtype=float)
    return Tensor(v / np.linalg.norm(v))


def test_criterion_2_analytic_loss_values():
    e0, e1 = _u([1, 0]), _u([0, 1])
    u4, oh4 = Tensor(np.full(4, 0.25)), Tensor([1.0, 0, 0, 0])
    cases = {
        "contrastive orthogonal": (L.contrastive(e0, e0, [e1]).item(), -1.0),
        "contrastive swapped": (L.contrastive(e0, e1, [e0]).item(), 1.0),
        "contrastive equal": (L.contrastive(e0, e0, [e0]).item(), 0.0),
        "sparsity one-hot": (L.sparsity(oh4, oh4).item(), 0.0),
        "sparsity uniform4": (L.sparsity(u4, u4).item(), math.log(4)),
        "sparsity half": (L.sparsity(Tensor([0.5, 0.5]), Tensor([0.0, 1.0])).item(), 0.5 * math.log(2)),
        "classification": (L.classification(Tensor(0.5), 1).item(), math.log(2)),
        "filter_frames": (L.filter_frames([Tensor(x) for x in (3.0, 1.0, 2.0, 4.0)]).item(), 1.5),
        "total": (L.total_loss(-2.0, 1.5, 0.0, math.log(2), 0.1).total, -2.0 + 0.15 + math.log(2)),
    }
    # the six-decimal reference values agree with the closed forms above to rounding
    printed = {"sparsity uniform4": 1.386294, "sparsity half": 0.346574, "classification": 0.693147,
               "total": -1.156853}
    worst = max(abs(got - want) for got, want in cases.values())
    rounding = max(abs(cases[k][1] - v) for k, v in printed.items())
    ok = record(2, worst < VALUE_TOL and rounding < 5e-7,
                f"max deviation {worst:.1e} from closed forms (< {VALUE_TOL:g}) over {len(cases)} cases")
    assert ok, {k: v for k, v in cases.items() if abs(v[0] - v[1]) >= VALUE_TOL}


def test_criterion_3_metric_oracle_equivalence():
    worst = 0.0
    dets, gt = oracles.hand_dataset(0)
    assert len({k[0] for k in gt}) == 5 and max(k[1] for k in gt) < 4
    for thr in (0.3, 0.5):
        rep = ev.evaluate_detections(dets, gt, ev.EvalConfig(iou_thresh=thr))
        for setting, ko in (("ko", True), ("def", False)):
            want, _ = oracles.class_map(dets, gt, thr, ko)
            worst = max(worst, *(abs(rep.map[setting][m] - want[m]) for m in ("phrase", "relation")))
        for m in ("phrase", "relation"):
            worst = max(worst, abs(rep.recall_at_1[m] - oracles.recall_at_1(dets, gt, thr, m)))
            one, every = oracles.video_recalls(dets, gt, thr, m)
            worst = max(worst, abs(rep.video_one[m] - one), abs(rep.video_all[m] - every))
    ranked = ev.average_precision([True, False, True], 2)
    worst = max(worst, abs(ranked - 5 / 6), abs(oracles.ap([True, False, True], 2) - 5 / 6))
    ok = record(3, worst < ORACLE_TOL, f"max |impl - oracle| {worst:.1e} (< {ORACLE_TOL:g}); ranked AP {ranked:.6f}")
    assert ok


@pytest.mark.slow
def test_criterion_4_planted_recovery():
    lines, passes = [], 0
    for s in SEEDS:
        r = planted_run(s)
        good = (r["trained"]["relation"] >= REL_MIN and r["trained"]["phrase"] >= PHR_MIN
                and r["untrained"]["relation"] <= UNTRAINED_MAX and r["seconds"] < RUN_SECONDS and r["finite"])
        passes += good
        lines.append(f"seed{s}: rel {r['trained']['relation']:.3f} phr {r['trained']['phrase']:.3f} "
                     f"untrained rel {r['untrained']['relation']:.3f} {r['seconds']:.0f}s")
    ok = record(4, passes >= 2, f"{passes}/3 seeds pass; " + "; ".join(lines))
    assert ok


@pytest.mark.slow
def test_criterion_5_ablation_direction():
    counts = {"no sparsity": 0, "no temporal": 0}
    detail = []
    for s in SEEDS:
        full = planted_run(s)["trained"]["relation"]
        spa = planted_run(s, use_sparsity=False)["trained"]["relation"]
        tem = planted_run(s, use_temporal=False)["trained"]["relation"]
        counts["no sparsity"] += spa < full
        counts["no temporal"] += tem < full
        detail.append(f"seed{s}: full {full:.3f} no-spa {spa:.3f} no-tem {tem:.3f}")
    ok = record(5, all(c >= 2 for c in counts.values()),
                f"reductions: sparsity {counts['no sparsity']}/3, temporal {counts['no temporal']}/3; "
                + "; ".join(detail))
    assert ok


@pytest.mark.slow
def test_criterion_6_zero_shot():
    passes, detail = 0, []
    for s in SEEDS:
        r = zero_shot_run(s)
        good = r["n_held_dets"] > 0 and r["trained"]["relation"] > r["untrained"]["relation"]
        passes += good
        detail.append(f"seed{s}: held-out rel {r['trained']['relation']:.3f} vs untrained "
                      f"{r['untrained']['relation']:.3f} ({r['n_videos']} videos)")
    ok = record(6, passes >= 2, f"{passes}/3 seeds above baseline; " + "; ".join(detail))
    assert ok


def _pipeline(root: Path) -> dict[str, bytes]:
    data, run = root / "data", root / "run"
    steps = [
        ["gen", "--out", str(data), "--seed", "5", "--videos", "8", "--frames", "3", "--humans", "3",
         "--objects", "6", "--dim", "16"],
        ["train", "--dataset", str(data / "manifest.json"), "--out", str(run), "--epochs", "2", "--lr", str(LR),
         "--seed", "5", "--checkpoint-interval", "8"],
        ["infer", "--dataset", str(data / "manifest.json"), "--checkpoint", str(run / "checkpoint.hoic"),
         "--out", str(root / "pred.jsonl")],
        ["eval", "--dataset", str(data / "manifest.json"), "--predictions", str(root / "pred.jsonl"),
         "--out", str(root / "report"), "--plots"],
    ]
    for argv in steps:
        assert cli.run(argv) == 0, argv
    files = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            data_ = p.read_bytes()
            if p.name == "train_log.jsonl":
                # wall-clock step time is the one field that cannot repeat
                recs = [json.loads(x) for x in data_.decode().splitlines()]
                data_ = json.dumps([{k: v for k, v in r.items() if k != "ms"} for r in recs]).encode()
            files[p.relative_to(root).as_posix()] = data_
    return files


def test_criterion_7_determinism(tmp_path):
    a, b = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = record(7, not differing and len(a) > 10,
                f"{len(a)} emitted files compared, {len(differing)} differ"
                + (f": {differing}" if differing else "") + " (step wall time excluded from the log)")
    assert ok


def test_criterion_8_invariant_suites():
    tests_dir = Path(__file__).parent
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-m", "invariant", "-p", "no:cacheprovider",
                           str(tests_dir), "--deselect", str(tests_dir / "test_acceptance.py")],
                          capture_output=True, text=True)
    failed = sorted({line.split("::")[1].split()[0] for line in proc.stdout.splitlines()
                     if line.startswith("FAILED")})
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = record(8, proc.returncode == 0, f"{summary}" + (f"; failing: {', '.join(failed)}" if failed else ""))
    assert ok, proc.stdout[-3000:]
