"""Exit criteria for the package. Each test records one PASS/FAIL line that is
printed in the pytest terminal summary (section "acceptance criteria")."""
import contextlib
import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import write_tree
from poseaffect.cli import main
from poseaffect.dataset import Manifest, SampleRecord, split_train_val, subsample
from poseaffect.keypoint_io import KeypointError, KeypointParseError, KeypointSchemaError, parse_frame, select_person, to_feature_vector
from poseaffect.metrics import ccc, cross_entropy, mse_loss
from poseaffect.nn_core import NetworkSpec, backward, forward, init_network
from poseaffect.optim import OptimizerState, optimizer_step
from poseaffect.training import TrainConfig, fit

FIXTURES = Path(__file__).parent / "fixtures" / "openpose"


@pytest.fixture
def criterion(request):
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    @contextlib.contextmanager
    def run(number, title):
        details = {}
        try:
            yield details
        except BaseException:
            lines.append(f"C{number} FAIL {title} {_fmt(details)}")
            raise
        lines.append(f"C{number} PASS {title} {_fmt(details)}")

    return run


def _fmt(details):
    return " ".join(f"{k}={v}" for k, v in details.items())


# synthetic data

def blobs(seed=0, separation=6.0, n_train=100, n_val=30, dim=285):
    """Seven isotropic unit-variance Gaussian blobs; centre norms are about ``separation``."""
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(7, dim)) * separation / np.sqrt(dim)

    def draw(n):
        y = np.repeat(np.arange(7), n)
        return centres[y] + rng.normal(size=(len(y), dim)), y

    return (*draw(n_train), *draw(n_val))


def va_regression(seed=0, n_train=700, n_val=210, dim=285, noise=0.05):
    """Valence/arousal linear in 4 latent factors; the factors span 4 orthonormal input directions."""
    rng = np.random.default_rng(seed)
    embed = np.linalg.qr(rng.normal(size=(dim, 4)))[0].T
    w = rng.normal(size=(4, 2))
    w /= np.abs(w).sum(axis=0)  # keeps |target| <= 1

    def draw(n):
        z = rng.uniform(-1, 1, (n, 4))
        return z @ embed + rng.normal(0, noise, (n, dim)), z @ w

    return (*draw(n_train), *draw(n_val))


# 1

def _fd_max_rel_error(spec, params, x, g, h=1e-5):
    _, cache = forward(params, spec, x)
    grads = backward(params, spec, cache, g)
    worst = 0.0
    for name, p in params.items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            fp = np.sum(g * forward(params, spec, x)[0]) / len(x)
            p[idx] = old - h
            fm = np.sum(g * forward(params, spec, x)[0]) / len(x)
            p[idx] = old
            num[idx] = (fp - fm) / (2 * h)
        scale = max(np.abs(num).max(), np.abs(grads[name]).max())
        if scale:
            worst = max(worst, np.abs(num - grads[name]).max() / scale)
    return worst


def test_c1_gradient_correctness(criterion):
    with criterion(1, "gradient check, 3 topologies x 2 heads") as d:
        start = time.perf_counter()
        worst = 0.0
        for i, (topology, head) in enumerate(itertools.product(("plain", "residual", "dense_concat"),
                                                               ("classifier7", "va2"))):
            spec = NetworkSpec(input_dim=16, topology=topology, hidden=(16, 16, 12), head=head)
            params = init_network(spec, i)
            rng = np.random.default_rng(50 + i)
            for k, v in params.items():
                if v.ndim == 1:
                    v += rng.normal(0, 0.1, v.shape)
            x = rng.normal(size=(8, 16))
            g = rng.normal(size=(8, spec.output_dim))
            worst = max(worst, _fd_max_rel_error(spec, params, x, g))
        elapsed = time.perf_counter() - start
        d.update(max_rel_err=f"{worst:.2e}", seconds=f"{elapsed:.2f}")
        assert worst < 1e-5
        assert elapsed < 10


# 2

def test_c2_loss_anchors(criterion):
    with criterion(2, "loss anchors") as d:
        ce, _ = cross_entropy(np.zeros((4, 7)), [0, 2, 4, 6])
        mse, _ = mse_loss([[0.0, 0.0]], [[1.0, 1.0]])
        d.update(ce=f"{ce:.9f}", mse=mse)
        assert abs(ce - 1.945910) < 1e-6  # ln 7 = 1.9459101...
        assert abs(ce - math.log(7)) < 1e-9
        assert mse == 1.0


# 3

def _ccc_oracle(x, y):
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    vx = math.fsum((a - mx) ** 2 for a in x) / n
    vy = math.fsum((b - my) ** 2 for b in y) / n
    cov = math.fsum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    return 2 * cov / (vx + vy + (mx - my) ** 2)


def test_c3_ccc_oracle(criterion):
    with criterion(3, "CCC vs direct formula") as d:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(2, 101))
            x = (rng.normal(size=n) * rng.uniform(0.1, 2) + rng.normal()).tolist()
            y = (rng.normal(size=n) * rng.uniform(0.1, 2) + rng.normal()).tolist()
            worst = max(worst, abs(ccc(x, y) - _ccc_oracle(x, y)))
        d.update(max_abs_diff=f"{worst:.2e}")
        assert worst < 1e-12
        x = rng.normal(size=30)
        assert ccc(x, x) == 1.0
        assert ccc(np.full(30, 0.3), x) == 0.0


# 4

def test_c4_optimizers(criterion):
    with criterion(4, "optimizer recurrences and quadratic convergence") as d:
        g, theta, lr = 0.7, 0.25, 1e-3
        b1, b2, eps = 0.9, 0.999, 1e-8
        checks = {}
        for kind in ("sgd", "adam", "adamax"):
            p = {"w": np.array([theta])}
            optimizer_step(OptimizerState(kind=kind, lr=lr), p, {"w": np.array([g])})
            checks[kind] = float(p["w"][0])
        m, v = (1 - b1) * g, (1 - b2) * g * g
        adam = theta - lr * (m / (1 - b1)) / (math.sqrt(v / (1 - b2)) + eps)
        adamax = theta - (lr / (1 - b1)) * m / (abs(g) + eps)
        err = max(abs(checks["sgd"] - (theta - lr * g)), abs(checks["adam"] - adam), abs(checks["adamax"] - adamax))
        assert err < 1e-12

        steps = {}
        for kind in ("sgd", "adam", "adamax"):
            state = OptimizerState(kind=kind)
            p = {"t": np.array([1.0])}
            for i in range(1, 10_001):
                optimizer_step(state, p, {"t": 2 * p["t"]})
                if abs(p["t"][0]) < 1e-3:
                    break
            steps[kind] = i
            assert abs(p["t"][0]) < 1e-3
        d.update(step_err=f"{err:.1e}", steps=steps)


# 5

def test_c5_synthetic_classification(criterion):
    with criterion(5, "7 blobs, plain + Adam") as d:
        data = blobs()
        assert data[0].shape == (700, 285) and data[2].shape == (210, 285)
        start = time.perf_counter()
        result = fit(TrainConfig(topology="plain", optimizer="adam", epochs=200, seed=0), *data,
                     stop_when=lambda r: r.val_macro_f1 >= 0.95)
        elapsed = time.perf_counter() - start
        d.update(macro_f1=f"{result.best_score:.4f}", epochs=len(result.history), seconds=f"{elapsed:.1f}")
        assert result.best_score >= 0.95
        assert elapsed < 60


# 6

def test_c6_synthetic_va(criterion):
    with criterion(6, "VA regression, va2 + Adam") as d:
        data = va_regression()
        result = fit(TrainConfig(task="va", optimizer="adam", epochs=200, seed=0), *data,
                     stop_when=lambda r: min(r.val_ccc_v, r.val_ccc_a) >= 0.9)
        last = result.history[-1]
        d.update(ccc_v=f"{last.val_ccc_v:.4f}", ccc_a=f"{last.val_ccc_a:.4f}", epochs=len(result.history))
        assert min(last.val_ccc_v, last.val_ccc_a) >= 0.9


# 7

def test_c7_pipeline_determinism(criterion, tmp_path):
    with criterion(7, "ingest -> train -> eval determinism") as d:
        root, labels = write_tree(tmp_path, n_videos=7, frames=30)
        outputs = []
        for run in ("a", "b"):
            work = tmp_path / run
            work.mkdir()
            manifest = work / "manifest.tsv"
            assert main(["ingest", "--root", str(root), "--labels", str(labels), "--out", str(manifest),
                         "--stride", "2", "--seed", "3"]) == 0
            cfg = work / "run.cfg"
            cfg.write_text(f"manifest = {manifest}\ncheckpoint_out = {work / 'net.ckpt'}\n"
                           "epochs = 4\nhidden = 64,32,16\nbatch_size = 8\nseed = 11\n")
            assert main(["train", str(cfg)]) == 0
            report = work / "report.jsonl"
            assert main(["eval", "--checkpoint", str(work / "net.ckpt"), "--manifest", str(manifest),
                         "--report-out", str(report)]) == 0
            outputs.append({name: (work / name).read_bytes()
                            for name in ("manifest.tsv", "net.ckpt", "net.ckpt.log.tsv", "report.jsonl")})
        same = {k: outputs[0][k] == outputs[1][k] for k in outputs[0]}
        d.update(identical=",".join(k for k, v in same.items() if v))
        assert all(same.values())


# 8

def test_c8_subsample_and_split(criterion):
    with criterion(8, "stride-10 anchor and video-disjoint splits") as d:
        m = Manifest([SampleRecord(f"f{i}", "vid", i, 0) for i in range(100)])
        kept = subsample(m, 10)
        assert len(kept) == 10
        rng = np.random.default_rng(8)
        for trial in range(100):
            n_videos = int(rng.integers(2, 20))
            recs = [SampleRecord(f"v{v}/{i}", f"v{v}", i, int(rng.integers(0, 7)))
                    for v in range(n_videos) for i in range(int(rng.integers(1, 15)))]
            s = split_train_val(Manifest(recs), float(rng.uniform(0.05, 0.95)), seed=trial)
            train = {r.video_id for r in s if r.split == "train"}
            val = {r.video_id for r in s if r.split == "val"}
            assert train and val and not train & val
        d.update(kept=len(kept), fixtures=100)


# 9

def _mutate_bytes(raw: bytes, rng) -> bytes:
    b = bytearray(raw)
    op = rng.integers(0, 5)
    if op == 0 and b:
        for _ in range(int(rng.integers(1, 6))):
            b[int(rng.integers(0, len(b)))] = int(rng.integers(0, 256))
    elif op == 1:
        b = b[:int(rng.integers(0, len(b) + 1))]
    elif op == 2:
        pos = int(rng.integers(0, len(b) + 1))
        b[pos:pos] = bytes(rng.integers(0, 256, int(rng.integers(1, 8))).tolist())
    elif op == 3 and b:
        i = int(rng.integers(0, len(b)))
        del b[i:i + int(rng.integers(1, 40))]
    else:
        i, j = sorted(rng.integers(0, len(b) + 1, 2).tolist())
        pos = int(rng.integers(0, len(b) + 1))
        b[pos:pos] = b[i:j]
    return bytes(b)


_ODD_VALUES = [None, True, "1.0", [], {}, [1, 2], 1e308 * 10, float("nan"), -1.0, 10**400, 0, "people"]


def _mutate_json(doc, rng):
    doc = json.loads(json.dumps(doc))
    people = doc.get("people", [])
    op = rng.integers(0, 6)
    if op == 0:
        doc.pop("people", None)
    elif op == 1:
        doc["people"] = _ODD_VALUES[int(rng.integers(0, len(_ODD_VALUES)))]
    elif people:
        person = people[int(rng.integers(0, len(people)))]
        key = ["pose_keypoints_2d", "face_keypoints_2d"][int(rng.integers(0, 2))]
        arr = person.get(key)
        if op == 2 and isinstance(arr, list) and arr:
            arr[int(rng.integers(0, len(arr)))] = _ODD_VALUES[int(rng.integers(0, len(_ODD_VALUES)))]
        elif op == 3 and isinstance(arr, list):
            del arr[:int(rng.integers(0, len(arr) + 1))]
        elif op == 4:
            person[key] = _ODD_VALUES[int(rng.integers(0, len(_ODD_VALUES)))]
        else:
            people[int(rng.integers(0, len(people)))] = _ODD_VALUES[int(rng.integers(0, len(_ODD_VALUES)))]
    return json.dumps(doc).encode()


def test_c9_parser_robustness(criterion):
    with criterion(9, "fixture corpus outcomes and 10k fuzzed inputs") as d:
        expected = json.loads((FIXTURES / "expected.json").read_text())
        for name, want in expected.items():
            raw = (FIXTURES / name).read_bytes()
            if want["outcome"] == "ok":
                frame = parse_frame(raw)
                assert len(frame.persons) == want["persons"]
                if "selected" in want:
                    assert select_person(frame) is frame.persons[want["selected"]]
                for p in frame.persons:
                    assert len(to_feature_vector(p)) == 285
            else:
                err = KeypointParseError if want["outcome"] == "parse_error" else KeypointSchemaError
                with pytest.raises(err) as info:
                    parse_frame(raw)
                if "message" in want:
                    assert want["message"] in str(info.value)

        seeds = [(FIXTURES / n).read_bytes() for n, w in expected.items() if w["outcome"] == "ok"]
        docs = [json.loads(s) for s in seeds]
        rng = np.random.default_rng(99)
        outcomes = {"ok": 0, "typed_error": 0}
        for i in range(10_000):
            if i % 2:
                raw = _mutate_bytes(seeds[i % len(seeds)], rng)
            else:
                raw = _mutate_json(docs[i % len(docs)], rng)
            try:
                frame = parse_frame(raw)
            except KeypointError:
                outcomes["typed_error"] += 1
                continue
            person = select_person(frame)
            if person is not None:
                assert np.all(np.isfinite(to_feature_vector(person).values))
            outcomes["ok"] += 1
        d.update(corpus=len(expected), **outcomes)
        assert sum(outcomes.values()) == 10_000


# 10

def test_c10_ranking_sanity(criterion):
    with criterion(10, "topology and optimizer ranking (directional)") as d:
        data = blobs()
        scores = {}
        for topology in ("plain", "residual", "dense_concat"):
            result = fit(TrainConfig(topology=topology, optimizer="adam", epochs=20, seed=0), *data)
            scores[topology] = result.best_score
        reach = {}
        for opt in ("adam", "sgd"):
            result = fit(TrainConfig(topology="plain", optimizer=opt, epochs=200, seed=0), *data,
                         stop_when=lambda r: r.val_macro_f1 >= 0.95)
            reach[opt] = len(result.history) if result.best_score >= 0.95 else None
        d.update(**{f"f1_{k}": f"{v:.4f}" for k, v in scores.items()},
                 **{f"epochs_to_0.95_{k}": v for k, v in reach.items()})
        assert scores["residual"] >= scores["plain"]
        assert scores["dense_concat"] >= scores["plain"]
        assert reach["adam"] is not None
        assert reach["sgd"] is None or reach["adam"] < reach["sgd"]
