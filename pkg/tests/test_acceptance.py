"""Acceptance gate: one test per criterion, each at its stated tolerance.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""
import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from attnforge import tensor as T
from attnforge.analytics import (BoxRegion, GuidanceConfig, Trajectory, allocate_boxes, beam_prune_schedule,
                                 box_energy, exhaustive_schedule, guidance_step, lse_score, spatial_softmax,
                                 temporal_smoothness, trajectory_energy, triplet_loss)
from attnforge.errors import FormulaInapplicableError
from attnforge.graph_attention import (QuasiAttentionParams, TokenGraph, adjacency_to_mask,
                                       assemble_multimodal_mask, quasi_attention, scaled_dot_product_attention)
from attnforge.harness import cli
from attnforge.harness.config import load_run_config
from attnforge.harness.data import DatasetSpec, generate, write_dataset
from attnforge.harness.runner import compare, pe_metric, sweep_intrinsic, train
from attnforge.peft import (AdapterSpec, KAdaptState, closed_form_count, exact_param_count, instantiate,
                            kadapt_delta, merge)
from attnforge.subspace import FastfoodProjection, attach_subspace
from attnforge.tensor import Tensor, grad_check
from attnforge.transformer import ModelConfig, ViT

from .conftest import TINY, TOY

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
REF = dict(L=12, k=768, d=64, d_model=768, r=4, n=4)
BIG = ModelConfig(layers=12, d_model=768, heads=12, patch_size=16, image_side=32, classes=2)
criterion = pytest.mark.criterion


@pytest.fixture(scope="module")
def big_model():
    return ViT(BIG)


@pytest.fixture(scope="module")
def reference_task():
    return generate(DatasetSpec("stripes", 16, 2, 500, 100, 200, seed=0))


@criterion(1, "PE metric reproduces three paper rows within 0.001")
def test_c01_pe_metric():
    rows = [(65.49, 87_878_739, 0.498), (66.32, 29_523, 0.663), (68.92, 79_699, 0.689)]
    for score, params, expected in rows:
        assert abs(pe_metric(score, params) - expected) <= 0.001


@criterion(2, "closed-form counts exact; KAdaptation r=1 formula inapplicable; exact count 36,928")
def test_c02_closed_form(big_model):
    assert closed_form_count(AdapterSpec("Adapter"), **REF) == 4 * 12 * 768 * 64 == 2_359_296
    assert closed_form_count(AdapterSpec("LoRA"), **REF) == 2 * 12 * 4 * 768 == 73_728
    assert closed_form_count(AdapterSpec("Compacter"), **REF) == 4 * 12 * (192 + 16) + 64 == 10_048
    with pytest.raises(FormulaInapplicableError):
        closed_form_count(AdapterSpec("KAdaptation"), L=12, d_model=768, r=1, n=4)
    am = instantiate(AdapterSpec("KAdaptation", n=4, r=1), big_model)
    assert exact_param_count(am).exact_count == 36_928


@criterion(3, "parsimony: exact KAdaptation < 0.6 x exact LoRA for r in 1..4, n=4")
def test_c03_parsimony(big_model):
    ratios = {}
    for r in range(1, 5):
        k = exact_param_count(instantiate(AdapterSpec("KAdaptation", n=4, r=r), big_model)).exact_count
        lo = exact_param_count(instantiate(AdapterSpec("LoRA", r=r), big_model)).exact_count
        ratios[r] = k / lo
    assert all(v < 0.6 for v in ratios.values()), f"KAdaptation/LoRA ratios: {ratios}"


def _points(rng, shape, count=10):
    return [rng.standard_normal(shape) for _ in range(count)]


@criterion(4, "gradient suite below 1e-5 at 10 random points per function")
def test_c04_gradients():
    rng = np.random.default_rng(4)
    start = time.process_time()
    worst = {}

    # kron-parameterized delta, differentiated through every factor at once
    n, r, k, d = 2, 2, 3, 4
    c = rng.standard_normal((n * k, n * d))

    def kdelta(flat):
        parts, pos = [], 0
        for shape in [(n, n)] * n + [(k, r)] * n + [(r, d)] * n:
            size = int(np.prod(shape))
            parts.append(T.reshape(flat[pos:pos + size], shape))
            pos += size
        st = KAdaptState(n, r, {"*": parts[:n]}, {(0, "W_q"): parts[n:2 * n]}, {(0, "W_q"): parts[2 * n:]})
        return T.sum_(T.square(kadapt_delta(st, 0, "W_q")) * Tensor(c))

    worst["kron"] = max(grad_check(kdelta, x) for x in _points(rng, n * n * n + n * k * r + n * r * d))

    Q, K, V = (Tensor(rng.standard_normal((4, 3))) for _ in range(3))
    G = adjacency_to_mask(TokenGraph(4, edges={(0, 1), (1, 2), (2, 3)}))

    def qa(x):
        qkv = T.reshape(x[:36], (3, 4, 3))
        p = QuasiAttentionParams(G, T.reshape(x[36:], (4, 4)), 0.7)
        return T.sum_(T.square(quasi_attention(qkv[0], qkv[1], qkv[2], p)))

    worst["quasi_attention"] = max(grad_check(qa, x) for x in _points(rng, 52))
    worst["lse_score"] = max(grad_check(lambda a: lse_score(a, 1.5), x) for x in _points(rng, (4, 5)))
    box = BoxRegion(1.5, 1.0, 1.0, 1.0)
    worst["box_energy"] = max(grad_check(lambda a: box_energy(a, box), np.abs(x) + 0.1)
                              for x in _points(rng, (4, 4)))
    worst["temporal_smoothness"] = max(
        grad_check(lambda a: temporal_smoothness([a[0], a[1], a[2]]), x) for x in _points(rng, (3, 3, 3)))

    # The key bias shifts every score in a row by the same amount, so its exact gradient is zero and a
    # relative-error check there only measures central-difference roundoff; it is checked absolutely.
    model = ViT(TINY)
    names = sorted(nm for nm in model.params if not nm.endswith("attn.b_k"))
    shapes = [model.params[nm].shape for nm in names]
    sizes = [model.params[nm].size for nm in names]
    x_img = rng.standard_normal((2, 4, 4))
    y = np.array([0, 1])

    def vit_loss(flat):
        w, pos = {}, 0
        for nm, shape, size in zip(names, shapes, sizes):
            w[nm] = T.reshape(flat[pos:pos + size], shape)
            pos += size
        return T.cross_entropy(model.forward(x_img, weights=w, trace=False)[0], y)

    base = np.concatenate([model.params[nm].data.reshape(-1) for nm in names])
    worst["toy_vit_loss"] = max(grad_check(vit_loss, base + 0.1 * rng.standard_normal(base.size))
                                for _ in range(10))
    T.backward(T.cross_entropy(model.forward(x_img, trace=False)[0], y))
    assert np.max(np.abs(model.params["layers.0.attn.b_k"].grad)) < 1e-12
    elapsed = time.process_time() - start
    assert all(v < 1e-5 for v in worst.values()), str(worst)
    assert elapsed < 120, f"{elapsed:.1f}s CPU"


@criterion(5, "merge equivalence below 1e-10 over 100 random inputs")
@pytest.mark.parametrize("method", ["LoRA", "LoRAFix", "KAdaptation", "BitFit", "RPB"])
def test_c05_merge(method):
    rng = np.random.default_rng(5)
    am = instantiate(AdapterSpec(method, n=4, r=2), ViT(TOY))
    for t in am.trainable().values():
        t.data[...] = 0.1 * rng.standard_normal(t.shape)
    merged = merge(am)
    x = rng.standard_normal((100, 16, 16))
    assert np.max(np.abs(am.forward(x)[0].data - merged.forward(x)[0].data)) < 1e-10


@criterion(6, "Kronecker mixed-product and vec identities within 1e-12 on 1000 instances")
def test_c06_kron_algebra():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(1000):
        m, n, p, q, s, u = rng.integers(1, 4, size=6)
        A, B = rng.standard_normal((m, n)), rng.standard_normal((p, q))
        C, D = rng.standard_normal((n, s)), rng.standard_normal((q, u))
        lhs = T.kron(Tensor(A), Tensor(B)).data @ T.kron(Tensor(C), Tensor(D)).data
        worst = max(worst, np.max(np.abs(lhs - T.kron(Tensor(A @ C), Tensor(B @ D)).data)))
        X = rng.standard_normal((q, n))
        # (A kron B) vec(X) = vec(B X A^T) with column-stacking vec, i.e. row-major of the transpose
        lhs = T.kron(Tensor(A), Tensor(B)).data @ X.T.reshape(-1)
        worst = max(worst, np.max(np.abs(lhs - (B @ X @ A.T).T.reshape(-1))))
    assert worst < 1e-12


@criterion(7, "mask semantics: -inf gives exact zeros, zero quasi-attention is vanilla, cross block zero")
def test_c07_masks():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = int(rng.integers(2, 7))
        edges = {(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.4}
        G = adjacency_to_mask(TokenGraph(n, edges=edges))
        Q, K = Tensor(rng.standard_normal((n, 3))), Tensor(rng.standard_normal((n, 3)))
        weights = quasi_attention(Q, K, Tensor(np.eye(n)), QuasiAttentionParams.from_mask(G, 1.3)).data
        assert np.all(weights[G == -np.inf] == 0.0)
        V = Tensor(rng.standard_normal((n, 3)))
        zero = QuasiAttentionParams.from_mask(np.zeros((n, n)), float(rng.uniform(0, 5)))
        assert np.array_equal(quasi_attention(Q, K, V, zero).data, scaled_dot_product_attention(Q, K, V).data)
        nt = int(rng.integers(1, 5))
        text = adjacency_to_mask(TokenGraph(nt, ["text"] * nt))
        full = assemble_multimodal_mask(G, text)
        assert np.all(full[:n, n:] == 0) and np.all(full[n:, :n] == 0)


@criterion(8, "subspace suite: zero-theta transparency, matrix-free Fastfood, d_t <= 8 on stripes")
def test_c08_subspace(reference_task):
    start = time.process_time()
    rng = np.random.default_rng(8)
    model = ViT(TOY)
    x = rng.standard_normal((8, 16, 16))
    for group in [("attention", [0]), ("mlp", "all"), ("all", [1])]:
        h = attach_subspace(model, group, d=8, seed=3)
        assert np.array_equal(h.forward(x)[0].data, model.forward(x)[0].data)
    for D in range(1, 65):
        for d in sorted({1, max(1, D // 3), D}):
            P = FastfoodProjection(D, d, seed=D)
            theta = rng.standard_normal(d)
            assert np.max(np.abs(P.apply(theta) - P.matrix() @ theta)) < 1e-10
    cfg = load_run_config(CONFIGS / "sweep.cfg", env={})
    res = sweep_intrinsic(cfg, "attention:0", [1, 2, 4, 8], threshold=0.9, dataset=reference_task)
    assert res["d_t"] is not None and res["d_t"] <= 8, res["rows"]
    assert time.process_time() - start < 300


@criterion(9, "desk benchmark: FullFT >= 0.95, KAdaptation >= 0.90 at <= 5% params, PE(KAdaptation) > PE(FullFT)")
def test_c09_benchmark(reference_task, tmp_path):
    reports = {}
    for method in ("FullFT", "LinearProbe", "LoRA", "KAdaptation"):
        start = time.process_time()
        reports[method] = train(load_run_config(CONFIGS / f"{method}.cfg", env={}), reference_task)
        if method == "FullFT":
            assert time.process_time() - start < 300
    full, kad = reports["FullFT"], reports["KAdaptation"]
    assert kad.config["adapter"]["n"] == 4 and kad.config["adapter"]["r"] == 1
    assert full.accuracy >= 0.95
    assert kad.accuracy >= 0.90
    assert kad.exact_params <= 0.05 * full.exact_params
    _, json_path = compare(list(reports.values()), tmp_path / "table")
    order = [row["method"] for row in json.loads(json_path.read_text())]
    assert order.index("KAdaptation") < order.index("FullFT")
    assert kad.pe > full.pe


@criterion(10, "analytics suite: box energy endpoints, smoothness, guidance monotone, LSE bounds, triplet")
def test_c10_analytics():
    rng = np.random.default_rng(10)
    box = BoxRegion(1, 1, 0.5, 0.5)
    grid = np.zeros((3, 3))
    grid[1, 1] = 1.0
    assert box_energy(grid, box).item() == 0.0
    grid = np.zeros((3, 3))
    grid[0, 2] = 1.0
    assert box_energy(grid, box).item() == 1.0
    grid[1, 1] = 1.0
    assert box_energy(grid, box).item() == 0.25

    A = rng.random((3, 3))
    assert temporal_smoothness([A, A.copy()]).item() == 0.0
    for _ in range(100):
        maps = [rng.random((3, 3)) for _ in range(3)]
        assert temporal_smoothness(maps).item() > 0.0

    frames, h, w = 3, 6, 6
    boxes = allocate_boxes(Trajectory([(1, 1, 0), (4, 4, 2)], (1.0, 1.0)), frames)
    cfg = GuidanceConfig(strength=2.0, smoothness=0.1, alphas=[0.5] * 20, steps=20)

    def energy(z):
        return trajectory_energy(spatial_softmax(z, h, w), boxes, cfg.smoothness)

    z = 0.1 * rng.standard_normal((frames, h * w))
    values = [energy(Tensor(z)).item()]
    for t in range(20):
        z = guidance_step(z, energy, cfg, t)
        values.append(energy(Tensor(z)).item())
    assert all(b <= a + 1e-9 for a, b in zip(values, values[1:]))

    for _ in range(1000):
        n, m = rng.integers(1, 6, size=2)
        lam = float(rng.uniform(0.1, 10))
        M = rng.uniform(-20, 20, (n, m))
        v = lse_score(M, lam).item()
        lo = M.max(axis=1).mean()
        assert lo - 1e-12 <= v <= lo + np.log(m) / lam + 1e-12

    assert triplet_loss(0.9, 0.1) == 0.0
    assert triplet_loss(0.1, 0.2) == pytest.approx(0.3, abs=1e-15)
    assert triplet_loss(0.4, 0.4) == pytest.approx(0.2, abs=1e-15)
    assert triplet_loss(0.4, 0.2 + 0.0) == 0.0


@criterion(11, "beam scheduler: b=1 equals brute force on 100 instances; b=2 uses fewer calls")
def test_c11_beam():
    rng = np.random.default_rng(11)
    for _ in range(100):
        C, steps, N = int(rng.integers(1, 10)), int(rng.integers(1, 6)), int(rng.integers(1, 4))
        table = rng.random((C, steps))
        scorer = lambda c, t: table[c, t]
        assert (beam_prune_schedule(scorer, C, 1, N, None, steps).prediction
                == exhaustive_schedule(scorer, C, N, steps).prediction
                == int(np.argmin(table.sum(axis=1))))
    C, N, steps = 10, 4, 6
    scorer = lambda c, t: (c - 7) ** 2
    beam = beam_prune_schedule(scorer, C, 2, N, patience=2, max_timesteps=steps)
    brute = exhaustive_schedule(scorer, C, N, steps)
    assert beam.prediction == brute.prediction == 7
    assert beam.calls < brute.calls


def _report_hash(path):
    rep = json.loads(Path(path).read_text())
    rep.pop("seconds")
    return hashlib.sha256(json.dumps(rep, sort_keys=True).encode()).hexdigest()


@criterion(12, "determinism: repeated train invocations hash identically")
def test_c12_determinism(tmp_path):
    write_dataset(generate(DatasetSpec("stripes", train=96, val=16, test=32, seed=3)), tmp_path / "ds")
    methods = ["FullFT", "LinearProbe", "BitFit", "Adapter", "AdapterDrop", "LoRA", "LoRAFix",
               "Compacter", "KAdaptation", "RPB"]
    for method in methods:
        cfg = tmp_path / f"{method}.cfg"
        cfg.write_text("\n".join([f"model.{k} = {v}" for k, v in vars(TOY).items()]
                                 + [f"adapter.method = {method}", "adapter.d_bottleneck = 8",
                                    "optimizer.lr = 0.01", "train.epochs = 1", "train.seed = 4",
                                    f"data.path = {tmp_path / 'ds'}"]) + "\n")
        hashes = []
        for run in range(2):
            out = tmp_path / f"{method}.{run}.json"
            assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
            hashes.append(_report_hash(out))
        assert hashes[0] == hashes[1], method
