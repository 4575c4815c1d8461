"""Acceptance checks, one test per criterion.

Run ``pytest tests/test_acceptance.py`` (or this file directly); the terminal
summary ends with one PASS/FAIL line per criterion.
"""
import itertools
import time
import zlib

import numpy as np
import pytest

from builders import F64, TINY_CONFIG, chain_graph, random_sgcn, tiny_model
from gradcheck import worst_relative_error
from oracles import auc_pairwise, sep_conv_loop, sgcn_block_loop
from sdfa import nn
from sdfa.cli import run
from sdfa.graph import build_graph
from sdfa.metrics import compute_metrics, roc_auc
from sdfa.model import ModelConfig, build_model, count_flops, count_params, forward, sgcn_block
from sdfa.nn import ops
from sdfa.splits import PROTOCOLS, SplitSpec, cross_fall_folds, make_split
from sdfa.synth import SynthSpec, generate_synthetic_dataset
from sdfa.training import TrainConfig, evaluate, prepare_dataset, train
from test_nn_ops import GRADIENT_CASES

REFERENCE_PARAMS_M, REFERENCE_GMACS = 0.34, 1.15


@pytest.mark.criterion("1 graph block oracle")
def test_graph_block_matches_loop(record_property):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for i in range(100):
        V = (3, 5, 25)[i % 3]
        T, ci, co = (int(v) for v in rng.integers(1, 5, size=3))
        graph = chain_graph(V)
        block = random_sgcn(rng, ci, co, V)
        x = rng.normal(size=(2, ci, T, V))
        got = sgcn_block(nn.Tensor(x), block, graph, training=False).data
        bn = block.bn
        want = sgcn_block_loop(x, block.W.data, graph.A_hat, block.M.data, bn.gamma.data, bn.beta.data,
                               bn.running_mean, bn.running_var, bn.eps,
                               None if block.proj_W is None else block.proj_W.data,
                               None if block.proj_b is None else block.proj_b.data)
        worst = max(worst, float(np.max(np.abs(got - want))))
    elapsed = time.perf_counter() - start
    record_property("detail", f"max diff {worst:.1e}, {elapsed:.1f} s")
    assert worst <= 1e-6
    assert elapsed < 10


@pytest.mark.criterion("2 gradient suite")
def test_gradients(record_property):
    start = time.perf_counter()
    per_primitive = {}
    for name, build in sorted(GRADIENT_CASES.items()):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        forward_fn, leaves = build(rng)
        per_primitive[name] = worst_relative_error(forward_fn, leaves, rng)

    model = tiny_model(dtype=F64)
    rng = np.random.default_rng(2)
    x = nn.Tensor(rng.normal(size=(3, TINY_CONFIG["in_channels"], TINY_CONFIG["target_length"], 25)))
    labels = np.array([0, 1, 1])

    def loss():
        logits = forward(model, x, training=True, rng=np.random.default_rng(11))
        return nn.softmax_cross_entropy(logits, labels)[0]

    params = model.params()
    with nn.Tape() as tape:
        for p in params:
            p.zero_grad()
        tape.backward(loss())
    grads = [p.grad.copy() for p in params]
    sizes = np.array([p.data.size for p in params], dtype=float)
    model_errors = []
    for _ in range(24):  # sample scalars uniformly over all parameter entries
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        idx = tuple(int(rng.integers(n)) for n in params[k].data.shape)
        arr, saved = params[k].data, params[k].data[idx]
        arr[idx] = saved + 1e-4
        up = float(loss().data)
        arr[idx] = saved - 1e-4
        down = float(loss().data)
        arr[idx] = saved
        numeric = (up - down) / 2e-4
        model_errors.append(abs(grads[k][idx] - numeric) / max(abs(grads[k][idx]), abs(numeric), 1e-6))
    elapsed = time.perf_counter() - start
    worst_name = max(per_primitive, key=per_primitive.get)
    record_property("detail", f"{len(per_primitive)} primitives, worst {worst_name} {per_primitive[worst_name]:.1e}; "
                              f"model {max(model_errors):.1e} over {len(model_errors)} params; {elapsed:.1f} s")
    assert max(per_primitive.values()) <= 1e-4
    assert max(model_errors) <= 1e-3
    assert elapsed < 60


@pytest.mark.criterion("3 separable conv oracle")
def test_separable_conv_matches_loop(record_property):
    rng = np.random.default_rng(3)
    worst = 0.0
    combos = list(itertools.product((3, 5), (1, 2)))
    for i in range(100):
        K, stride = combos[i % 4]
        C, Co = (int(v) for v in rng.integers(1, 5, size=2))
        x = rng.normal(size=(2, C, int(rng.integers(1, 10)), 3))
        dw, pw = rng.normal(size=(C, K)), rng.normal(size=(Co, C))
        got = nn.sep_temporal_conv(nn.Tensor(x), nn.Param(dw), nn.Param(pw), stride).data
        worst = max(worst, float(np.max(np.abs(got - sep_conv_loop(x, dw, pw, stride)))))
    record_property("detail", f"max diff {worst:.1e}")
    assert worst <= 1e-6


@pytest.mark.criterion("4 masking contract")
def test_masking(record_property):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 6, 5))
    np.testing.assert_array_equal(nn.random_st_mask(nn.Tensor(x), 0.1, 0.1, False, rng).data, x)
    model = tiny_model()
    inputs = rng.normal(size=(2, 4, 8, 25))
    a = forward(model, inputs, training=False).data
    b = forward(model, inputs, training=False).data
    assert a.tobytes() == b.tobytes()

    sample = np.where(np.abs(x[0]) < 0.2, 0.5, x[0])  # keep relative error meaningful
    passes = 10_000
    masked = nn.random_st_mask(nn.Tensor(np.broadcast_to(sample, (passes,) + sample.shape).copy()),
                               0.1, 0.1, True, np.random.default_rng(5)).data
    rel = np.abs(masked.mean(axis=0) - sample) / np.abs(sample)
    record_property("detail", f"worst relative deviation of the mean {rel.max():.3f}")
    assert rel.max() <= 0.05


def _enumerate_macs(model, input_shape):
    """Run one eval forward and tally multiplies from the shapes each linear op sees."""
    tally = []

    def counting(name, fn, cost):
        def wrapped(*args, **kwargs):
            tally.append((name, cost(*args, **kwargs)))
            return fn(*args, **kwargs)
        return wrapped

    costs = {
        "conv1x1": lambda x, W, b=None: W.shape[0] * x.data.size // x.shape[0],
        "project_spatial_max": lambda x, W, b=None: W.shape[0] * x.data.size // x.shape[0],
        "graph_aggregate": lambda x, A: A.shape[0] * x.data.size // x.shape[0],
        "depthwise_temporal_conv": lambda x, dw, stride=1: (
            dw.data.size * x.shape[3] * nn.temporal_out_len(x.shape[2], stride)),
        "linear": lambda x, W, b: W.data.size,
    }
    mp = pytest.MonkeyPatch()
    try:
        for name, cost in costs.items():
            wrapped = counting(name, getattr(ops, name), cost)
            mp.setattr(ops, name, wrapped)
            mp.setattr(nn, name, wrapped)
        forward(model, np.zeros((1,) + input_shape), training=False)
    finally:
        mp.undo()
    return sum(c for _, c in tally)


@pytest.mark.criterion("5 complexity figures")
def test_complexity(record_property):
    tiny_graph = build_graph(3, [(0, 1), (1, 2)])
    tiny = build_model(ModelConfig(channel_plan=(2, 2, 2), target_length=4), graph=tiny_graph)
    assert (count_params(tiny), count_flops(tiny, (3, 4, 3))) == (100, 592)  # counted by hand
    for cfg in (ModelConfig(channel_plan=(2, 2, 2), target_length=4),
                ModelConfig(channel_plan=(2, 3, 5), target_length=6, fusion="joint"),
                ModelConfig(channel_plan=(3, 3, 3), target_length=5, tcn_strides=(2, 2))):
        model = build_model(cfg, graph=tiny_graph, dtype=F64)
        shape = (3, cfg.target_length, 3)
        assert count_flops(model, shape) == _enumerate_macs(model, shape)
        assert count_params(model) == sum(arr.size for name, arr in model.state() if "running_" not in name)

    model = build_model(ModelConfig(), seed=0)
    params, macs = count_params(model), count_flops(model, (3, 300, 25))
    sample = np.random.default_rng(5).normal(size=(1, 3, 300, 25)).astype(np.float32)
    forward(model, sample, training=False)
    times = []
    for _ in range(5):
        start = time.perf_counter()
        forward(model, sample, training=False)
        times.append(time.perf_counter() - start)
    latency = float(np.median(times))
    record_property("detail", f"params {params / 1e6:.3f} M (reference {REFERENCE_PARAMS_M} M), "
                              f"{macs / 1e9:.3f} GMACs (reference {REFERENCE_GMACS} G), "
                              f"inference {1e3 * latency:.0f} ms")
    assert 0.15e6 <= params <= 0.45e6
    assert 0.8e9 <= macs <= 1.5e9
    assert latency < 0.1


@pytest.mark.criterion("6 synthetic training and fusion ablation")
def test_synthetic_training(record_property):
    seqs = generate_synthetic_dataset(SynthSpec(n_per_class=100, adl_per_kind=25, seed=0))
    split = make_split(seqs, SplitSpec("seventy_thirty", seed=0))
    start = time.perf_counter()
    model = build_model(ModelConfig(target_length=120), seed=0)
    data = prepare_dataset(seqs, model)
    train(model, data, split, TrainConfig(epochs=50, seed=0))
    elapsed = time.perf_counter() - start
    report = evaluate(model, data, split[1])

    # Falls and lie-downs differ only in speed here, so motion is the only cue.
    speed_only = generate_synthetic_dataset(SynthSpec(n_per_class=40, adl_kinds=("lie_down",), seed=1))
    speed_split = make_split(speed_only, SplitSpec("seventy_thirty", seed=0))
    recall = {}
    for fusion in ("early_fused", "joint"):
        small = build_model(ModelConfig(channel_plan=(16, 32, 64), target_length=120, fusion=fusion), seed=0)
        small_data = prepare_dataset(speed_only, small)
        train(small, small_data, speed_split, TrainConfig(epochs=20, seed=0))
        recall[fusion] = evaluate(small, small_data, speed_split[1]).recall

    record_property("detail", f"accuracy {report.accuracy:.3f}, AUC {report.auc:.3f}, training {elapsed:.0f} s; "
                              f"speed-only recall early_fused {recall['early_fused']:.2f} "
                              f"vs joint {recall['joint']:.2f}")
    assert report.accuracy >= 0.95
    assert report.auc >= 0.95
    assert recall["early_fused"] >= recall["joint"]
    assert elapsed < 600


@pytest.mark.criterion("7 split correctness")
def test_splits(record_property):
    seqs = generate_synthetic_dataset(SynthSpec(n_per_class=20, seed=7))
    meta = [s.meta for s in seqs]
    field = {"cross_subject": "subject_id", "cross_view": "view_id", "cross_setup": "setup_id",
             "cross_trial": "trial_id"}
    checked = []
    for protocol in PROTOCOLS:
        specs = cross_fall_folds(seqs) if protocol == "cross_fall" else [SplitSpec(protocol)]
        for spec in specs:
            train_idx, test_idx = make_split(seqs, spec)
            assert set(train_idx).isdisjoint(test_idx)
            assert len(train_idx) and len(test_idx)
            assert sorted(np.concatenate([train_idx, test_idx])) == list(range(len(seqs)))
            if protocol in field:
                key = field[protocol]
                train_ids = {getattr(meta[i], key) for i in train_idx}
                assert train_ids.isdisjoint(getattr(meta[i], key) for i in test_idx)
            if protocol == "cross_fall":
                held = spec.held_out_fall_type
                assert all(meta[i].fall_type != held for i in train_idx if meta[i].is_fall)
                assert all(meta[i].fall_type == held for i in test_idx if meta[i].is_fall)
            checked.append(spec.describe())
    held_out = {s.held_out_fall_type for s in cross_fall_folds(seqs)}
    record_property("detail", f"{len(checked)} splits, {len(held_out)} cross-fall folds")
    assert len(cross_fall_folds(seqs)) == 5 and len(held_out) == 5


@pytest.mark.criterion("8 metrics oracle")
def test_metrics(record_property):
    m = compute_metrics([0.9, 0.8, 0.7, 0.2, 0.1, 0.1, 0.1, 0.1, 0.1, 0.6], [1, 1, 1, 1, 0, 0, 0, 0, 0, 0])
    assert (m.tp, m.fn, m.tn, m.fp) == (3, 1, 5, 1)
    for got, want in ((m.recall, 0.75), (m.precision, 0.75), (m.specificity, 5 / 6), (m.fp_rate, 1 / 6),
                      (m.f1, 0.75), (m.accuracy, 0.8)):
        assert abs(got - want) <= 1e-9
    assert abs(roc_auc([0.8, 0.6, 0.6, 0.2], [1, 0, 1, 0]) - 0.875) <= 1e-9
    assert roc_auc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == 0.5

    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        scores = np.round(rng.uniform(size=n), int(rng.integers(1, 4)))  # coarse rounding gives ties
        worst = max(worst, abs(roc_auc(scores, labels) - auc_pairwise(scores, labels)))
    record_property("detail", f"max AUC gap {worst:.1e} over 1000 sets")
    assert worst <= 1e-9


@pytest.mark.criterion("9 determinism")
def test_determinism(tmp_path, capsys, record_property):
    (tmp_path / "small.ini").write_text(
        "[model]\nchannel_plan = 8, 16, 16\ntarget_length = 32\n\n[train]\nepochs = 3\nbatch_size = 4\n\n"
        "[synth]\nn_per_class = 8\nadl_per_kind = 2\nT = 60\nfall_duration_frames = 10\n")
    data = tmp_path / "data.jsonl"
    assert run(["synth", "--spec", str(tmp_path / "small.ini"), "--out", str(data), "--seed", "9"]) == 0
    blobs = []
    for name in ("a.ckpt", "b.ckpt"):
        assert run(["train", "--data", str(data), "--split", "seventy_thirty", "--config",
                    str(tmp_path / "small.ini"), "--seed", "9", "--out-checkpoint", str(tmp_path / name)]) == 0
        blobs.append((tmp_path / name).read_bytes())
    capsys.readouterr()
    outputs = []
    for _ in range(2):
        assert run(["infer", "--checkpoint", str(tmp_path / "a.ckpt"), "--sequence", str(data)]) == 0
        outputs.append(capsys.readouterr().out)
    record_property("detail", f"checkpoint {len(blobs[0])} bytes, {len(outputs[0].splitlines())} inferences")
    assert blobs[0] == blobs[1]
    assert outputs[0] == outputs[1]


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v", *sys.argv[1:]]))
