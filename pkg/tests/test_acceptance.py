"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The trend experiment
(criterion 7) and the gradient sweep (criterion 3) dominate the runtime;
the full module finishes in a few minutes on a laptop CPU.

Criteria 7 and 11 prefer real MNIST IDX files when a directory containing
them is named by the WEAKROUTE_MNIST_DIR environment variable (or exists at
./data/mnist). Without them, criterion 7 runs on a 28x28 ten-class
blob surrogate of the same size and criterion 11 on freshly written
byte-exact IDX files at the official scale.
"""

import os
import struct
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

import _oracle as oracle
from weakroute.cli import gradcheck_case, main
from weakroute.data import load_idx, normalize, synth_dataset
from weakroute.models import ColumnSpec, build_m1, build_m2, build_m3, build_m4, default_regions, forward_all
from weakroute.routing import (
    LogitBundle,
    TargetBatch,
    average_loss_baseline,
    compose_weakest,
    log_softmax_bundle,
    mean_inference,
    strong_inference,
    weakness,
    weakroute_loss,
)
from weakroute.stats import ContingencyTable, mcnemar
from weakroute.tensor import Tape, Tensor
from weakroute.training import TrainConfig, evaluate, gradient_check, train


@contextmanager
def criterion(number: int, description: str):
    started = time.time()
    try:
        yield
    except BaseException:
        print(f"\nFAIL criterion {number}: {description} ({time.time() - started:.1f}s)")
        raise
    print(f"\nPASS criterion {number}: {description} ({time.time() - started:.1f}s)")


def mnist_dir():
    candidates = [os.environ.get("WEAKROUTE_MNIST_DIR"), "data/mnist"]
    names = (
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    )
    for cand in candidates:
        if cand and all((Path(cand) / n).is_file() for n in names):
            return Path(cand)
    return None


def random_bundle(rng, max_batch=8, max_classes=5, max_paths=4):
    batch = int(rng.integers(1, max_batch + 1))
    n_classes = int(rng.integers(2, max_classes + 1))
    n_paths = int(rng.integers(1, max_paths + 1))
    raw = rng.uniform(-6.0, 6.0, (n_paths, batch, n_classes))
    labels = rng.integers(0, n_classes, batch)
    return raw, labels


def test_criterion_01_oracle_equivalence():
    with criterion(1, "1000 random bundles match the scalar oracle within 1e-9"):
        started = time.time()
        rng = np.random.default_rng(1)
        for _ in range(1000):
            raw, labels = random_bundle(rng)
            bundle = LogitBundle([Tensor(raw[j]) for j in range(raw.shape[0])])
            target = TargetBatch.from_labels(labels, raw.shape[2])
            lp = log_softmax_bundle(bundle)
            lp_o = oracle.log_probs(raw.tolist())
            one_hot = target.one_hot.tolist()

            assert np.abs(weakness(lp, target).values - oracle.weakness(lp_o, one_hot)).max() < 1e-9
            comp = compose_weakest(lp, target)
            v_o, sel_o = oracle.compose_weakest(lp_o, one_hot)
            assert np.array_equal(comp.selection.indices, sel_o)
            assert np.abs(comp.logits.data - v_o).max() < 1e-9
            strong = strong_inference(lp)
            v_strong_o, sel_strong_o = oracle.strong_inference(lp_o)
            assert np.array_equal(strong.selection.indices, sel_strong_o)
            assert np.abs(strong.logits.data - v_strong_o).max() < 1e-9
            assert np.abs(mean_inference(lp).logits.data - oracle.mean_inference(lp_o)).max() < 1e-9
        assert time.time() - started < 10.0


def test_criterion_02_worked_example_lock():
    with criterion(2, "crossed two-pathway example reproduces the locked constants"):
        hi, lo = -0.126928, -2.126928
        bundle = LogitBundle([Tensor([[2.0, 0.0]]), Tensor([[0.0, 2.0]])])
        target = TargetBatch.from_labels([0], 2)
        lp = log_softmax_bundle(bundle)
        assert np.abs(lp.values[0] - [[hi, lo], [lo, hi]]).max() < 1e-6
        w = weakness(lp, target)
        assert np.abs(w.values[0, 0] - [1.056316, 1.943684]).max() < 1e-6
        assert np.abs(w.values[0, 1] - [-0.943684, -0.056316]).max() < 1e-6
        comp = compose_weakest(lp, target)
        assert np.array_equal(comp.selection.indices, [[1, 1]])
        assert np.abs(comp.logits.data[0] - [lo, hi]).max() < 1e-6
        strong = strong_inference(lp)
        assert np.array_equal(strong.selection.indices, [[0, 0]])
        assert np.abs(strong.logits.data[0] - [hi, lo]).max() < 1e-6
        assert np.abs(mean_inference(lp).logits.data[0] - [-1.126928, -1.126928]).max() < 1e-6


def test_criterion_03_gradient_fidelity():
    with criterion(3, "finite differences confirm gradients for m1..m4 (rel err < 1e-4)"):
        started = time.time()
        for topology in ("m1", "m2", "m3", "m4"):
            model, images, target = gradcheck_case(topology, seed=0)
            worst_name, report = gradient_check(model, images, target, h=1e-6)
            assert report.max_rel_error < 1e-4, (topology, worst_name, report)
        assert time.time() - started < 120.0


def test_criterion_04_gradient_masking():
    with criterion(4, "unselected pathways get exactly zero gradient on 100 batches"):
        spec = ColumnSpec(4, 1, 8, 8, kind="mlp", hidden=(10, 10))
        model = build_m1(3, spec, seed=0)
        pathway_of = {
            name: int(name.split(".")[0].removeprefix("column")) for name, _ in model.parameters
        }
        rng = np.random.default_rng(2)
        for _ in range(100):
            images = rng.normal(0.0, 1.0, (5, 1, 8, 8))
            target = TargetBatch.from_labels(rng.integers(0, 4, 5), 4)
            lp = log_softmax_bundle(forward_all(model, images))
            selected = set(np.unique(compose_weakest(lp, target).selection.indices))
            model.zero_grads()
            with Tape() as tape:
                loss = weakroute_loss(model.forward(Tensor(images)), target)
            tape.backward(loss)
            saw_nonzero = False
            for name, t in model.parameters:
                if pathway_of[name] not in selected:
                    assert t.grad is None or np.all(t.grad == 0.0)
                elif t.grad is not None and np.any(t.grad != 0.0):
                    saw_nonzero = True
            assert saw_nonzero
            model.zero_grads()


def test_criterion_05_weakness_range_property():
    with criterion(5, "1e6 weakness values strictly inside (1,2) / (-1,0), all finite"):
        rng = np.random.default_rng(3)
        evaluated = 0
        while evaluated < 1_000_000:
            batch = int(rng.integers(8, 64))
            n_classes = int(rng.integers(2, 6))
            n_paths = int(rng.integers(2, 5))
            raw = rng.uniform(-8.0, 8.0, (n_paths, batch, n_classes))
            bundle = LogitBundle([Tensor(raw[j]) for j in range(n_paths)])
            target = TargetBatch.from_labels(rng.integers(0, n_classes, batch), n_classes)
            w = weakness(log_softmax_bundle(bundle), target).values
            assert np.isfinite(w).all()
            mask = target.one_hot.astype(bool)
            positive, negative = w[mask], w[~mask]
            assert ((positive > 1.0) & (positive < 2.0)).all()
            assert ((negative > -1.0) & (negative < 0.0)).all()
            evaluated += w.size


def test_criterion_06_invariance_suite():
    with criterion(6, "shift invariance, permutation equivariance, N=1 collapse (1e-12)"):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            raw, labels = random_bundle(rng, max_paths=4)
            n_paths, _, n_classes = raw.shape
            bundle = LogitBundle([Tensor(raw[j]) for j in range(n_paths)])
            target = TargetBatch.from_labels(labels, n_classes)
            lp = log_softmax_bundle(bundle)

            shifts = rng.uniform(-10.0, 10.0, n_paths)
            lp_shift = log_softmax_bundle(
                LogitBundle([Tensor(raw[j] + shifts[j]) for j in range(n_paths)])
            )
            assert np.abs(lp.values - lp_shift.values).max() < 1e-12
            comp, comp_s = compose_weakest(lp, target), compose_weakest(lp_shift, target)
            assert np.array_equal(comp.selection.indices, comp_s.selection.indices)
            assert np.abs(comp.logits.data - comp_s.logits.data).max() < 1e-12
            assert (
                np.abs(strong_inference(lp).logits.data - strong_inference(lp_shift).logits.data).max()
                < 1e-12
            )
            assert (
                np.abs(mean_inference(lp).logits.data - mean_inference(lp_shift).logits.data).max()
                < 1e-12
            )

            if n_paths > 1:
                perm = rng.permutation(n_paths)
                lp_perm = log_softmax_bundle(LogitBundle([Tensor(raw[j]) for j in perm]))
                comp_p = compose_weakest(lp_perm, target)
                assert np.array_equal(perm[comp_p.selection.indices], comp.selection.indices)
                assert np.abs(comp.logits.data - comp_p.logits.data).max() < 1e-12
            else:
                column = lp.values[:, :, 0]
                assert np.array_equal(comp.logits.data, column)
                assert np.array_equal(strong_inference(lp).logits.data, column)
                assert np.abs(mean_inference(lp).logits.data - column).max() < 1e-12
                routed = float(weakroute_loss(bundle, target).data)
                averaged = float(average_loss_baseline(bundle, target).data)
                assert abs(routed - averaged) < 1e-12


def _trend_datasets():
    mnist = mnist_dir()
    if mnist is not None:
        train_split = load_idx(
            mnist / "train-images-idx3-ubyte", mnist / "train-labels-idx1-ubyte"
        ).subset(5000)
        test_split = load_idx(mnist / "t10k-images-idx3-ubyte", mnist / "t10k-labels-idx1-ubyte")
        label = "MNIST (first 5000 train samples)"
    else:
        train_split = synth_dataset(10, 500, (1, 28, 28), seed=0, noise=0.35, jitter=2.0)
        test_split = synth_dataset(10, 200, (1, 28, 28), seed=1, noise=0.35, jitter=2.0)
        label = "28x28 ten-class blob surrogate (5000 train samples)"
    train_split, stats = normalize(train_split)
    test_split, _ = normalize(test_split, stats)
    return train_split, test_split, label


def test_criterion_07_desk_scale_trend():
    with criterion(7, "routed training beats averaged training under mean inference"):
        started = time.time()
        train_split, test_split, label = _trend_datasets()
        print(f"\n  trend dataset: {label}")
        spec = ColumnSpec(10, 1, 28, 28, kind="mlp", hidden=(32, 32))
        strict_wins = 0
        for seed in (0, 1, 2):
            accs = {}
            for mode in ("weakroute", "average_baseline"):
                model = build_m1(3, spec, seed=seed)
                cfg = TrainConfig(epochs=20, batch_size=64, learning_rate=1e-3, seed=seed, loss_mode=mode)
                best, _ = train(model, train_split, test_split, cfg)
                model.load_state(best)
                accs[mode] = float(evaluate(model, test_split, "mean"))
            delta = accs["weakroute"] - accs["average_baseline"]
            print(
                f"  seed {seed}: routed={accs['weakroute']:.4f} "
                f"averaged={accs['average_baseline']:.4f} delta={delta:+.4f}"
            )
            assert accs["weakroute"] >= accs["average_baseline"] - 0.005, f"seed {seed}"
            strict_wins += delta > 0.0
        assert strict_wins >= 2, f"strictly better on only {strict_wins}/3 seeds"
        assert time.time() - started < 900.0


def test_criterion_08_separability_sanity():
    with criterion(8, "zero-noise data reaches 100% train accuracy on m1..m4 within 50 epochs"):
        started = time.time()
        raw = synth_dataset(3, 8, (1, 8, 8), seed=0, noise=0.0)
        split, _ = normalize(raw)
        mlp = ColumnSpec(3, 1, 8, 8, kind="mlp", hidden=(12, 12))
        cnn = ColumnSpec(3, 1, 8, 8, kind="cnn", channels=(4, 6))
        models = {
            "m1": build_m1(3, mlp, seed=0),
            "m2": build_m2(cnn, seed=0),
            "m3": build_m3(cnn, seed=0),
            "m4": build_m4(default_regions(8, 8), cnn, seed=0),
        }
        for name, model in models.items():
            cfg = TrainConfig(epochs=50, batch_size=8, learning_rate=0.01, seed=0)
            _, metrics = train(model, split, split, cfg)
            assert max(m.train_accuracy for m in metrics) == 1.0, name
        assert time.time() - started < 300.0


def test_criterion_09_mcnemar_correctness():
    with criterion(9, "McNemar branches reproduce the locked statistics"):
        chi2 = mcnemar(ContingencyTable(0, 15, 5, 0))
        assert abs(chi2.statistic - 4.05) < 1e-12
        assert abs(chi2.p_value - 0.0441) < 1e-3
        assert chi2.significant
        exact = mcnemar(ContingencyTable(0, 3, 1, 0))
        assert abs(exact.p_value - 0.625) < 1e-12
        for table, swapped in (
            (ContingencyTable(0, 15, 5, 0), ContingencyTable(0, 5, 15, 0)),
            (ContingencyTable(2, 3, 1, 7), ContingencyTable(2, 1, 3, 7)),
        ):
            a, b = mcnemar(table), mcnemar(swapped)
            assert a.statistic == b.statistic and a.p_value == b.p_value


def test_criterion_10_determinism(tmp_path):
    with criterion(10, "two CLI training runs from one config write identical metrics"):
        csvs = []
        for run in ("a", "b"):
            out_dir = tmp_path / run
            cfg = tmp_path / f"{run}.ini"
            cfg.write_text(
                "[model]\ntopology = m1\ncolumns = 2\nkind = mlp\nhidden = 8,8\n\n"
                "[data]\nsource = synth\nclasses = 3\nper_class = 16\ntest_per_class = 8\n"
                "height = 8\nwidth = 8\nnoise = 0.25\nseed = 0\n\n"
                "[train]\nepochs = 3\nbatch_size = 8\nlearning_rate = 0.01\nseed = 0\n\n"
                f"[output]\ndir = {out_dir}\n"
            )
            assert main(["train", str(cfg)]) == 0
            csvs.append((out_dir / "metrics.csv").read_bytes())
        assert csvs[0] == csvs[1]


def test_criterion_11_idx_ingestion(tmp_path):
    with criterion(11, "full-scale IDX pairs parse to 60000/10000 28x28 samples"):
        mnist = mnist_dir()
        if mnist is not None:
            print("\n  using official files from", mnist)
            train_split = load_idx(mnist / "train-images-idx3-ubyte", mnist / "train-labels-idx1-ubyte")
            test_split = load_idx(mnist / "t10k-images-idx3-ubyte", mnist / "t10k-labels-idx1-ubyte")
        else:
            print("\n  official files unavailable; writing byte-exact stand-ins at full scale")
            rng = np.random.default_rng(0)
            pairs = []
            for count in (60000, 10000):
                images = rng.integers(0, 256, (count, 28, 28), dtype=np.uint8)
                labels = (np.arange(count) % 10).astype(np.uint8)
                img_path = tmp_path / f"images-{count}"
                lab_path = tmp_path / f"labels-{count}"
                img_path.write_bytes(struct.pack(">IIII", 0x803, count, 28, 28) + images.tobytes())
                lab_path.write_bytes(struct.pack(">II", 0x801, count) + labels.tobytes())
                pairs.append((img_path, lab_path))
            train_split = load_idx(*pairs[0], class_count=10)
            test_split = load_idx(*pairs[1], class_count=10)
        assert len(train_split) == 60000
        assert len(test_split) == 10000
        for split in (train_split, test_split):
            assert split.images.shape[1:] == (1, 28, 28)
            assert split.labels.min() >= 0 and split.labels.max() < 10
            assert split.images.min() >= 0.0 and split.images.max() <= 1.0
