"""Acceptance criteria 1-8, one PASS/FAIL line each in the terminal summary."""

import dataclasses
import io
import time

import numpy as np
import pytest
import yaml
from conftest import TEACHER_SPEC, record_acceptance
from oracles import boundary_pairs, brute_partial_l2, brute_partial_l2_terms

from featdistill import cli, verify
from featdistill import distill as D
from featdistill.data import (
    Dataset,
    load_cifar_binary,
    load_idx,
    write_cifar_binary,
    write_idx,
)
from featdistill.nn import BN_EPSILON, ModelSpec, build_model, load_checkpoint, save_checkpoint
from featdistill.tensor import EVALUATION, Tensor, backward, grad_check, record
from featdistill.train import TrainConfig, compute_margins, train_student

# desk-scale MNIST student, shared by criteria 5 and 6
STUDENT_SPEC = dict(groups=(8, 16, 32))
STUDENT_TRAIN = TrainConfig(
    epochs=8,
    base_lr=0.05,
    lr_decay_epochs=(4, 6),
    batch_size=32,
    augment=True,
    augment_pad=2,
    augment_flip=False,
)
# the feature loss sums over every element of a 32-image batch, hence the small weight
ALPHA = 2e-7
SEEDS = (0, 1, 2)


def check(number, passed, detail):
    record_acceptance(number, passed, detail)
    assert passed, detail


# ---------------------------------------------------------------------------
# 1. gradient suite


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    reports = verify.gradient_suite(seed=0, points=20)
    elapsed = time.perf_counter() - t0
    worst = max(reports, key=lambda r: r.max_rel_error)
    failed = [r.name for r in reports if not r.passed or r.points != 20]
    check(
        1,
        not failed and elapsed < 60,
        f"{len(reports)} ops x 20 points, worst {worst.name} {worst.max_rel_error:.2e} (< 1e-4), "
        f"{elapsed:.1f}s (< 60s)" + (f", failed: {failed}" if failed else ""),
    )


# ---------------------------------------------------------------------------
# 2. closed-form margin vs Monte Carlo


def test_criterion_2_margin_closed_form_vs_monte_carlo():
    reports = verify.margin_suite(samples=10**6, seed=0)
    by_point = {(r.mu, r.sigma): r for r in reports}
    half_normal = by_point[(0.0, 1.0)].closed_form
    tight = by_point[(2.0, 0.5)]
    failed = [(r.mu, r.sigma) for r in reports if not r.passed]
    ok = len(reports) == 15 and not failed and abs(half_normal - (-0.7978845608)) < 1e-9
    check(
        2,
        ok,
        f"{len(reports) - len(failed)}/15 points within 3 SE, worst z {max(r.z for r in reports):.2f}; "
        f"m(0,1) = {half_normal:.10f}; (2,0.5) from {tight.negatives} negative samples",
    )


# ---------------------------------------------------------------------------
# 3. empirical margin of a teacher with known BN parameters

KNOWN_BETA = np.array([-1.0, 0.0, 0.5, 1.0, 1.5, -0.5])
KNOWN_GAMMA = np.array([1.0, -0.7, 2.0, 0.5, -1.5, 1.2])


def known_bn_teacher(seed=0):
    """Teacher whose group0 tap is exactly N(beta_k, gamma_k^2) per channel on N(0, 1) input.

    Center-only kernels keep pixels independent.  The stem copies input channel
    k to channel k and shifts it to mean 10, so its ReLU never clips.  The block
    conv scales channel k by d_k, and BN population statistics are set so the
    normalized value is exactly the input pixel (times the sign of d_k).
    """
    c = len(KNOWN_BETA)
    model = build_model(ModelSpec(groups=(c,), input_shape=(c, 8, 8), num_classes=2), seed)
    rng = np.random.default_rng(seed)
    model.stem_conv.weight.data[...] = 0.0
    model.stem_conv.weight.data[:, :, 1, 1] = np.eye(c)
    stem = model.stem_bn
    stem.gamma.data[...] = 1.0
    stem.beta.data[...] = 10.0
    stem.running_mean[...] = 0.0
    stem.running_var[...] = 1.0 - BN_EPSILON
    d = rng.uniform(0.5, 2.0, size=c) * rng.choice([-1.0, 1.0], size=c)
    block = model.groups[0][0]
    block.conv1.weight.data[...] = 0.0
    block.conv1.weight.data[:, :, 1, 1] = np.diag(d)
    bn = block.bn1
    bn.running_mean[...] = 10.0 * d
    bn.running_var[...] = d * d - BN_EPSILON
    bn.gamma.data[...] = KNOWN_GAMMA
    bn.beta.data[...] = KNOWN_BETA
    return model, np.sign(d)


def test_criterion_3_empirical_margin_matches_known_bn():
    model, sign = known_bn_teacher()
    rng = np.random.default_rng(1)
    inputs = [rng.normal(size=(64, 6, 8, 8)) for _ in range(25)]
    empirical = D.margin_empirical(model, (Tensor(x) for x in inputs), bn_mode=EVALUATION)["group0"]
    closed = D.margins_from_bn(model)["group0"]
    zs, samples = [], None
    for k in range(len(KNOWN_BETA)):
        # the tap value the construction promises, computed outside the engine
        x = np.concatenate([b[:, k].ravel() for b in inputs])
        samples = len(x)
        y = KNOWN_GAMMA[k] * sign[k] * x + KNOWN_BETA[k]
        neg = y[y < 0]
        se = neg.std(ddof=1) / np.sqrt(len(neg))
        assert closed[k] == D.margin_closed_form(KNOWN_BETA[k], abs(KNOWN_GAMMA[k]))
        zs.append(abs(empirical[k] - closed[k]) / se)
    check(
        3,
        samples >= 10**5 and max(zs) < 3.0,
        f"{len(zs)} channels over {samples} samples each, |z| = {', '.join(f'{z:.2f}' for z in zs)} (< 3)",
    )


# ---------------------------------------------------------------------------
# 4. partial L2 against a brute-force oracle, dead zone, finite differences


def test_criterion_4_partial_l2():
    rng = np.random.default_rng(0)
    mismatches = dead_nonzero = 0
    worst_fd = 0.0
    for i in range(1000):
        t, s = boundary_pairs(rng, (1 + i % 2, 2, 2, 3))
        if D.partial_l2(t, Tensor(s)).item() != brute_partial_l2(t, s):
            mismatches += 1
        x = Tensor(s, requires_grad=True)
        with record():
            g = backward(D.partial_l2(t, x))[x]
        dead = (s <= t) & (t <= 0)
        dead_nonzero += int(np.count_nonzero(g[dead]))
        # analytic gradient of the oracle terms outside the dead zone
        if not np.array_equal(g[~dead], 2 * (s - t)[~dead]):
            mismatches += 1
    for _ in range(20):
        t = rng.normal(size=(2, 3, 2, 2))
        s = rng.normal(size=(2, 3, 2, 2))
        # finite differences only where no element sits within 1e-3 of a boundary
        if np.abs(s - t).min() < 1e-3 or np.abs(t).min() < 1e-3:
            continue
        worst_fd = max(worst_fd, grad_check(lambda v: D.partial_l2(t, v), s).max_rel_error)
        assert np.array_equal(brute_partial_l2_terms(t, s) == 0, (s <= t) & (t <= 0))
    check(
        4,
        mismatches == 0 and dead_nonzero == 0 and worst_fd < 1e-4,
        f"1000 cases, {mismatches} oracle mismatches, {dead_nonzero} nonzero dead-zone gradients, "
        f"finite-difference rel err {worst_fd:.1e}",
    )


# ---------------------------------------------------------------------------
# 5. desk-scale distillation on MNIST


def _student_runs(mnist, teacher, method):
    train, test = mnist
    spec = ModelSpec(input_shape=train.shape[1:], **STUDENT_SPEC)
    dcfg = D.DistillConfig(method=method, alpha=ALPHA)
    margins = compute_margins(teacher, train, dcfg) if method == D.PROPOSED else None
    out = []
    for seed in SEEDS:
        res = train_student(spec, teacher, train, test, dataclasses.replace(STUDENT_TRAIN, seed=seed), dcfg, margins)
        out.append(res.history[-1])
    return out


@pytest.mark.slow
def test_criterion_5_distillation_beats_baseline(mnist, mnist_teacher):
    teacher_res, teacher_cpu, _ = mnist_teacher
    cpu = time.process_time()
    baseline = _student_runs(mnist, teacher_res.model, D.NO_DISTILL)
    proposed = _student_runs(mnist, teacher_res.model, D.PROPOSED)
    total_cpu = teacher_cpu + time.process_time() - cpu
    teacher_acc = 100.0 - teacher_res.history[-1].test_error_pct
    err_b = np.mean([r.test_error_pct for r in baseline])
    err_p = np.mean([r.test_error_pct for r in proposed])
    kl_b = np.mean([r.kl_with_teacher for r in baseline])
    kl_p = np.mean([r.kl_with_teacher for r in proposed])
    ok = (
        teacher_acc >= 97.0
        and len(teacher_res.history) <= 20
        and err_p < err_b
        and kl_p < kl_b
        and total_cpu < 1800
    )
    check(
        5,
        ok,
        f"teacher {teacher_acc:.1f}% in {len(teacher_res.history)} epochs; "
        f"error proposed {err_p:.2f}% vs none {err_b:.2f}%; KL proposed {kl_p:.4f} vs none {kl_b:.4f}; "
        f"{total_cpu / 60:.1f} CPU min",
    )


# ---------------------------------------------------------------------------
# 6. four-rung ablation ladder


@pytest.mark.slow
def test_criterion_6_ablation_ladder(mnist, mnist_teacher, tmp_path):
    train, test = mnist
    cfg = cli.ExperimentConfig(
        name="ablation",
        seeds=SEEDS,
        teacher=cli.TeacherConfig(model=cli.ArchConfig(**TEACHER_SPEC)),
        student=cli.StudentConfig(model=cli.ArchConfig(**STUDENT_SPEC), train=STUDENT_TRAIN),
        distill=D.DistillConfig(alpha=ALPHA),
    )
    result = cli.run_ablation(cfg, mnist_teacher[0].model, train, test, tmp_path)
    table = (tmp_path / "ablation.txt").read_text()
    print(table)
    lines = table.splitlines()
    means = result.means
    ok = (
        result.errors.shape == (4, len(SEEDS))
        and lines[1].startswith("Error")
        and lines[2].startswith("Diff")
        and means[3] <= means[0]
    )
    ladder = " -> ".join(f"{m:.2f}" for m in means)
    check(6, ok, f"rung means {ladder} (%); rung 4 <= rung 1 required")


# ---------------------------------------------------------------------------
# 7. determinism


def test_criterion_7_bitwise_identical_metrics(tmp_path):
    data = {
        "name": "det",
        "seed": 3,
        "dataset": {"kind": "synth_blobs", "num_classes": 4, "per_class": 20, "image_size": 10},
        "teacher": {"model": {"groups": [6, 8, 10]}, "train": {"epochs": 3, "lr_decay_epochs": [2], "batch_size": 16, "augment": True}},
        "student": {"model": {"groups": [4, 6, 8]}, "train": {"epochs": 3, "lr_decay_epochs": [2], "batch_size": 16, "augment": True}},
        "distill": {"method": "proposed", "alpha": 1e-4},
    }
    path = tmp_path / "det.yaml"
    path.write_text(yaml.safe_dump(data))
    for out in ("a", "b"):
        assert cli.main(["run", "--config", str(path), "--out", str(tmp_path / out), "--threads", "1"], out=io.StringIO()) == 0
    same = all(
        (tmp_path / "a" / "det" / name).read_bytes() == (tmp_path / "b" / "det" / name).read_bytes()
        for name in ("metrics.csv", "teacher_metrics.csv", "student.ckpt")
    )
    check(7, same, "two single-threaded runs, same config and seed: metrics CSVs and checkpoint byte-identical")


# ---------------------------------------------------------------------------
# 8. format fidelity


def test_criterion_8_round_trips(mnist_files, tmp_path):
    results = {}
    ds = load_idx(mnist_files["train_images"], mnist_files["train_labels"])
    write_idx(ds, tmp_path / "img", tmp_path / "lab")
    results["IDX"] = (tmp_path / "img").read_bytes() == mnist_files["train_images"].read_bytes() and (
        tmp_path / "lab"
    ).read_bytes() == mnist_files["train_labels"].read_bytes()

    rng = np.random.default_rng(0)
    cifar_ok = True
    for label_bytes, classes in ((1, 10), (2, 100)):
        raw = tmp_path / f"cifar{classes}.bin"
        records = rng.integers(0, 256, size=(50, label_bytes + 3072), dtype=np.uint8)
        records[:, label_bytes - 1] %= classes
        raw.write_bytes(records.tobytes())
        loaded = load_cifar_binary(raw, label_bytes)
        coarse = records[:, 0] if label_bytes == 2 else None
        write_cifar_binary(loaded, tmp_path / "again.bin", label_bytes, coarse)
        cifar_ok &= (tmp_path / "again.bin").read_bytes() == raw.read_bytes()
    results["CIFAR"] = cifar_ok

    model = build_model(ModelSpec(input_shape=(1, 28, 28), **TEACHER_SPEC), 5)
    model.forward_with_taps(model.normalize_input(ds.images[:32]), "training")
    save_checkpoint(model, tmp_path / "m.ckpt")
    state = load_checkpoint(tmp_path / "m.ckpt")
    other = build_model(ModelSpec(input_shape=(1, 28, 28), **TEACHER_SPEC), 6)
    other.load_state_dict(state)
    save_checkpoint(other, tmp_path / "m2.ckpt")
    results["checkpoint"] = (tmp_path / "m2.ckpt").read_bytes() == (tmp_path / "m.ckpt").read_bytes() and all(
        state[k].tobytes() == v.tobytes() for k, v in model.state_dict().items()
    )
    assert isinstance(ds, Dataset)
    check(8, all(results.values()), ", ".join(f"{k} {'bitwise' if v else 'MISMATCH'}" for k, v in results.items()))
