"""Acceptance gate: one test per criterion; `pytest -v` gives the pass/fail line.

The two sweep-based criteria (utility trend, attack trend) share one
session-scoped run of the full reference sweep through the command-line
entry point; it resumes from its own rows file, so a re-run of the test
session only recomputes missing cells.
"""

import json
import math
import os
import tempfile
import time

import numpy as np
import pytest

from fedfraud.cli import main
from fedfraud.encoder import (
    EncoderConfig,
    PretrainConfig,
    SequenceEncoder,
    contrastive_loss,
    pretrain,
    retrieval_accuracy,
)
from fedfraud.experiment import ExperimentConfig, reference_dataset, run_cell
from fedfraud.kernel import (
    LstmParams,
    ParameterBundle,
    bce_loss,
    concat,
    constant,
    dense_affine,
    finite_difference_grad,
    lstm_cell,
    mse_loss,
    rnn_cell,
    softmax_ce_batch,
)
from fedfraud.kernel import activation as act_fn
from fedfraud.ldp import Mechanism
from fedfraud.metrics import (
    ScoredSet,
    auc_pr,
    auc_roc,
    classification_metrics,
    regression_metrics,
    tpr_at_fpr,
)
from fedfraud.models import MLP
from fedfraud.report import read_rows, row_line

ACCEPTANCE_OUT = os.environ.get(
    "FEDFRAUD_ACCEPTANCE_OUT", os.path.join(tempfile.gettempdir(), "fedfraud-acceptance")
)


def report(number, name, detail=""):
    print(f"ACCEPTANCE {number} ({name}): PASS {detail}".rstrip())


# ======================================================================
# 1. Privacy certificate
# ======================================================================


def test_criterion_1_privacy_certificate():
    started = time.time()
    rng = np.random.default_rng(0)
    dim = 8

    def ball(n):
        z = rng.normal(size=(n, dim))
        return z * (0.5 * rng.random((n, 1)) / np.abs(z).sum(axis=1, keepdims=True))

    total = 0
    for eps in (0.01, 0.5, 1.0, 2.0, 5.0, 10.0):
        mech = Mechanism(eps, dim, seed=1)
        n = 20_000
        z, z_prime = ball(n), ball(n)
        o = rng.normal(scale=1.5, size=(n, dim))
        ratio = (np.abs(o - z_prime) - np.abs(o - z)).sum(axis=1) / mech.scale
        assert np.all(ratio <= eps + 1e-9)
        total += n
        # tightness: the bound is met at o = z when the pair is diametral
        z0 = np.zeros(dim)
        z0[0] = 0.5
        attained = mech.log_density_ratio(z0, -z0, z0)
        assert abs(attained - eps) <= 1e-9
    assert total >= 100_000
    elapsed = time.time() - started
    assert elapsed < 30.0
    report(1, "privacy certificate", f"({total} triples, {elapsed:.1f}s)")


# ======================================================================
# 2. Gradient correctness
# ======================================================================


def _fd_check(build, bundle, rtol=1e-4):
    fd = finite_difference_grad(lambda b: float(build(b).data), bundle)
    bundle.zero_grad()
    build(bundle).backward()
    got = np.concatenate([g.ravel() for g in bundle.grads().values()])
    scale = max(1.0, float(np.max(np.abs(fd))))
    assert np.max(np.abs(got - fd)) / scale < rtol


def _bundle(rng, **shapes):
    b = ParameterBundle()
    for name, shape in shapes.items():
        b.add(name, rng.normal(size=shape) * 0.5)
    return b.freeze()


def _op_cases(rng):
    """(name, builder) pairs; each builder returns (scalar_fn, bundle)."""

    def dense():
        b = _bundle(rng, W=(3, 4), bias=(3,), x=(4,))
        u = rng.normal(size=3)
        return lambda bb: (dense_affine(bb["x"], bb["W"], bb["bias"]) * constant(u)).sum(), b

    def activation(kind):
        def make():
            b = _bundle(rng, x=(6,))
            u = rng.normal(size=6)
            return lambda bb: (act_fn(kind, bb["x"]) * constant(u)).sum(), b

        return make

    def mse():
        b = _bundle(rng, p=(5,))
        y = rng.normal(size=5)
        return lambda bb: mse_loss(bb["p"], y), b

    def bce():
        b = _bundle(rng, x=(5,))
        y = (rng.random(5) > 0.5).astype(float)
        return lambda bb: bce_loss(bb["x"].sigmoid(), y), b

    def softmax():
        b = _bundle(rng, Z=(3, 4))
        cls = rng.integers(0, 4, size=3)
        return lambda bb: softmax_ce_batch(bb["Z"], cls), b

    def rnn():
        b = _bundle(rng, W=(4, 3), U=(4, 4), bias=(4,), x=(3,), h=(4,))
        u = rng.normal(size=4)
        return (
            lambda bb: (rnn_cell(bb["x"], bb["h"], bb["W"], bb["U"], bb["bias"]) * constant(u)).sum(),
            b,
        )

    def lstm():
        shapes = {f"{p}_{g}": ((4, 3) if p == "W" else (4, 4) if p == "U" else (4,))
                  for g in "ifgo" for p in ("W", "U", "b")}
        b = _bundle(rng, x=(3,), h=(4,), c=(4,), **shapes)
        params = LstmParams(**{k: b[k] for k in shapes})
        u = rng.normal(size=4)

        def run(bb):
            h, c = lstm_cell(bb["x"], bb["h"], bb["c"], params)
            return (h * constant(u)).sum() + c.sum()

        return run, b

    def head():
        # publication head composition: relu layer, tanh output, l1 clip
        enc = SequenceEncoder(
            EncoderConfig(input_dim=5, hidden_dim=4, head_dims=(4,), embed_dim=2, dropout=0.0),
            seed=int(rng.integers(1 << 30)),
        )
        seqs = [rng.normal(size=(int(rng.integers(1, 4)), 5)) for _ in range(2)]
        u = rng.normal(size=(2, 2))
        return lambda bb: (enc.forward(seqs) * constant(u)).sum(), enc.bundle

    def contrastive():
        enc = SequenceEncoder(
            EncoderConfig(input_dim=5, hidden_dim=4, head_dims=(4,), embed_dim=2, dropout=0.0),
            seed=int(rng.integers(1 << 30)),
        )
        seqs = [rng.normal(size=(2, 5)) for _ in range(3)]
        pos = rng.normal(size=(3, 2)) * 0.2
        negs = [rng.normal(size=(3, 2)) * 0.2 for _ in range(2)]
        return (
            lambda bb: contrastive_loss(
                enc.forward(seqs), constant(pos), [constant(nk) for nk in negs], 0.1
            ),
            enc.bundle,
        )

    def pipeline():
        # two encoders -> concatenated profiles + features -> scorer -> BCE
        seed = int(rng.integers(1 << 30))
        enc_o = SequenceEncoder(
            EncoderConfig(input_dim=4, hidden_dim=3, head_dims=(3,), embed_dim=2, dropout=0.0),
            seed=seed,
        )
        enc_b = SequenceEncoder(
            EncoderConfig(input_dim=4, hidden_dim=3, head_dims=(3,), embed_dim=2, dropout=0.0),
            seed=seed + 1,
        )
        scorer = MLP((2 * 2 + 3, 4, 1), out_activation="sigmoid", rng=np.random.default_rng(seed + 2))
        n = 3
        seq_o = [rng.normal(size=(2, 4)) for _ in range(n)]
        seq_b = [rng.normal(size=(2, 4)) for _ in range(n)]
        x = rng.normal(size=(n, 3))
        y = (rng.random(n) > 0.5).astype(float)
        joint = ParameterBundle()
        for prefix, bundle in (("o", enc_o.bundle), ("b", enc_b.bundle), ("s", scorer.bundle)):
            for name in bundle.names():
                joint.add(f"{prefix}.{name}", bundle[name].data)
        joint.freeze()

        def run(bb):
            for prefix, bundle in (("o", enc_o.bundle), ("b", enc_b.bundle), ("s", scorer.bundle)):
                for name in bundle.names():
                    bundle[name].data[...] = bb[f"{prefix}.{name}"].data
            z_o = enc_o.forward(seq_o)
            z_b = enc_b.forward(seq_b)
            out = scorer.forward(concat([z_o, z_b, constant(x)], axis=1))
            return bce_loss(out.reshape(n), y)

        return run, joint, (enc_o, enc_b, scorer)

    cases = [
        ("dense", dense),
        ("relu", activation("relu")),
        ("tanh", activation("tanh")),
        ("sigmoid", activation("sigmoid")),
        ("mse", mse),
        ("bce", bce),
        ("softmax_ce", softmax),
        ("rnn_cell", rnn),
        ("lstm_cell", lstm),
        ("publication_head", head),
        ("contrastive", contrastive),
    ]
    return cases, pipeline


def test_criterion_2_gradient_correctness():
    started = time.time()
    rng = np.random.default_rng(1)
    cases, pipeline = _op_cases(rng)
    checked = {}
    for name, make in cases:
        for _ in range(100):
            build, bundle = make()
            _fd_check(build, bundle)
        checked[name] = 100

    # full score pipeline: finite differences over the joint parameter view
    for _ in range(100):
        run, joint, parts = pipeline()
        fd = finite_difference_grad(lambda b: float(run(b).data), joint)
        for part in parts:
            part.bundle.zero_grad()
        run(joint).backward()
        got = np.concatenate(
            [g.ravel() for part in parts for g in part.bundle.grads().values()]
        )
        scale = max(1.0, float(np.max(np.abs(fd))))
        assert np.max(np.abs(got - fd)) / scale < 1e-4
    checked["score_pipeline"] = 100

    elapsed = time.time() - started
    assert elapsed < 120.0
    assert all(n >= 100 for n in checked.values()) and len(checked) == 12
    report(2, "gradient correctness", f"(12 ops x 100 configs, {elapsed:.1f}s)")


# ======================================================================
# 3. Distributed-monolithic equivalence
# ======================================================================


def test_criterion_3_protocol_equivalence():
    from test_federation import (
        all_params,
        monolithic_orchestrated_step,
        monolithic_p2p_step,
        orch_config,
        orch_batch,
        p2p_batch,
    )
    from fedfraud.datagen import GeneratorConfig, generate
    from fedfraud.federation import FederatedSimulation, orchestrated_sgd_step, p2p_sgd_step

    started = time.time()
    ds = generate(GeneratorConfig(n_banks=3, accounts_per_bank=20, n_transactions=3000,
                                  fraud_rate=0.02, seed=7))

    def rel_close(a, b):
        return np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))) <= 1e-6

    cfg = dict(batch_size=64, micro_batch=8, lr=0.05)
    sim_d = FederatedSimulation(ds, orch_config(**cfg))
    sim_m = FederatedSimulation(ds, orch_config(**cfg))
    batch = orch_batch(ds, n=64)
    orchestrated_sgd_step(sim_d, batch)
    monolithic_orchestrated_step(sim_m, batch, sim_m.config.lr)
    assert rel_close(all_params(sim_d), all_params(sim_m))

    sim_d = FederatedSimulation(ds, orch_config(protocol="p2p", **cfg))
    sim_m = FederatedSimulation(ds, orch_config(protocol="p2p", **cfg))
    batch = p2p_batch(ds, sim_d, n=64)
    p2p_sgd_step(sim_d, batch)
    monolithic_p2p_step(sim_m, batch, sim_m.config.lr)
    assert rel_close(all_params(sim_d), all_params(sim_m))

    elapsed = time.time() - started
    assert elapsed < 60.0
    report(3, "distributed-monolithic equivalence", f"(N=64, micro=8, B=3, {elapsed:.1f}s)")


# ======================================================================
# 4. Metric oracles
# ======================================================================


def _brute_metrics(scores, labels):
    """Vectorised threshold-enumeration oracle for the ranking metrics."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    cmp = pos[:, None] - neg[None, :]
    roc = (np.sum(cmp > 0) + 0.5 * np.sum(cmp == 0)) / (len(pos) * len(neg))
    ap, prev_recall = 0.0, 0.0
    tprs = {}
    for t in np.sort(np.unique(scores))[::-1]:
        pred = scores >= t
        tp = int(np.sum(pred & (labels == 1)))
        fp = int(np.sum(pred & (labels == 0)))
        precision = tp / (tp + fp)
        recall = tp / len(pos)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        tprs[fp / len(neg)] = max(tprs.get(fp / len(neg), 0.0), recall)
    def tpr_cap(cap):
        ok = [v for f, v in tprs.items() if f <= cap]
        return max(ok) if ok else 0.0
    return roc, ap, tpr_cap


def test_criterion_4_metric_oracles():
    started = time.time()
    rng = np.random.default_rng(2)
    for trial in range(1000):
        n = int(rng.integers(4, 1001 if trial % 5 == 0 else 64))
        labels = rng.integers(0, 2, size=n)
        while labels.min() == labels.max():
            labels = rng.integers(0, 2, size=n)
        scores = np.round(rng.normal(size=n), 1 if rng.random() < 0.5 else 6)
        ss = ScoredSet(scores, labels)
        roc, ap, tpr_cap = _brute_metrics(scores, labels)
        assert abs(auc_roc(ss) - roc) <= 1e-12
        assert abs(auc_pr(ss) - ap) <= 1e-12
        for cap in (0.01, 0.1, 0.5):
            assert abs(tpr_at_fpr(ss, cap) - tpr_cap(cap)) <= 1e-12

        # classification oracle on thresholded scores
        pred = (scores >= 0).astype(np.int64)
        out = classification_metrics(pred, labels)
        tp = int(np.sum((pred == 1) & (labels == 1)))
        fp = int(np.sum((pred == 1) & (labels == 0)))
        fn = int(np.sum((pred == 0) & (labels == 1)))
        assert abs(out["accuracy"] - np.mean(pred == labels)) <= 1e-12
        f = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
        assert abs(out["f_score"] - f) <= 1e-12

        # regression oracle
        y = rng.normal(size=n)
        p = y + rng.normal(size=n)
        r2 = 1.0 - np.sum((p - y) ** 2) / np.sum((y - y.mean()) ** 2)
        assert abs(regression_metrics(p, y)["mean_r2"] - r2) <= 1e-12
    elapsed = time.time() - started
    assert elapsed < 60.0
    report(4, "metric oracles", f"(1000 scored sets, {elapsed:.1f}s)")


# ======================================================================
# 5/6. Reference sweep (shared fixture)
# ======================================================================


@pytest.fixture(scope="session")
def sweep_rows():
    """Rows of the full reference sweep (7 budgets x 5 repeats, attacks on).

    Runs through the CLI with default configuration; resumes from the rows
    file under ``ACCEPTANCE_OUT`` so completed cells are not recomputed.
    """
    assert main(["--quiet", "--out", ACCEPTANCE_OUT, "sweep"]) == 0
    rows = read_rows(os.path.join(ACCEPTANCE_OUT, "sweep", "rows.ndjson"))
    fingerprint = ExperimentConfig().fingerprint()
    rows = [r for r in rows if r["fingerprint"] == fingerprint]
    assert len(rows) >= 35
    return rows


def _by_epsilon(rows, key):
    order = ["0.01", "0.5", "1.0", "2.0", "5.0", "10.0", "inf"]
    out = {}
    for eps in order:
        vals = [r[key] for r in rows if r["epsilon"] == eps]
        assert len(vals) == 5, (key, eps, len(vals))
        mean = float(np.mean(vals))
        se = float(np.std(vals, ddof=1) / math.sqrt(len(vals)))
        out[eps] = (mean, se)
    return out


def test_criterion_5_utility_privacy_trend(sweep_rows):
    stats = _by_epsilon(sweep_rows, "auc_pr")
    order = list(stats)
    for lo, hi in zip(order, order[1:]):
        m_lo, se_lo = stats[lo]
        m_hi, se_hi = stats[hi]
        slack = math.sqrt(se_lo**2 + se_hi**2)  # 1 SE of the difference
        assert m_hi >= m_lo - slack, (lo, hi, stats)
    gap = stats["inf"][0] - stats["0.01"][0]
    assert gap >= 0.03, stats
    means = {e: round(m, 4) for e, (m, _) in stats.items()}
    report(5, "utility-privacy trend", f"(AUC-PR {means}, gap {gap:.3f})")


def test_criterion_6_attack_floor_and_trend(sweep_rows):
    inv = _by_epsilon(sweep_rows, "inversion_mean_r2")
    attr = _by_epsilon(sweep_rows, "attribute_accuracy")
    attr_base = _by_epsilon(sweep_rows, "attribute_frequency_baseline")
    mem = _by_epsilon(sweep_rows, "membership_f_score")
    mem_base = _by_epsilon(sweep_rows, "membership_baseline")

    # floor at the strongest privacy level
    assert inv["0.01"][0] <= 0.02, inv
    assert abs(attr["0.01"][0] - attr_base["0.01"][0]) <= 0.02, (attr, attr_base)
    assert abs(mem["0.01"][0] - mem_base["0.01"][0]) <= 0.02, (mem, mem_base)

    # trend: weaker privacy never hurts the attacker (5-seed means)
    for stats in (inv, attr, mem):
        assert stats["10.0"][0] >= stats["0.01"][0] - 1e-9, stats
    report(
        6,
        "attack floor and trend",
        f"(inv {inv['0.01'][0]:.4f}->{inv['10.0'][0]:.4f}, "
        f"attr {attr['0.01'][0]:.3f}->{attr['10.0'][0]:.3f}, "
        f"mem {mem['0.01'][0]:.3f}->{mem['10.0'][0]:.3f})",
    )


# ======================================================================
# 7. Isolation audit
# ======================================================================

SMALL_CONFIG = """\
n_banks = 2
accounts_per_bank = 40
n_transactions = 6000
fraud_rate = 0.01
epochs = 1
batch_size = 64
micro_batch = 64
train_stream_size = 128
val_stream_size = 128
run_attacks = false
"""


def test_criterion_7_isolation_audit(tmp_path):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL_CONFIG)
    root = str(tmp_path / "out")
    assert main(["--quiet", "--config", str(cfg), "--out", root, "generate"]) == 0
    assert main(["--quiet", "--config", str(cfg), "--out", root, "train"]) == 0
    assert main(["--quiet", "--config", str(cfg), "--out", root, "audit"]) == 0

    trace = os.path.join(root, "runs", "orchestrated_eps0.01_seed0", "trace.ndjson")
    planted = {"kind": "raw_history", "sender": "bank:0", "receiver": "bank:1",
               "payload": {"count": 1}}
    with open(trace, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(planted) + "\n")
    assert main(["--quiet", "--out", root, "audit"]) == 3
    report(7, "isolation audit", "(clean run 0 violations; planted violation exit 3)")


# ======================================================================
# 8. Determinism
# ======================================================================


def test_criterion_8_cell_determinism():
    config = ExperimentConfig(
        n_banks=2, accounts_per_bank=40, n_transactions=6000, fraud_rate=0.01,
        epochs=2, batch_size=64, micro_batch=64, train_stream_size=128,
        val_stream_size=128, attack_epochs=5, shadow_epochs=2, membership_accounts=40,
    )
    row_a = run_cell(config, 1.0, seed=42)
    row_b = run_cell(config, 1.0, seed=42)
    assert row_line(row_a) == row_line(row_b)
    report(8, "determinism", "(re-run cell row byte-identical)")


# ======================================================================
# 9. Pretraining sanity
# ======================================================================


def test_criterion_9_pretraining_sanity():
    config = ExperimentConfig()
    dataset = reference_dataset(config)
    rng = np.random.default_rng(7)
    perm = rng.permutation(len(dataset.accounts))
    cut = int(0.8 * len(perm))
    fit_accounts = [dataset.accounts[i] for i in perm[:cut]]
    val_accounts = [dataset.accounts[i] for i in perm[cut:]]

    fwd = SequenceEncoder(EncoderConfig(), seed=11)
    bwd = SequenceEncoder(EncoderConfig(), seed=12)
    trace = pretrain(
        dataset, fit_accounts, fwd, bwd,
        PretrainConfig(epochs=25, batch_size=128, lr=3e-3, pairs_per_epoch=6000, seed=3),
    )

    moving = [float(np.mean(trace[max(0, i - 2) : i + 1])) for i in range(len(trace))]
    for i in range(4):  # non-increasing across the first five epochs
        assert moving[i + 1] <= moving[i] + 1e-9, moving[:5]

    accs = [
        retrieval_accuracy(dataset, val_accounts, fwd, bwd, k=8, n_queries=10_000, seed=s)
        for s in range(4)
    ]
    acc = float(np.mean(accs))
    assert acc >= 3.0 * (1.0 / 9.0), accs
    report(9, "pretraining sanity", f"(loss {trace[0]:.3f}->{trace[-1]:.3f}, retrieval {acc:.3f})")
