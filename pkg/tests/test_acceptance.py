"""Acceptance criteria 1-12.

Each test prints one ``criterion N PASS|FAIL`` line with the measured value and
the tolerance it was held to, then asserts.  The lines are repeated in the
terminal summary.
"""

import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from _util import numeric_grad, rel_err
from conftest import ACCEPTANCE_LINES
from xaisplit import cli
from xaisplit import tensor as T
from xaisplit import xai
from xaisplit.codec import Quantizer, lzw_decode, lzw_encode
from xaisplit.data import train_test
from xaisplit.nn import ExtractorConfig, ReferenceNet, SplitModel
from xaisplit.offload import LinkModel, LoopbackTransport, OffloadServer, ServerCore, TcpTransport, run_modes, \
    simulate_link, summarize
from xaisplit.skewtrain import (SkewnessSpec, TrainConfig, channel_likelihood, combined_loss, descent_loss,
                                disorder_loss, evaluate, rank_channels, select_channels, skewness_loss,
                                train_pipeline)
from xaisplit.tensor import Tensor


def verdict(n: int, ok: bool, what: str) -> None:
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {what}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# ----------------------------------------------------------------------- 1: gradients

def _random_net(rng):
    """A random small network as (leaf arrays, scalar loss over leaf Tensors)."""
    act = [T.relu, T.sigmoid, T.abs_][rng.integers(3)]
    if rng.integers(2):
        n, h, cin = 2, int(rng.integers(4, 7)), int(rng.integers(1, 3))
        cmid, classes = int(rng.integers(2, 4)), 3
        stride, padding = int(rng.integers(1, 3)), ["valid", "same"][rng.integers(2)]
        _, (ho, wo, _) = T.conv2d_flops((h, h, cin), 3, cmid, stride, padding)
        arrays = [rng.standard_normal((n, h, h, cin)), 0.5 * rng.standard_normal((3, 3, cin, cmid)),
                  0.1 * rng.standard_normal(cmid), 0.5 * rng.standard_normal((ho * wo * cmid, classes))]
        labels = rng.integers(0, classes, n)

        def loss(x, w, b, v):
            hdn = act(T.bias_add(T.conv2d(x, w, stride, padding), b))
            return T.cross_entropy(T.matmul(T.reshape(hdn, (n, -1)), v), labels)
    else:
        n, d, hid = 3, int(rng.integers(2, 6)), int(rng.integers(2, 6))
        arrays = [rng.standard_normal((n, d)), rng.standard_normal((d, hid)), rng.standard_normal(hid),
                  rng.standard_normal((hid, 4))]
        centers = np.sort(rng.standard_normal(4))
        rng_labels = rng.integers(0, 4, n)
        head = int(rng.integers(3))

        def loss(x, w, b, v):
            z = T.matmul(act(T.bias_add(T.matmul(x, w), b)), v)
            if head == 0:
                return T.mean(T.index(T.log_softmax(z, -1), (np.arange(n), rng_labels)))
            if head == 1:
                q = T.soft_quantize(z, centers, 2.0)
                return T.sum_(T.mul(q, q))
            r = T.row_normalize(T.abs_(z))
            return T.sum_(T.mul(T.max_(r, -1), T.min_(z, -1)))
    return arrays, loss


def test_criterion_01_gradient_correctness():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        arrays, loss = _random_net(np.random.default_rng(seed))
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        T.backward(loss(*leaves))
        for i, a in enumerate(arrays):
            def f(v, i=i):
                with T.no_grad():
                    args = [Tensor(x) for x in arrays]
                    args[i] = Tensor(v)
                    return float(loss(*args).data)
            worst = max(worst, rel_err(leaves[i].grad, numeric_grad(f, a)))
    dt = time.perf_counter() - t0
    verdict(1, worst < 1e-4 and dt < 60,
            f"gradient check, 100 random nets: max rel err {worst:.2e} (< 1e-4), {dt:.1f} s (< 60 s)")


# ----------------------------------------------------------------------- 2: IG completeness

def _conv_scorer(rng, c):
    w = rng.standard_normal((2, 2, c, 4))
    v = rng.standard_normal(4 * 4)

    def f(x):
        h = T.sigmoid(T.conv2d(x, w))
        return T.matmul(T.reshape(h, (h.shape[0], -1)), v)
    return f


def test_criterion_02_ig_completeness():
    worst, cases, seed = 0.0, 0, 0
    while cases < 50 and seed < 1000:
        rng = np.random.default_rng(seed)
        seed += 1
        c = int(rng.integers(2, 5))
        f = _conv_scorer(rng, c)
        x = rng.standard_normal((1, 3, 3, c))
        with T.no_grad():
            delta = float(f(Tensor(x)).data[0] - f(Tensor(np.zeros_like(x))).data[0])
        if abs(delta) <= 0.1:
            continue
        iv = xai.integrated_gradients(f, x, xai.AttributionConfig("IG", 128))
        worst = max(worst, abs(iv.raw.sum() - delta) / abs(delta))
        cases += 1
    lin_worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(10_000 + seed)
        w, b = rng.standard_normal(6), rng.standard_normal()
        x = rng.standard_normal((1, 6))
        iv = xai.integrated_gradients(lambda t: T.add(T.matmul(t, w), b), x, xai.AttributionConfig("IG", 1))
        lin_worst = max(lin_worst, abs(iv.raw.sum() - float(x[0] @ w)))
    verdict(2, cases == 50 and worst < 0.01 and lin_worst < 1e-9,
            f"IG completeness: {cases} cases, max rel gap {worst:.2e} (< 1e-2) at m=128; "
            f"linear m=1 max gap {lin_worst:.1e} (< 1e-9)")


# ----------------------------------------------------------------------- 3: loss oracle

def _oracle_losses(imp, k, rho, pred, lam):
    """Plain-Python restatement of the four losses."""
    top, rest = list(imp[:k]), list(imp[k:])
    lowest_kept = top[0]
    for v in top:
        lowest_kept = v if v < lowest_kept else lowest_kept
    highest_rest = rest[0]
    for v in rest:
        highest_rest = v if v > highest_rest else highest_rest
    dis = highest_rest - lowest_kept if highest_rest > lowest_kept else 0.0
    held = 0.0
    for v in top:
        held += abs(v)
    skew = rho - held if rho > held else 0.0
    desc = 0.0
    for a, b in zip(imp, sorted(imp, reverse=True)):
        desc += (a - b) * (a - b)
    return dis, skew, desc, lam * pred + (1.0 - lam) * (skew + dis)


def test_criterion_03_loss_oracle():
    # dyadic values (multiples of 2^-16 summing to 1) keep every sum exact in
    # any order, so "identical" is a meaningful comparison
    rng = np.random.default_rng(3)
    scale = 2.0 ** 16
    mismatches = 0
    for _ in range(10_000):
        c = int(rng.integers(2, 17))
        k = int(rng.integers(1, c))
        cuts = np.sort(rng.integers(0, 2 ** 16 + 1, c - 1))
        imp = np.diff(np.concatenate([[0], cuts, [2 ** 16]])) / scale
        rng.shuffle(imp)
        rho = rng.integers(0, 2 ** 16 + 1) / scale
        pred = rng.integers(0, 2 ** 20) / scale
        lam = rng.integers(1, 256) / 256.0
        want = _oracle_losses(imp.tolist(), k, rho, pred, lam)
        got = (disorder_loss(imp[:k], imp[k:]), skewness_loss(imp[:k], rho), descent_loss(imp))
        got += (combined_loss(pred, got[1], got[0], lam),)
        ti = Tensor(imp)
        td = (disorder_loss(T.index(ti, slice(0, k)), T.index(ti, slice(k, None))).item(),
              skewness_loss(T.index(ti, slice(0, k)), rho).item(), descent_loss(ti).item())
        td += (combined_loss(Tensor(pred), Tensor(td[1]), Tensor(td[0]), lam).item(),)
        if got != want or td != want:
            mismatches += 1
    verdict(3, mismatches == 0, f"loss oracle on 10^4 vectors: {mismatches} mismatches (exact equality)")


# ----------------------------------------------------------------------- 4: channel selection

def _brute_likelihood(imp, k):
    """Channel c is in a sample's top-k when fewer than k channels beat it."""
    n, c = imp.shape
    counts = [0] * c
    for row in imp:
        for ch in range(c):
            beaten_by = sum(1 for o in range(c) if row[o] > row[ch] or (row[o] == row[ch] and o < ch))
            counts[ch] += beaten_by < k
    return np.array(counts) / n


def _brute_rank(p, k):
    return [ch for _, ch in sorted((-p[ch], ch) for ch in range(len(p)))[:k]]


@pytest.mark.filterwarnings("ignore::xaisplit.xai.DegenerateImportanceWarning")
def test_criterion_04_channel_selection_trace():
    hand = np.array([[0.2, 0.7, 0.1], [0.1, 0.6, 0.3]])
    hand_ok = channel_likelihood(hand, 1).tolist() == [0.0, 1.0, 0.0] and rank_channels(
        channel_likelihood(hand, 1), 1).tolist() == [1]
    bad = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        c, n = int(rng.integers(3, 9)), int(rng.integers(2, 13))
        k = int(rng.integers(1, c))
        m = SplitModel.build(ExtractorConfig(input_shape=(6, 6, 1), channels_out=c), k, 3, seed=seed, bias_init=0.1)
        ref = ReferenceNet(c, 3, rng, 2)
        images, labels = rng.uniform(size=(n, 6, 6, 1)), rng.integers(0, 3, n)
        sel, p = select_channels(images, m, ref, labels, k, xai.AttributionConfig("IG", 2))
        feats = m.client_features(images)
        imp = xai.integrated_gradients(xai.true_class_score(ref, labels), feats, xai.AttributionConfig("IG", 2))
        want = _brute_likelihood(imp.normalized, k)
        bad += not (np.array_equal(p, want) and sel.tolist() == _brute_rank(want, k))
        # tie-heavy matrices exercise the lower-index tie-break
        ties = rng.integers(0, 3, (n, c)).astype(float)
        pt = channel_likelihood(ties, k)
        bad += not (np.array_equal(pt, _brute_likelihood(ties, k)) and rank_channels(pt, k).tolist() == _brute_rank(pt, k))
    verdict(4, hand_ok and bad == 0,
            f"channel selection: hand trace {'matches' if hand_ok else 'differs'}, "
            f"{bad} of 200 randomized cases differ from brute force (exact)")


# ----------------------------------------------------------------------- 5-7, 9, 11: trained toy task

@pytest.fixture(scope="module")
def toy_runs():
    """Treatment (rho=0.8, lambda=0.3) and control (rho=0, lambda=0.999) on the radial task, C=8, k=2."""
    train, test = train_test("radial", 2048, 256, seed=1)
    out = {"test": test}
    for name, spec in (("treatment", SkewnessSpec(2, 0.8, 0.3, 6.0)), ("control", SkewnessSpec(2, 0.0, 0.999, 6.0))):
        t0 = time.perf_counter()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", xai.DegenerateImportanceWarning)
            res = train_pipeline(train, test, ExtractorConfig(), spec, TrainConfig(epochs=12, eval_every=12, seed=1))
            ev = evaluate(res.model, res.ref, test, 2, 128)
        out[name] = (res, ev, time.perf_counter() - t0)
    return out


def test_criterion_05_skewness_attainment(toy_runs):
    res, ev, dt = toy_runs["treatment"]
    epochs = res.log[-1]["epoch"]
    verdict(5, ev.mean_skewness >= 0.75 and epochs <= 100 and dt < 600,
            f"achieved skewness {ev.mean_skewness:.4f} (>= 0.75) after {epochs} epochs (<= 100), "
            f"{dt:.0f} s (< 600 s)")


def test_criterion_06_disorder_enforcement(toy_runs):
    _, ev, _ = toy_runs["treatment"]
    verdict(6, ev.disorder_rate < 0.05, f"disorder-violation rate {ev.disorder_rate:.4f} (< 0.05)")


def test_criterion_07_accuracy_cost(toy_runs):
    _, ev_t, _ = toy_runs["treatment"]
    _, ev_c, _ = toy_runs["control"]
    drop = ev_c.accuracy - ev_t.accuracy
    verdict(7, drop <= 0.05, f"accuracy control {ev_c.accuracy:.4f} vs treatment {ev_t.accuracy:.4f}: "
                             f"drop {100 * drop:+.2f} pp (<= 5 pp)")


# ----------------------------------------------------------------------- 8: codec

def test_criterion_08_codec():
    rng = np.random.default_rng(8)
    failures = 0
    for i in range(10_000):
        if i % 4 == 0:
            # KwKwK: a repeated prefix makes the decoder meet a code it is still building
            s = bytes(rng.integers(0, 256, int(rng.integers(1, 4)), dtype=np.uint8))
            data = s * int(rng.integers(2, 40))
        else:
            alphabet = int(rng.integers(1, 257))
            data = bytes(rng.integers(0, alphabet, int(rng.integers(0, 300)), dtype=np.uint8))
        failures += lzw_decode(lzw_encode(data)) != data
    golden = lzw_encode(b"ABABABA") == [65, 66, 256, 258]
    q = Quantizer(np.sort(rng.standard_normal(8)))
    x = rng.standard_normal(1000) * 3
    once = q.dequantize(q.quantize(x))
    idem = np.array_equal(q.dequantize(q.quantize(once)), once)
    verdict(8, failures == 0 and golden and idem,
            f"codec: {failures} LZW roundtrip failures of 10^4; ABABABA golden {'ok' if golden else 'wrong'}; "
            f"quantizer idempotent {'yes' if idem else 'no'}")


# ----------------------------------------------------------------------- 9: offload equivalence

def test_criterion_09_offload_equivalence(toy_runs):
    model = toy_runs["treatment"][0].model
    x = toy_runs["test"].images[:100]
    server = OffloadServer(ServerCore(model)).start()
    transport = TcpTransport(*server.address)
    try:
        z, reps = run_modes(model, x, "partitioned", LinkModel(6e6), transport, timeout_s=5.0)
    finally:
        transport.close()
        server.stop()
    diff = float(np.abs(z - model.logits(x)).max())
    fell_back = sum(r.fallback for r in reps)
    verdict(9, diff < 1e-6 and fell_back == 0 and len(z) == 100,
            f"partitioned over loopback TCP vs in-process, 100 samples: max |diff| {diff:.1e} (< 1e-6), "
            f"{fell_back} fallbacks")


# ----------------------------------------------------------------------- 10: link model

def test_criterion_10_link_model():
    ratio = simulate_link(4096, LinkModel(2.7e5)) / simulate_link(4096, LinkModel(6e6))
    target = 6e6 / 2.7e5
    err = abs(ratio - target) / target
    verdict(10, err < 1e-3, f"t_tx ratio 270 kbps / 6 Mbps = {ratio:.6f} (target {target:.6f}, "
                            f"rel err {err:.1e} < 1e-3)")


# ----------------------------------------------------------------------- 11: payload advantage

def test_criterion_11_payload_advantage(toy_runs):
    model = toy_runs["treatment"][0].model
    x = toy_runs["test"].images
    core = ServerCore(model)
    _, p = run_modes(model, x, "partitioned", LinkModel(6e6), LoopbackTransport(core))
    _, e = run_modes(model, x, "edge_only", LinkModel(6e6), LoopbackTransport(core))
    pb, eb = summarize(p)["mean_payload_bytes"], summarize(e)["mean_payload_bytes"]
    verdict(11, pb < eb, f"mean payload partitioned {pb:.1f} B < edge-only {eb:.1f} B")


# ----------------------------------------------------------------------- 12: determinism

def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_12_demo_determinism(tmp_path):
    trees = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli.run(["demo", "--seed", "0", "--out", str(out)]) == cli.EXIT_OK
        trees.append(_tree(out))
    a, b = trees
    differing = sorted(name for name in a.keys() | b.keys() if a.get(name) != b.get(name))
    reports = sorted(n for n in a if n.endswith((".json", ".csv", ".txt", ".png")))
    verdict(12, not differing and len(reports) >= 8,
            f"two demo runs, seed 0: {len(a)} files, {len(differing)} differ"
            + (f" ({', '.join(differing)})" if differing else " (byte-identical)"))
