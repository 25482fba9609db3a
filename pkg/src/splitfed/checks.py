"""Self-contained oracle suites, runnable from the CLI (`splitfed check`) and the acceptance tests.

Each suite compares the library against an independent route (brute-force
loops, finite differences, arbitrary-precision arithmetic or an unsplit
reference run) and returns a CheckResult.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import aggregation as agg
from .autograd import (
    Tensor,
    batchnorm2d,
    concat_channels,
    conv2d,
    dice_loss,
    maxpool2d,
    relu,
    softmax_channels,
    upsample_nearest2x,
)
from .channel import UPLINK, ChannelState, Payload, transmit
from .gradcheck import check_gradients, rel_error
from .model import ArchConfig, SplitModelWeights, build_split_unet, forward_monolithic, one_hot
from .protocol import RunConfig, monolithic_gradients, run_simulation

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    ok, detail = fn()
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0)


# ------------------------------------------------------ averaging oracles

def _random_snapshot(rng: np.random.Generator) -> SplitModelWeights:
    return SplitModelWeights({"fe.w": rng.standard_normal((3, 2))},
                             {"mid.w": rng.standard_normal((2, 2, 3)), "mid.b": rng.standard_normal(4)},
                             {"be.w": rng.standard_normal(5)})


def _flatten(w: SplitModelWeights) -> list[float]:
    return [float(v) for part in w.parts() for arr in part.values() for v in arr.ravel()]


def _brute_weighted(snaps, coeffs, divisor=1.0) -> list[float]:
    vecs = [_flatten(s) for s in snaps]
    return [sum(c * v[j] for c, v in zip(coeffs, vecs)) / divisor for j in range(len(vecs[0]))]


def aggregation_oracles(instances: int = 100, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng([seed, 1])
        worst = 0.0
        for _ in range(instances):
            n = int(rng.integers(1, 9))
            snaps = [_random_snapshot(rng) for _ in range(n)]
            m = [int(v) for v in rng.integers(1, 500, n)]
            r = rng.dirichlet(np.ones(n))
            pairs = ((agg.naive_average(snaps), _brute_weighted(snaps, [1.0] * n, n)),
                     (agg.federated_average(snaps, m), _brute_weighted(snaps, m, float(sum(m)))),
                     (agg.weighted_average(snaps, r), _brute_weighted(snaps, r)))
            for got, want in pairs:
                worst = max(worst, float(np.max(np.abs(np.array(_flatten(got)) - np.array(want)))))
        return worst <= 1e-15, f"max |lib - brute force| = {worst:.2e} over {instances} sets (tol 1e-15)"
    return _timed("aggregation oracle equivalence", run)


# ----------------------------------------------------------- smart weights

def _mp_softmax_weights(b, d, alpha) -> list[float]:
    import mpmath as mp
    with mp.workdps(50):
        q = [mp.e ** (alpha * (1 - mp.mpf(bi))) for bi in b]
        qd = [qi * mp.mpf(di) for qi, di in zip(q, d)]
        total = sum(qd)
        return [float(v / total) for v in qd]


def smart_weight_suite(instances: int = 100, seed: int = 0) -> CheckResult:
    def run():
        notes, ok = [], True
        counts = [210, 120, 85, 180, 120]
        w = agg.smart_weights([0.37] * 5, counts)
        err_a = float(np.max(np.abs(w.r - np.array(counts) / sum(counts))))
        ok &= err_a <= 1e-12
        notes.append(f"(a) equal-b reduction err {err_a:.1e}")

        ref = _mp_softmax_weights([0.1, 0.9], [0.5, 0.5], 10)
        err_b = float(np.max(np.abs(agg.smart_weights([0.1, 0.9], [1, 1], 10).r - ref)))
        ok &= err_b <= 1e-9
        notes.append(f"(b) two-client err {err_b:.1e} vs 50-digit reference")

        rng = np.random.default_rng([seed, 2])
        bad = 0
        for _ in range(instances):
            n = int(rng.integers(2, 9))
            b = rng.uniform(-1, 2, n)
            m = rng.integers(1, 300, n)
            r = agg.smart_weights(b, m).r
            simplex = (r >= 0).all() and abs(r.sum() - 1) <= 1e-9
            k = int(rng.integers(n))
            b2 = b.copy()
            b2[k] += rng.uniform(0.01, 1.0)
            mono = agg.smart_weights(b2, m).r[k] < r[k]
            c = rng.uniform(-5, 5)
            shift = np.max(np.abs(agg.quality_scores(b + c) - agg.quality_scores(b))) <= 1e-12
            bad += not (simplex and mono and shift)
        ok &= bad == 0
        notes.append(f"(c) {instances - bad}/{instances} random instances satisfy simplex/monotone/shift")
        return ok, "; ".join(notes)
    return _timed("smart-weights formula suite", run)


# ---------------------------------------------------------------- gradients

def _onehot(labels: np.ndarray, c: int) -> np.ndarray:
    return (labels[:, None] == np.arange(c).reshape(1, -1, 1, 1)).astype(float)


def _op_cases(r: np.random.Generator) -> dict:
    c, o, k = int(r.integers(1, 4)), int(r.integers(1, 4)), int(r.choice([1, 3]))
    relu_x = r.standard_normal((2, 3, 4, 4))
    relu_x[np.abs(relu_x) < 1e-3] = 0.5
    rm, rv = r.standard_normal(3), r.uniform(0.5, 2.0, 3)
    dice_probs = softmax_channels(Tensor(r.standard_normal((2, 3, 4, 4)))).data
    dice_target = _onehot(r.integers(0, 3, (2, 4, 4)), 3)
    return {
        "conv2d": (conv2d, [r.standard_normal((2, c, 4, 5)), r.standard_normal((o, c, k, k)), r.standard_normal(o)]),
        "relu": (relu, [relu_x]),
        "batchnorm2d[train]": (lambda x, g, b: batchnorm2d(x, g, b, np.zeros(3), np.ones(3), True),
                               [r.standard_normal((2, 3, 4, 4)), r.standard_normal(3), r.standard_normal(3)]),
        "batchnorm2d[eval]": (lambda x, g, b: batchnorm2d(x, g, b, rm, rv, False),
                              [r.standard_normal((2, 3, 4, 4)), r.standard_normal(3), r.standard_normal(3)]),
        "maxpool2d": (maxpool2d, [r.standard_normal((2, 2, 4, 6))]),
        "upsample_nearest2x": (upsample_nearest2x, [r.standard_normal((2, 2, 3, 4))]),
        "concat_channels": (concat_channels, [r.standard_normal((2, 2, 3, 3)), r.standard_normal((2, 1, 3, 3))]),
        "softmax_channels": (softmax_channels, [2 * r.standard_normal((2, 4, 3, 3))]),
        "dice_loss": (lambda p: dice_loss(p, dice_target), [dice_probs]),
    }


def op_gradient_suite(instances: int = 20, seed: int = 0) -> CheckResult:
    def run():
        worst: dict[str, float] = {}
        for i in range(instances):
            for name, (fn, args) in _op_cases(np.random.default_rng([seed, 3, i])).items():
                worst[name] = max(worst.get(name, 0.0), check_gradients(fn, args))
        top = max(worst, key=worst.get)
        return all(v <= GRAD_TOL for v in worst.values()), \
            f"{len(worst)} ops x {instances} instances, worst {top} rel err {worst[top]:.1e} (tol 1e-4)"
    return _timed("per-op gradient checks", run)


def full_model_gradient_check(coords_per_tensor: int = 4, seed: int = 0, h: float = 1e-5) -> CheckResult:
    """Central differences on sampled coordinates of every trainable tensor of the desk U-Net."""
    def run():
        arch = ArchConfig()
        w = build_split_unet(arch, seed)
        r = np.random.default_rng([seed, 4])
        x = r.random((1, 1, arch.input_size, arch.input_size))
        target = one_hot(r.integers(0, arch.num_classes, (1, arch.input_size, arch.input_size)), arch.num_classes)
        _, cg, sg = monolithic_gradients(w.copy(), x, target)
        grads = {**cg, **sg}

        def loss() -> float:
            return dice_loss(forward_monolithic(w.copy(), Tensor(x), training=True), target).item()
        worst, checked = 0.0, 0
        for part in w.parts():
            for name, arr in part.items():
                if name not in grads:
                    continue  # running statistics are not trainable
                flat = arr.reshape(-1)
                for i in r.choice(flat.size, size=min(coords_per_tensor, flat.size), replace=False):
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = loss()
                    flat[i] = orig - h
                    fm = loss()
                    flat[i] = orig
                    worst = max(worst, rel_error(grads[name].reshape(-1)[i], (fp - fm) / (2 * h)))
                    checked += 1
        return worst <= GRAD_TOL, f"{checked} sampled coordinates, worst rel err {worst:.1e} (tol 1e-4)"
    return _timed("full-model gradient check", run)


# ------------------------------------------------------ split vs unsplit

def _weights_equal(a: SplitModelWeights, b: SplitModelWeights) -> bool:
    return all(list(pa) == list(pb) and all(pa[k].tobytes() == pb[k].tobytes() for k in pa)
               for pa, pb in zip(a.parts(), b.parts()))


def split_equivalence(cfg: RunConfig | None = None) -> CheckResult:
    def run():
        base = cfg or RunConfig(global_epochs=1, sigma_noise=0.0)
        split = run_simulation(base)
        ref = run_simulation(base, reference=True)
        same_w = _weights_equal(split.final_model, ref.final_model)
        same_l = all(a.train_losses == b.train_losses and a.val_losses == b.val_losses
                     and a.per_sample_losses.tobytes() == b.per_sample_losses.tobytes()
                     for h1, h2 in zip(split.history, ref.history) for a, b in zip(h1.reports, h2.reports))
        same_t = all(h1.test_loss == h2.test_loss for h1, h2 in zip(split.history, ref.history))
        return same_w and same_l and same_t, \
            f"weights {'bit-identical' if same_w else 'DIFFER'}, losses {'bit-identical' if same_l and same_t else 'DIFFER'}"
    return _timed("split/monolithic equivalence", run)


# ----------------------------------------------------------------- channel

def channel_statistics(n: int = 10**6, sigma: float = 0.1, seed: int = 0) -> CheckResult:
    def run():
        ch = ChannelState(client_id=3, sigma_noise=sigma, onset_global_epoch=1, seed=seed)
        x = transmit(Payload("features", np.zeros(n), UPLINK), ch, 1).body
        mean, std = float(x.mean()), float(x.std())
        mean_ok = abs(mean) <= 4 * sigma / math.sqrt(n)
        std_ok = abs(std - sigma) / sigma <= 0.005
        payload = np.random.default_rng(seed).standard_normal(1000)
        clean = transmit(Payload("features", payload, UPLINK), ChannelState(3, 0.0, 1, seed), 1).body
        ident = clean.tobytes() == payload.tobytes()
        return mean_ok and std_ok and ident, \
            (f"mean {mean:.2e} (bound {4 * sigma / math.sqrt(n):.1e}), "
             f"std rel err {abs(std - sigma) / sigma:.2e} (bound 5e-3), sigma=0 identity {ident}")
    return _timed("channel statistics", run)


def quick_suites() -> list[Callable[[], CheckResult]]:
    """The suites that need no training run beyond a single global epoch."""
    return [aggregation_oracles, smart_weight_suite, op_gradient_suite, full_model_gradient_check,
            split_equivalence, channel_statistics]
