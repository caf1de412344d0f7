"""Central finite-difference verification of every analytic backward pass.

A random projection g turns each layer into the scalar loss sum(g * y);
its analytic input/parameter gradients are compared against central
differences with per-coordinate step h = 1e-5 * max(1, |theta|). The
relative error uses max(|analytic|, |numeric|, 1e-3) in the denominator so
near-zero gradients are compared absolutely at 1e-7 resolution.
"""

from dataclasses import dataclass

import numpy as np

from . import aggregation, frame_net, training
from .frame_net import iter_params
from .numerics import make_rng

DEFAULT_TOL = 1e-4

H_SCALE = 1e-5


def numeric_grad(loss_fn, arr):
    """Central differences of loss_fn() w.r.t. arr, perturbed in place."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        saved = arr[idx]
        h = H_SCALE * max(1.0, abs(saved))
        arr[idx] = saved + h
        up = loss_fn()
        arr[idx] = saved - h
        down = loss_fn()
        arr[idx] = saved
        grad[idx] = (up - down) / (2.0 * h)
    return grad


def max_rel_err(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_layer(layer, x, rng, train=True):
    """Max relative gradient error over the input and every parameter."""
    y = layer.forward(x, train)
    g = rng.standard_normal(y.shape)
    layer._tape = None

    def loss():
        return float(np.sum(layer.forward(x, train) * g))

    layer.forward(x, train)
    layer.zero_grads()
    dx = layer.backward(g)
    analytic = {"<input>": dx.copy()}
    for path, owner, key in iter_params(layer):
        analytic[path] = owner.grads[key].copy()

    worst = max_rel_err(analytic["<input>"], numeric_grad(loss, x))
    for path, owner, key in iter_params(layer):
        err = max_rel_err(analytic[path], numeric_grad(loss, owner.params[key]))
        worst = max(worst, err)
    return worst


def check_cross_entropy(rng):
    logits = rng.standard_normal((3, 5))
    labels = rng.integers(0, 5, size=3)
    _, grad = training.cross_entropy(logits, labels)

    def loss():
        return training.cross_entropy(logits, labels)[0]

    return max_rel_err(grad, numeric_grad(loss, logits))


def _away_from_kink(x, margin=0.05):
    """Shift values off zero so the piecewise-linear activation cannot
    change branch inside the finite-difference step."""
    return x + margin * np.sign(x) + (x == 0) * margin


def _cases():
    def fully_connected(rng):
        return frame_net.FullyConnected(4, 3, rng), rng.standard_normal((2, 5, 4))

    def conv1d(rng):
        return frame_net.Conv1d(3, 4, 3, rng), rng.standard_normal((2, 5, 3))

    def lrelu(rng):
        return frame_net.LeakyRelu(), _away_from_kink(rng.standard_normal((2, 5, 4)))

    def batch_norm_train(rng):
        layer = frame_net.BatchNorm(4)
        layer.params["gamma"] = rng.standard_normal(4)
        layer.params["beta"] = rng.standard_normal(4)
        return layer, rng.standard_normal((2, 5, 4))

    def batch_norm_eval(rng):
        layer = frame_net.BatchNorm(4)
        layer.params["gamma"] = rng.standard_normal(4)
        layer.params["beta"] = rng.standard_normal(4)
        layer.buffers["running_mean"] = rng.standard_normal(4)
        layer.buffers["running_var"] = 0.5 + rng.random(4)
        return layer, rng.standard_normal((2, 5, 4)), False

    def se_module(rng):
        return frame_net.SEModule(6, 2, rng), rng.standard_normal((3, 4, 6))

    def tdnn_block(rng):
        return frame_net.TdnnBlock(4, 5, 3, rng), rng.standard_normal((3, 6, 4))

    def tdnn_se_block(rng):
        return frame_net.TdnnSeBlock(4, 5, 3, 2, rng), rng.standard_normal((3, 6, 4))

    def res_se_block(rng):
        return frame_net.ResSeBlock(5, 3, 2, rng), rng.standard_normal((3, 6, 5))

    def mean_std(rng):
        return aggregation.MeanStdPool(4), rng.standard_normal((2, 6, 4))

    def lde_iso(rng):
        head = aggregation.LdeHead(4, 3, "isotropic", rng=rng)
        head.params["log_s"] = 0.3 * rng.standard_normal(3)
        head.params["beta"] = 0.3 * rng.standard_normal(3)
        return head, rng.standard_normal((2, 6, 4))

    def lde_shared(rng):
        head = aggregation.LdeHead(4, 3, "shared_diagonal", rng=rng)
        head.params["log_d"] = 0.3 * rng.standard_normal(4)
        head.params["beta"] = 0.3 * rng.standard_normal(3)
        return head, rng.standard_normal((2, 6, 4))

    def netvlad(rng):
        return aggregation.NetVladHead(4, 3, rng), rng.standard_normal((2, 6, 4))

    def hybrid(rng):
        return aggregation.HybridHead(4, 3, rng), rng.standard_normal((2, 6, 4))

    def classifier(rng):
        return training.ClassifierHead(6, 4, 3, rng), rng.standard_normal((3, 6))

    return [("fully_connected", fully_connected), ("conv1d", conv1d),
            ("lrelu", lrelu), ("batch_norm_train", batch_norm_train),
            ("batch_norm_eval", batch_norm_eval), ("se_module", se_module),
            ("tdnn_block", tdnn_block), ("tdnn_se_block", tdnn_se_block),
            ("res_se_block", res_se_block), ("mean_std_pool", mean_std),
            ("lde_head_isotropic", lde_iso), ("lde_head_shared_diagonal", lde_shared),
            ("netvlad_head", netvlad), ("hybrid_head", hybrid),
            ("classifier_head", classifier)]


@dataclass
class GradCheckResult:
    name: str
    max_err: float
    tol: float

    @property
    def passed(self):
        return self.max_err < self.tol


def run_suite(num_seeds=20, tol=DEFAULT_TOL, base_seed=12345):
    """Returns a list of GradCheckResult, one per layer kind."""
    results = []
    for name, case in _cases():
        worst = 0.0
        for seed in range(num_seeds):
            rng = make_rng(base_seed, "gradcheck", name, seed)
            built = case(rng)
            layer, x = built[0], built[1]
            train = built[2] if len(built) > 2 else True
            worst = max(worst, check_layer(layer, x, rng, train))
        results.append(GradCheckResult(name, worst, tol))
    worst = 0.0
    for seed in range(num_seeds):
        rng = make_rng(base_seed, "gradcheck", "cross_entropy", seed)
        worst = max(worst, check_cross_entropy(rng))
    results.append(GradCheckResult("cross_entropy", worst, tol))
    return results


def format_results(results):
    lines = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name:28s} max rel err {r.max_err:.3e}  [{status}]")
    return "\n".join(lines)
