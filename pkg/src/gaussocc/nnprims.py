"""Minimal neural primitives: forward passes, exact analytic gradients, a
central finite-difference checker, and the two occupancy training losses.

Every backward here is hand-derived and verified against central differences;
nothing relies on an autodiff framework. Hidden activations are ReLU with the
subgradient convention relu'(0) = 0. Layer norm uses the population variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LN_EPS = 1e-5


@dataclass
class LinearLayer:
    """Affine map x -> W x + b with weight (out, in) and bias (out,)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"inconsistent linear shapes {self.weight.shape} / {self.bias.shape}"
            )

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class Mlp:
    """Affine chain with ReLU between layers and a linear output."""

    layers: list[LinearLayer]


def linear_forward(x: np.ndarray, layer: LinearLayer) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.n_in:
        raise ValueError(f"linear expects input width {layer.n_in}, got {x.shape[-1]}")
    return x @ layer.weight.T + layer.bias


def linear_backward(x: np.ndarray, layer: LinearLayer, grad_out: np.ndarray):
    """Gradients of sum(grad_out * forward) w.r.t. x, weight, bias.

    Leading axes of x are batch axes; parameter gradients sum over them.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    grad_x = g @ layer.weight
    gm = g.reshape(-1, layer.n_out)
    xm = x.reshape(-1, layer.n_in)
    return grad_x, gm.T @ xm, gm.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def mlp_forward(x: np.ndarray, mlp: Mlp) -> np.ndarray:
    for layer in mlp.layers[:-1]:
        x = relu(linear_forward(x, layer))
    return linear_forward(x, mlp.layers[-1])


def mlp_forward_trace(x: np.ndarray, mlp: Mlp):
    """Forward pass keeping every layer input, for the backward pass."""
    inputs = []
    for layer in mlp.layers[:-1]:
        inputs.append(x)
        x = relu(linear_forward(x, layer))
    inputs.append(x)
    return linear_forward(x, mlp.layers[-1]), inputs


def mlp_backward(x: np.ndarray, mlp: Mlp, grad_out: np.ndarray):
    """Gradients w.r.t. the input and every (weight, bias) pair, in layer order."""
    _, inputs = mlp_forward_trace(x, mlp)
    param_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(mlp.layers)
    g = np.asarray(grad_out, dtype=np.float64)
    for i in range(len(mlp.layers) - 1, -1, -1):
        layer_in = inputs[i]
        grad_in, gw, gb = linear_backward(layer_in, mlp.layers[i], g)
        param_grads[i] = (gw, gb)
        if i > 0:
            # layer_in was produced by relu; kill gradient where it clipped
            grad_in = grad_in * (layer_in > 0.0)
        g = grad_in
    return g, param_grads


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient through sigmoid given its output y."""
    return grad_out * y * (1.0 - y)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, grad_out: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient through softmax given its output y."""
    inner = np.sum(grad_out * y, axis=axis, keepdims=True)
    return y * (grad_out - inner)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """Normalize the last axis to zero mean and unit population variance,
    then apply the affine gamma * xhat + beta."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return xhat * gamma + beta


def layer_norm_backward(x: np.ndarray, gamma: np.ndarray, grad_out: np.ndarray,
                        eps: float = LN_EPS):
    """Gradients w.r.t. x, gamma, beta (gamma/beta grads sum over batch axes)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    gx_hat = g * gamma
    grad_x = inv * (
        gx_hat
        - gx_hat.mean(axis=-1, keepdims=True)
        - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
    )
    axes = tuple(range(x.ndim - 1))
    grad_gamma = (g * xhat).sum(axis=axes) if axes else g * xhat
    grad_beta = g.sum(axis=axes) if axes else g
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray, class_weights=None):
    """Weighted mean over voxels of -log softmax probability of the true class.

    logits: (..., C); labels: integer array (...) with values in [0, C).
    Returns (loss, grad_logits). Uniform weights reduce to the plain mean.
    Intended to be applied to the rendered output of every refinement stage
    and summed, unweighted, across stages.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise ValueError(f"logits {logits.shape} do not match labels {labels.shape}")
    c = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError("labels out of range")
    flat = logits.reshape(-1, c)
    y = labels.reshape(-1)
    p = softmax(flat, axis=-1)
    if class_weights is None:
        w = np.ones(y.shape[0])
    else:
        w = np.asarray(class_weights, dtype=np.float64)[y]
    wsum = w.sum()
    logp = flat - np.max(flat, axis=-1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
    loss = -(w * logp[np.arange(y.shape[0]), y]).sum() / wsum
    grad = p * (w / wsum)[:, None]
    grad[np.arange(y.shape[0]), y] -= w / wsum
    return loss, grad.reshape(logits.shape)


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss w.r.t. sorted errors.

    gt_sorted: binary ground-truth indicators ordered by decreasing error.
    The coefficients are non-negative and sum to the final Jaccard loss.
    """
    gt_sorted = np.asarray(gt_sorted, dtype=np.float64)
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    out = jaccard.copy()
    out[1:] = jaccard[1:] - jaccard[:-1]
    return out


def lovasz_softmax_loss(probs: np.ndarray, labels: np.ndarray):
    """Lovasz-Softmax: per class present in the labels, sort the per-voxel
    errors (1 - p for the true class, p otherwise) descending and dot them
    with the Lovasz extension gradient of the Jaccard loss; average over
    present classes.

    probs: (..., C) rows on the simplex; labels: integers (...).
    Returns (loss, grad_probs). The gradient treats the sort permutation as
    locally constant, which is exact away from ties in the error vector.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape[:-1] != labels.shape:
        raise ValueError(f"probs {probs.shape} do not match labels {labels.shape}")
    c = probs.shape[-1]
    flat = probs.reshape(-1, c)
    y = labels.reshape(-1)
    present = np.unique(y)
    grad = np.zeros_like(flat)
    total = 0.0
    for cls in present:
        fg = (y == cls).astype(np.float64)
        err = np.where(fg == 1.0, 1.0 - flat[:, cls], flat[:, cls])
        order = np.argsort(-err, kind="stable")
        coef = lovasz_grad(fg[order])
        total += float(err[order] @ coef)
        sign = np.where(fg[order] == 1.0, -1.0, 1.0)
        grad[order, cls] += coef * sign
    n = len(present)
    return total / n, (grad / n).reshape(probs.shape)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradReport:
    """Outcome of comparing analytic gradients against central differences."""

    name: str
    max_rel_error: float
    mean_rel_error: float
    worst_parameter: str
    n_probes: int
    passed: bool

    def row(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"{self.name:<18} {self.max_rel_error:12.3e} {self.mean_rel_error:12.3e}"
                f" {self.worst_parameter:<22} {self.n_probes:>6} {status}")


def fd_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xw = x.copy()
    xf = xw.reshape(-1)
    for i in range(xf.shape[0]):
        old = xf[i]
        xf[i] = old + h
        hi = f(xw)
        xf[i] = old - h
        lo = f(xw)
        xf[i] = old
        flat[i] = (hi - lo) / (2.0 * h)
    return grad


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / scale


GRAD_TOL = 1e-6
FD_STEP = 1e-5


def _collect(name: str, pairs, tol: float) -> GradReport:
    """Fold (label, analytic, numeric) comparisons into one report."""
    errs = []
    worst_label, worst = "", -1.0
    n_probes = 0
    for label, analytic, numeric in pairs:
        e = relative_errors(analytic, numeric)
        n_probes += e.size
        m = float(e.max())
        if m > worst:
            worst_label, worst = label, m
        errs.append(e)
    all_e = np.concatenate(errs)
    return GradReport(name, float(all_e.max()), float(all_e.mean()), worst_label,
                      n_probes, bool(all_e.max() < tol))


def run_gradcheck(seed: int = 0, inject_fault: bool = False,
                  tol: float = GRAD_TOL) -> list[GradReport]:
    """Compare every analytic backward against central finite differences
    (h = 1e-5, float64) on random probes; each primitive gets at least 100
    probed elements. ReLU and sort-tie neighborhoods are resampled so the
    probes stay in smooth regions. inject_fault corrupts one analytic
    gradient on purpose, to prove the harness can fail.
    """
    gen = np.random.default_rng(seed)
    h = FD_STEP
    reports = []

    # linear layer
    pairs = []
    for i in range(6):
        layer = LinearLayer(gen.normal(size=(3, 4)), gen.normal(size=3))
        x = gen.normal(size=4)
        p = gen.normal(size=3)
        gx, gw, gb = linear_backward(x, layer, p)
        if inject_fault and i == 0:
            gw = gw * 1.5
        pairs.append((f"linear[{i}].x", gx, fd_gradient(lambda v: p @ linear_forward(v, layer), x, h)))
        pairs.append((f"linear[{i}].weight", gw,
                      fd_gradient(lambda w: p @ linear_forward(x, LinearLayer(w, layer.bias)), layer.weight, h)))
        pairs.append((f"linear[{i}].bias", gb,
                      fd_gradient(lambda b: p @ linear_forward(x, LinearLayer(layer.weight, b)), layer.bias, h)))
    reports.append(_collect("linear", pairs, tol))

    # two-layer mlp with relu
    pairs = []
    for i in range(2):
        while True:
            mlp = Mlp([LinearLayer(gen.normal(size=(6, 5)), gen.normal(size=6)),
                       LinearLayer(gen.normal(size=(4, 6)), gen.normal(size=4))])
            x = gen.normal(size=5)
            if np.min(np.abs(linear_forward(x, mlp.layers[0]))) > 1e-4:
                break
        p = gen.normal(size=4)
        gx, pgrads = mlp_backward(x, mlp, p)

        def loss_of(x_=None, w0=None, b0=None, w1=None, b1=None):
            l0, l1 = mlp.layers
            m = Mlp([LinearLayer(l0.weight if w0 is None else w0, l0.bias if b0 is None else b0),
                     LinearLayer(l1.weight if w1 is None else w1, l1.bias if b1 is None else b1)])
            return p @ mlp_forward(x if x_ is None else x_, m)

        pairs.append((f"mlp[{i}].x", gx, fd_gradient(lambda v: loss_of(x_=v), x, h)))
        pairs.append((f"mlp[{i}].w0", pgrads[0][0], fd_gradient(lambda w: loss_of(w0=w), mlp.layers[0].weight, h)))
        pairs.append((f"mlp[{i}].b0", pgrads[0][1], fd_gradient(lambda b: loss_of(b0=b), mlp.layers[0].bias, h)))
        pairs.append((f"mlp[{i}].w1", pgrads[1][0], fd_gradient(lambda w: loss_of(w1=w), mlp.layers[1].weight, h)))
        pairs.append((f"mlp[{i}].b1", pgrads[1][1], fd_gradient(lambda b: loss_of(b1=b), mlp.layers[1].bias, h)))
    reports.append(_collect("mlp", pairs, tol))

    # layer norm
    pairs = []
    for i in range(5):
        x = gen.normal(size=8)
        gamma = gen.normal(size=8)
        beta = gen.normal(size=8)
        p = gen.normal(size=8)
        gx, gg, gb = layer_norm_backward(x, gamma, p)
        pairs.append((f"layer_norm[{i}].x", gx,
                      fd_gradient(lambda v: p @ layer_norm(v, gamma, beta), x, h)))
        pairs.append((f"layer_norm[{i}].gamma", gg,
                      fd_gradient(lambda g: p @ layer_norm(x, g, beta), gamma, h)))
        pairs.append((f"layer_norm[{i}].beta", gb,
                      fd_gradient(lambda b: p @ layer_norm(x, gamma, b), beta, h)))
    reports.append(_collect("layer_norm", pairs, tol))

    # sigmoid
    pairs = []
    for i in range(10):
        x = gen.normal(size=10) * 2.0
        p = gen.normal(size=10)
        grad = sigmoid_backward(sigmoid(x), p)
        pairs.append((f"sigmoid[{i}].x", grad, fd_gradient(lambda v: p @ sigmoid(v), x, h)))
    reports.append(_collect("sigmoid", pairs, tol))

    # softmax
    pairs = []
    for i in range(17):
        x = gen.normal(size=6)
        p = gen.normal(size=6)
        grad = softmax_backward(softmax(x), p)
        pairs.append((f"softmax[{i}].x", grad, fd_gradient(lambda v: p @ softmax(v), x, h)))
    reports.append(_collect("softmax", pairs, tol))

    # cross entropy
    pairs = []
    for i in range(5):
        logits = gen.normal(size=(5, 4))
        labels = gen.integers(0, 4, size=5)
        weights = gen.uniform(0.5, 2.0, size=4)
        _, grad = cross_entropy_loss(logits, labels, weights)
        pairs.append((f"cross_entropy[{i}].logits", grad,
                      fd_gradient(lambda L: cross_entropy_loss(L, labels, weights)[0], logits, h)))
    reports.append(_collect("cross_entropy", pairs, tol))

    # lovasz softmax; resample near sort ties where the subgradient jumps
    pairs = []
    for i in range(6):
        while True:
            raw = gen.uniform(0.05, 1.0, size=(6, 3))
            probs = raw / raw.sum(axis=1, keepdims=True)
            labels = gen.integers(0, 3, size=6)
            if _lovasz_far_from_ties(probs, labels, 1e-3):
                break
        _, grad = lovasz_softmax_loss(probs, labels)
        pairs.append((f"lovasz[{i}].probs", grad,
                      fd_gradient(lambda P: lovasz_softmax_loss(P, labels)[0], probs, h)))
    reports.append(_collect("lovasz_softmax", pairs, tol))

    return reports


def _lovasz_far_from_ties(probs: np.ndarray, labels: np.ndarray, gap: float) -> bool:
    for cls in np.unique(labels):
        fg = labels == cls
        err = np.where(fg, 1.0 - probs[:, cls], probs[:, cls])
        s = np.sort(err)
        if s.size > 1 and np.min(np.diff(s)) < gap:
            return False
    return True
