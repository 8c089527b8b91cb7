"""Reference segmentation network and its training machinery.

The network is deliberately small: conv3x3 (C -> 8) + ReLU, conv3x3
(8 -> 16) + ReLU, conv1x1 (16 -> K), stride 1, zero same-padding, so the
logit map keeps the input resolution. All arithmetic runs in float64 and
gradients are exact reverse-mode derivatives computed by hand, which keeps
runs bit-reproducible and lets finite-difference checks use tight
tolerances.

Any callable with the same (params, image) -> logits contract plugs into
the trainer; only the loss path below assumes this architecture.
"""

import json
import os
from dataclasses import asdict, dataclass, field
import numpy as np

from .errors import CheckpointError, DataError, NumericalError
from .losses import (
    ce_grad,
    ce_loss,
    combine,
    dice_grad_logits,
    dice_loss,
    LossReport,
    softmax,
)

CHECKPOINT_VERSION = 1


def default_spec(in_channels=1, classes=2, hidden1=8, hidden2=16):
    return {
        "in_channels": int(in_channels),
        "hidden1": int(hidden1),
        "hidden2": int(hidden2),
        "classes": int(classes),
    }


def _layout(spec):
    c, h1, h2, k = spec["in_channels"], spec["hidden1"], spec["hidden2"], spec["classes"]
    return [
        ("w1", (3, 3, c, h1)),
        ("b1", (h1,)),
        ("w2", (3, 3, h1, h2)),
        ("b2", (h2,)),
        ("w3", (h2, k)),
        ("b3", (k,)),
    ]


def param_count(spec):
    return sum(int(np.prod(shape)) for _, shape in _layout(spec))


@dataclass
class SegmenterParams:
    """Layer spec plus the flat parameter vector (float64)."""

    spec: dict
    theta: np.ndarray
    version: int = CHECKPOINT_VERSION

    def views(self):
        """Named reshaped views into ``theta``; writes propagate."""
        out = {}
        offset = 0
        for name, shape in _layout(self.spec):
            n = int(np.prod(shape))
            out[name] = self.theta[offset : offset + n].reshape(shape)
            offset += n
        return out

    def copy(self):
        return SegmenterParams(dict(self.spec), self.theta.copy(), self.version)


def init_params(spec, seed):
    """Glorot-uniform weights from a seeded generator; zero biases."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(param_count(spec), dtype=np.float64)
    params = SegmenterParams(dict(spec), theta)
    views = params.views()
    for name, shape in _layout(spec):
        if name.startswith("b"):
            continue
        if name == "w3":
            fan_in, fan_out = shape[0], shape[1]
        else:
            fan_in = shape[0] * shape[1] * shape[2]
            fan_out = shape[0] * shape[1] * shape[3]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        views[name][...] = rng.uniform(-bound, bound, size=shape)
    return params


def _as_chw_image(img, spec):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] != spec["in_channels"]:
        raise DataError(
            f"image has {img.shape[2]} channels but the model expects {spec['in_channels']}"
        )
    return img


def _im2col3(x):
    """(H, W, C) -> (H*W, 9*C) patches under zero same-padding."""
    h, w, c = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    s0, s1, s2 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(h, w, 3, 3, c), strides=(s0, s1, s0, s1, s2)
    )
    return win.reshape(h * w, 9 * c)


def _col2im3(dcols, h, w, c):
    """Scatter-add (H*W, 9*C) gradients back to the (H, W, C) input."""
    dxp = np.zeros((h + 2, w + 2, c), dtype=np.float64)
    d = dcols.reshape(h, w, 3, 3, c)
    for dy in range(3):
        for dx in range(3):
            dxp[dy : dy + h, dx : dx + w] += d[:, :, dy, dx, :]
    return dxp[1 : h + 1, 1 : w + 1]


@dataclass
class ForwardCache:
    """Intermediates kept for the backward pass."""

    shape: tuple
    cols1: np.ndarray
    z1: np.ndarray
    cols2: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    logits: np.ndarray


def forward(params, img):
    """Run the network; returns logits shaped (H, W, K)."""
    return forward_cached(params, img).logits


def forward_cached(params, img):
    x = _as_chw_image(img, params.spec)
    h, w, _ = x.shape
    v = params.views()

    cols1 = _im2col3(x)
    z1 = cols1 @ v["w1"].reshape(-1, params.spec["hidden1"]) + v["b1"]
    a1 = np.maximum(z1, 0.0)

    cols2 = _im2col3(a1.reshape(h, w, params.spec["hidden1"]))
    z2 = cols2 @ v["w2"].reshape(-1, params.spec["hidden2"]) + v["b2"]
    a2 = np.maximum(z2, 0.0)

    logits = (a2 @ v["w3"] + v["b3"]).reshape(h, w, params.spec["classes"])
    return ForwardCache((h, w), cols1, z1, cols2, z2, a2, logits)


def backward(params, cache, dlogits):
    """Backpropagate d(loss)/d(logits) to a flat parameter gradient."""
    spec = params.spec
    v = params.views()
    h, w = cache.shape
    dl = dlogits.reshape(-1, spec["classes"])

    dw3 = cache.a2.T @ dl
    db3 = dl.sum(axis=0)
    da2 = dl @ v["w3"].T

    dz2 = da2 * (cache.z2 > 0.0)
    dw2 = cache.cols2.T @ dz2
    db2 = dz2.sum(axis=0)
    dcols2 = dz2 @ v["w2"].reshape(-1, spec["hidden2"]).T
    da1 = _col2im3(dcols2, h, w, spec["hidden1"]).reshape(-1, spec["hidden1"])

    dz1 = da1 * (cache.z1 > 0.0)
    dw1 = cache.cols1.T @ dz1
    db1 = dz1.sum(axis=0)

    grad = np.concatenate(
        [dw1.ravel(), db1.ravel(), dw2.ravel(), db2.ravel(), dw3.ravel(), db3.ravel()]
    )
    return grad


def loss_and_grad(params, img, target, loss_spec, synthetic=None):
    """Objective value and exact parameter gradient for one image.

    ``synthetic`` is either None (no uncertainty term), a prebuilt
    ``(synthetic_logits, substituted_mask)`` pair, or a callable mapping
    the forward logits to that pair. Substituted logit vectors are
    constants: no gradient flows through them, only through the untouched
    pixels of the synthetic map.
    """
    cache = forward_cached(params, img)
    if callable(synthetic):
        synthetic = synthetic(cache.logits)
    return loss_and_grad_cached(params, cache, target, loss_spec, synthetic)


def loss_and_grad_cached(params, cache, target, loss_spec, synthetic=None):
    """Same as ``loss_and_grad`` but reuses an existing forward pass."""
    logits = cache.logits
    target = np.asarray(target)
    if target.shape != cache.shape:
        raise DataError(f"target {target.shape} does not match image {cache.shape}")

    ce = ce_loss(logits, target)
    dice = dice_loss(softmax(logits)[..., 1], target)
    grads = {
        "ce": ce_grad(logits, target),
        "dice": dice_grad_logits(logits, target),
    }
    ce_out = dice_out = None
    if synthetic is not None:
        syn_logits, substituted = synthetic
        ce_out = ce_loss(syn_logits, target)
        dice_out = dice_loss(softmax(syn_logits)[..., 1], target)
        g_ce_out = ce_grad(syn_logits, target)
        g_dice_out = dice_grad_logits(syn_logits, target)
        g_ce_out[substituted] = 0.0
        g_dice_out[substituted] = 0.0
        grads["ce_out"] = g_ce_out
        grads["dice_out"] = g_dice_out

    combined, grad_weights, applied = combine(
        ce,
        dice,
        ce_out,
        dice_out,
        strategy=loss_spec.strategy,
        lam=loss_spec.lam,
        beta=loss_spec.beta,
        lam1=loss_spec.lam1,
        lam2=loss_spec.lam2,
        beta1=loss_spec.beta1,
        beta2=loss_spec.beta2,
    )

    dlogits = np.zeros_like(logits)
    for name, weight in grad_weights.items():
        if weight != 0.0:
            dlogits += weight * grads[name]
    grad = backward(params, cache, dlogits)
    if not np.isfinite(grad).all():
        raise NumericalError("non-finite parameter gradient")

    report = LossReport(
        ce=ce,
        dice=dice,
        ce_out=ce_out,
        dice_out=dice_out,
        combined=combined,
        strategy=applied,
        weights={
            "lam": loss_spec.lam,
            "beta": loss_spec.beta,
            "lam1": loss_spec.lam1,
            "lam2": loss_spec.lam2,
            "beta1": loss_spec.beta1,
            "beta2": loss_spec.beta2,
        },
    )
    return report, grad


@dataclass
class OptimHyper:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    gamma: float = 0.98


@dataclass
class OptimState:
    velocity: np.ndarray
    hyper: OptimHyper = field(default_factory=OptimHyper)
    step: int = 0
    epoch: int = 0


def init_optim(params, hyper=None):
    return OptimState(np.zeros_like(params.theta), hyper or OptimHyper())


def lr_at(hyper, epoch):
    """Exponential decay: lr0 * gamma ** epoch."""
    if epoch < 0:
        raise DataError("epoch must be >= 0")
    return hyper.lr0 * hyper.gamma**epoch


def sgd_step(state, params, grads):
    """Momentum SGD with L2 decay folded into the gradient.

    v <- momentum * v + g + weight_decay * theta;  theta <- theta - lr * v.
    """
    if grads.shape != params.theta.shape:
        raise DataError("gradient length does not match parameter count")
    if not np.isfinite(grads).all():
        raise NumericalError("non-finite gradients passed to sgd_step")
    lr = lr_at(state.hyper, state.epoch)
    state.velocity *= state.hyper.momentum
    state.velocity += grads + state.hyper.weight_decay * params.theta
    params.theta -= lr * state.velocity
    state.step += 1
    return state, params


def save_checkpoint(params, optim, path, queues=None):
    """Write a self-describing checkpoint.

    Layout: one JSON header line (version, layer spec, hyper, counters,
    block table) followed by little-endian float64 blocks. Optional class
    queues ride along so interrupted outlier-phase runs resume bit-exactly.
    """
    blocks = [("theta", params.theta.ravel()), ("velocity", optim.velocity.ravel())]
    queue_meta = None
    if queues is not None:
        queue_meta = {}
        for k in sorted(queues):
            arr = np.asarray(queues[k], dtype=np.float64)
            if arr.ndim == 1:
                arr = arr.reshape(0, params.spec["classes"])
            queue_meta[str(k)] = [int(arr.shape[0]), int(arr.shape[1])]
            blocks.append((f"queue_{k}", arr.ravel()))
    header = {
        "version": params.version,
        "spec": params.spec,
        "hyper": asdict(optim.hyper),
        "step": optim.step,
        "epoch": optim.epoch,
        "blocks": [[name, int(b.size)] for name, b in blocks],
        "queues": queue_meta,
    }
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("utf-8"))
        for _, b in blocks:
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint; returns (params, optim, queues-or-None).

    Fails whole: a bad header or truncated payload raises before any
    state object is constructed.
    """
    try:
        with open(path, "rb") as fh:
            header_line = fh.readline()
            payload = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {header.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    block_table = header["blocks"]
    expected = sum(n for _, n in block_table) * 8
    if len(payload) < expected:
        raise CheckpointError(
            f"truncated checkpoint payload in {path}: {len(payload)} < {expected} bytes"
        )
    arrays = {}
    offset = 0
    for name, n in block_table:
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).copy()
        offset += n * 8

    spec = header["spec"]
    if arrays["theta"].size != param_count(spec):
        raise CheckpointError("parameter block does not match the layer spec")
    params = SegmenterParams(spec, arrays["theta"], header["version"])
    optim = OptimState(
        velocity=arrays["velocity"],
        hyper=OptimHyper(**header["hyper"]),
        step=header["step"],
        epoch=header["epoch"],
    )
    queues = None
    if header.get("queues") is not None:
        queues = {}
        for key, (count, dim) in header["queues"].items():
            queues[int(key)] = arrays[f"queue_{key}"].reshape(count, dim)
    return params, optim, queues
