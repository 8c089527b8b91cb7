"""Virtual outlier synthesis over per-pixel logit vectors.

Per-pixel logit vectors are pooled into fixed-capacity FIFO queues, one per
ground-truth class. From the queue contents we fit per-class means with a
single covariance shared across classes, then draw candidate vectors from
each class Gaussian and keep the lowest-density ones: points out in the
tails, near the decision boundary. Selected vectors are spliced into a copy
of the logit map to form the synthetic map that drives the uncertainty
loss; the spliced entries are constants as far as gradients are concerned.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigError, DataError, NumericalError, NotReadyError

DEFAULT_QUEUE_CAPACITY = 5000
RIDGE_BASE = 1e-4
RIDGE_MAX_DOUBLINGS = 10


class ClassQueue:
    """Fixed-capacity FIFO of per-pixel logit vectors for one class."""

    def __init__(self, class_id, capacity=DEFAULT_QUEUE_CAPACITY):
        if capacity < 1:
            raise ConfigError("queue capacity must be >= 1")
        self.class_id = class_id
        self.capacity = capacity
        self.entries = deque(maxlen=capacity)

    def __len__(self):
        return len(self.entries)

    def push(self, vector):
        self.entries.append(np.asarray(vector, dtype=np.float64))

    def as_array(self, dim):
        if not self.entries:
            return np.zeros((0, dim), dtype=np.float64)
        return np.stack(self.entries)

    def load(self, rows):
        """Replace contents with the given (n, m) array, oldest first."""
        self.entries.clear()
        for row in np.asarray(rows, dtype=np.float64):
            self.entries.append(row)


def make_queues(k_classes, capacity=DEFAULT_QUEUE_CAPACITY):
    return {k: ClassQueue(k, capacity) for k in range(k_classes)}


def enqueue_pixels(queues, logits, target, n_per_image, seed):
    """Push seeded-random pixel logit vectors onto their class queues.

    Positions are drawn uniformly without replacement across the whole
    image (clamped to the pixel count), and each chosen pixel's logit
    vector goes to the queue of its ground-truth class.
    """
    if n_per_image < 1:
        raise ConfigError("n_per_image must be >= 1")
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target)
    if logits.shape[:2] != target.shape:
        raise DataError(f"logits {logits.shape[:2]} vs target {target.shape}")
    h, w = target.shape
    n_pixels = h * w
    n = min(n_per_image, n_pixels)
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(n_pixels, size=n, replace=False)
    flat_logits = logits.reshape(n_pixels, -1)
    flat_target = target.reshape(n_pixels)
    for idx in flat_idx:
        queues[int(flat_target[idx])].push(flat_logits[idx])
    return queues


def queues_ready(queues, dim):
    """True once every class queue can support covariance estimation."""
    return all(len(q) >= dim + 1 for q in queues.values())


@dataclass
class GaussianModel:
    """Per-class means with one shared covariance and its Cholesky factor.

    ``chol`` factors ``cov + ridge * I``; sampling and densities both use
    the ridged matrix.
    """

    means: np.ndarray  # (k_classes, m)
    cov: np.ndarray  # (m, m), shared across classes
    chol: np.ndarray  # (m, m) lower triangular
    ridge: float
    n_samples: int = 0

    @property
    def k_classes(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]


def _ridged_cholesky(cov):
    ridge = RIDGE_BASE
    for _ in range(RIDGE_MAX_DOUBLINGS + 1):
        try:
            return np.linalg.cholesky(cov + ridge * np.eye(cov.shape[0])), ridge
        except np.linalg.LinAlgError:
            ridge *= 2.0
    raise NumericalError(
        f"covariance factorization failed even with ridge {ridge / 2.0}"
    )


def estimate(queues):
    """Fit the class-conditional Gaussians from current queue contents.

    Per-class means; covariance pooled over all queued entries around
    their own class mean, normalized by the total count. Raises
    NotReadyError while any queue is underfilled.
    """
    classes = sorted(queues)
    sample = next((q.entries[0] for q in queues.values() if len(q)), None)
    if sample is None:
        raise NotReadyError("all queues are empty")
    dim = sample.shape[0]
    if not queues_ready(queues, dim):
        counts = {k: len(q) for k, q in queues.items()}
        raise NotReadyError(f"queues underfilled for m={dim}: {counts}")

    means = np.zeros((len(classes), dim))
    total = 0
    scatter = np.zeros((dim, dim))
    for row, k in enumerate(classes):
        data = queues[k].as_array(dim)
        means[row] = data.mean(axis=0)
        centered = data - means[row]
        scatter += centered.T @ centered
        total += data.shape[0]
    cov = scatter / total
    chol, ridge = _ridged_cholesky(cov)
    return GaussianModel(means=means, cov=cov, chol=chol, ridge=ridge, n_samples=total)


def log_density(model, k, vectors):
    """Log of the ridged Gaussian density for one or many vectors."""
    v = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    centered = v - model.means[k]
    y = solve_triangular(model.chol, centered.T, lower=True)
    log_det = 2.0 * np.sum(np.log(np.diag(model.chol)))
    m = model.dim
    quad = np.sum(y * y, axis=0)
    return -0.5 * (m * np.log(2.0 * np.pi) + log_det + quad)


def density(model, k, vector):
    """Multivariate normal density at one point, via the Cholesky factor."""
    out = np.exp(log_density(model, k, vector))
    return float(out[0]) if np.ndim(vector) == 1 else out


@dataclass
class OutlierBatch:
    """Lowest-density draws for one class, sorted by density ascending."""

    class_id: int
    vectors: np.ndarray  # (selection_count, m)
    densities: np.ndarray  # matching, nondecreasing
    epsilon: float  # largest selected density: the sublevel boundary


def draw_candidates(model, k, n, seed):
    """The raw pre-selection sampling stream: n draws plus their densities."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, model.dim))
    vectors = model.means[k] + z @ model.chol.T
    return vectors, np.exp(log_density(model, k, vectors))


def sample_outliers(model, k, sample_size, selection_count, seed):
    """Keep the ``selection_count`` lowest-density draws out of ``sample_size``.

    The boundary density of the kept set is reported as epsilon, so every
    selected vector lies inside the epsilon-sublevel set of the class
    Gaussian. Ties break by draw index.
    """
    if selection_count < 1 or selection_count > sample_size:
        raise ConfigError(
            f"need 1 <= selection_count <= sample_size, got {selection_count}/{sample_size}"
        )
    vectors, densities = draw_candidates(model, k, sample_size, seed)
    order = np.argsort(densities, kind="stable")[:selection_count]
    picked = densities[order]
    return OutlierBatch(
        class_id=k,
        vectors=vectors[order],
        densities=picked,
        epsilon=float(picked[-1]),
    )


def build_synthetic_map(logits, target, batches, substitution_fraction, seed):
    """Splice outlier vectors into a copy of the logit map.

    For every class with a batch, a seeded uniform subset of that class's
    pixels (round(fraction * count), at least 1 when the fraction is
    positive) is replaced by consecutive batch vectors, cycling if the
    batch runs out. Returns ``(synthetic_logits, substituted_mask)``; the
    target is untouched and substituted entries carry no gradient.
    """
    if not 0.0 <= substitution_fraction <= 1.0:
        raise ConfigError("substitution_fraction must lie in [0, 1]")
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target)
    if logits.shape[:2] != target.shape:
        raise DataError(f"logits {logits.shape[:2]} vs target {target.shape}")
    synthetic = logits.copy()
    substituted = np.zeros(target.shape, dtype=bool)
    if substitution_fraction == 0.0:
        return synthetic, substituted

    h, w = target.shape
    flat_target = target.reshape(-1)
    flat_syn = synthetic.reshape(h * w, -1)
    rng = np.random.default_rng(seed)
    for k in sorted(batches):
        positions = np.flatnonzero(flat_target == k)
        if positions.size == 0:
            continue
        batch = batches[k]
        if batch is None or len(batch.vectors) == 0:
            raise DataError(f"empty outlier batch for class {k} present in the target")
        n_sub = int(np.floor(substitution_fraction * positions.size + 0.5))
        n_sub = max(1, min(n_sub, positions.size))
        chosen = np.sort(rng.choice(positions.size, size=n_sub, replace=False))
        picks = positions[chosen]
        flat_syn[picks] = batch.vectors[np.arange(n_sub) % len(batch.vectors)]
        substituted.reshape(-1)[picks] = True
    return synthetic, substituted


def queues_to_arrays(queues, dim):
    """Snapshot queue contents (oldest first) for checkpointing."""
    return {k: q.as_array(dim) for k, q in queues.items()}


def queues_from_arrays(arrays, capacity):
    """Rebuild queues from a checkpoint snapshot."""
    queues = {}
    for k, rows in arrays.items():
        q = ClassQueue(k, capacity)
        q.load(rows)
        queues[k] = q
    return queues
