"""Novel classifier composition: novel class weights are linear combinations
of base classifier columns plus appended Gaussian noise columns, and only the
combination coefficients are fitted.

Logits are bias-free dot products (basis @ alpha)^T feature. Fitting runs
full-batch AdamW under a focal or Mixup-focal objective; the basis stays
frozen, so the per-sample basis projections are precomputed once.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .losses import focal_loss, focal_loss_grad
from .numerics import AdamWState, adamw_step
from .seeding import mix_seed, rng_for

ALPHA_INIT_SCALE = 1e-2

# Independent seed streams for the alpha init, the Mixup pair sampling, and
# the synthetic recovery problem.
INIT_STREAM = 0x414C5048
MIXUP_STREAM = 0x4D495855
PROBLEM_STREAM = 0x50524F42


@dataclass
class OptimizerConfig:
    lr: float = 0.05
    weight_decay: float = 1e-4

    def validate(self):
        if self.lr <= 0:
            raise ValueError(f"ncc.optimizer.lr: must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(
                f"ncc.optimizer.weight_decay: must be >= 0, got {self.weight_decay}"
            )
        return self


@dataclass
class NCCConfig:
    d: int = 64
    n_base: int = 12
    r: int = 8
    n_novel: int = 4
    samples_per_class: int = 8
    loss: str = "focal"
    iterations: int = 300
    optimizer: OptimizerConfig = None

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = OptimizerConfig()

    def validate(self):
        for name in ("d", "n_base", "n_novel", "samples_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"ncc.{name}: must be >= 1")
        if self.r < 0:
            raise ValueError(f"ncc.r: must be >= 0, got {self.r}")
        if self.iterations < 0:
            raise ValueError(f"ncc.iterations: must be >= 0, got {self.iterations}")
        if self.loss not in ("focal", "mixup_focal"):
            raise ValueError(
                f"ncc.loss: expected 'focal' or 'mixup_focal', got {self.loss!r}"
            )
        self.optimizer.validate()
        return self


@dataclass
class ComposedClassifier:
    theta_base: np.ndarray
    noise: np.ndarray
    alpha: np.ndarray
    d: int
    seed: int

    @property
    def basis(self):
        return np.concatenate([self.theta_base, self.noise], axis=1)

    @property
    def theta_novel(self):
        return compose(self.basis, self.alpha)


def build_basis(theta_base, r, seed, unit_normalize=False):
    """Append r seeded standard-Gaussian columns to the base classifiers.

    Columns are unscaled by default; unit_normalize rescales the noise
    columns to unit length."""
    theta_base = np.asarray(theta_base, dtype=np.float64)
    if theta_base.ndim != 2 or theta_base.shape[0] < 1:
        raise ValueError(f"build_basis: theta_base must be d x n_base, got {theta_base.shape}")
    if r < 0:
        raise ValueError(f"build_basis: r must be >= 0, got {r}")
    d = theta_base.shape[0]
    noise = rng_for(seed).normal(0.0, 1.0, (d, r))
    if unit_normalize and r > 0:
        noise = noise / np.linalg.norm(noise, axis=0, keepdims=True)
    return np.concatenate([theta_base, noise], axis=1)


def compose(basis, alpha):
    """theta_novel = basis @ alpha, shape d x n_novel."""
    basis = np.asarray(basis, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if basis.ndim != 2 or alpha.ndim != 2 or basis.shape[1] != alpha.shape[0]:
        raise ValueError(
            f"compose: incompatible shapes basis {basis.shape} vs alpha {alpha.shape}"
        )
    return basis @ alpha


def predict_logits(basis, alpha, features):
    """Bias-free logits (basis @ alpha)^T x for one feature or a batch."""
    features = np.asarray(features, dtype=np.float64)
    return features @ compose(basis, alpha)


def numerical_rank(matrix, rel_tol=1e-6):
    """Rank by singular values above rel_tol times the largest one."""
    s = np.linalg.svd(np.asarray(matrix, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int((s > rel_tol * s[0]).sum())


def _one_hot(labels, n_classes):
    out = np.zeros((labels.size, n_classes), dtype=np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return out


def fit_alpha(basis, dataset, loss="focal", iterations=500, lr=0.05, seed=0,
              n_novel=None, weight_decay=1e-4, focal_alpha=0.25,
              focal_gamma=2.0, mixup_beta=2.0):
    """Fit the combination coefficients by full-batch AdamW; the basis is
    frozen. Returns (alpha, loss_trace) with iterations+1 trace entries, the
    final loss last. Losses are means over samples of the per-class focal sum.

    alpha starts as seeded Gaussian noise scaled by 1e-2. Mixup draws a fresh
    pairing permutation and per-pair Beta(2,2) weights each iteration."""
    if loss not in ("focal", "mixup_focal"):
        raise ValueError(f"fit_alpha: loss must be 'focal' or 'mixup_focal', got {loss!r}")
    if not dataset:
        raise ValueError("fit_alpha: dataset is empty")
    basis = np.asarray(basis, dtype=np.float64)
    features = np.stack([np.asarray(f, dtype=np.float64) for f, _ in dataset])
    labels = np.asarray([int(label) for _, label in dataset])
    if features.shape[1] != basis.shape[0]:
        raise ValueError(
            f"fit_alpha: feature dim {features.shape[1]} vs basis rows {basis.shape[0]}"
        )
    if labels.min() < 0:
        raise ValueError("fit_alpha: labels must be >= 0")
    if n_novel is None:
        n_novel = int(labels.max()) + 1
    if labels.max() >= n_novel:
        raise ValueError(f"fit_alpha: label {labels.max()} outside {n_novel} classes")

    n, m = features.shape[0], basis.shape[1]
    targets = _one_hot(labels, n_novel)
    projections = features @ basis
    alpha = rng_for(seed, INIT_STREAM).normal(0.0, 1.0, (m, n_novel)) * ALPHA_INIT_SCALE
    mix_rng = rng_for(seed, MIXUP_STREAM)
    state = AdamWState((m, n_novel), weight_decay=weight_decay)

    def focal_pass(proj, y):
        logits = proj @ alpha
        values = focal_loss(logits, y, focal_alpha, focal_gamma)
        grads = focal_loss_grad(logits, y, focal_alpha, focal_gamma)
        return values, grads, logits

    trace = []
    for _ in range(iterations):
        if loss == "focal":
            values, grads, _ = focal_pass(projections, targets)
            batch_loss = float(values.sum()) / n
            alpha_grad = projections.T @ grads / n
        else:
            perm = mix_rng.permutation(n)
            lam = mix_rng.beta(mixup_beta, mixup_beta, n)
            mixed = lam[:, None] * projections + (1.0 - lam)[:, None] * projections[perm]
            v1, g1, _ = focal_pass(mixed, targets)
            v2, g2, _ = focal_pass(mixed, targets[perm])
            batch_loss = float((lam * v1.sum(axis=1)
                                + (1.0 - lam) * v2.sum(axis=1)).sum()) / n
            mixed_grads = lam[:, None] * g1 + (1.0 - lam)[:, None] * g2
            alpha_grad = mixed.T @ mixed_grads / n
        trace.append(batch_loss)
        alpha, state = adamw_step(alpha, alpha_grad, state, lr)
    final_values = focal_loss(projections @ alpha, targets, focal_alpha, focal_gamma)
    trace.append(float(final_values.sum()) / n)
    return alpha, trace


@dataclass
class RecoveryProblem:
    theta_base: np.ndarray
    basis: np.ndarray
    alpha_star: np.ndarray
    dataset: list


def make_recovery_problem(d, n_base, r, n_novel, samples_per_class, seed,
                          margin=4.0):
    """Separable classification data whose true classifiers lie in the basis
    span: theta* = basis @ alpha*, and each feature solves theta*^T f = t for
    a target logit vector at +/- margin (with per-sample jitter)."""
    if samples_per_class < 1:
        raise ValueError("make_recovery_problem: samples_per_class must be >= 1")
    rng = rng_for(seed, PROBLEM_STREAM)
    theta_base = rng.normal(0.0, 1.0, (d, n_base))
    basis = build_basis(theta_base, r, mix_seed(seed, PROBLEM_STREAM, 1))
    alpha_star = rng.normal(0.0, 1.0, (n_base + r, n_novel))
    theta_star = basis @ alpha_star
    gram = theta_star.T @ theta_star
    dataset = []
    for c in range(n_novel):
        for _ in range(samples_per_class):
            t = -(margin + rng.uniform(0.0, 1.0, n_novel))
            t[c] = margin + rng.uniform(0.0, 1.0)
            feature = theta_star @ np.linalg.solve(gram, t)
            dataset.append((feature, c))
    return RecoveryProblem(theta_base=theta_base, basis=basis,
                           alpha_star=alpha_star, dataset=dataset)


@dataclass
class AlphaReport:
    rows: list
    top_base: list


def export_alpha(alpha, base_names, novel_names, topk):
    """Weight table (one row per basis row and novel class) plus the topk
    base classes ranked by their maximum weight over novel classes.

    Noise rows are named noise_0..noise_{r-1}; the ranking pool is the named
    base rows only. Ties keep index order."""
    alpha = np.asarray(alpha, dtype=np.float64)
    m, n_novel = alpha.shape
    n_base = len(base_names)
    if n_base > m:
        raise ValueError(f"export_alpha: {n_base} base names for {m} basis rows")
    if len(novel_names) != n_novel:
        raise ValueError(
            f"export_alpha: {len(novel_names)} novel names for {n_novel} columns"
        )
    row_names = list(base_names) + [f"noise_{i}" for i in range(m - n_base)]
    rows = []
    for k in range(m):
        for c in range(n_novel):
            rows.append((row_names[k], novel_names[c], float(alpha[k, c])))
    base_max = alpha[:n_base].max(axis=1) if n_base else np.zeros(0)
    order = np.argsort(-base_max, kind="stable")[:max(0, int(topk))]
    return AlphaReport(rows=rows, top_base=[base_names[i] for i in order])


def write_alpha_csv(path, report):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["base", "novel", "weight"])
        for base, novel, weight in report.rows:
            writer.writerow([base, novel, repr(weight)])
