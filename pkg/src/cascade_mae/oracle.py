"""Linear autoencoder analysis of masked reconstruction.

Each sample ``x`` (a column of length d) is corrupted m times by zeroing
patches; ``X_tilde`` stacks the corrupted columns and ``X_bar`` the matching
originals. The best linear reconstruction is the ridge solution
``W* = X_bar X_tilde^T (X_tilde X_tilde^T + lam I)^-1``.

Residuals are reported per column: ``0.5 * ||X_bar - W X_tilde||_F^2 / N``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import BERNOULLI, FIXED, MaskPlan, PatchSequence, count_mask_variants, sample_mask, visible_count
from .linalg import default_ridge, linear_solve_ridge
from .mae import MaeParams, reconstruct
from .rng import RngStream, as_stream


@dataclass(frozen=True)
class Corruption:
    ratio: float = 0.5
    semantics: str = BERNOULLI
    patch_size: int = 1  # consecutive coordinates forming one patch
    seed: int = 0


@dataclass
class LinearAEProblem:
    X: np.ndarray  # [d, n]
    m: int
    corruption: Corruption
    X_tilde: np.ndarray  # [d, n*m]; column j*n + i is variant j of sample i
    X_bar: np.ndarray  # [d, n*m]
    visible: np.ndarray  # [n*m, B] patch visibility per column

    @property
    def d(self) -> int:
        return self.X.shape[0]

    @property
    def num_patches(self) -> int:
        return self.d // self.corruption.patch_size


@dataclass
class LinearSolution:
    W: np.ndarray
    lam: float
    residual: float


def residual(W, A, B) -> float:
    r = B - W @ A
    return 0.5 * float(np.einsum("ij,ij->", r, r)) / A.shape[1]


def objective(W, A, B, lam) -> float:
    return residual(W, A, B) + 0.5 * lam * float((W * W).sum()) / A.shape[1]


def build_problem(X, m: int, corruption: Corruption = Corruption(),
                  rng: RngStream | int | None = None) -> LinearAEProblem:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be d x n")
    if m < 1:
        raise ValueError("need at least one variant")
    d, n = X.shape
    ps = corruption.patch_size
    if d % ps:
        raise ValueError(f"d={d} is not a multiple of patch size {ps}")
    B = d // ps
    rng = as_stream(corruption.seed if rng is None else rng)
    vis = []
    for j in range(m):
        if corruption.ratio == 0:
            vis.append(np.ones((n, B), dtype=bool))
        else:
            plan = sample_mask(n, B, corruption.ratio, corruption.semantics, rng.derive("variant", j))
            vis.append(plan.visible)
    visible = np.concatenate(vis)  # [n*m, B]
    X_bar = np.tile(X, (1, m))
    coord_mask = np.repeat(visible, ps, axis=1).T  # [d, n*m]
    return LinearAEProblem(X, m, corruption, X_bar * coord_mask, X_bar, visible)


def concat_problems(problems: list[LinearAEProblem]) -> LinearAEProblem:
    if not problems:
        raise ValueError("no problems")
    d = problems[0].d
    if any(p.d != d for p in problems):
        raise ValueError("problems disagree on dimension d")
    return LinearAEProblem(
        np.concatenate([p.X for p in problems], axis=1),
        problems[0].m,
        problems[0].corruption,
        np.concatenate([p.X_tilde for p in problems], axis=1),
        np.concatenate([p.X_bar for p in problems], axis=1),
        np.concatenate([p.visible for p in problems]),
    )


def _solve(A, B, lam) -> LinearSolution:
    lam = default_ridge(A) if lam is None else float(lam)
    W = linear_solve_ridge(A, B, lam)
    return LinearSolution(W, lam, residual(W, A, B))


def solve_client(problem: LinearAEProblem, lam: float | None = None) -> LinearSolution:
    """Closed-form optimum of one client's aggregated variants."""
    return _solve(problem.X_tilde, problem.X_bar, lam)


def solve_global(problems: list[LinearAEProblem], lam: float | None = None) -> LinearSolution:
    """Closed-form optimum over the variants of all clients together."""
    merged = concat_problems(problems)
    return _solve(merged.X_tilde, merged.X_bar, lam)


def gd_linear_ae(problem: LinearAEProblem, steps: int, lr: float | None = None,
                 lam: float = 0.0, rng: RngStream | int = 0, history: list | None = None,
                 max_halvings: int = 30) -> np.ndarray:
    """Full-batch gradient descent on the per-column ridge objective.

    Starts from a small random ``W``. ``lr`` defaults to ``1/L`` for the
    objective's Lipschitz constant ``L``; a step that raises the objective is
    undone and retried with half the rate.
    """
    A, B = problem.X_tilde, problem.X_bar
    N = A.shape[1]
    gen = as_stream(rng).derive("gd_init").generator()
    W = 0.01 * gen.standard_normal((B.shape[0], A.shape[0]))
    G = A @ A.T / N
    C = B @ A.T / N
    reg = lam / N
    if lr is None:
        lr = 1.0 / (np.linalg.eigvalsh(G)[-1] + reg)
    f = objective(W, A, B, lam)
    if history is not None:
        history.append(f)
    halvings = 0
    for _ in range(steps):
        grad = W @ G - C + reg * W
        W_new = W - lr * grad
        f_new = objective(W_new, A, B, lam)
        if np.isfinite(f_new) and f_new > f and f_new - f <= 1e-13 * abs(f):
            break  # converged: the step only moves round-off
        if not np.isfinite(f_new) or f_new > f:
            halvings += 1
            if halvings > max_halvings:
                raise FloatingPointError("gradient descent diverged after repeated step halving")
            lr *= 0.5
            continue
        W, f = W_new, f_new
        if history is not None:
            history.append(f)
    return W


def rank_one_factorize(W, r: int):
    """Best rank-r split ``W ~ W_g @ W_h`` (decoder d x r, encoder r x d) by truncated SVD."""
    W = np.asarray(W, dtype=np.float64)
    if not 1 <= r <= min(W.shape):
        raise ValueError(f"rank {r} outside [1, {min(W.shape)}]")
    U, s, Vt = np.linalg.svd(W)
    root = np.sqrt(s[:r])
    W_g = U[:, :r] * root
    W_h = root[:, None] * Vt[:r]
    return W_g, W_h, float(np.linalg.norm(W - W_g @ W_h))


def distinct_columns(M) -> int:
    return len({col.tobytes() for col in np.ascontiguousarray(np.asarray(M).T)})


def variant_bound(problem: LinearAEProblem) -> int | None:
    """``n * C(B, b)`` for fixed-count corruption, else None."""
    c = problem.corruption
    if c.semantics != FIXED or c.ratio == 0:
        return None
    B = problem.num_patches
    return count_mask_variants(problem.X.shape[1], B, visible_count(B, c.ratio))


# nonlinear model vs linear picture ------------------------------------------------

@dataclass
class GapReport:
    fit_relative_residual: float  # ||R - W_fit X~|| / ||R||
    model_loss: float  # 0.5*||X - R||^2 / N
    linear_fit_loss: float  # residual of W_fit against the originals
    closed_form_loss: float  # residual of W* against the originals
    lam: float
    extra: dict = field(default_factory=dict)


def _flat(seq: PatchSequence) -> np.ndarray:
    return seq.patches.reshape(len(seq), -1).astype(np.float64).T


def linearization_gap(model, data: PatchSequence, masks: MaskPlan,
                      lam: float | None = None) -> GapReport:
    """Fit the best linear map from corrupted inputs to the model's reconstructions.

    ``model`` is an MAE (its masked reconstruction is used) or any callable
    ``(data, masks) -> PatchSequence``.
    """
    if len(data) == 0:
        raise ValueError("no data")
    recon_fn: Callable = (lambda s, p: reconstruct(model, s, p)) if isinstance(model, MaeParams) else model
    X = _flat(data)
    Xt = _flat(PatchSequence(data.patches * masks.visible[..., None], data.geometry))
    R = _flat(recon_fn(data, masks))
    lam = default_ridge(Xt) if lam is None else float(lam)
    W_fit = linear_solve_ridge(Xt, R, lam)
    W_star = linear_solve_ridge(Xt, X, lam)
    diff = R - X
    return GapReport(
        fit_relative_residual=float(np.linalg.norm(R - W_fit @ Xt) / max(np.linalg.norm(R), 1e-300)),
        model_loss=0.5 * float((diff * diff).sum()) / X.shape[1],
        linear_fit_loss=residual(W_fit, Xt, X),
        closed_form_loss=residual(W_star, Xt, X),
        lam=lam,
    )


@dataclass
class EquivalenceRecord:
    z: np.ndarray
    z_tilde: np.ndarray
    delta_z: np.ndarray
    max_abs_error: float
    norm: float

    @property
    def holds(self) -> bool:
        return self.max_abs_error <= 1e-12


def corruption_equivalence(W_h, x, visible) -> EquivalenceRecord:
    """For a linear encoder, ``z - z~`` equals ``W_h (x - x~)`` with ``x~`` the zero-masked input."""
    W_h = np.asarray(W_h, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    vis = np.asarray(visible, dtype=bool)
    if vis.size != x.size:
        vis = np.repeat(vis, x.size // vis.size)
    xt = x * vis
    z, zt = W_h @ x, W_h @ xt
    dz = z - zt
    err = float(np.abs(dz - W_h @ (x - xt)).max(initial=0.0))
    return EquivalenceRecord(z, zt, dz, err, float(np.linalg.norm(dz)))


# client-count sweep ------------------------------------------------------------

ORACLE_HEADER = ("K", "n", "m", "p", "lambda", "residual_closed_form", "residual_gd", "gap")


def oracle_sweep(d: int, n: int, m: int, ratios, client_counts, seed: int = 0,
                 gd_steps: int = 2000, semantics: str = BERNOULLI,
                 patch_size: int = 1) -> list[tuple]:
    """Closed form vs gradient descent across client counts; ``gap`` is gd minus closed form.

    Each client holds ``n`` samples drawn from a shared low-rank source. The
    closed-form residual is measured on the pooled training variants.
    """
    root = RngStream(seed)
    gen = root.derive("basis").generator()
    basis = gen.standard_normal((d, max(1, d // 2)))
    rows = []
    for p in ratios:
        corr = Corruption(p, semantics, patch_size, seed)
        for K in client_counts:
            probs = []
            for k in range(K):
                cg = root.derive("client", k).generator()
                X = basis @ cg.standard_normal((basis.shape[1], n)) + 0.1 * cg.standard_normal((d, n))
                probs.append(build_problem(X, m, corr, root.derive("corrupt", k)))
            merged = concat_problems(probs)
            sol = solve_global(probs)
            W_gd = gd_linear_ae(merged, gd_steps, lam=sol.lam, rng=root.derive("gd", K))
            r_gd = residual(W_gd, merged.X_tilde, merged.X_bar)
            rows.append((K, n, m, p, sol.lam, sol.residual, r_gd, r_gd - sol.residual))
    return rows


def write_oracle_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ORACLE_HEADER)
        for r in rows:
            w.writerow([r[0], r[1], r[2], r[3], repr(r[4]), repr(r[5]), repr(r[6]), repr(r[7])])
