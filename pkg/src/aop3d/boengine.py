"""Mixed-space optimization: GP surrogate with expected improvement for
continuous spaces partitioned by categorical choices, a random-forest
surrogate for purely discrete spaces, and a random-search baseline.

The loop is strictly sequential and fully deterministic given
(space, objective, budget, strategy, seed). Integer dimensions are
relaxed to continuous in the surrogate and rounded at evaluation time;
the rounded value is what gets recorded. Failed evaluations are recorded
as failed trials and skipped by the surrogates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

from .errors import NumericError

DEFAULT_XI = 0.01
N_CANDIDATES = 2048
N_LHS = 7  # per-partition initial design is these plus the all-zero point
LENGTH_SCALE_GRID = (0.05, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5, 2.0)
NOISE_GRID = (1e-6, 1e-4, 1e-2, 5e-2, 2e-1)
BASE_JITTER = 1e-10
MAX_JITTER = 1e-4
RF_TREES = 32
RF_INIT = 5


# ---------------------------------------------------------------------------
# search space


@dataclass(frozen=True)
class CategoricalDim:
    name: str
    choices: tuple

    def __post_init__(self):
        if not self.choices:
            raise ValueError(f"categorical dim {self.name!r} needs choices")
        object.__setattr__(self, "choices", tuple(self.choices))


@dataclass(frozen=True)
class ContinuousDim:
    name: str
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"dim {self.name!r}: lo must be < hi")


@dataclass(frozen=True)
class IntegerDim:
    name: str
    lo: int
    hi: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"dim {self.name!r}: lo must be < hi")


@dataclass(frozen=True)
class SearchSpace:
    categoricals: tuple[CategoricalDim, ...] = ()
    continuous: tuple[ContinuousDim, ...] = ()
    integers: tuple[IntegerDim, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "categoricals", tuple(self.categoricals))
        object.__setattr__(self, "continuous", tuple(self.continuous))
        object.__setattr__(self, "integers", tuple(self.integers))
        names = [d.name for d in self.categoricals + self.continuous + self.integers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate dimension names in {names}")

    @property
    def numeric(self) -> tuple:
        return self.continuous + self.integers

    def partitions(self) -> list[dict]:
        """Cartesian product of categorical assignments, in listed order."""
        if not self.categoricals:
            return [{}]
        out = []
        for combo in product(*[d.choices for d in self.categoricals]):
            out.append({d.name: v for d, v in zip(self.categoricals, combo)})
        return out

    def unit_to_config(self, unit: np.ndarray, partition: dict) -> dict:
        """Map a unit-cube vector to a config; integer dims get rounded."""
        config = dict(partition)
        for u, dim in zip(unit, self.numeric):
            v = dim.lo + float(u) * (dim.hi - dim.lo)
            if isinstance(dim, IntegerDim):
                v = int(np.rint(np.clip(v, dim.lo, dim.hi)))
            config[dim.name] = v
        return config

    def config_to_unit(self, config: dict) -> np.ndarray:
        return np.array(
            [(float(config[d.name]) - d.lo) / (d.hi - d.lo) for d in self.numeric]
        )

    def zero_config(self, partition: dict) -> dict:
        """The all-zero numeric point (clipped into range), the BO start."""
        config = dict(partition)
        for dim in self.numeric:
            v = min(max(0.0, dim.lo), dim.hi)
            config[dim.name] = int(np.rint(v)) if isinstance(dim, IntegerDim) else float(v)
        return config

    def sample_uniform(self, rng: np.random.Generator) -> dict:
        config = {}
        for d in self.categoricals:
            config[d.name] = d.choices[int(rng.integers(0, len(d.choices)))]
        for d in self.continuous:
            config[d.name] = float(rng.uniform(d.lo, d.hi))
        for d in self.integers:
            config[d.name] = int(rng.integers(d.lo, d.hi + 1))
        return config


# ---------------------------------------------------------------------------
# trials and traces


@dataclass(frozen=True)
class Trial:
    config: dict
    objective: float | None
    iteration: int
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.objective is not None


@dataclass
class Trace:
    trials: list[Trial] = field(default_factory=list)
    seed: int = 0
    strategy: str = "bayes"

    @property
    def best(self) -> Trial | None:
        ok = [t for t in self.trials if t.ok]
        if not ok:
            return None
        return max(ok, key=lambda t: (t.objective, -t.iteration))


def save_trace(trace: Trace, path) -> None:
    """Persist a trace as JSON-lines: a meta line, then one trial per line."""
    with open(path, "w") as f:
        f.write(json.dumps({"seed": trace.seed, "strategy": trace.strategy}) + "\n")
        for t in trace.trials:
            f.write(
                json.dumps(
                    {
                        "iteration": t.iteration,
                        "config": t.config,
                        "objective": t.objective,
                        "error": t.error,
                    }
                )
                + "\n"
            )


def load_trace(path) -> Trace:
    with open(path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or "seed" not in lines[0]:
        raise ValueError(f"{path}: missing trace meta line")
    meta, rows = lines[0], lines[1:]
    trials = [
        Trial(
            config=r["config"],
            objective=r["objective"],
            iteration=r["iteration"],
            error=r.get("error"),
        )
        for r in rows
    ]
    return Trace(trials=trials, seed=meta["seed"], strategy=meta["strategy"])


# ---------------------------------------------------------------------------
# Gaussian process surrogate


def _pairwise_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2 * a @ b.T
    return np.sqrt(np.maximum(d2, 0.0))


def _kernel_matrix(a, b, kernel: str, length_scale: float, amplitude: float):
    r = _pairwise_dist(a, b) / length_scale
    if kernel == "matern52":
        s = math.sqrt(5.0) * r
        k = (1.0 + s + s * s / 3.0) * np.exp(-s)
    elif kernel == "squared-exponential":
        k = np.exp(-0.5 * r * r)
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    return amplitude * k


@dataclass
class GpModel:
    """Exact GP regression with fixed hyperparameters per fit.

    Inputs are normalized to the unit cube by the caller; outputs are
    standardized internally when `normalize` is set. The length scale is
    selected per fit by log marginal likelihood over a fixed grid unless
    given explicitly.
    """

    x: np.ndarray
    y_mean: float
    y_scale: float
    alpha: np.ndarray
    chol: tuple
    kernel: str
    length_scale: float
    amplitude: float
    jitter: float

    def posterior(self, x: np.ndarray) -> tuple[float, float]:
        """Posterior mean and variance of the latent function at one point."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        k_star = _kernel_matrix(self.x, x, self.kernel, self.length_scale, self.amplitude)
        mean_std = float(k_star[:, 0] @ self.alpha)
        v = cho_solve(self.chol, k_star)
        var_std = float(
            _kernel_matrix(x, x, self.kernel, self.length_scale, self.amplitude)[0, 0]
            - k_star[:, 0] @ v[:, 0]
        )
        var_std = max(var_std, 0.0)
        return self.y_mean + self.y_scale * mean_std, self.y_scale**2 * var_std

    def posterior_batch(self, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xs = np.asarray(xs, dtype=np.float64)
        k_star = _kernel_matrix(self.x, xs, self.kernel, self.length_scale, self.amplitude)
        means = k_star.T @ self.alpha
        v = cho_solve(self.chol, k_star)
        prior = _kernel_matrix(
            np.zeros((1, xs.shape[1])), np.zeros((1, xs.shape[1])),
            self.kernel, self.length_scale, self.amplitude,
        )[0, 0]
        variances = np.maximum(prior - np.sum(k_star * v, axis=0), 0.0)
        return self.y_mean + self.y_scale * means, self.y_scale**2 * variances


def _chol_with_jitter(k: np.ndarray, jitter: float):
    current = jitter
    while current <= MAX_JITTER:
        try:
            return cho_factor(k + current * np.eye(len(k)), lower=True), current
        except np.linalg.LinAlgError:
            current *= 10.0
    raise NumericError(
        f"covariance not positive definite even with jitter {MAX_JITTER}"
    )


def _log_marginal_likelihood(x, y, kernel, length_scale, amplitude, jitter) -> float:
    k = _kernel_matrix(x, x, kernel, length_scale, amplitude)
    try:
        chol, _ = _chol_with_jitter(k, jitter)
    except NumericError:
        return -np.inf
    alpha = cho_solve(chol, y)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
    return float(-0.5 * y @ alpha - 0.5 * log_det - 0.5 * len(y) * math.log(2 * math.pi))


def fit_gp(
    x: np.ndarray,
    y: np.ndarray,
    kernel: str = "matern52",
    length_scale: float | None = None,
    amplitude: float | None = None,
    jitter: float = BASE_JITTER,
    normalize: bool = True,
    noise: float | str = 0.0,
) -> GpModel:
    """Fit a GP. `x` must already live in the unit cube.

    noise=0.0 gives exact interpolation (up to jitter). noise="select"
    picks (length scale, noise) jointly by log marginal likelihood, which
    keeps the surrogate honest on rugged objectives where a noise-free
    fit would always prefer the shortest length scale.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 1:
        raise ValueError("GP needs at least one training point")
    if normalize:
        y_mean = float(np.mean(y))
        y_scale = float(np.std(y))
        if y_scale < 1e-12:
            y_scale = 1.0
    else:
        y_mean, y_scale = 0.0, 1.0
    y_std = (y - y_mean) / y_scale
    if amplitude is None:
        # outputs are standardized, so unit signal variance
        amplitude = float(np.var(y_std)) if float(np.var(y_std)) > 1e-12 else 1.0
    if noise == "select":
        best = None
        for ls in LENGTH_SCALE_GRID if length_scale is None else (length_scale,):
            for nz in NOISE_GRID:
                lml = _log_marginal_likelihood(x, y_std, kernel, ls, amplitude,
                                               nz + jitter)
                if best is None or lml > best[0]:
                    best = (lml, ls, nz)
        length_scale, noise = best[1], best[2]
    elif length_scale is None:
        best = None
        for ls in LENGTH_SCALE_GRID:
            lml = _log_marginal_likelihood(x, y_std, kernel, ls, amplitude,
                                           noise + jitter)
            if best is None or lml > best[0]:
                best = (lml, ls)
        length_scale = best[1]
    k = _kernel_matrix(x, x, kernel, length_scale, amplitude)
    chol, used_jitter = _chol_with_jitter(k, noise + jitter)
    alpha = cho_solve(chol, y_std)
    return GpModel(
        x=x,
        y_mean=y_mean,
        y_scale=y_scale,
        alpha=alpha,
        chol=chol,
        kernel=kernel,
        length_scale=length_scale,
        amplitude=amplitude,
        jitter=used_jitter,
    )


def gp_posterior(model: GpModel, x) -> tuple[float, float]:
    """Posterior (mean, variance) at `x` under the fitted model."""
    return model.posterior(x)


def expected_improvement(mean, variance, best, xi: float = 0.0):
    """EI for maximization: E[max(0, f - best - xi)].

    Vectorized over mean/variance; the deterministic limit at zero
    variance is max(0, mean - best - xi).
    """
    mean = np.asarray(mean, dtype=np.float64)
    sigma = np.sqrt(np.maximum(np.asarray(variance, dtype=np.float64), 0.0))
    improve = mean - best - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, improve / np.where(sigma > 0, sigma, 1.0), 0.0)
        ei = np.where(
            sigma > 0,
            improve * norm.cdf(z) + sigma * norm.pdf(z),
            np.maximum(improve, 0.0),
        )
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


# ---------------------------------------------------------------------------
# random-forest surrogate (deterministic regression forest)


class _TreeNode:
    __slots__ = ("feature", "threshold", "left", "right", "value")

    def __init__(self, value=None):
        self.feature = None
        self.threshold = None
        self.left = None
        self.right = None
        self.value = value


def _best_split(x: np.ndarray, y: np.ndarray):
    """Exhaustive SSE-minimizing split; ties go to the first (feature,
    threshold) in scan order."""
    n, d = x.shape
    base_sse = float(np.sum((y - y.mean()) ** 2))
    best = None
    for j in range(d):
        values = np.unique(x[:, j])
        for a, b in zip(values[:-1], values[1:]):
            thr = 0.5 * (a + b)
            left = x[:, j] <= thr
            yl, yr = y[left], y[~left]
            sse = float(np.sum((yl - yl.mean()) ** 2) + np.sum((yr - yr.mean()) ** 2))
            if sse < base_sse - 1e-15 and (best is None or sse < best[0] - 1e-15):
                best = (sse, j, thr)
    return best


def _build_tree(x: np.ndarray, y: np.ndarray) -> _TreeNode:
    if len(np.unique(y)) == 1:
        return _TreeNode(value=float(y[0]))
    split = _best_split(x, y)
    if split is None:
        return _TreeNode(value=float(y.mean()))
    _, j, thr = split
    node = _TreeNode()
    node.feature, node.threshold = j, thr
    left = x[:, j] <= thr
    node.left = _build_tree(x[left], y[left])
    node.right = _build_tree(x[~left], y[~left])
    return node


def _tree_predict(node: _TreeNode, row: np.ndarray) -> float:
    while node.value is None:
        node = node.left if row[node.feature] <= node.threshold else node.right
    return node.value


@dataclass
class RandomForest:
    """Bootstrap ensemble of full-depth SSE trees.

    Bootstrap indices for tree t are the t-th block of n draws from a
    single Philox(seed) stream, making the forest reproducible from
    (data, seed) alone.
    """

    trees: list
    n_features: int

    @staticmethod
    def fit(x: np.ndarray, y: np.ndarray, n_trees: int = RF_TREES, seed: int = 0):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64)
        if len(x) < 2:
            raise ValueError("random forest needs at least two training points")
        rng = np.random.Generator(np.random.Philox(seed))
        trees = []
        for _ in range(n_trees):
            idx = rng.integers(0, len(x), size=len(x))
            trees.append(_build_tree(x[idx], y[idx]))
        return RandomForest(trees=trees, n_features=x.shape[1])

    def predict(self, row: np.ndarray) -> tuple[float, float]:
        preds = np.array([_tree_predict(t, row) for t in self.trees])
        return float(preds.mean()), float(preds.var() + 1e-6)


def rf_posterior(forest: RandomForest, row) -> tuple[float, float]:
    """Across-tree mean and variance (plus a 1e-6 floor) at one encoded point."""
    return forest.predict(np.asarray(row, dtype=np.float64))


def encode_onehot(space: SearchSpace, config: dict) -> np.ndarray:
    """One-hot encoding of the categorical dims plus scaled numeric dims."""
    parts = []
    for d in space.categoricals:
        v = np.zeros(len(d.choices))
        v[d.choices.index(config[d.name])] = 1.0
        parts.append(v)
    for d in space.numeric:
        parts.append(np.array([(float(config[d.name]) - d.lo) / (d.hi - d.lo)]))
    return np.concatenate(parts) if parts else np.zeros(0)


# ---------------------------------------------------------------------------
# optimization loop


def _lhs(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    """Latin hypercube in the unit cube: one stratified sample per row."""
    out = np.empty((n, d))
    for j in range(d):
        perm = rng.permutation(n)
        out[:, j] = (perm + rng.uniform(0.0, 1.0, size=n)) / n
    return out


def _evaluate(objective, config: dict, iteration: int) -> Trial:
    try:
        value = float(objective(config))
        if not math.isfinite(value):
            return Trial(config=config, objective=None, iteration=iteration,
                         error=f"objective returned non-finite value {value!r}")
        return Trial(config=config, objective=value, iteration=iteration)
    except Exception as e:  # failures are data, not crashes
        return Trial(config=config, objective=None, iteration=iteration, error=str(e))


def _optimize_random(space, objective, budget, seed, on_trial, replay):
    rng = np.random.Generator(np.random.Philox(seed))
    trace = Trace(seed=seed, strategy="random")
    for it in range(budget):
        config = space.sample_uniform(rng)
        trial = _run_trial(objective, config, it, replay)
        trace.trials.append(trial)
        if on_trial:
            on_trial(trial)
    return trace


def _run_trial(objective, config, iteration, replay):
    if replay is not None and iteration < len(replay):
        old = replay[iteration]
        return Trial(config=config, objective=old.objective,
                     iteration=iteration, error=old.error)
    return _evaluate(objective, config, iteration)


def _partition_key(partition: dict):
    return tuple(sorted(partition.items()))


def _local_candidates(space, part, best_config, rng, d):
    """Neighborhood moves around the partition incumbent: per-dimension
    resets to the zero (category-omission) value and to the bounds, small
    axis steps, and Gaussian jitter. These let the proposal switch a
    whole postprocessing category off, which uniform sampling almost
    never does."""
    u0 = np.clip(space.config_to_unit(best_config), 0.0, 1.0)
    zero_u = np.clip(space.config_to_unit(space.zero_config(part)), 0.0, 1.0)
    rows = [zero_u]
    for j in range(d):
        for value in (zero_u[j], 0.0, 1.0, u0[j] - 0.1, u0[j] + 0.1):
            row = u0.copy()
            row[j] = min(max(value, 0.0), 1.0)
            rows.append(row)
    jitter = np.clip(u0 + rng.normal(0.0, 0.1, size=(64, d)), 0.0, 1.0)
    return np.concatenate([np.asarray(rows), jitter], axis=0)


def _optimize_gp(space, objective, budget, seed, xi, n_candidates, on_trial, replay):
    rng = np.random.Generator(np.random.Philox(seed))
    trace = Trace(seed=seed, strategy="bayes")
    partitions = space.partitions()
    d = len(space.numeric)

    # initial design: per partition, the all-zero start plus LHS points,
    # interleaved round-robin so every partition is touched early
    designs = []
    for part in partitions:
        pts = [space.zero_config(part)]
        lhs = _lhs(rng, N_LHS, d)
        pts.extend(space.unit_to_config(row, part) for row in lhs)
        designs.append(pts)
    plan = [designs[p][k] for k in range(N_LHS + 1) for p in range(len(partitions))]

    it = 0
    for config in plan:
        if it >= budget:
            break
        trial = _run_trial(objective, config, it, replay)
        trace.trials.append(trial)
        if on_trial:
            on_trial(trial)
        it += 1

    while it < budget:
        ok = [t for t in trace.trials if t.ok]
        best_value = max((t.objective for t in ok), default=None)
        proposal = None  # (ei, order, config)
        for p_idx, part in enumerate(partitions):
            members = [
                t for t in ok
                if all(t.config[k] == v for k, v in part.items())
            ]
            candidates = rng.uniform(0.0, 1.0, size=(n_candidates, d))
            if not members:
                # nothing known here yet: force exploration of the partition
                config = space.unit_to_config(candidates[0], part)
                if proposal is None or proposal[0] < np.inf:
                    proposal = (np.inf, -p_idx, config)
                continue
            # local moves around the best few distinct configs: equal-value
            # plateaus often hide one family that is a single axis move away
            # from a jump, so a lone incumbent is not enough
            ranked = sorted(members, key=lambda t: (-t.objective, t.iteration))
            tops, seen = [], []
            for t in ranked:
                u = space.config_to_unit(t.config)
                if all(np.max(np.abs(u - s)) > 1e-9 for s in seen):
                    seen.append(u)
                    tops.append(t)
                if len(tops) == 3:
                    break
            local = np.concatenate(
                [_local_candidates(space, part, t.config, rng, d) for t in tops],
                axis=0,
            )
            # local candidates first so EI ties prefer informed moves
            candidates = np.concatenate([local, candidates], axis=0)
            x = np.array([space.config_to_unit(t.config) for t in members])
            y = np.array([t.objective for t in members])
            model = fit_gp(x, y, noise="select")
            means, variances = model.posterior_batch(candidates)
            ei = expected_improvement(means, variances, best_value, xi)
            j = int(np.argmax(ei))
            cand = (float(ei[j]), -p_idx, space.unit_to_config(candidates[j], part))
            if proposal is None or cand[:2] > proposal[:2]:
                proposal = cand
        trial = _run_trial(objective, proposal[2], it, replay)
        trace.trials.append(trial)
        if on_trial:
            on_trial(trial)
        it += 1
    return trace


def _optimize_rf(space, objective, budget, seed, xi, on_trial, replay):
    rng = np.random.Generator(np.random.Philox(seed))
    trace = Trace(seed=seed, strategy="bayes")
    cells = space.partitions()
    encoded = [encode_onehot(space, c) for c in cells]
    keys = [_partition_key(c) for c in cells]
    index = {k: i for i, k in enumerate(keys)}

    n_init = min(budget, RF_INIT)
    init: list[dict] = []
    chosen = set()
    while len(init) < n_init:
        config = space.sample_uniform(rng)
        key = _partition_key(config)
        if key in chosen and len(chosen) < len(cells):
            continue
        chosen.add(key)
        init.append(config)

    it = 0
    for config in init:
        trial = _run_trial(objective, config, it, replay)
        trace.trials.append(trial)
        if on_trial:
            on_trial(trial)
        it += 1

    while it < budget:
        ok = [t for t in trace.trials if t.ok]
        visited = {_partition_key(t.config) for t in trace.trials}
        open_cells = [i for i, k in enumerate(keys) if k not in visited]
        pool = open_cells if open_cells else list(range(len(cells)))
        if len(ok) >= 2:
            x = np.array([encode_onehot(space, t.config) for t in ok])
            y = np.array([t.objective for t in ok])
            forest = RandomForest.fit(x, y, seed=seed)
            best_value = max(t.objective for t in ok)
            ei = np.array([
                expected_improvement(*forest.predict(encoded[i]), best_value, xi)
                for i in pool
            ])
            config = cells[pool[int(np.argmax(ei))]]
        else:
            config = cells[pool[int(rng.integers(0, len(pool)))]]
        trial = _run_trial(objective, dict(config), it, replay)
        trace.trials.append(trial)
        if on_trial:
            on_trial(trial)
        it += 1
    return trace


def optimize(
    space: SearchSpace,
    objective,
    budget: int,
    strategy: str = "bayes",
    seed: int = 0,
    xi: float = DEFAULT_XI,
    n_candidates: int = N_CANDIDATES,
    on_trial=None,
    resume_trials: list[Trial] | None = None,
) -> Trace:
    """Run exactly `budget` objective evaluations and return the trace.

    strategy "random" draws independent uniform samples. strategy "bayes"
    uses a GP per categorical partition with EI over seeded uniform
    candidates, or a random-forest surrogate when the space is purely
    categorical (then proposals prefer unvisited cells). Repeated configs
    are evaluated again and consume budget; they are not cache-served.

    `resume_trials` replays recorded objectives for the leading
    iterations of a previous identical run, then continues it.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if strategy == "random":
        return _optimize_random(space, objective, budget, seed, on_trial, resume_trials)
    if strategy != "bayes":
        raise ValueError(f"unknown strategy {strategy!r}")
    if space.numeric:
        return _optimize_gp(space, objective, budget, seed, xi, n_candidates,
                            on_trial, resume_trials)
    if not space.categoricals:
        raise ValueError("search space is empty")
    return _optimize_rf(space, objective, budget, seed, xi, on_trial, resume_trials)
