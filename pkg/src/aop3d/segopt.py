"""Joint optimization of segmentation-model choice and postprocessing
parameters against mean IPQ over a benchmark dataset.

Model predictions are files produced externally (or by the corruption
generator in tests); they are loaded once per model and reused across all
parameter evaluations. Evaluated (model, rounded-parameter) pairs are
memoized so repeated proposals cost nothing, although they still consume
optimizer budget and appear in the trace.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .boengine import (
    CategoricalDim,
    ContinuousDim,
    IntegerDim,
    SearchSpace,
    Trace,
    optimize,
)
from .errors import BenchmarkError, ShapeMismatchError
from .metrics import IpqWeights, compute_ipq, match_instances
from .postproc import PostprocParams, apply_postprocessing
from .volume import LabelVolume, read_volume

PARAM_ORDER = ("theta_ed", "theta_co", "theta_mc", "theta_ms", "theta_mr",
               "theta_ssigma", "theta_st")


def _max_workers() -> int:
    try:
        return max(1, int(os.environ.get("AOP3D_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class BenchmarkSet:
    """Image/annotation pairs plus per-model prediction paths.

    Manifest JSON:
    {"images": [{"id": ..., "gt": path}, ...],
     "models": {"name": {"image id": path, ...}, ...}}
    """

    images: list[tuple[str, str]]  # (image id, gt path)
    models: dict[str, dict[str, str]]  # model -> image id -> prediction path
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.images:
            raise BenchmarkError("benchmark has no images")
        if not self.models:
            raise BenchmarkError("benchmark has no models")
        for model, preds in self.models.items():
            for image_id, _ in self.images:
                if image_id not in preds:
                    raise BenchmarkError(
                        f"model {model!r} has no prediction for image {image_id!r}"
                    )

    @staticmethod
    def from_manifest(path) -> "BenchmarkSet":
        base = os.path.dirname(os.path.abspath(path))

        def resolve(p):
            return p if os.path.isabs(p) else os.path.join(base, p)

        try:
            with open(path) as f:
                m = json.load(f)
            images = [(str(e["id"]), resolve(e["gt"])) for e in m["images"]]
            models = {
                name: {str(i): resolve(p) for i, p in preds.items()}
                for name, preds in m["models"].items()
            }
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise BenchmarkError(f"bad benchmark manifest {path}: {e}") from e
        return BenchmarkSet(images=images, models=models)

    def model_names(self) -> list[str]:
        return sorted(self.models)

    def _load(self, path, what) -> LabelVolume:
        if path not in self._cache:
            try:
                v = read_volume(path)
            except Exception as e:
                raise BenchmarkError(f"cannot load {what} from {path}: {e}") from e
            if not isinstance(v, LabelVolume):
                raise BenchmarkError(f"{what} at {path} is not a label volume")
            self._cache[path] = v
        return self._cache[path]

    def ground_truth(self, image_id: str) -> LabelVolume:
        for iid, path in self.images:
            if iid == image_id:
                return self._load(path, f"annotation {image_id!r}")
        raise BenchmarkError(f"unknown image id {image_id!r}")

    def prediction(self, model: str, image_id: str) -> LabelVolume:
        if model not in self.models:
            raise BenchmarkError(f"unknown model {model!r}")
        path = self.models[model].get(image_id)
        if path is None:
            raise BenchmarkError(f"model {model!r}: missing prediction ({image_id!r})")
        pred = self._load(path, f"prediction ({model!r}, {image_id!r})")
        gt = self.ground_truth(image_id)
        if pred.shape != gt.shape:
            raise ShapeMismatchError(
                f"prediction ({model!r}, {image_id!r}) shape {pred.shape} "
                f"!= annotation shape {gt.shape}"
            )
        return pred


@dataclass(frozen=True)
class EvalResult:
    mean_ipq: float
    mean_sq: float
    mean_rq: float
    mean_iq: float

    def to_json(self) -> dict:
        return {"ipq": self.mean_ipq, "sq": self.mean_sq,
                "rq": self.mean_rq, "iq": self.mean_iq}


def evaluate_config(
    bench: BenchmarkSet,
    model: str,
    params: PostprocParams,
    k: IpqWeights = IpqWeights(),
    tau: float = 0.5,
    iq_mode: str = "matched-predictions",
) -> EvalResult:
    """Mean IPQ (and factor means) of one model+parameter configuration."""

    def score(image_id):
        pred = bench.prediction(model, image_id)
        gt = bench.ground_truth(image_id)
        processed = apply_postprocessing(pred, params)
        return compute_ipq(match_instances(processed, gt, tau), k, iq_mode, tau)

    ids = [iid for iid, _ in bench.images]
    workers = _max_workers()
    if workers > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(score, ids))
    else:
        reports = [score(i) for i in ids]
    n = len(reports)
    return EvalResult(
        mean_ipq=math.fsum(r.ipq for r in reports) / n,
        mean_sq=math.fsum(r.sq for r in reports) / n,
        mean_rq=math.fsum(r.rq for r in reports) / n,
        mean_iq=math.fsum(r.iq for r in reports) / n,
    )


@dataclass
class SegOptResult:
    best_model: str
    best_params: PostprocParams
    best_ipq: float
    factors: EvalResult
    baseline_ipq: float
    trace: Trace

    def to_json(self) -> dict:
        return {
            "best_model": self.best_model,
            "best_params": self.best_params.to_json(),
            "best_ipq": self.best_ipq,
            "factors": self.factors.to_json(),
            "baseline_ipq": self.baseline_ipq,
            "strategy": self.trace.strategy,
            "seed": self.trace.seed,
            "n_trials": len(self.trace.trials),
        }


def search_space(bench: BenchmarkSet) -> SearchSpace:
    return SearchSpace(
        categoricals=(CategoricalDim("model", tuple(bench.model_names())),),
        continuous=(
            ContinuousDim("theta_mc", 0.0, 1.0),
            ContinuousDim("theta_ms", 0.0, 1.0),
            ContinuousDim("theta_mr", 0.0, 1.0),
            ContinuousDim("theta_ssigma", 0.0, 1.0),
            ContinuousDim("theta_st", 0.0, 1.0),
        ),
        integers=(
            IntegerDim("theta_ed", -10, 10),
            IntegerDim("theta_co", -5, 5),
        ),
    )


def _params_from_config(config: dict) -> PostprocParams:
    return PostprocParams(**{k: config[k] for k in PARAM_ORDER})


def optimize_segmentation(
    bench: BenchmarkSet,
    k: IpqWeights = IpqWeights(),
    budget: int = 120,
    strategy: str = "bayes",
    seed: int = 0,
    tau: float = 0.5,
    iq_mode: str = "matched-predictions",
    on_trial=None,
) -> SegOptResult:
    """Optimize (model, postprocessing) jointly; returns the best pair,
    the factor breakdown at the optimum, the zero-postprocessing baseline
    averaged over all models, and the full trace."""
    space = search_space(bench)
    if budget < len(bench.model_names()):
        raise ValueError(
            f"budget {budget} below model count {len(bench.model_names())}"
        )
    memo: dict = {}

    def cached_eval(model: str, params: PostprocParams) -> EvalResult:
        key = (model, tuple(getattr(params, name) for name in PARAM_ORDER))
        if key not in memo:
            memo[key] = evaluate_config(bench, model, params, k, tau, iq_mode)
        return memo[key]

    def objective(config: dict) -> float:
        return cached_eval(config["model"], _params_from_config(config)).mean_ipq

    trace = optimize(space, objective, budget=budget, strategy=strategy,
                     seed=seed, on_trial=on_trial)
    best = trace.best
    if best is None:
        raise BenchmarkError("no successful evaluation in the whole budget")
    best_params = _params_from_config(best.config)
    best_eval = cached_eval(best.config["model"], best_params)
    zero = PostprocParams()
    baseline = math.fsum(
        cached_eval(m, zero).mean_ipq for m in bench.model_names()
    ) / len(bench.model_names())
    return SegOptResult(
        best_model=best.config["model"],
        best_params=best_params,
        best_ipq=best_eval.mean_ipq,
        factors=best_eval,
        baseline_ipq=baseline,
        trace=trace,
    )
