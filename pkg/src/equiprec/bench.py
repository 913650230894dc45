"""Steady-state timing harness: warm-up, timed window, per-block attribution, reports."""

from __future__ import annotations

import csv
import datetime as _dt
import io
import json
import os
import platform
import random
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from . import autodiff as ad
from . import model as mdl
from . import numerics
from .errors import ContractError, EquiprecError, SetupError
from .geometry import diamond_supercell, perturb, water_box

SCHEMA_VERSION = 1
EPS_STAB = 1e-12
CV_GATE = 0.20
BLOCK_IDS = {
    "edge_embedding_A": "edge_tp",
    "symmetric_contraction_B": "symmetric_contraction",
    "message_and_update": "message_update",
}
_RECEIPT: dict = {}


@dataclass
class BenchmarkSpec:
    cfg: mdl.ModelConfig = field(default_factory=mdl.ModelConfig)
    warmup_iters: int = 100
    timed_iters: int = 100
    seed: int = 42
    backend: str = "fused_batched"
    policy: str = "fp64"
    system: dict = field(default_factory=lambda: {"kind": "diamond", "supercell": 2})
    batch_size: int = 1
    forces: bool = False

    def __post_init__(self):
        if self.warmup_iters < 1:
            raise ContractError("at least one warm-up iteration is required")
        if self.timed_iters < 1 or self.batch_size < 1:
            raise ContractError("timed_iters and batch_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cfg"] = self.cfg.to_dict()
        return d


@dataclass
class BenchmarkReport:
    times_ns: list
    mean_ms: float
    std_ms: float
    median_ms: float
    p95_ms: float
    block_ms: dict
    metadata: dict
    outputs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkReport":
        return cls(**d)


def summarize(times_ns, warmup: int = 0) -> dict:
    """Mean, sample std, median and linearly interpolated P95 in milliseconds.

    The first `warmup` samples are dropped before any statistic is formed.
    """
    ms = np.asarray(times_ns, dtype=np.float64)[warmup:] * 1e-6
    if ms.size == 0:
        raise ContractError("no timed samples")
    return {
        "mean_ms": float(ms.mean()),
        "std_ms": float(ms.std(ddof=1)) if ms.size > 1 else 0.0,
        "median_ms": float(np.median(ms)),
        "p95_ms": float(np.percentile(ms, 95, method="linear")),
    }


def build_system(system: dict):
    kind = system.get("kind", "diamond")
    if kind == "diamond":
        config = diamond_supercell(int(system.get("supercell", 2)))
        amp = float(system.get("perturb", 0.0))
        return perturb(config, amp, seed=int(system.get("seed", 0))) if amp else config
    if kind == "water":
        return water_box(int(system.get("molecules", 8)), float(system.get("density", 1.0)),
                         seed=int(system.get("seed", 0)))
    raise SetupError(f"unknown system kind {kind!r}")


def environment_info() -> dict:
    return {
        "equiprec": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "machine": platform.machine(),
        "threads": os.environ.get("EQUIPREC_THREADS", ""),
        "cpu_count": os.cpu_count(),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }


def set_deterministic(seed: int) -> dict:
    """Seed every random stream; must precede the first model evaluation."""
    if mdl.evaluation_count() > 0:
        raise ContractError("set_deterministic must be called before any model evaluation")
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    _RECEIPT.clear()
    _RECEIPT.update({"seed": int(seed), "fixed_order_reductions": True,
                     "threads": os.environ.get("EQUIPREC_THREADS", "")})
    return dict(_RECEIPT)


def _metadata(spec: BenchmarkSpec, **extra) -> dict:
    meta = {"schema_version": SCHEMA_VERSION, "spec": spec.to_dict(),
            "environment": environment_info(), "deterministic": dict(_RECEIPT)}
    meta.update(extra)
    return meta


def _timed_window(step, n):
    times = []
    with ad.timing() as timers:
        for _ in range(n):
            t0 = time.perf_counter_ns()
            step()
            times.append(time.perf_counter_ns() - t0)
    return times, {k: v * 1e3 / n for k, v in timers.items()}


def run_inference_bench(spec: BenchmarkSpec, weights=None, config=None) -> BenchmarkReport:
    """Warm-up then timed energy (and optionally force) evaluations on one system.

    `config` overrides the structure that ``spec.system`` would generate.
    """
    try:
        config = build_system(spec.system) if config is None else config
        cfg = spec.cfg if spec.cfg.seed == spec.seed else _with_seed(spec.cfg, spec.seed)
        weights = weights if weights is not None else mdl.ModelWeights.initialize(cfg)
        mdl.audit_shapes(weights, cfg)
        policy = numerics.parse_policy(spec.policy)
        mdl._check_backend(spec.backend)
        graph = mdl.build_graph(config, cfg)
        params = mdl.as_params(weights)
    except EquiprecError as exc:
        raise SetupError(f"benchmark setup failed: {exc}") from exc

    outputs = {}
    series = {"energy": [], "mean_force": []}

    def step():
        for _ in range(spec.batch_size):
            if spec.forces:
                res = mdl.evaluate(config, params, cfg, policy, spec.backend, graph,
                                   positions_grad=True)
                (g,) = ad.grad(res.energy_tensor, [res.positions])
                outputs["max_force"] = float(np.abs(g.data).max())
                series["mean_force"].append(float(np.linalg.norm(g.data, axis=1).mean()))
            else:
                with ad.no_grad():
                    res = mdl.evaluate(config, params, cfg, policy, spec.backend, graph)
            outputs["energy"] = res.energy
            series["energy"].append(res.energy)

    for _ in range(spec.warmup_iters):
        step()
    times, blocks = _timed_window(step, spec.timed_iters)
    reruns = 0
    stats = summarize(times)
    while (len(times) > 1 and stats["std_ms"] > CV_GATE * stats["mean_ms"] and reruns < 2):
        reruns += 1
        times, blocks = _timed_window(step, spec.timed_iters)
        stats = summarize(times)
    # spread of outputs across every call; nonzero only if evaluation is nondeterministic
    for key, values in series.items():
        if values:
            # centre on the first value so a constant series gives exactly 0
            outputs[f"{key}_std"] = float(np.std(np.subtract(values, values[0])))
    if spec.forces:
        outputs["mean_force"] = series["mean_force"][-1]
    meta = _metadata(spec, n_atoms=len(config), n_edges=graph.n_edges, reruns=reruns,
                     system=dict(spec.system))
    return BenchmarkReport(times, **stats, block_ms=blocks, metadata=meta, outputs=outputs)


def _with_seed(cfg: mdl.ModelConfig, seed: int) -> mdl.ModelConfig:
    d = cfg.to_dict()
    d["seed"] = seed
    return mdl.ModelConfig.from_dict(d)


def dummy_loss(x):
    """Mean-square surrogate ``sum(x^2) + 0.1`` used to drive backward passes."""
    return ad.sum(x * x) + 0.1


@dataclass
class BlockResult:
    dtype: str
    forward: BenchmarkReport
    backward_mean_ms: float
    max_abs_error: float
    max_rel_error: float


def run_block_bench(block_id: str, spec: BenchmarkSpec, records=None, weights=None,
                    dtypes=("fp64", "fp32", "bf16", "fp16"), layer: int = 1) -> dict:
    """Replay one captured block under each dtype; errors are vs the FP64 replay.

    Relative error is normwise with a stabilizer: ``max|d| / (max|ref| + 1e-12)``.
    """
    if block_id not in BLOCK_IDS:
        raise ContractError(f"unknown block {block_id!r}; expected one of {sorted(BLOCK_IDS)}")
    cfg = spec.cfg
    layer = min(layer, cfg.num_layers - 1)
    key = f"{BLOCK_IDS[block_id]}/{layer}"
    if weights is None:
        weights = mdl.ModelWeights.initialize(cfg)
    if records is None:
        records, _ = mdl.capture_blocks(build_system(spec.system), weights, cfg, spec.backend)
    record = records[key]
    reference = mdl.replay_block(key, record, weights, cfg, "fp64", spec.backend)
    results = {}
    for dtype in dtypes:
        policy = numerics.parse_policy(dtype)
        out = {}

        def forward():
            with ad.no_grad():
                out["y"], _ = mdl.replay_block_tensor(key, record, weights, cfg, policy,
                                                      spec.backend)

        def backward():
            y, inputs = mdl.replay_block_tensor(key, record, weights, cfg, policy,
                                                spec.backend, requires_grad=True)
            ad.grad(dummy_loss(y), inputs)

        for _ in range(spec.warmup_iters):
            forward()
        times, blocks = _timed_window(forward, spec.timed_iters)
        fwd = BenchmarkReport(times, **summarize(times), block_ms=blocks,
                              metadata=_metadata(spec, block=key, dtype=dtype))
        for _ in range(min(spec.warmup_iters, 3)):
            backward()
        btimes, _ = _timed_window(backward, max(1, spec.timed_iters // 10))
        diff = np.abs(out["y"].data - reference)
        results[dtype] = BlockResult(dtype, fwd, summarize(btimes)["mean_ms"],
                                     float(diff.max()),
                                     float(diff.max() / (np.abs(reference).max() + EPS_STAB)))
    return results


def compute_speedup(baseline: BenchmarkReport, variant: BenchmarkReport) -> float:
    """Baseline mean time over variant mean time; systems must match."""
    if baseline.metadata.get("system") != variant.metadata.get("system"):
        raise ContractError("speedup needs reports on the same system")
    return baseline.mean_ms / variant.mean_ms


def emit_report(report: BenchmarkReport, fmt: str, path) -> None:
    path = os.fspath(path)
    try:
        if fmt == "json":
            text = json.dumps(report.to_dict(), indent=2, sort_keys=True, default=str)
        elif fmt == "csv":
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["schema_version", SCHEMA_VERSION])
            w.writerow(["iteration", "time_ns"])
            for i, t in enumerate(report.times_ns):
                w.writerow([i, t])
            w.writerow([])
            w.writerow(["summary", "value"])
            for k in ("mean_ms", "std_ms", "median_ms", "p95_ms"):
                w.writerow([k, repr(getattr(report, k))])
            w.writerow([])
            w.writerow(["block", "mean_ms_per_iteration"])
            for k, v in sorted(report.block_ms.items()):
                w.writerow([k, repr(v)])
            text = buf.getvalue()
        else:
            raise ContractError(f"unknown report format {fmt!r}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise SetupError(f"cannot write report to {path}: {exc}") from exc


def load_report(path) -> BenchmarkReport:
    with open(os.fspath(path), encoding="utf-8") as fh:
        return BenchmarkReport.from_dict(json.load(fh))
