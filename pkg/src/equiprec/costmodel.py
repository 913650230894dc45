"""Analytical per-block MAC and activation estimates, and counter-based measurements.

A MAC is one multiply-add pair; additions inside reductions count once per
summed element. Estimates are raw asymptotic terms times per-block constants
fitted against the counters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .errors import ContractError

BLOCKS = ("sh", "radial", "edge_tp", "symmetric_contraction")


@dataclass
class CostEstimate:
    macs: dict                      # block -> MACs (int when measured)
    activations: dict               # "A" / "B" / "m" -> element count
    shapes: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)

    def rows(self):
        return [(name, self.macs.get(name, 0)) for name in BLOCKS]


def edge_cg_sum(cfg: mdl.ModelConfig, layer: int) -> int:
    """Sum over allowed (l1, l2, l3) of (2l1+1)(2l2+1)(2l3+1)."""
    return sum((2 * l1 + 1) * (2 * l2 + 1) * (2 * l3 + 1)
               for l1, l2, l3 in mdl.edge_paths(cfg.sh_lmax, cfg.feature_lmax(layer)))


def predicted_shapes(cfg: mdl.ModelConfig, n_atoms: int) -> dict:
    paths = mdl.contraction_paths(cfg)
    k = cfg.channels
    shapes = {"A": (n_atoms, k, (cfg.sh_lmax + 1) ** 2)}
    for big_l in range(cfg.message_lmax + 1):
        shapes[f"B_L{big_l}"] = (n_atoms, k, paths[big_l], 2 * big_l + 1)
        shapes[f"m_L{big_l}"] = (n_atoms, k, 2 * big_l + 1)
    return shapes


def raw_terms(cfg: mdl.ModelConfig, n_atoms: int, avg_neighbors: float) -> dict:
    """Asymptotic terms per block, summed over layers, before calibration."""
    edges = n_atoms * avg_neighbors
    k = cfg.channels
    paths = mdl.contraction_paths(cfg)
    node_tp = sum(k * paths[big_l] * (2 * big_l + 1) for big_l in range(cfg.message_lmax + 1))
    return {
        "sh": edges * (cfg.sh_lmax + 1) ** 2,
        "radial": cfg.num_layers * edges * cfg.n_bessel,
        "edge_tp": sum(edges * k * k * edge_cg_sum(cfg, t) for t in range(cfg.num_layers)),
        "symmetric_contraction": cfg.num_layers * n_atoms * node_tp,
    }


def estimate_cost(cfg: mdl.ModelConfig, graph_stats: dict, constants: dict | None = None
                  ) -> CostEstimate:
    """Predicted MACs and activation sizes from N and the mean neighbor count d_n."""
    n, d_n = int(graph_stats["N"]), float(graph_stats["d_n"])
    if n < 1 or d_n < 0:
        raise ContractError("need N >= 1 and d_n >= 0")
    constants = dict(constants or {})
    terms = raw_terms(cfg, n, d_n)
    macs = {b: constants.get(b, 1.0) * terms[b] for b in BLOCKS}
    shapes = predicted_shapes(cfg, n)
    acts = {"A": int(np.prod(shapes["A"])),
            "B": sum(int(np.prod(s)) for k, s in shapes.items() if k.startswith("B_")),
            "m": sum(int(np.prod(s)) for k, s in shapes.items() if k.startswith("m_"))}
    # activations are per layer; the same shapes recur in every layer
    return CostEstimate(macs, acts, shapes, constants)


def measure_cost(counts=None, result: mdl.ForwardResult | None = None) -> CostEstimate:
    """Exact counter totals per block from a counting-mode run.

    With no `counts` the live counter of an enclosing ``autodiff.counting()``
    is read; outside counting mode this is a contract error.
    """
    if counts is None:
        if not ad.counting_enabled():
            raise ContractError("measure_cost needs a run under autodiff.counting()")
        counts = ad._state["counting"]
    macs = {b: int(counts.get(b, 0)) for b in BLOCKS}
    acts, shapes = {}, {}
    if result is not None:
        a = result.edge_features[0].data
        acts["A"] = int(a.size)
        acts["B"] = int(sum(x.data.size for x in result.contractions[-1]))
        acts["m"] = int(result.features[-1].data.size)
        shapes["A"] = a.shape
        for big_l, x in enumerate(result.contractions[-1]):
            shapes[f"B_L{big_l}"] = x.shape
            shapes[f"m_L{big_l}"] = result.features[-1].data[:, :, big_l * big_l:
                                                             (big_l + 1) ** 2].shape
    return CostEstimate(macs, acts, shapes)


def count_forward(config, weights, cfg: mdl.ModelConfig,
                  backend: str = "reference_per_path") -> tuple[CostEstimate, dict]:
    """Run one energy evaluation in counting mode; returns the measurement and graph stats."""
    graph = mdl.build_graph(config, cfg)
    with ad.no_grad(), ad.counting():
        res = mdl.evaluate(config, mdl.as_params(weights), cfg, backend=backend, graph=graph)
        measured = measure_cost(result=res)
    stats = {"N": graph.n_nodes, "d_n": graph.n_edges / graph.n_nodes}
    return measured, stats


def calibrate(samples) -> dict:
    """Least-squares constant per block over (cfg, stats, measured) samples.

    Each constant minimizes sum((c * raw - measured)^2), i.e.
    ``c = <raw, measured> / <raw, raw>``.
    """
    constants = {}
    for block in BLOCKS:
        raw = np.array([raw_terms(cfg, s["N"], s["d_n"])[block] for cfg, s, _ in samples],
                       dtype=float)
        meas = np.array([m.macs[block] for _, _, m in samples], dtype=float)
        denom = float(raw @ raw)
        constants[block] = float(raw @ meas / denom) if denom > 0 else 0.0
    return constants
