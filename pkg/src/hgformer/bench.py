"""Throughput measurement and operation-count scaling fits.

Throughput is the median over timed iterations after warmup, with a wall-time
breakdown of construction vs messaging vs the rest. The scaling fits use the
deterministic flop counters: the attention interaction term must grow
linearly in the token count, the channel width, and the hyperedge count
independently, and construction work tracks tokens x hyperedges.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import instrument
from .construct import TokenSet, cs_knn
from .messaging import init_hga_params, topo_attention
from .model import HGFormer, NetworkConfig
from .tensor import FlopCounter, Tensor
from .training import worker_count


def fit_linear(xs, ys) -> dict:
    """Least-squares line with intercept; residual is max |pred - obs| / obs."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    a_mat = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(a_mat, y, rcond=None)
    pred = a_mat @ coef
    resid = float(np.max(np.abs(pred - y) / np.maximum(np.abs(y), 1e-12)))
    return {"slope": float(coef[0]), "intercept": float(coef[1]), "max_residual": resid, "x": x.tolist(), "y": y.tolist()}


def _attention_core_count(n_queries: int, n_kv: int, channels: int, seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    heads = max(1, channels // 32)
    params = init_hga_params(channels, heads, rng, dtype=np.float32, with_ffn=False)
    q_src = Tensor(rng.standard_normal((n_queries, channels)).astype(np.float32))
    kv_src = Tensor(rng.standard_normal((n_kv, channels)).astype(np.float32))
    with instrument.collect_core_flops() as rec:
        topo_attention(q_src, kv_src, params)
    return int(sum(rec))


def attention_complexity_scan(
    n_values=(16, 32, 64, 128),
    ne_values=(4, 8, 16, 32),
    c_values=(32, 64, 96, 128),
    base_n: int = 64,
    base_ne: int = 8,
    base_c: int = 64,
) -> dict:
    """Interaction-term flop counts swept along each axis, with linear fits."""
    scan = {}
    counts = [_attention_core_count(base_ne, n, base_c) for n in n_values]
    scan["n_tokens"] = fit_linear(n_values, counts)
    counts = [_attention_core_count(ne, base_n, base_c) for ne in ne_values]
    scan["n_hyperedges"] = fit_linear(ne_values, counts)
    counts = [_attention_core_count(base_ne, base_n, c) for c in c_values]
    scan["channels"] = fit_linear(c_values, counts)
    return scan


def _construction_count(n_tokens: int, n_edges: int, channels: int = 32, seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    side = int(np.sqrt(n_tokens))
    assert side * side == n_tokens, "scan sizes must be square"
    nodes = Tensor(rng.standard_normal((n_tokens, channels)).astype(np.float32))
    tokens = TokenSet.from_nodes(nodes, (side, side))
    with FlopCounter() as c:
        cs_knn(tokens, n_edges, min(16, n_tokens))
    return c.total


def construction_complexity_scan(
    n_values=(64, 144, 256, 400),
    ne_values=(16, 32, 64, 128),
    base_n: int = 400,
    base_ne: int = 32,
) -> dict:
    """Construction flop counts: linear in N with Ne fixed and vice versa."""
    scan = {}
    counts = [_construction_count(n, base_ne) for n in n_values]
    scan["n_tokens"] = fit_linear(n_values, counts)
    counts = [_construction_count(base_n, ne) for ne in ne_values]
    scan["n_hyperedges"] = fit_linear(ne_values, counts)
    product = [n * base_ne for n in n_values] + [base_n * ne for ne in ne_values]
    totals = scan["n_tokens"]["y"] + scan["n_hyperedges"]["y"]
    scan["tokens_x_hyperedges"] = fit_linear(product, totals)
    return scan


def bench_throughput(
    net_cfg: NetworkConfig,
    image_size: int = 32,
    batch: int = 4,
    warmup_iters: int = 2,
    timed_iters: int = 5,
    seed: int = 0,
    threads: int | None = None,
) -> dict:
    """Eval-mode images/s plus per-section wall time and per-image flops.

    Returns ``{"deterministic": ..., "timing": ...}``; only the second half
    varies between runs, so seeded outputs stay byte-stable.
    """
    model = HGFormer(net_cfg, seed=seed)
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 1.0, (batch, 3, image_size, image_size)).astype(np.float32)

    n_workers = worker_count(threads)
    pool = ThreadPoolExecutor(max_workers=n_workers) if n_workers > 1 else None

    def run_batch():
        if pool is not None:
            list(pool.map(lambda i: model.forward(Tensor(images[i])), range(batch)))
        else:
            for i in range(batch):
                model.forward(Tensor(images[i]))

    try:
        for _ in range(warmup_iters):
            run_batch()
        durations = []
        with instrument.collect_timings() as sections:
            for _ in range(timed_iters):
                t0 = time.perf_counter()
                run_batch()
                durations.append(time.perf_counter() - t0)
    finally:
        if pool is not None:
            pool.shutdown()

    with FlopCounter() as flops:
        model.forward(Tensor(images[0]))

    median = float(np.median(durations))
    total = float(sum(durations))
    breakdown = {k: float(v) for k, v in sorted(sections.items())}
    breakdown["other"] = max(0.0, total - sum(breakdown.values()))
    return {
        "deterministic": {
            "variant": net_cfg.name,
            "image_size": image_size,
            "batch": batch,
            "warmup_iters": warmup_iters,
            "timed_iters": timed_iters,
            "param_count": model.parameter_count(),
            "flops_per_image": flops.total,
        },
        "timing": {
            "images_per_s": batch / median if median > 0 else 0.0,
            "seconds_per_iter_median": median,
            "per_op_s": breakdown,
        },
    }
