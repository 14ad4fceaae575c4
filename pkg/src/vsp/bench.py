"""Analytic prefill cost model and measured projector timings.

The prefill model covers a standard pre-norm decoder block: per layer the
token-linear work is LINEAR_COEF * T * D**2 FLOPs (Q, K, V and output
projections plus a 4x-wide two-matmul MLP, at 2 FLOPs per multiply-add)
and the attention work is QUAD_COEF * T**2 * D FLOPs (score matrix plus
weighted value sum). Norms and softmax are omitted; they are lower order
in both T and D.
"""

import time
from dataclasses import dataclass

from . import projector, synth
from . import tensor as T

# 2 * (4 matmuls at D*D + up/down MLP matmuls at 4*D*D) = 2 * 12
LINEAR_COEF = 24
# 2 * (Q @ K^T + weights @ V)
QUAD_COEF = 4


def prefill_flops(tokens, llm_dim, layers):
    """Analytic FLOPs to prefill `tokens` positions, split by term."""
    if tokens < 0 or llm_dim < 1 or layers < 1:
        raise ValueError("tokens must be >= 0, llm_dim and layers >= 1")
    linear = layers * LINEAR_COEF * tokens * llm_dim ** 2
    quadratic = layers * QUAD_COEF * tokens ** 2 * llm_dim
    return {"linear": linear, "quadratic": quadratic,
            "total": linear + quadratic}


def prefill_ratio(tokens_a, tokens_b, llm_dim=4096, layers=32):
    """Per-term FLOP ratios between two token counts (a over b)."""
    fa = prefill_flops(tokens_a, llm_dim, layers)
    fb = prefill_flops(tokens_b, llm_dim, layers)
    return {
        "linear": fa["linear"] / fb["linear"],
        "quadratic": fa["quadratic"] / fb["quadratic"],
        "total": fa["total"] / fb["total"],
    }


@dataclass
class BenchResult:
    iterations: int
    seconds_per_forward: float
    stage_seconds: dict          # mean seconds per stage
    spatial_seconds: float
    patch_seconds: float

    @property
    def spatial_fraction(self):
        return self.spatial_seconds / self.seconds_per_forward


def measure_projector(cfg, iterations=100, warmup=2, seed=0, params=None,
                      grid=None):
    """Wall time of the projector forward, split into branch stages.

    Runs `warmup` untimed passes then `iterations` timed ones over the same
    input, without graph recording. Stage times are means per forward.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if params is None:
        params = projector.init_params(cfg)
    if grid is None:
        grid = synth.gen_synthetic_features(
            "noise", cfg.grid, cfg.enc_dim, seed=seed, dtype=cfg.np_dtype
        )
    with T.no_grad():
        for _ in range(warmup):
            projector.projector_forward(cfg, grid, params)
        timings = {}
        t0 = time.perf_counter()
        for _ in range(iterations):
            projector.projector_forward(cfg, grid, params, timings=timings)
        elapsed = time.perf_counter() - t0
    stage_means = {k: v / iterations for k, v in timings.items()}
    spatial = sum(stage_means.get(s, 0.0) for s in projector.SPATIAL_STAGES)
    patch = sum(stage_means.get(s, 0.0) for s in projector.PATCH_STAGES)
    return BenchResult(
        iterations=iterations,
        seconds_per_forward=elapsed / iterations,
        stage_seconds=stage_means,
        spatial_seconds=spatial,
        patch_seconds=patch,
    )
