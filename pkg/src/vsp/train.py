"""Toy alignment task and a deterministic gradient-descent loop.

The task pairs synthetic patch grids with fixed random target embeddings and
scores the projector by mean squared error over all visual tokens. The
optimizer is plain gradient descent with halve-on-increase step control: a
candidate step that raises the loss is retried with half the learning rate
(same gradient) until the loss stops increasing, which keeps the recorded
loss curve monotone nonincreasing once the step size has settled.
"""

import math
from dataclasses import dataclass

from . import projector
from . import tensor as T
from .rng import StreamRng
from .tensor import NumericsError, Parameter, TensorError


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; `step` is the failing step."""

    def __init__(self, step, message="non-finite loss"):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class ToyTask:
    grids: list       # (G, G, C) tensors
    targets: list     # (n_visual, llm_dim) tensors
    seed: int


def make_toy_task(cfg, num_samples=2, seed=1):
    """Deterministic task: noise grids with reachable target embeddings.

    Targets are the visual tokens a reference projector (same config,
    shifted seed) produces for each grid, so the alignment objective has a
    zero-loss solution and gradient descent has somewhere to go. Grids and
    targets regenerate bit-identically from (cfg, seed).
    """
    if num_samples < 1:
        raise TensorError("task needs at least one sample")
    rng = StreamRng(seed)
    dt = cfg.np_dtype
    reference_cfg = cfg.with_overrides(seed=cfg.seed + 7919)
    reference = projector.init_params(reference_cfg)
    grids, targets = [], []
    for i in range(num_samples):
        grid = T.Tensor(
            rng.normal(f"task.grid{i}", (cfg.grid, cfg.grid, cfg.enc_dim), dtype=dt)
        )
        with T.no_grad():
            out = projector.projector_forward(reference_cfg, grid, reference)
            target = T.concat([out.spatial_tokens, out.patch_tokens], axis=0)
        grids.append(grid)
        targets.append(T.Tensor(target.data))
    return ToyTask(grids=grids, targets=targets, seed=seed)


def task_loss(cfg, params, task):
    """Mean squared alignment error over all samples, as a scalar tensor."""
    total = None
    for grid, target in zip(task.grids, task.targets):
        out = projector.projector_forward(cfg, grid, params)
        pred = T.concat([out.spatial_tokens, out.patch_tokens], axis=0)
        diff = T.sub(pred, target)
        sample = T.mean_all(T.mul(diff, diff))
        total = sample if total is None else T.add(total, sample)
    return T.scale(total, 1.0 / len(task.grids))


@dataclass
class TrainResult:
    initial_loss: float
    losses: list      # accepted loss after each step
    params: dict
    final_lr: float


def toy_train(cfg, task, steps, lr, params=None, max_halvings=60):
    """Gradient descent over all projector parameters.

    Returns the per-step loss curve. lr = 0 is allowed and leaves the
    parameters (and the loss) unchanged. A non-finite loss at the current
    iterate aborts with DivergenceError; non-finite candidate steps are
    treated as increases and absorbed by the halving control.
    """
    if steps < 1:
        raise TensorError("steps must be >= 1")
    if lr < 0:
        raise TensorError("learning rate must be nonnegative")
    if params is None:
        params = projector.init_params(cfg)

    def eval_loss(p):
        with T.no_grad():
            return task_loss(cfg, p, task).item()

    try:
        current = eval_loss(params)
    except NumericsError as e:
        raise DivergenceError(0, str(e)) from e
    if not math.isfinite(current):
        raise DivergenceError(0)
    initial = current

    losses = []
    for step in range(1, steps + 1):
        try:
            grads = T.gradients(task_loss(cfg, params, task), params)
        except NumericsError as e:
            raise DivergenceError(step, str(e)) from e

        accepted = None
        trial_lr = lr
        for _ in range(max_halvings + 1):
            candidate = {
                name: p.with_data(p.data - trial_lr * grads[name])
                for name, p in params.items()
            }
            try:
                cand_loss = eval_loss(candidate)
            except NumericsError:
                cand_loss = math.inf
            if cand_loss <= current or trial_lr == 0.0:
                accepted = (candidate, cand_loss)
                break
            trial_lr *= 0.5
        if accepted is None:
            # gradient step would not decrease at any tried rate; hold still
            accepted = (params, current)
        params, current = accepted
        lr = trial_lr if trial_lr > 0 else lr
        losses.append(current)
    return TrainResult(initial_loss=initial, losses=losses, params=params,
                       final_lr=lr)
