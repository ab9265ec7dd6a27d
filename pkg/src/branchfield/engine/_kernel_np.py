"""Pure-numpy lane of the hot per-step kernel (1D structured models).

One simulation step for a flat array of particles spanning many independent
trees: fused Euler-Maruyama move, dominated-thinning death clock and
offspring expansion.  The compiled lane in ``_kernel_cy`` implements the
same contract with identical arithmetic ordering and identical
counter-addressed draws, so the two lanes produce bit-identical output.
"""

from __future__ import annotations

import numpy as np

from .. import rng

LANE = "numpy"


def tree_slots(tree: np.ndarray) -> np.ndarray:
    """Within-tree particle index for a tree-sorted id array."""
    n = tree.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    idx = np.arange(n, dtype=np.int64)
    new_run = np.empty(n, dtype=bool)
    new_run[0] = True
    np.not_equal(tree[1:], tree[:-1], out=new_run[1:])
    run_starts = np.where(new_run, idx, 0)
    return idx - np.maximum.accumulate(run_starts)


def step_structured(
    x: np.ndarray,
    tree: np.ndarray,
    dt: float,
    drift_slope: float,
    drift_const: float,
    sig_sqdt: float,
    p_event: float,
    gamma: float,
    gamma_bar: float,
    cum_progeny: np.ndarray,
    seed: int,
    step_index: int,
):
    """Advance all particles one step.

    Returns ``(x_out, tree_out, parent_idx, offspring_counts)`` where the
    output arrays contain survivors at their moved positions and, in place
    of each branching parent, its offspring at the parent's moved position.
    ``parent_idx`` indexes the input arrays.
    """
    n = x.shape[0]
    if n == 0:
        empty_i = np.zeros(0, dtype=np.int64)
        return x.copy(), tree.copy(), empty_i, empty_i

    slots = tree_slots(tree)
    z = rng.gaussians(seed, tree, step_index, slots, 0)
    x_new = x + dt * (drift_slope * x + drift_const) + sig_sqdt * z

    u_evt = rng.uniforms(seed, tree, step_index, slots, 1)
    u_acc = rng.uniforms(seed, tree, step_index, slots, 2)
    u_off = rng.uniforms(seed, tree, step_index, slots, 3)

    event = (u_evt < p_event) & (u_acc * gamma_bar < gamma)
    reps = np.ones(n, dtype=np.int64)
    parent_idx = np.flatnonzero(event)
    counts = np.searchsorted(cum_progeny, u_off[parent_idx], side="right")
    counts = np.minimum(counts, cum_progeny.shape[0] - 1).astype(np.int64)
    reps[parent_idx] = counts

    x_out = np.repeat(x_new, reps)
    tree_out = np.repeat(tree, reps)
    return x_out, tree_out, parent_idx, counts
