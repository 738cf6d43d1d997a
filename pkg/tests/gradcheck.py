"""Central finite-difference gradient check for single-agent networks."""
from __future__ import annotations

import numpy as np

from ffagents import learner
from ffagents.learner import Architecture, Experience, PolicyNet, TrainerConfig


def random_instance(seed: int, arch: Architecture | None = None):
    """A seeded (network, experience, config) triple for one agent."""
    rng = np.random.default_rng(seed)
    arch = arch or Architecture()
    net = PolicyNet.initialize(arch, [np.random.default_rng(seed + 10_000)])
    # spread the weights so that logits and values are far from trivial
    for name in learner.PARAM_NAMES:
        net.params[name] *= rng.uniform(1.0, 2.5)
    shape = (arch.channels, arch.window, arch.window)
    exp = Experience(
        obs=(rng.random(shape) < 0.35).astype(np.uint8),
        action=int(rng.integers(arch.actions)),
        reward=float(rng.choice([-10.0, 0.0, 1.0])),
        next_obs=(rng.random(shape) < 0.35).astype(np.uint8),
        terminal=bool(rng.random() < 0.3),
    )
    cfg = TrainerConfig(gamma=float(rng.uniform(0.5, 0.99)), beta=float(rng.uniform(0.0, 0.5)),
                        value_coef=float(rng.uniform(0.1, 1.0)))
    return net, exp, cfg


def sample_coordinates(arch: Architecture, rng: np.random.Generator, per_tensor: int = 48):
    coords = []
    for name, shape in arch.shapes().items():
        size = int(np.prod(shape)) if shape else 1
        picks = np.arange(size) if size <= per_tensor else rng.choice(size, per_tensor, replace=False)
        coords += [(name, int(i)) for i in picks]
    return coords


def _relu_pattern(cache) -> np.ndarray:
    n = cache.z1.shape[0]
    return np.concatenate([(cache.z1 > 0).reshape(n, -1), (cache.z2 > 0).reshape(n, -1), cache.zh > 0], axis=1)


def finite_difference(net: PolicyNet, exp: Experience, cfg: TrainerConfig, coords, eps: float = 1e-4):
    """Central differences of the frozen-target loss at ``coords`` (one batched forward).

    Returns (derivatives, smooth) where ``smooth`` is False for coordinates
    whose perturbation flips a ReLU unit; the loss is not differentiable
    across such a kink and a finite difference says nothing there.
    """
    _, diag = learner.gradients(net, exp, cfg)
    target, td = diag["target"], diag["td_error"]
    m = len(coords)
    pop = {n: np.repeat(p, 2 * m, axis=0) for n, p in net.params.items()}
    for k, (name, i) in enumerate(coords):
        flat = pop[name].reshape(2 * m, -1)
        flat[2 * k, i] += eps
        flat[2 * k + 1, i] -= eps
    big = PolicyNet(net.arch, pop)
    rep = Experience(
        np.repeat(np.asarray(exp.obs)[None], 2 * m, axis=0), np.full(2 * m, exp.action),
        np.full(2 * m, exp.reward), np.repeat(np.asarray(exp.next_obs)[None], 2 * m, axis=0),
        np.full(2 * m, exp.terminal),
    )
    loss = learner.surrogate_loss(big, rep, cfg, np.repeat(target, 2 * m), np.repeat(td, 2 * m))
    base = _relu_pattern(learner.forward_batch(net, np.asarray(exp.obs)[None]))
    pattern = _relu_pattern(learner.forward_batch(big, rep.obs))
    smooth = np.all(pattern == base, axis=1).reshape(m, 2).all(axis=1)
    return (loss[0::2] - loss[1::2]) / (2 * eps), smooth


def analytic(net: PolicyNet, exp: Experience, cfg: TrainerConfig, coords, factored: bool = False):
    grads, _ = learner.gradients(net, exp, cfg, factored=factored)
    dense = {n: (g.dense() if isinstance(g, learner.Rank1) else g)[0].reshape(-1) for n, g in grads.items()}
    return np.array([dense[name][i] for name, i in coords])


def relative_errors(a: np.ndarray, b: np.ndarray, floor: float = 1e-8):
    """(per-coordinate relative errors, relative error of the whole vector)."""
    per = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    whole = np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return per, whole
