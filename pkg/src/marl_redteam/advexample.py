"""Step two of the attack: perturbing the victim's observation.

Targeted crafting drives the victim's masked greedy action to the
adversary's chosen target. it-FGSM ascends the target action's Q-value
under an L-infinity budget. The two-feature saliency attack scores every
unordered feature pair by how much a joint move raises the target
Q-value while lowering the other actions' total, filters pairs whose
two effects point the same way, and steps the best pair by theta until
the argmax flips; the dynamic variant retries the whole attack from the
clean observation with progressively larger theta.

All operations are pure functions of (net, obs, hidden, config); the
recurrent hidden state is treated as a constant for the current step,
and every returned observation is clipped to the [-1, 1] feature box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffnet as dn
from .qmix import masked_argmax


@dataclass
class AttackBudget:
    epsilon: float = 0.5                 # L-inf cap for the FGSM family
    alpha: float = 0.05                  # per-iteration it-FGSM step
    theta_schedule: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9)
    max_iters_per_theta: int = 20        # also the it-FGSM iteration cap

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.max_iters_per_theta < 1:
            raise ValueError("max_iters_per_theta must be >= 1")
        sched = tuple(self.theta_schedule)
        if any(not 0.0 < t <= 1.0 for t in sched):
            raise ValueError("every theta must lie in (0, 1]")
        if any(b <= a for a, b in zip(sched, sched[1:])):
            raise ValueError("theta_schedule must be strictly ascending")
        self.theta_schedule = sched

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "alpha": self.alpha,
                "theta_schedule": list(self.theta_schedule),
                "max_iters_per_theta": self.max_iters_per_theta}


@dataclass
class AttackResult:
    perturbed_obs: np.ndarray
    success: bool
    iterations_used: int
    l1_norm: float
    linf_norm: float
    theta_used: float | None = None
    note: str | None = None


@dataclass
class SaliencyEntry:
    i: int
    j: int
    score: float
    direction: float


def _norms(clean: np.ndarray, perturbed: np.ndarray) -> tuple[float, float]:
    diff = perturbed - clean
    return float(np.abs(diff).sum()), float(np.abs(diff).max(initial=0.0))


def _greedy(net: dn.AgentNet, obs: np.ndarray, hidden, mask) -> int:
    q, _, _ = dn.agent_forward(net, obs, hidden)
    return int(masked_argmax(q[None], np.asarray(mask, dtype=bool)[None])[0])


def _result(net, clean, x, hidden, mask, target, iterations, theta=None,
            note=None) -> AttackResult:
    l1, linf = _norms(clean, x)
    success = _greedy(net, x, hidden, mask) == target
    return AttackResult(x, success, iterations, l1, linf, theta, note)


def fgsm_untargeted(net: dn.AgentNet, obs, hidden, mask, epsilon: float
                    ) -> AttackResult:
    """Single descent step on the chosen action's Q-value.

    Success here means the masked greedy action changed at all.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    clean = np.asarray(obs, dtype=np.float64)
    a_star = _greedy(net, clean, hidden, mask)
    sel = np.zeros(net.n_actions)
    sel[a_star] = 1.0
    grad = dn.input_gradient(net, clean, hidden, sel)
    x = np.clip(clean - epsilon * np.sign(grad), -1.0, 1.0)
    l1, linf = _norms(clean, x)
    success = _greedy(net, x, hidden, mask) != a_star
    return AttackResult(x, success, 1, l1, linf)


def it_fgsm(net: dn.AgentNet, obs, hidden, mask, target: int,
            budget: AttackBudget) -> AttackResult:
    """Iterative ascent of the target Q-value inside the epsilon ball."""
    mask = np.asarray(mask, dtype=bool)
    if not mask[target]:
        raise ValueError(f"target action {target} is not available")
    clean = np.asarray(obs, dtype=np.float64)
    if _greedy(net, clean, hidden, mask) == target:
        return AttackResult(clean.copy(), True, 0, 0.0, 0.0)
    sel = np.zeros(net.n_actions)
    sel[target] = 1.0
    lo = np.maximum(clean - budget.epsilon, -1.0)
    hi = np.minimum(clean + budget.epsilon, 1.0)
    x = clean.copy()
    for k in range(1, budget.max_iters_per_theta + 1):
        grad = dn.input_gradient(net, x, hidden, sel)
        x = np.clip(x + budget.alpha * np.sign(grad), lo, hi)
        if _greedy(net, x, hidden, mask) == target:
            return _result(net, clean, x, hidden, mask, target, k)
    return _result(net, clean, x, hidden, mask, target,
                   budget.max_iters_per_theta)


def _pair_scores(jacobian: np.ndarray, target: int
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Score and direction matrices over all feature pairs.

    For features i, j: gt = dQ_target/dx_i + dQ_target/dx_j and
    gn = the same sum over every other action's gradient. Pairs where
    gt and gn share a sign score zero; otherwise the score is -gt*gn
    and the perturbation direction is sign(gt).
    """
    gt_vec = jacobian[target]
    gn_vec = jacobian.sum(axis=0) - gt_vec
    gt = gt_vec[:, None] + gt_vec[None, :]
    gn = gn_vec[:, None] + gn_vec[None, :]
    prod = gt * gn
    score = np.where(prod > 0, 0.0, -prod)
    np.fill_diagonal(score, 0.0)
    return score, np.sign(gt)


def saliency_map_2f(net: dn.AgentNet, obs, hidden, target: int
                    ) -> list[SaliencyEntry]:
    """Two-feature saliency over every unordered pair (i < j)."""
    jac = dn.action_jacobian(net, np.asarray(obs, dtype=np.float64),
                             np.asarray(hidden, dtype=np.float64))
    score, direction = _pair_scores(jac, target)
    n = score.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    return [SaliencyEntry(int(i), int(j), float(score[i, j]),
                          float(direction[i, j]))
            for i, j in zip(iu, ju)]


def jsma_2f(net: dn.AgentNet, obs, hidden, mask, target: int, theta: float,
            max_iters: int) -> AttackResult:
    """Iterative best-pair perturbation with a fixed step size.

    Each iteration recomputes the saliency map at the current point,
    moves the top-scoring active pair by direction * theta, and clips to
    the feature box. A feature that gets pinned at the bound it was
    pushed toward leaves the candidate pool. Stops on success, on an
    all-zero map (failure), or after max_iters.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    mask = np.asarray(mask, dtype=bool)
    if not mask[target]:
        raise ValueError(f"target action {target} is not available")
    clean = np.asarray(obs, dtype=np.float64)
    if _greedy(net, clean, hidden, mask) == target:
        return AttackResult(clean.copy(), True, 0, 0.0, 0.0, theta)
    x = clean.copy()
    active = np.ones(net.input_dim, dtype=bool)
    for it in range(1, max_iters + 1):
        jac = dn.action_jacobian(net, x, hidden)
        score, direction = _pair_scores(jac, target)
        score[~active, :] = 0.0
        score[:, ~active] = 0.0
        upper = np.triu(score, k=1)
        if upper.max() <= 0.0:
            note = ("all-zero saliency at iteration 0" if it == 1
                    else "saliency map exhausted")
            return _result(net, clean, x, hidden, mask, target, it - 1,
                           theta, note)
        flat = int(np.argmax(upper))  # row-major == lexicographic (i, j)
        i, j = divmod(flat, score.shape[1])
        d = direction[i, j]
        for f in (i, j):
            x[f] = float(np.clip(x[f] + d * theta, -1.0, 1.0))
            if (d > 0 and x[f] >= 1.0) or (d < 0 and x[f] <= -1.0):
                active[f] = False
        if _greedy(net, x, hidden, mask) == target:
            return _result(net, clean, x, hidden, mask, target, it, theta)
    return _result(net, clean, x, hidden, mask, target, max_iters, theta)


def d_jsma(net: dn.AgentNet, obs, hidden, mask, target: int,
           budget: AttackBudget) -> AttackResult:
    """Retry the pair attack with each theta in the ascending schedule.

    Every attempt restarts from the clean observation; the first success
    wins, otherwise the largest theta's failure is returned.
    """
    if not budget.theta_schedule:
        raise ValueError("theta_schedule must be non-empty")
    last: AttackResult | None = None
    for theta in budget.theta_schedule:
        last = jsma_2f(net, obs, hidden, mask, target, theta,
                       budget.max_iters_per_theta)
        if last.success:
            return last
    return last
