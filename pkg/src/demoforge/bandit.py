"""Thompson-sampling bandit over annotations, with dynamic arm creation.

Each annotation is an arm with posterior Beta(n_suc+1, n_fail+1). Pulling an
arm means running one rollout from that annotation. The interesting part is
deciding when minting a brand-new annotation beats milking the arms we have:
the expected value of adding an arm is estimated by brute-force simulation
over k sampled ground-truth probability vectors and compared against staying
put, using common random numbers so the comparison is noise-free.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import betaincinv, betaln


class NoArms(ValueError):
    """Operation needs at least one arm."""


class GoalReached(ValueError):
    """current_successes already meets the goal; no horizon to estimate."""


@dataclass
class Arm:
    annotation_id: str
    n_suc: int = 0
    n_fail: int = 0

    def __post_init__(self):
        if self.n_suc < 0 or self.n_fail < 0:
            raise ValueError("arm counts must be nonnegative")

    @property
    def posterior_mean(self) -> float:
        return (self.n_suc + 1) / (self.n_suc + self.n_fail + 2)


@dataclass
class BanditState:
    arms: list[Arm] = field(default_factory=list)
    new_arm_attempts: int = 0
    new_arm_successes: int = 0
    goal_successes: int = 0
    current_successes: int = 0
    rng_seed: int = 0

    def to_json(self) -> dict:
        return {
            "arms": [{"annotation_id": a.annotation_id, "n_suc": a.n_suc, "n_fail": a.n_fail} for a in self.arms],
            "new_arm_attempts": self.new_arm_attempts,
            "new_arm_successes": self.new_arm_successes,
            "goal": self.goal_successes,
            "current": self.current_successes,
            "seed": self.rng_seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "BanditState":
        return cls(
            arms=[Arm(a["annotation_id"], a["n_suc"], a["n_fail"]) for a in doc["arms"]],
            new_arm_attempts=doc["new_arm_attempts"],
            new_arm_successes=doc["new_arm_successes"],
            goal_successes=doc["goal"],
            current_successes=doc["current"],
            rng_seed=doc["seed"],
        )


@dataclass
class PriorFit:
    """Maximum-likelihood Beta over pooled posterior samples: the prior a
    fresh annotation's success rate is assumed to be drawn from."""

    alpha_hat: float
    beta_hat: float
    m: int

    def __post_init__(self):
        if not (self.alpha_hat > 0 and self.beta_hat > 0):
            raise ValueError("fitted parameters must be positive")

    @property
    def mean(self) -> float:
        return self.alpha_hat / (self.alpha_hat + self.beta_hat)


def thompson_select(state: BanditState, rng) -> int:
    """One posterior draw per arm; the argmax wins, lowest index on ties."""
    if not state.arms:
        raise NoArms("thompson_select needs at least one arm")
    rng = np.random.default_rng(rng)
    draws = np.array([rng.beta(a.n_suc + 1, a.n_fail + 1) for a in state.arms])
    return int(np.argmax(draws))


def record_outcome(state: BanditState, arm_index: int, success: bool) -> BanditState:
    arm = state.arms[arm_index]
    if success:
        arm.n_suc += 1
    else:
        arm.n_fail += 1
    return state


def estimate_p_add(state: BanditState) -> float:
    """Laplace estimate of the chance a freshly minted annotation works."""
    return (state.new_arm_successes + 1) / (state.new_arm_attempts + 2)


def estimate_horizon(state: BanditState) -> int:
    """Remaining pulls needed: (goal - current) / best posterior mean, ceil."""
    if state.current_successes >= state.goal_successes:
        raise GoalReached(f"{state.current_successes} >= goal {state.goal_successes}")
    if not state.arms:
        raise NoArms("estimate_horizon needs at least one arm")
    best = max(a.posterior_mean for a in state.arms)
    return max(1, math.ceil((state.goal_successes - state.current_successes) / best))


def _beta_neg_loglik(log_params: np.ndarray, samples: np.ndarray) -> float:
    a, b = np.exp(log_params)
    return float(len(samples) * betaln(a, b) - (a - 1) * np.sum(np.log(samples)) - (b - 1) * np.sum(np.log1p(-samples)))


def fit_arm_prior(arms: list[Arm], m: int = 1000, rng=None) -> PriorFit:
    """MLE Beta fit over m posterior samples pooled from every arm."""
    if not arms:
        raise NoArms("fit_arm_prior needs at least one arm")
    rng = np.random.default_rng(rng)
    pooled = np.concatenate([rng.beta(a.n_suc + 1, a.n_fail + 1, size=m) for a in arms])
    pooled = np.clip(pooled, 1e-6, 1.0 - 1e-6)

    # method-of-moments start, then Nelder-Mead on (log a, log b)
    mu, var = float(np.mean(pooled)), float(np.var(pooled))
    common = max(mu * (1 - mu) / max(var, 1e-12) - 1.0, 1e-3)
    x0 = np.log(np.clip([mu * common, (1 - mu) * common], 1e-3, 1e6))
    res = minimize(_beta_neg_loglik, x0, args=(pooled,), method="Nelder-Mead", options={"xatol": 1e-8, "fatol": 1e-10})
    alpha_hat, beta_hat = np.exp(res.x)
    return PriorFit(float(alpha_hat), float(beta_hat), m)


def estimate_rollout_value(probability_sets: np.ndarray, arms: list[tuple[int, int]], T: int, rng) -> float:
    """Mean total successes of T Thompson pulls, averaged over k ground truths.

    probability_sets is (k, n): row j is one sampled ground-truth success
    probability per arm. arms gives the (n_suc, n_fail) starting counts of
    the matching virtual arms. Every simulated step consumes a fixed amount
    of randomness (posterior draws via the inverse regularized incomplete
    beta on pre-drawn uniforms), so with the same seed a T-step run is a
    bitwise prefix of a (T+1)-step run and raising any ground-truth p only
    flips failures into successes.
    """
    probability_sets = np.asarray(probability_sets, dtype=float)
    if probability_sets.ndim == 1:  # k samples of a single arm
        probability_sets = probability_sets[:, None]
    k, n = probability_sets.shape
    if len(arms) != n:
        raise ValueError(f"{len(arms)} arms but probability sets have {n} columns")
    if T <= 0:
        return 0.0
    rng = np.random.default_rng(rng)

    suc = np.tile(np.asarray([a[0] for a in arms], dtype=float), (k, 1))
    fail = np.tile(np.asarray([a[1] for a in arms], dtype=float), (k, 1))
    total = np.zeros(k)
    rows = np.arange(k)
    for _ in range(T):
        u_theta = rng.random((k, n))
        u_out = rng.random(k)
        theta = betaincinv(suc + 1.0, fail + 1.0, u_theta)
        choice = np.argmax(theta, axis=1)
        p_true = probability_sets[rows, choice]
        won = u_out < p_true
        suc[rows, choice] += won
        fail[rows, choice] += ~won
        total += won
    return float(np.mean(total))


@dataclass
class AddDecision:
    """Everything decide_new_arm looked at, for auditing and tests."""

    decision: bool
    e_stay: float  # E_T(P)
    e_keep: float  # E_{T-1}(P)
    e_with_new: float  # E_{T-1}(P + {p_new})
    p_add: float
    probability_sets: np.ndarray
    p_new: np.ndarray
    eval_seed: int


def evaluate_add_decision(state: BanditState, T: int, prior: PriorFit, k: int = 1000, rng=None) -> AddDecision:
    """Work out whether minting a new annotation beats pulling existing arms.

    E_add = P_add * (1 + E_{T-1}(P + {p_new})) + (1 - P_add) * E_{T-1}(P),
    compared against E_T(P). The k ground-truth probability sets are drawn
    once and shared by all three estimates, which also share one eval seed.
    The virtual new arm starts at 1 success / 0 failures.
    """
    rng = np.random.default_rng(rng)
    counts = [(a.n_suc, a.n_fail) for a in state.arms]
    n = len(counts)
    prob_sets = np.empty((k, n))
    for i, (s, f) in enumerate(counts):
        prob_sets[:, i] = rng.beta(s + 1, f + 1, size=k)
    p_new = rng.beta(prior.alpha_hat, prior.beta_hat, size=k)
    eval_seed = int(rng.integers(2**63))

    e_stay = estimate_rollout_value(prob_sets, counts, T, eval_seed)
    e_keep = estimate_rollout_value(prob_sets, counts, T - 1, eval_seed)
    e_with_new = estimate_rollout_value(
        np.column_stack([prob_sets, p_new]), counts + [(1, 0)], T - 1, eval_seed
    )
    p_add = estimate_p_add(state)
    e_add = p_add * (1.0 + e_with_new) + (1.0 - p_add) * e_keep
    return AddDecision(
        decision=bool(e_add > e_stay),
        e_stay=e_stay,
        e_keep=e_keep,
        e_with_new=e_with_new,
        p_add=p_add,
        probability_sets=prob_sets,
        p_new=p_new,
        eval_seed=eval_seed,
    )


def decide_new_arm(state: BanditState, T: int, prior: PriorFit, k: int = 1000, rng=None) -> bool:
    """True when a new annotation is worth minting. With no arms, always."""
    if not state.arms:
        return True
    return evaluate_add_decision(state, T, prior, k=k, rng=rng).decision
