"""Exact tabular machinery: returns, occupancies and the preference-model checks.

Policies are |S| x |A| row-stochastic matrices; a length-|S| integer array is
accepted anywhere a policy is and means the deterministic policy it indexes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import NumericError

NEG_INF = -np.inf
PROB_TOL = 1e-9


@dataclass
class TabularMDP:
    P: np.ndarray       # (S, A, S) transition probabilities
    R: np.ndarray       # (S, A) rewards
    gamma: float
    p0: np.ndarray      # (S,) initial distribution

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.p0 = np.asarray(self.p0, dtype=np.float64)
        S, A = self.R.shape
        if self.P.shape != (S, A, S) or self.p0.shape != (S,):
            raise ValueError(f"inconsistent shapes P{self.P.shape} R{self.R.shape} p0{self.p0.shape}")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if np.any(self.P < 0) or not np.allclose(self.P.sum(-1), 1.0, atol=PROB_TOL):
            raise ValueError("transition rows must be probability vectors")
        if np.any(self.p0 < 0) or abs(self.p0.sum() - 1.0) > PROB_TOL:
            raise ValueError("p0 must be a probability vector")
        if not np.all(np.isfinite(self.R)):
            raise ValueError("rewards must be finite")

    @property
    def n_states(self) -> int:
        return self.R.shape[0]

    @property
    def n_actions(self) -> int:
        return self.R.shape[1]


@dataclass
class TabularSolution:
    Q: np.ndarray
    V: np.ndarray
    rho: np.ndarray
    eta: float


@dataclass
class NoiseSpec:
    eps: float
    eps_tilde: float
    seed: int = 0

    def __post_init__(self):
        if self.eps < 0 or self.eps_tilde < 0:
            raise ValueError("noise bounds must be nonnegative")


def random_mdp(rng: np.random.Generator, n_states: int = 5, n_actions: int = 3,
               gamma: float = 0.9) -> TabularMDP:
    """Dirichlet(1) transition rows, U[0, 1] rewards, uniform start."""
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    R = rng.uniform(0.0, 1.0, (n_states, n_actions))
    return TabularMDP(P, R, gamma, np.full(n_states, 1.0 / n_states))


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> np.ndarray:
    return rng.dirichlet(np.ones(n_actions), size=n_states)


def as_policy(pi, n_actions: int | None = None) -> np.ndarray:
    pi = np.asarray(pi)
    if pi.ndim == 1:
        if n_actions is None:
            raise ValueError("deterministic policy needs n_actions")
        out = np.zeros((len(pi), n_actions))
        out[np.arange(len(pi)), pi.astype(int)] = 1.0
        return out
    pi = pi.astype(np.float64)
    if np.any(pi < 0) or not np.allclose(pi.sum(1), 1.0, atol=PROB_TOL):
        raise ValueError("policy rows must be probability vectors")
    return pi


def _policy_matrices(mdp: TabularMDP, pi):
    pi = as_policy(pi, mdp.n_actions)
    if pi.shape != mdp.R.shape:
        raise ValueError(f"policy shape {pi.shape} does not match MDP {mdp.R.shape}")
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    R_pi = (pi * mdp.R).sum(1)
    return pi, P_pi, R_pi


def _solve(A, b, where):
    try:
        x = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular linear system: {exc}", where) from exc
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite solution", where)
    return x


def bellman_optimality(mdp: TabularMDP, Q) -> np.ndarray:
    return mdp.R + mdp.gamma * mdp.P @ Q.max(1)


def value_iteration(mdp: TabularMDP, tol: float = 1e-12, max_iters: int = 100_000) -> np.ndarray:
    """Optimal Q: value iteration to ``tol`` in sup norm, then exact greedy polish.

    The polish solves the greedy policy's linear system until the greedy
    policy stops changing, which removes the geometric tail of plain sweeps.
    """
    Q = np.zeros_like(mdp.R)
    for _ in range(max_iters):
        Q_new = bellman_optimality(mdp, Q)
        done = np.max(np.abs(Q_new - Q)) <= tol
        Q = Q_new
        if done:
            break
    greedy_a = Q.argmax(1)
    for _ in range(mdp.n_states * mdp.n_actions + 1):
        Q_pi, _ = policy_evaluation(mdp, greedy_a)
        nxt = Q_pi.argmax(1)
        # keep ties stable so the loop terminates
        keep = Q_pi[np.arange(mdp.n_states), greedy_a] >= Q_pi.max(1) - 1e-14
        nxt = np.where(keep, greedy_a, nxt)
        if np.array_equal(nxt, greedy_a):
            return Q_pi
        greedy_a = nxt
    return Q_pi


def policy_evaluation(mdp: TabularMDP, pi):
    """Exact ``(Q_pi, V_pi)`` from ``V = R_pi + gamma P_pi V``."""
    pi, P_pi, R_pi = _policy_matrices(mdp, pi)
    V = _solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, R_pi, "policy_evaluation")
    Q = mdp.R + mdp.gamma * mdp.P @ V
    return Q, V


def soft_policy_evaluation(mdp: TabularMDP, pi, alpha: float):
    """Fixed point of ``Q = R + gamma P (pi . (Q - alpha log pi))`` with 0 log 0 = 0."""
    pi, P_pi, R_pi = _policy_matrices(mdp, pi)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(pi > 0, pi * np.log(np.where(pi > 0, pi, 1.0)), 0.0).sum(1)
    V = _solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, R_pi - alpha * plogp, "soft_policy_evaluation")
    # V here is the soft value of the next-state distribution: E_pi[Q - alpha log pi]
    Q = mdp.R + mdp.gamma * mdp.P @ V
    return Q, V


def exact_return(mdp: TabularMDP, pi) -> float:
    return float(mdp.p0 @ policy_evaluation(mdp, pi)[1])


def occupancy(mdp: TabularMDP, pi) -> np.ndarray:
    """Discounted state visitation ``(I - gamma P_pi^T)^-1 p0``; sums to 1/(1-gamma)."""
    _, P_pi, _ = _policy_matrices(mdp, pi)
    return _solve(np.eye(mdp.n_states) - mdp.gamma * P_pi.T, mdp.p0, "occupancy")


def solve_policy(mdp: TabularMDP, pi) -> TabularSolution:
    Q, V = policy_evaluation(mdp, pi)
    return TabularSolution(Q, V, occupancy(mdp, pi), float(mdp.p0 @ V))


def solve_optimal(mdp: TabularMDP) -> TabularSolution:
    Q = value_iteration(mdp)
    return TabularSolution(Q, Q.max(1), occupancy(mdp, Q.argmax(1)), float(mdp.p0 @ Q.max(1)))


def pdl_check(mdp: TabularMDP, pi1, pi2) -> float:
    """|(eta1 - eta2) - sum_s rho_1(s) E_{a~pi1}[Q_2(s, a) - V_2(s)]|."""
    p1 = as_policy(pi1, mdp.n_actions)
    Q2, V2 = policy_evaluation(mdp, pi2)
    rho1 = occupancy(mdp, p1)
    adv = (p1 * Q2).sum(1) - V2
    lhs = exact_return(mdp, p1) - float(mdp.p0 @ V2)
    return abs(lhs - float(rho1 @ adv))


# --- implicit Q and preferences --------------------------------------------

def implicit_q(Q, pi_beta, lam: float) -> np.ndarray:
    """``Q + log(pi_beta) / lam``; zero-probability actions get -inf."""
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    Q = np.asarray(Q, dtype=np.float64)
    pb = np.asarray(pi_beta, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logp = np.log(pb)
    return np.where(pb > 0, Q + logp / lam, NEG_INF)


def soft_preference(Qt, s: int, a1: int, a2: int) -> float:
    """``Qt[s, a1] - Qt[s, a2]``; equal sentinels compare as 0."""
    if a1 == a2:
        return 0.0
    x, y = Qt[s, a1], Qt[s, a2]
    if x == y:
        return 0.0
    return float(x - y)


def greedy(Qt) -> np.ndarray:
    """Per-state argmax over finite entries (sentinel actions are never chosen)."""
    Qt = np.asarray(Qt, dtype=np.float64)
    if np.any(np.all(~np.isfinite(Qt), axis=1)):
        raise ValueError("a state has no finite action value")
    return np.where(np.isfinite(Qt), Qt, -np.inf).argmax(1)


def assumption1_check(mdp: TabularMDP | None, Qt, pi_beta, tol: float = 1e-12):
    """Ordered pairs with ``pi_beta(a1|s) >= pi_beta(a2|s)`` but ``P(s, a1, a2) < -tol``.

    Returns ``(s, a1, a2, P)`` tuples; the MDP argument is only used for a shape check.
    """
    Qt = np.asarray(Qt, dtype=np.float64)
    pb = np.asarray(pi_beta, dtype=np.float64)
    if mdp is not None and Qt.shape != mdp.R.shape:
        raise ValueError("Q-tilde shape does not match the MDP")
    out = []
    S, A = Qt.shape
    for s in range(S):
        for a1 in range(A):
            for a2 in range(A):
                if a1 == a2 or pb[s, a1] < pb[s, a2]:
                    continue
                p = soft_preference(Qt, s, a1, a2)
                if p < -tol:
                    out.append((s, a1, a2, p))
    return out


def adversarial_instance(rng: np.random.Generator, n_states: int = 5, n_actions: int = 4,
                         sharpness: float = 2.0):
    """(Q, pi_beta) with the behavior policy favouring low-value actions."""
    Q = rng.uniform(0.0, 1.0, (n_states, n_actions))
    logits = -sharpness * Q + 0.1 * rng.standard_normal(Q.shape)
    pb = np.exp(logits - logits.max(1, keepdims=True))
    return Q, pb / pb.sum(1, keepdims=True)


# --- propositions ------------------------------------------------------------

def behavior_mode(pi_beta) -> np.ndarray:
    return np.asarray(pi_beta).argmax(1)


@dataclass
class Prop1Report:
    surrogate_nonneg: bool
    eta_gap: float
    surrogate: float


def prop1_check(mdp: TabularMDP, pi_beta, lam: float) -> Prop1Report:
    """Argmax dominance of the greedy implicit-Q policy over the behavior mode.

    surrogate = sum_s rho_b(s) (Qt(s, greedy(s)) - Qt(s, b(s))) with ``b`` the
    behavior mode; ``eta_gap`` is the exact return difference for comparison.
    """
    pb = as_policy(pi_beta, mdp.n_actions)
    Qt = implicit_q(value_iteration(mdp), pb, lam)
    b = behavior_mode(pb)
    pt = greedy(Qt)
    idx = np.arange(mdp.n_states)
    surrogate = float(occupancy(mdp, b) @ (Qt[idx, pt] - Qt[idx, b]))
    gap = exact_return(mdp, pt) - exact_return(mdp, b)
    return Prop1Report(surrogate >= 0.0, gap, surrogate)


@dataclass
class Prop2Report:
    slack: float
    holds: bool
    mismatch: float
    surrogate: float
    eta_gap: float
    rho_max: float
    delta_at_behavior: float
    delta_at_greedy: float


def inject_noise(Qt, b, noise: NoiseSpec):
    """Uniform noise bounded by ``eps`` at the behavior action and ``eps_tilde`` elsewhere.

    The behavior action can also be the greedy one, so it gets the tighter of
    the two bounds; both bounds then hold whichever action ends up greedy.
    """
    rng = np.random.default_rng(noise.seed)
    S, A = Qt.shape
    bound = np.full((S, A), noise.eps_tilde)
    bound[np.arange(S), b] = min(noise.eps, noise.eps_tilde)
    delta = rng.uniform(-1.0, 1.0, (S, A)) * bound
    return Qt + delta, delta


def prop2_check(mdp: TabularMDP, pi_beta, lam: float, noise: NoiseSpec,
                constrain_to_behavior: bool = False) -> Prop2Report:
    pb = as_policy(pi_beta, mdp.n_actions)
    Qt = implicit_q(value_iteration(mdp), pb, lam)
    b = behavior_mode(pb)
    Qn, delta = inject_noise(Qt, b, noise)
    pt = b.copy() if constrain_to_behavior else greedy(Qn)
    idx = np.arange(mdp.n_states)
    d_b = float(np.max(np.abs(delta[idx, b])))
    d_t = float(np.max(np.abs(delta[idx, pt])))
    if d_b > noise.eps + 1e-15 or d_t > noise.eps_tilde + 1e-15:
        raise NumericError("injected noise exceeds its bound", "prop2_check")
    rho_b = occupancy(mdp, b)
    rho_t = occupancy(mdp, pt)
    rho_max = float(rho_b.max())
    surrogate = float(rho_b @ (Qn[idx, pt] - Qn[idx, b]))
    gap = exact_return(mdp, pt) - exact_return(mdp, b)
    slack = surrogate + 2.0 * rho_max * (noise.eps_tilde + noise.eps) - gap
    return Prop2Report(slack, slack >= -1e-9, float(np.max(np.abs(rho_t - rho_b))),
                       surrogate, gap, rho_max, d_b, d_t)


def rho_bounds(mdp: TabularMDP, pi):
    rho = occupancy(mdp, pi)
    lo = 1.0 / (mdp.n_states * (1.0 - mdp.gamma))
    hi = 1.0 / (1.0 - mdp.gamma)
    return lo, float(rho.max()), hi


def rho_bounds_check(mdp: TabularMDP, pi_beta, tol: float = 1e-12) -> bool:
    lo, m, hi = rho_bounds(mdp, pi_beta)
    return lo - tol * hi <= m <= hi + tol * hi


def tvd_sup(u, v) -> float:
    """Largest event-probability gap, attained on the event {u > v}."""
    d = np.asarray(u, dtype=np.float64) - np.asarray(v, dtype=np.float64)
    return float(d[d > 0].sum())


def tvd_half_l1(u, v) -> float:
    return 0.5 * float(np.abs(np.asarray(u, dtype=np.float64) - np.asarray(v, dtype=np.float64)).sum())


# --- batch verification -------------------------------------------------------

def _report(check, instances, violations, worst):
    return {"check": check, "instances": int(instances), "violations": int(violations), "worst_slack": float(worst)}


def verify_suite(instances: int = 100, seed: int = 0, gamma: float = 0.9, lam: float = 1.0,
                 noise: float = 0.1) -> list[dict]:
    """Run every exact check on random instances; ``worst_slack`` < 0 marks a failure."""
    rng = np.random.default_rng(seed)
    reports = []
    mdps = [random_mdp(rng, gamma=gamma) for _ in range(instances)]
    pis = [(random_policy(rng, 5, 3), random_policy(rng, 5, 3)) for _ in range(instances)]

    res = [pdl_check(m, a, b) for m, (a, b) in zip(mdps, pis)]
    reports.append(_report("pdl", instances, sum(r > 1e-10 for r in res), 1e-10 - max(res)))

    mass = [abs(occupancy(m, a).sum() - 1 / (1 - m.gamma)) for m, (a, _) in zip(mdps, pis)]
    reports.append(_report("occupancy_mass", instances, sum(r > 1e-9 for r in mass), 1e-9 - max(mass)))

    vi = [np.max(np.abs(bellman_optimality(m, value_iteration(m)) - value_iteration(m))) for m in mdps]
    reports.append(_report("bellman_residual", instances, sum(r > 1e-10 for r in vi), 1e-10 - max(vi)))

    slack = []
    for m, (a, _) in zip(mdps, pis):
        lo, mx, hi = rho_bounds(m, a)
        slack.append(min(mx - lo, hi - mx))
    reports.append(_report("rho_bounds", instances, sum(not rho_bounds_check(m, a) for m, (a, _) in zip(mdps, pis)),
                           min(slack)))

    p1 = [prop1_check(m, a, lam) for m, (a, _) in zip(mdps, pis)]
    reports.append(_report("prop1_surrogate", instances, sum(not r.surrogate_nonneg for r in p1),
                           min(r.surrogate for r in p1)))

    limit = 0.05 / (1 - gamma)
    p2 = [prop2_check(m, a, lam, NoiseSpec(noise, noise, seed=seed * 100_003 + i))
          for i, (m, (a, _)) in enumerate(zip(mdps, pis))]
    kept = [r for r in p2 if r.mismatch <= limit]
    rep = _report("prop2_bound", len(kept), sum(not r.holds for r in kept),
                  min((r.slack for r in kept), default=0.0))
    rep["excluded_large_mismatch"] = len(p2) - len(kept)
    rep["excluded_worst_slack"] = min((r.slack for r in p2 if r.mismatch > limit), default=None)
    reports.append(rep)

    tv = []
    for _ in range(instances):
        u, v = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
        tv.append(abs(tvd_sup(u, v) - tvd_half_l1(u, v)))
    reports.append(_report("tvd_identity", instances, sum(r > 1e-12 for r in tv), 1e-12 - max(tv)))
    return reports


def prop_report_dict(r) -> dict:
    return asdict(r)
