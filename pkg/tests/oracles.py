"""Independent reference computations used by the unit and acceptance tests.

Each oracle is written the slow, obvious way and shares no code with the
implementation it checks.
"""

import itertools
import math

import numpy as np

from ehnode.ppo import (PolicyParams, log_prob, logprob_and_grad, policy_forward,
                        policy_loss_and_grad, value_loss_and_grad)

FD_STEP = 1e-5


def central_diff(f, x, h=FD_STEP):
    g = np.empty_like(x)
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_error(a, b):
    """Norm-wise relative error, ``|a - b| / max(|a|, |b|)``."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    denom = max(na, nb)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def random_instance(rng, kind="policy"):
    """A small random network, batch and loss inputs.

    For the policy loss the stored log-probs are chosen so every ratio sits
    at least 0.02 away from the clip kinks at ``1 +- eps``.
    """
    depth = int(rng.integers(1, 3))
    hidden = tuple(int(h) for h in rng.integers(3, 9, size=depth))
    params = PolicyParams.init(rng, hidden=hidden, input_dim=4)
    params.policy = params.policy + rng.normal(0, 0.3, params.policy.shape)
    params.value = params.value + rng.normal(0, 0.3, params.value.shape)
    n = int(rng.integers(4, 17))
    obs = rng.normal(0, 1, (n, 4))
    out = {"params": params, "obs": obs, "n": n}
    if kind == "value":
        out["returns"] = rng.normal(0, 2, n)
        return out
    mean, std = policy_forward(obs, params)
    actions = mean + std * rng.normal(0, 1.5, n)
    out["actions"] = actions
    if kind == "policy":
        eps = float(rng.uniform(0.1, 0.3))
        ratios = np.where(rng.random(n) < 0.5,
                          rng.uniform(1 - eps + 0.02, 1 + eps - 0.02, n),
                          np.where(rng.random(n) < 0.5, rng.uniform(0.3, 1 - eps - 0.02, n),
                                   rng.uniform(1 + eps + 0.02, 2.0, n)))
        logp_now = log_prob(actions, mean, std)
        out["logp_old"] = logp_now - np.log(ratios)
        out["adv"] = rng.normal(0, 1, n)
        out["eps"] = eps
        out["ent_coef"] = float(rng.choice([0.0, 0.01]))
    return out


def gradient_errors(inst, kind):
    """``(analytic, numeric)`` gradients of one loss for one instance."""
    p = inst["params"]
    if kind == "policy":
        args = (inst["obs"], inst["actions"], inst["logp_old"], inst["adv"], inst["eps"],
                inst["ent_coef"])

        def f(theta):
            q = p.copy()
            q.policy = theta
            return policy_loss_and_grad(q, *args)[0]
        _, g, _ = policy_loss_and_grad(p, *args)
        return g, central_diff(f, p.policy)
    if kind == "value":
        def f(theta):
            q = p.copy()
            q.value = theta
            return value_loss_and_grad(q, inst["obs"], inst["returns"])[0]
        _, g = value_loss_and_grad(p, inst["obs"], inst["returns"])
        return g, central_diff(f, p.value)
    if kind == "logprob":
        def f(theta):
            q = p.copy()
            q.policy = theta
            return logprob_and_grad(q, inst["obs"], inst["actions"])[0]
        _, g = logprob_and_grad(p, inst["obs"], inst["actions"])
        return g, central_diff(f, p.policy)
    raise ValueError(kind)


def gae_brute(rewards, values, dones, last_value, gamma, lam):
    """Truncated double sum ``A_t = sum_k (gamma lam)^k delta_{t+k}``."""
    T = len(rewards)
    v_next = [values[t + 1] if t + 1 < T else last_value for t in range(T)]
    delta = [rewards[t] + gamma * v_next[t] * (1 - dones[t]) - values[t] for t in range(T)]
    adv = []
    for t in range(T):
        total = 0.0
        for k in range(T - t):
            total += (gamma * lam) ** k * delta[t + k]
            if dones[t + k]:
                break
        adv.append(total)
    adv = np.array(adv)
    return adv, adv + np.asarray(values)


def sarsa_unrolled(transitions, n_states, n_actions, alpha, gamma, lam, q0=None):
    """SARSA(lambda) with replacing traces, spelled out entry by entry."""
    q = [[0.0] * n_actions for _ in range(n_states)] if q0 is None else [list(r) for r in q0]
    e = [[0.0] * n_actions for _ in range(n_states)]
    for s, a, r, s2, a2, terminal in transitions:
        target = r if terminal else r + gamma * q[s2][a2]
        delta = target - q[s][a]
        e[s][a] = 1.0
        for i in range(n_states):
            for j in range(n_actions):
                q[i][j] = q[i][j] + alpha * delta * e[i][j]
                e[i][j] = e[i][j] * gamma * lam
    return np.array(q)


def lp_grid_search(harvest, kappa, b_start, b_max, levels):
    """Best ``sum D`` over every schedule on a duty grid, replayed exactly.

    A schedule is admissible when the load is always served (``B_t > kappa
    D_t``) and the final buffer is at least ``b_start``.
    """
    best, best_sched = -math.inf, None
    for sched in itertools.product(levels, repeat=len(harvest)):
        b, ok = b_start, True
        for d, eh in zip(sched, harvest):
            if not b > kappa * d:
                ok = False
                break
            b = min(b + eh - kappa * d, b_max)
        if ok and b >= b_start - 1e-9 and sum(sched) > best:
            best, best_sched = sum(sched), sched
    return best, best_sched


def constant_harvest_oracle(eh, kappa, hours, b_start, b_max):
    """Optimum of the constant-harvest day by bound plus witness.

    Energy balance caps ``sum kappa D`` at ``hours * eh`` when the day must
    end where it started, so ``sum D <= hours * eh / kappa``. A grid search
    over constant schedules (1001 levels, replayed hour by hour) then finds
    the best admissible one; when it meets the bound, that is the optimum.
    Returns ``(bound, best_found, best_duty)``.
    """
    bound = hours * eh / kappa
    best, best_d = 0.0, None
    for d in np.linspace(0, 1, 1001):
        b, ok = b_start, True
        for _ in range(hours):
            if not b > kappa * d:
                ok = False
                break
            b = min(b + eh - kappa * d, b_max)
        if ok and b >= b_start - 1e-9 and d * hours > best:
            best, best_d = d * hours, float(d)
    return bound, best, best_d
