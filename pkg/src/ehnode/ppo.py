"""Proximal policy optimisation with a Gaussian duty-cycle policy.

Everything is plain numpy: two separate tanh MLPs (policy and value),
analytic gradients from :mod:`ehnode.mlp`, GAE advantages and the clipped
surrogate objective optimised with Adam.

The policy network has two outputs per state: the mean of the action
distribution and a raw value mapped to a standard deviation through
``softplus(raw) + std_floor``. Sampled actions are clipped to the node's
duty bounds by the caller; log-probabilities always refer to the unclipped
sample.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from ehnode import mlp
from ehnode.mlp import MlpSpec

log = logging.getLogger(__name__)

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
SNAPSHOT_MAGIC = b"EHNODE-POLICY 1\n"


class NumericalError(RuntimeError):
    def __init__(self, msg: str, diagnostics: Optional[dict] = None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class PpoHyper:
    learning_rate: float = 3e-4
    batch_size: int = 2048
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    update_epochs: int = 10
    total_steps: int = 200_000
    std_floor: float = 1e-3
    minibatch_size: int = 256
    num_envs: int = 8
    max_grad_norm: float = 0.5
    ent_coef: float = 0.0
    reward_scale: float = 1.0
    bootstrap_truncated: bool = True
    hidden: tuple = (64, 64)
    init_std: Optional[float] = None
    init_mean: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not self.clip_epsilon > 0:
            raise ValueError("clip_epsilon must be > 0")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must be in (0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.batch_size % self.num_envs:
            raise ValueError("batch_size must be a multiple of num_envs")
        if self.update_epochs < 1 or self.minibatch_size < 1:
            raise ValueError("update_epochs and minibatch_size must be >= 1")
        if self.init_std is not None and not self.init_std > self.std_floor:
            raise ValueError("init_std must exceed std_floor")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class PolicyParams:
    policy_spec: MlpSpec
    value_spec: MlpSpec
    policy: np.ndarray
    value: np.ndarray
    std_floor: float = 1e-3
    obs_scale: np.ndarray = field(default_factory=lambda: np.ones(4))
    duty_bounds: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.policy_spec.output_dim != 2:
            raise ValueError("policy network needs two outputs (mean, std)")
        if self.policy.shape != (self.policy_spec.n_params,):
            raise ValueError("policy parameter count does not match its spec")
        if self.value.shape != (self.value_spec.n_params,):
            raise ValueError("value parameter count does not match its spec")
        self.obs_scale = np.asarray(self.obs_scale, dtype=np.float64)

    @classmethod
    def init(cls, rng: np.random.Generator, hidden=(64, 64), input_dim: int = 4,
             std_floor: float = 1e-3, obs_scale=None, duty_bounds=(0.0, 1.0),
             init_std: Optional[float] = None, init_mean: Optional[float] = None) -> "PolicyParams":
        """Glorot-initialised networks.

        With ``init_std`` or ``init_mean`` set, the policy's output layer is
        scaled by 0.01 and its biases are chosen so that every state starts
        near that mean and standard deviation.
        """
        ps = MlpSpec(input_dim, tuple(hidden), 2)
        vs = MlpSpec(input_dim, tuple(hidden), 1)
        pol = mlp.init_params(ps, rng)
        if init_std is not None or init_mean is not None:
            W, b = mlp.unpack(ps, pol)[-1]
            W *= 0.01
            if init_mean is not None:
                b[0] = init_mean
            if init_std is not None:
                b[1] = softplus_inv(init_std - std_floor)
        return cls(ps, vs, pol, mlp.init_params(vs, rng), std_floor,
                   np.ones(input_dim) if obs_scale is None else obs_scale, tuple(duty_bounds))

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.policy_spec, self.value_spec, self.policy.copy(),
                            self.value.copy(), self.std_floor, self.obs_scale.copy(),
                            self.duty_bounds)

    def normalize(self, obs) -> np.ndarray:
        return np.atleast_2d(np.asarray(obs, dtype=np.float64)) / self.obs_scale

    def act(self, obs) -> float:
        """Deterministic action: the clipped policy mean for one raw observation."""
        mean, _ = policy_forward(self.normalize(obs), self)
        lo, hi = self.duty_bounds
        return float(min(max(mean[0], lo), hi))

    def value_of(self, obs_norm: np.ndarray) -> np.ndarray:
        out, _ = mlp.forward(self.value_spec, self.value, obs_norm)
        return out[:, 0]


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def policy_forward(obs_norm: np.ndarray, params: PolicyParams):
    """Mean and standard deviation for a batch of normalised observations."""
    if not np.all(np.isfinite(params.policy)):
        raise NumericalError("non-finite policy parameters")
    out, _ = mlp.forward(params.policy_spec, params.policy, obs_norm)
    return out[:, 0], softplus(out[:, 1]) + params.std_floor


def log_prob(action, mean, std):
    """Log density of N(mean, std^2) at ``action``."""
    z = (action - mean) / std
    return -0.5 * z * z - np.log(std) - LOG_SQRT_2PI


def sample_action(mean, std, rng: np.random.Generator, duty_min: float = 0.0,
                  duty_max: float = 1.0):
    """Returns ``(raw, applied)``; ``applied`` is ``raw`` clipped to the duty bounds."""
    raw = mean + std * rng.standard_normal(np.shape(mean))
    return raw, np.clip(raw, duty_min, duty_max)


def compute_gae(rewards, values, dones, last_value, gamma: float, lam: float):
    """Generalised advantage estimates and value targets.

    Arrays are time-major, shape ``(T,)`` or ``(T, n_envs)``. ``dones[t]``
    marks that the episode ended after step ``t``; ``last_value`` is
    ``V`` of the state following the final step.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not rewards.shape == values.shape == dones.shape:
        raise ValueError(
            f"length mismatch: rewards {rewards.shape}, values {values.shape}, dones {dones.shape}")
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    last = np.zeros_like(rewards[0]) if T else 0.0
    next_value = np.asarray(last_value, dtype=np.float64)
    for t in range(T - 1, -1, -1):
        notdone = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * notdone - values[t]
        last = delta + gamma * lam * notdone * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


def policy_loss_and_grad(params: PolicyParams, obs_norm, actions, logp_old, adv,
                         clip_epsilon: float, ent_coef: float = 0.0):
    """Negated clipped surrogate (minus entropy bonus) and its gradient."""
    out, cache = mlp.forward(params.policy_spec, params.policy, obs_norm)
    mean, raw_std = out[:, 0], out[:, 1]
    std = softplus(raw_std) + params.std_floor
    logp = log_prob(actions, mean, std)
    ratio = np.exp(logp - logp_old)
    clipped = np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon)
    surr1 = ratio * adv
    surr2 = clipped * adv
    n = len(adv)
    entropy = np.log(std) + 0.5 + LOG_SQRT_2PI
    loss = -np.mean(np.minimum(surr1, surr2)) - ent_coef * np.mean(entropy)

    # gradient flows through the unclipped branch only where it is the minimum
    active = surr1 <= surr2
    dloss_dlogp = np.where(active, -adv * ratio, 0.0) / n
    diff = actions - mean
    dlogp_dmean = diff / std ** 2
    dlogp_dstd = diff ** 2 / std ** 3 - 1.0 / std
    dloss_dstd = dloss_dlogp * dlogp_dstd - ent_coef / (n * std)
    dout = np.empty_like(out)
    dout[:, 0] = dloss_dlogp * dlogp_dmean
    dout[:, 1] = dloss_dstd * sigmoid(raw_std)
    grad = mlp.backward(params.policy_spec, params.policy, cache, dout)
    info = {
        "mean_ratio": float(np.mean(ratio)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip_epsilon)),
        "approx_kl": float(np.mean(logp_old - logp)),
        "entropy": float(np.mean(entropy)),
    }
    return float(loss), grad, info


def value_loss_and_grad(params: PolicyParams, obs_norm, returns):
    """``0.5 * mean((V(s) - R)^2)`` and its gradient."""
    out, cache = mlp.forward(params.value_spec, params.value, obs_norm)
    err = out[:, 0] - returns
    loss = 0.5 * np.mean(err ** 2)
    grad = mlp.backward(params.value_spec, params.value, cache, (err / len(err))[:, None])
    return float(loss), grad


def logprob_and_grad(params: PolicyParams, obs_norm, actions):
    """Sum of log-probabilities of ``actions`` and its gradient."""
    out, cache = mlp.forward(params.policy_spec, params.policy, obs_norm)
    mean, raw_std = out[:, 0], out[:, 1]
    std = softplus(raw_std) + params.std_floor
    lp = log_prob(actions, mean, std)
    diff = actions - mean
    dout = np.empty_like(out)
    dout[:, 0] = diff / std ** 2
    dout[:, 1] = (diff ** 2 / std ** 3 - 1.0 / std) * sigmoid(raw_std)
    return float(np.sum(lp)), mlp.backward(params.policy_spec, params.policy, cache, dout)


class Adam:
    def __init__(self, n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _clip_norm(g: np.ndarray, max_norm: float) -> np.ndarray:
    if max_norm <= 0:
        return g
    n = float(np.linalg.norm(g))
    return g * (max_norm / n) if n > max_norm else g


@dataclass
class RolloutBuffer:
    """Time-major storage for one batch collected from ``n_envs`` environments."""

    n_steps: int
    n_envs: int
    obs_dim: int = 4

    def __post_init__(self):
        shape = (self.n_steps, self.n_envs)
        self.obs = np.zeros(shape + (self.obs_dim,))
        self.actions = np.zeros(shape)
        self.logp = np.zeros(shape)
        self.rewards = np.zeros(shape)
        self.values = np.zeros(shape)
        self.dones = np.zeros(shape)
        self.last_value = np.zeros(self.n_envs)
        self.advantages = None
        self.returns = None
        self.pos = 0

    @property
    def full(self) -> bool:
        return self.pos == self.n_steps

    def add(self, obs, actions, logp, rewards, values, dones):
        t = self.pos
        self.obs[t], self.actions[t], self.logp[t] = obs, actions, logp
        self.rewards[t], self.values[t], self.dones[t] = rewards, values, dones
        self.pos += 1

    def finish(self, last_value, gamma: float, lam: float):
        self.last_value = np.asarray(last_value, dtype=np.float64)
        self.advantages, self.returns = compute_gae(self.rewards, self.values, self.dones,
                                                    self.last_value, gamma, lam)

    def flat(self) -> dict:
        n = self.n_steps * self.n_envs
        return {
            "obs": self.obs.reshape(n, self.obs_dim),
            "actions": self.actions.reshape(n),
            "logp": self.logp.reshape(n),
            "advantages": self.advantages.reshape(n),
            "returns": self.returns.reshape(n),
        }


@dataclass
class Optimizers:
    policy: Adam
    value: Adam

    @classmethod
    def for_params(cls, params: PolicyParams, lr: float) -> "Optimizers":
        return cls(Adam(params.policy_spec.n_params, lr), Adam(params.value_spec.n_params, lr))


def ppo_update(buffer: RolloutBuffer, params: PolicyParams, hyper: PpoHyper,
               opt: Optional[Optimizers] = None, rng: Optional[np.random.Generator] = None):
    """Run ``update_epochs`` passes of minibatch Adam on the clipped surrogate.

    Advantages are normalised to zero mean and unit std over the whole
    batch. Returns ``(new_params, diagnostics)``; the input params are not
    modified. Raises :class:`NumericalError` if a loss becomes non-finite.
    """
    if not buffer.full or buffer.advantages is None:
        raise ValueError("buffer must be full and finished before an update")
    rng = rng if rng is not None else np.random.default_rng(0)
    opt = opt if opt is not None else Optimizers.for_params(params, hyper.learning_rate)
    data = buffer.flat()
    adv = data["advantages"]
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    obs_n = params.normalize(data["obs"])
    new = params.copy()
    n = len(adv)
    mb = min(hyper.minibatch_size, n)
    diag = {"policy_loss": [], "value_loss": [], "mean_ratio": [], "clip_fraction": [],
            "approx_kl": [], "entropy": []}
    for _ in range(hyper.update_epochs):
        order = rng.permutation(n)
        for start in range(0, n, mb):
            idx = order[start:start + mb]
            pl, pg, info = policy_loss_and_grad(new, obs_n[idx], data["actions"][idx],
                                                data["logp"][idx], adv[idx],
                                                hyper.clip_epsilon, hyper.ent_coef)
            vl, vg = value_loss_and_grad(new, obs_n[idx], data["returns"][idx])
            if not (math.isfinite(pl) and math.isfinite(vl)):
                raise NumericalError("non-finite loss in PPO update",
                                     {"policy_loss": pl, "value_loss": vl, **info})
            new.policy = opt.policy.step(new.policy, _clip_norm(pg, hyper.max_grad_norm))
            new.value = opt.value.step(new.value, _clip_norm(vg, hyper.max_grad_norm))
            diag["policy_loss"].append(pl)
            diag["value_loss"].append(vl)
            for k in ("mean_ratio", "clip_fraction", "approx_kl", "entropy"):
                diag[k].append(info[k])
    if not (np.all(np.isfinite(new.policy)) and np.all(np.isfinite(new.value))):
        raise NumericalError("non-finite parameters after update")
    return new, {k: float(np.mean(v)) for k, v in diag.items()}


@dataclass
class TrainResult:
    params: PolicyParams
    curve: list
    n_updates: int
    diagnostics: list


def train(env_factory: Callable, reward_spec, hyper: PpoHyper, seed: int,
          progress: Optional[Callable] = None) -> TrainResult:
    """Train a policy from scratch.

    ``env_factory(reward_spec, rng)`` must return an environment with
    ``reset() -> Observation``, ``step(duty) -> StepResult``,
    ``observation_scale()`` and ``cfg``. ``hyper.num_envs`` copies are
    stepped in lockstep. ``curve`` holds the mean undiscounted return of
    the episodes finished during each batch (NaN if none finished).
    """
    ss = np.random.SeedSequence(seed)
    init_ss, act_ss, shuffle_ss, *env_ss = ss.spawn(3 + hyper.num_envs)
    act_rng = np.random.default_rng(act_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    envs = [env_factory(reward_spec, np.random.default_rng(s)) for s in env_ss]
    cfg = envs[0].cfg
    params = PolicyParams.init(np.random.default_rng(init_ss), hidden=hyper.hidden,
                               std_floor=hyper.std_floor, obs_scale=envs[0].observation_scale(),
                               duty_bounds=(cfg.duty_min, cfg.duty_max),
                               init_std=hyper.init_std, init_mean=hyper.init_mean)
    opt = Optimizers.for_params(params, hyper.learning_rate)

    n_steps = hyper.batch_size // hyper.num_envs
    n_updates = max(1, hyper.total_steps // hyper.batch_size)
    obs = np.array([e.reset().values for e in envs], dtype=np.float64)
    ep_ret = np.zeros(hyper.num_envs)
    curve, diags = [], []
    scale = hyper.reward_scale
    for u in range(n_updates):
        buf = RolloutBuffer(n_steps, hyper.num_envs)
        finished = []
        for _ in range(n_steps):
            on = params.normalize(obs)
            mean, std = policy_forward(on, params)
            v = params.value_of(on)
            raw, applied = sample_action(mean, std, act_rng, cfg.duty_min, cfg.duty_max)
            lp = log_prob(raw, mean, std)
            rew = np.empty(hyper.num_envs)
            done = np.zeros(hyper.num_envs)
            next_obs = np.empty_like(obs)
            trunc_idx, trunc_obs = [], []
            for i, env in enumerate(envs):
                res = env.step(float(applied[i]))
                rew[i] = res.reward
                ep_ret[i] += res.reward
                if res.episode_done:
                    done[i] = 1.0
                    finished.append(ep_ret[i])
                    ep_ret[i] = 0.0
                    if hyper.bootstrap_truncated:
                        trunc_idx.append(i)
                        trunc_obs.append(res.next_observation.values)
                    next_obs[i] = env.reset().values
                else:
                    next_obs[i] = res.next_observation.values
            rew *= scale
            if trunc_idx:
                vt = params.value_of(params.normalize(np.array(trunc_obs)))
                rew[trunc_idx] += hyper.gamma * vt
            buf.add(obs, raw, lp, rew, v, done)
            obs = next_obs
        buf.finish(params.value_of(params.normalize(obs)), hyper.gamma, hyper.gae_lambda)
        params, d = ppo_update(buf, params, hyper, opt, shuffle_rng)
        diags.append(d)
        curve.append(float(np.mean(finished)) if finished else float("nan"))
        if progress is not None:
            progress(u, curve[-1], d)
        log.debug("update %d/%d return %.4f kl %.5f", u + 1, n_updates, curve[-1], d["approx_kl"])
    return TrainResult(params, curve, n_updates, diags)


# --- snapshot file ------------------------------------------------------------
#
# Layout:
#   line 1   b"EHNODE-POLICY 1\n"
#   line 2   one-line UTF-8 JSON header terminated by b"\n" with keys
#            policy_spec, value_spec (MlpSpec dicts), std_floor, obs_scale,
#            duty_bounds, n_policy, n_value
#   rest     n_policy then n_value little-endian float64 values, each
#            network in the flat layout of ehnode.mlp (per layer: W row-major
#            (fan_in, fan_out), then b)


def save_policy(params: PolicyParams, path: Union[str, Path]) -> None:
    header = {
        "policy_spec": params.policy_spec.to_dict(),
        "value_spec": params.value_spec.to_dict(),
        "std_floor": params.std_floor,
        "obs_scale": [float(x) for x in params.obs_scale],
        "duty_bounds": list(params.duty_bounds),
        "n_policy": int(params.policy_spec.n_params),
        "n_value": int(params.value_spec.n_params),
    }
    with Path(path).open("wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(json.dumps(header, separators=(",", ":")).encode() + b"\n")
        fh.write(params.policy.astype("<f8").tobytes())
        fh.write(params.value.astype("<f8").tobytes())


def load_policy(path: Union[str, Path]) -> PolicyParams:
    blob = Path(path).read_bytes()
    if not blob.startswith(SNAPSHOT_MAGIC):
        raise ValueError(f"{path}: not a policy snapshot")
    rest = blob[len(SNAPSHOT_MAGIC):]
    nl = rest.index(b"\n")
    h = json.loads(rest[:nl])
    data = np.frombuffer(rest[nl + 1:], dtype="<f8")
    if len(data) != h["n_policy"] + h["n_value"]:
        raise ValueError(f"{path}: expected {h['n_policy'] + h['n_value']} values, got {len(data)}")
    ps, vs = MlpSpec(**h["policy_spec"]), MlpSpec(**h["value_spec"])
    return PolicyParams(ps, vs, data[:h["n_policy"]].astype(np.float64),
                        data[h["n_policy"]:].astype(np.float64), h["std_floor"],
                        np.array(h["obs_scale"]), tuple(h["duty_bounds"]))
