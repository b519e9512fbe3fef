import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from initstate import AsiRecord, asi_update

logger = logging.getLogger(__name__)
perf_logger = logging.getLogger('performance')

LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_FORMAT = 'sfvlab-checkpoint'
CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ['iteration', 'samples', 'avg_normalized_return', 'policy_loss', 'value_loss', 'avg_episode_len']


class TrainingError(RuntimeError):
    """Raised when training cannot proceed."""
    pass


class CheckpointError(ValueError):
    """Raised for unreadable or incompatible checkpoints."""
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.95
    lam: float = 0.95
    ppo_clip: float = 0.2
    samples_per_batch: int = 4096
    minibatch: int = 256
    policy_lr: float = 2.5e-6
    momentum: float = 0.9
    value_lr: float = 0.01
    asi_lr: float = 0.001
    asi_batch_episodes: int = 2000
    hidden: Tuple[int, ...] = (1024, 512)
    policy_std: float = 0.1
    ppo_epochs: int = 1
    value_epochs: int = 1
    normalize_advantages: bool = True
    normalizer_max_count: int = 1000000
    asi_baseline: bool = True
    asi_baseline_decay: float = 0.9
    iterations: int = 100
    checkpoint_every: int = 10
    workers: int = 1

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise TrainingError(f"gamma and lambda must lie in [0, 1], got {self.gamma}, {self.lam}")
        if not self.ppo_clip > 0.0:
            raise TrainingError(f"ppo_clip must be positive, got {self.ppo_clip}")
        if self.minibatch < 1 or self.samples_per_batch < 1:
            raise TrainingError("Batch sizes must be positive")
        if not self.policy_std > 0.0:
            raise TrainingError("policy_std must be positive")

    @classmethod
    def from_dict(cls, data: Dict) -> 'TrainConfig':
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise TrainingError(f"Unknown training options: {unknown}")
        return cls(**data)

    def to_dict(self) -> Dict:
        out = asdict(self)
        out['hidden'] = list(self.hidden)
        return out


# Networks

class Mlp:
    """Fully connected network with ReLU hidden layers and a linear head.

    Parameters live in one flat vector so optimizers and checkpoints can treat
    them as a single array.
    """

    def __init__(self, sizes: Sequence[int], rng: Optional[np.random.Generator] = None, out_scale: float = 0.01):
        self.sizes = [int(s) for s in sizes]
        self.shapes = [(self.sizes[i], self.sizes[i + 1]) for i in range(len(self.sizes) - 1)]
        total = sum(a * b + b for a, b in self.shapes)
        self.params = np.zeros(total)
        self._bind()
        if rng is not None:
            for i, (fan_in, _) in enumerate(self.shapes):
                scale = math.sqrt(2.0 / fan_in)
                if i == len(self.shapes) - 1:
                    scale *= out_scale
                self.weights[i][...] = rng.normal(0.0, scale, size=self.shapes[i])

    def _bind(self):
        self.weights, self.biases = [], []
        offset = 0
        for a, b in self.shapes:
            self.weights.append(self.params[offset:offset + a * b].reshape(a, b))
            offset += a * b
            self.biases.append(self.params[offset:offset + b])
            offset += b

    def __getstate__(self):
        return {'sizes': self.sizes, 'params': self.params}

    def __setstate__(self, state):
        # weights and biases are views into params; rebuild them after unpickling
        self.sizes = state['sizes']
        self.shapes = [(self.sizes[i], self.sizes[i + 1]) for i in range(len(self.sizes) - 1)]
        self.params = np.array(state['params'], dtype=float)
        self._bind()

    def set_params(self, params: np.ndarray):
        self.params[...] = params

    def copy(self) -> 'Mlp':
        clone = Mlp(self.sizes)
        clone.set_params(self.params)
        return clone

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
        """Output and the per-layer inputs needed by backward."""
        activations = [x]
        h = x
        last = len(self.shapes) - 1
        for i in range(len(self.shapes)):
            h = h @ self.weights[i] + self.biases[i]
            if i < last:
                h = np.maximum(h, 0.0)
            activations.append(h)
        return h, activations

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, activations: List[np.ndarray], grad_out: np.ndarray) -> np.ndarray:
        """Flat parameter gradient of Σ grad_out · output."""
        grad = np.zeros_like(self.params)
        offset_of = []
        offset = 0
        for a, b in self.shapes:
            offset_of.append(offset)
            offset += a * b + b
        g = grad_out
        for i in range(len(self.shapes) - 1, -1, -1):
            a, b = self.shapes[i]
            start = offset_of[i]
            grad[start:start + a * b] = (activations[i].T @ g).ravel()
            grad[start + a * b:start + a * b + b] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.weights[i].T) * (activations[i] > 0.0)
        return grad


class RunningNormalizer:
    """Running mean/std of observations, frozen after max_count samples."""

    def __init__(self, dim: int, max_count: int = 1000000, clip: float = 10.0):
        self.dim = dim
        self.count = 0
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.max_count = max_count
        self.clip = clip

    def update(self, batch: np.ndarray):
        if self.count >= self.max_count or len(batch) == 0:
            return
        batch = np.asarray(batch, dtype=float)
        n = len(batch)
        batch_mean = batch.mean(axis=0)
        batch_var = batch.var(axis=0)
        total = self.count + n
        delta = batch_mean - self.mean
        m2 = self.var * self.count + batch_var * n + delta ** 2 * self.count * n / total
        self.mean = self.mean + delta * n / total
        self.var = m2 / total
        self.count = total

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.var, 1e-8))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.count == 0:
            return np.asarray(x, dtype=float)
        return np.clip((x - self.mean) / self.std, -self.clip, self.clip)


class MomentumSgd:
    """SGD with momentum; ascend=True moves along the gradient."""

    def __init__(self, size: int, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = np.zeros(size)

    def step(self, params: np.ndarray, grad: np.ndarray, ascend: bool = False):
        self.velocity = self.momentum * self.velocity + grad
        if self.lr == 0.0:
            return
        sign = 1.0 if ascend else -1.0
        params += sign * self.lr * self.velocity


def gaussian_logprob(actions: np.ndarray, means: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Log-density of a diagonal Gaussian, one value per row."""
    z = (actions - means) / std
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(np.log(std)) - 0.5 * actions.shape[-1] * LOG_2PI


class Agent:
    """Gaussian policy, value function and observation normalizer."""

    def __init__(self, obs_dim: int, action_dim: int, hidden: Sequence[int] = (64, 64), std: float = 0.1,
                 rng: Optional[np.random.Generator] = None, normalizer_max_count: int = 1000000):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.hidden = tuple(hidden)
        self.policy = Mlp([obs_dim, *hidden, action_dim], rng)
        self.value = Mlp([obs_dim, *hidden, 1], rng, out_scale=1.0)
        self.std = np.full(action_dim, float(std))
        self.normalizer = RunningNormalizer(obs_dim, normalizer_max_count)

    def mean_action(self, obs: np.ndarray) -> np.ndarray:
        return self.policy(self.normalizer(obs))

    def values(self, obs: np.ndarray) -> np.ndarray:
        return self.value(self.normalizer(obs))[..., 0]

    def policy_sample(self, obs: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
        """Sample an action and its exact log-probability."""
        mean = self.mean_action(obs[None, :])[0]
        action = mean + self.std * rng.standard_normal(self.action_dim)
        return action, float(gaussian_logprob(action[None, :], mean[None, :], self.std)[0])

    def logprob(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return gaussian_logprob(actions, self.mean_action(obs), self.std)


def policy_sample(agent: Agent, obs: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    return agent.policy_sample(obs, rng)


# Returns and advantages

def td_lambda_returns(rewards: np.ndarray, values: np.ndarray, bootstrap: float, gamma: float, lam: float) -> np.ndarray:
    """λ-returns; values has one entry per step, bootstrap is V(s_T) or 0 on termination."""
    n = len(rewards)
    out = np.zeros(n)
    next_return = bootstrap
    next_value = bootstrap
    for t in range(n - 1, -1, -1):
        out[t] = rewards[t] + gamma * ((1.0 - lam) * next_value + lam * next_return)
        next_return = out[t]
        next_value = values[t]
    return out


def gae(rewards: np.ndarray, values: np.ndarray, bootstrap: float, gamma: float, lam: float) -> np.ndarray:
    """Generalized advantage estimates by backward recursion."""
    n = len(rewards)
    out = np.zeros(n)
    running = 0.0
    next_value = bootstrap
    for t in range(n - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        out[t] = running
        next_value = values[t]
    return out


@dataclass
class Episode:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    logprobs: np.ndarray
    values: np.ndarray
    terminated: bool
    normalized_return: float
    start: Optional[object] = None
    returns: Optional[np.ndarray] = None
    advantages: Optional[np.ndarray] = None

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def bootstrap(self) -> float:
        """Value after the last step: zero on termination, V(s_T) on truncation."""
        return 0.0 if self.terminated else float(self.values[-1])

    def discounted_return(self, gamma: float) -> float:
        return float(np.sum(self.rewards * gamma ** np.arange(self.length)))


def td_lambda_targets(batch: List[Episode], gamma: float, lam: float) -> List[np.ndarray]:
    """Per-episode λ-return targets, stored on each episode."""
    for ep in batch:
        ep.returns = td_lambda_returns(ep.rewards, ep.values[:-1], ep.bootstrap, gamma, lam)
    return [ep.returns for ep in batch]


def gae_advantages(batch: List[Episode], gamma: float, lam: float) -> List[np.ndarray]:
    """Per-episode GAE(λ) advantages, stored on each episode."""
    for ep in batch:
        ep.advantages = gae(ep.rewards, ep.values[:-1], ep.bootstrap, gamma, lam)
    return [ep.advantages for ep in batch]


# Updates

@dataclass
class UpdateStats:
    loss: float = 0.0
    updates: int = 0
    skipped: int = 0
    clip_fraction: float = 0.0


def ppo_surrogate(agent: Agent, obs: np.ndarray, actions: np.ndarray, old_logprobs: np.ndarray,
                  advantages: np.ndarray, clip: float) -> Tuple[float, np.ndarray, float]:
    """Clipped surrogate, its parameter gradient and the clipped fraction."""
    normed = agent.normalizer(obs)
    means, activations = agent.policy.forward(normed)
    logprobs = gaussian_logprob(actions, means, agent.std)
    ratio = np.exp(logprobs - old_logprobs)
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    unclipped_term = ratio * advantages
    clipped_term = clipped * advantages
    surrogate = float(np.mean(np.minimum(unclipped_term, clipped_term)))
    active = unclipped_term <= clipped_term
    # d(ρA)/dμ = ρA (a − μ)/σ² where the unclipped branch is selected
    coeff = np.where(active, ratio * advantages, 0.0) / len(obs)
    grad_means = coeff[:, None] * (actions - means) / agent.std ** 2
    grad = agent.policy.backward(activations, grad_means)
    return surrogate, grad, float(np.mean(~active))


def ppo_update(agent: Agent, minibatch: Dict[str, np.ndarray], clip: float, optimizer: MomentumSgd,
               stats: Optional[UpdateStats] = None) -> UpdateStats:
    """One ascent step on the clipped surrogate."""
    stats = stats or UpdateStats()
    surrogate, grad, clip_frac = ppo_surrogate(agent, minibatch['obs'], minibatch['actions'],
                                               minibatch['logprobs'], minibatch['advantages'], clip)
    if not (np.all(np.isfinite(grad)) and math.isfinite(surrogate)):
        stats.skipped += 1
        logger.warning(f"Skipping policy minibatch with non-finite gradient ({stats.skipped} skipped)")
        return stats
    optimizer.step(agent.policy.params, grad, ascend=True)
    stats.loss += -surrogate
    stats.clip_fraction += clip_frac
    stats.updates += 1
    return stats


def value_loss_and_gradient(agent: Agent, obs: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """0.5·mean((R − V)²) and its gradient, −mean((R − V)·∇V)."""
    values, activations = agent.value.forward(agent.normalizer(obs))
    residual = targets - values[:, 0]
    loss = 0.5 * float(np.mean(residual ** 2))
    grad = agent.value.backward(activations, (-residual / len(obs))[:, None])
    return loss, grad


def value_update(agent: Agent, minibatch: Dict[str, np.ndarray], optimizer: MomentumSgd,
                 stats: Optional[UpdateStats] = None) -> UpdateStats:
    """Gradient step ψ += α·mean(∇V·(R − V))."""
    stats = stats or UpdateStats()
    loss, grad = value_loss_and_gradient(agent, minibatch['obs'], minibatch['returns'])
    if not (np.all(np.isfinite(grad)) and math.isfinite(loss)):
        stats.skipped += 1
        logger.warning(f"Skipping value minibatch with non-finite gradient ({stats.skipped} skipped)")
        return stats
    optimizer.step(agent.value.params, grad, ascend=False)
    stats.loss += loss
    stats.updates += 1
    return stats


# Rollouts

def make_rng(seed: int, iteration: int, worker: int) -> np.random.Generator:
    """Counter-based stream for one worker in one iteration."""
    key = np.array([seed, (iteration << 20) + worker], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def run_episode(agent: Agent, env, init_dist, rng: np.random.Generator, deterministic: bool = False) -> Episode:
    """Roll out one episode from a sampled initial state."""
    start = init_dist.sample(rng)
    obs = env.reset(start.state, start.phase)
    observations, actions, rewards, logprobs = [obs], [], [], []
    done = False
    while not done:
        if deterministic:
            action = agent.mean_action(obs[None, :])[0]
            logprob = float(gaussian_logprob(action[None, :], action[None, :], agent.std)[0])
        else:
            action, logprob = agent.policy_sample(obs, rng)
        obs, reward, done = env.step(action)
        observations.append(obs)
        actions.append(action)
        rewards.append(reward)
        logprobs.append(logprob)
    obs_arr = np.array(observations)
    return Episode(obs_arr, np.array(actions), np.array(rewards), np.array(logprobs),
                   agent.values(obs_arr), bool(env.terminated), env.normalized_return(), start)


def _collect_worker(agent: Agent, env, init_dist, quota: int, seed: int, iteration: int, worker: int) -> List[Episode]:
    rng = make_rng(seed, iteration, worker)
    episodes, samples = [], 0
    while samples < quota:
        episode = run_episode(agent, env, init_dist, rng)
        episodes.append(episode)
        samples += episode.length
    return episodes


def collect_rollouts(agent: Agent, env, init_dist, samples: int, seed: int, iteration: int,
                     workers: int = 1, pool: Optional[ProcessPoolExecutor] = None) -> List[Episode]:
    """Collect at least `samples` steps split over workers, merged in worker order."""
    quotas = [samples // workers + (1 if w < samples % workers else 0) for w in range(workers)]
    if pool is None or workers == 1:
        batches = [_collect_worker(agent, env, init_dist, q, seed, iteration, w) for w, q in enumerate(quotas)]
    else:
        futures = [pool.submit(_collect_worker, agent, env, init_dist, q, seed, iteration, w)
                   for w, q in enumerate(quotas)]
        batches = [f.result() for f in futures]
    return [ep for batch in batches for ep in batch]


def flatten_batch(episodes: List[Episode]) -> Dict[str, np.ndarray]:
    return {
        'obs': np.concatenate([ep.obs[:-1] for ep in episodes]),
        'actions': np.concatenate([ep.actions for ep in episodes]),
        'logprobs': np.concatenate([ep.logprobs for ep in episodes]),
        'returns': np.concatenate([ep.returns for ep in episodes]),
        'advantages': np.concatenate([ep.advantages for ep in episodes]),
    }


def _minibatches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start:start + size]


# Training loop

class Trainer:
    """Policy gradient with a learnable initial state distribution."""

    def __init__(self, agent: Agent, env, init_dist, config: TrainConfig, seed: int = 0):
        self.agent = agent
        self.env = env
        self.init_dist = init_dist
        self.config = config
        self.seed = seed
        self.iteration = 0
        self.samples = 0
        self.policy_opt = MomentumSgd(agent.policy.params.size, config.policy_lr, config.momentum)
        self.value_opt = MomentumSgd(agent.value.params.size, config.value_lr, config.momentum)
        self.asi_records: List = []
        self.asi_updates = 0
        self.asi_baseline: Optional[float] = None

    def train_iteration(self, pool: Optional[ProcessPoolExecutor] = None) -> Dict[str, float]:
        """Rollouts, then value, policy and initial-state updates."""
        started = time.time()
        cfg = self.config
        episodes = collect_rollouts(self.agent, self.env, self.init_dist, cfg.samples_per_batch,
                                    self.seed, self.iteration, cfg.workers, pool)
        td_lambda_targets(episodes, cfg.gamma, cfg.lam)
        gae_advantages(episodes, cfg.gamma, cfg.lam)
        batch = flatten_batch(episodes)
        n = len(batch['obs'])
        if cfg.normalize_advantages and n > 1:
            adv = batch['advantages']
            batch['advantages'] = (adv - adv.mean()) / (adv.std() + 1e-8)

        update_rng = make_rng(self.seed, self.iteration, 1 << 19)
        value_stats = UpdateStats()
        for _ in range(cfg.value_epochs):
            for idx in _minibatches(n, cfg.minibatch, update_rng):
                value_update(self.agent, {k: v[idx] for k, v in batch.items()}, self.value_opt, value_stats)
        policy_stats = UpdateStats()
        for _ in range(cfg.ppo_epochs):
            for idx in _minibatches(n, cfg.minibatch, update_rng):
                ppo_update(self.agent, {k: v[idx] for k, v in batch.items()}, cfg.ppo_clip, self.policy_opt,
                           policy_stats)

        if getattr(self.init_dist, 'learnable', False):
            self._asi_step(episodes)
        self.agent.normalizer.update(batch['obs'])

        self.iteration += 1
        self.samples += n
        elapsed = time.time() - started
        metrics = {
            'iteration': self.iteration,
            'samples': self.samples,
            'avg_normalized_return': float(np.mean([ep.normalized_return for ep in episodes])),
            'policy_loss': policy_stats.loss / max(policy_stats.updates, 1),
            'value_loss': value_stats.loss / max(value_stats.updates, 1),
            'avg_episode_len': float(np.mean([ep.length for ep in episodes])),
        }
        perf_logger.info(f"iteration={self.iteration} seconds={elapsed:.2f} samples_per_s={n / max(elapsed, 1e-9):.1f}")
        logger.info(f"Iteration {self.iteration}: return={metrics['avg_normalized_return']:.4f} "
                    f"episodes={len(episodes)} samples={n}")
        return metrics

    def _asi_step(self, episodes: List[Episode]):
        for ep in episodes:
            if ep.start is not None and ep.start.component is not None:
                self.asi_records.append(AsiRecord(ep.start.s_hat, ep.start.component,
                                                  ep.discounted_return(self.config.gamma)))
        batch_size = self.config.asi_batch_episodes
        while len(self.asi_records) >= batch_size:
            records, self.asi_records = self.asi_records[:batch_size], self.asi_records[batch_size:]
            baseline = self.asi_baseline if self.config.asi_baseline else None
            self.init_dist = asi_update(self.init_dist, records, self.config.asi_lr, baseline)
            mean_return = float(np.mean([r.ret for r in records]))
            if self.asi_baseline is None:
                self.asi_baseline = mean_return
            else:
                decay = self.config.asi_baseline_decay
                self.asi_baseline = decay * self.asi_baseline + (1.0 - decay) * mean_return
            self.asi_updates += 1


def train_iteration(trainer: Trainer, pool: Optional[ProcessPoolExecutor] = None) -> Dict[str, float]:
    return trainer.train_iteration(pool)


# Evaluation

@dataclass
class EvalReport:
    returns: List[float]
    lengths: List[int]

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns))

    @property
    def min(self) -> float:
        return float(np.min(self.returns))

    @property
    def max(self) -> float:
        return float(np.max(self.returns))

    def to_dict(self) -> Dict:
        return {'mean': self.mean, 'min': self.min, 'max': self.max, 'episodes': len(self.returns),
                'returns': list(self.returns), 'lengths': list(self.lengths)}


def evaluate_policy(agent: Agent, env, init_dist, episodes: int = 32, deterministic: bool = True,
                    seed: int = 0) -> EvalReport:
    """Normalized returns over a number of evaluation episodes."""
    rng = make_rng(seed, 0, (1 << 19) + 1)
    returns, lengths = [], []
    for _ in range(episodes):
        episode = run_episode(agent, env, init_dist, rng, deterministic=deterministic)
        returns.append(episode.normalized_return)
        lengths.append(episode.length)
    return EvalReport(returns, lengths)


# Checkpoints

def save_checkpoint(path: Union[str, Path], trainer: Trainer, extra: Optional[Dict] = None):
    """Header JSON then a little-endian float64 block with all arrays."""
    agent = trainer.agent
    arrays = [
        ('policy', agent.policy.params),
        ('value', agent.value.params),
        ('policy_velocity', trainer.policy_opt.velocity),
        ('value_velocity', trainer.value_opt.velocity),
        ('normalizer_mean', agent.normalizer.mean),
        ('normalizer_var', agent.normalizer.var),
        ('std', agent.std),
    ]
    header = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'obs_dim': agent.obs_dim,
        'action_dim': agent.action_dim,
        'hidden': list(agent.hidden),
        'config': trainer.config.to_dict(),
        'seed': trainer.seed,
        'iteration': trainer.iteration,
        'samples': trainer.samples,
        'normalizer_count': agent.normalizer.count,
        'normalizer_max_count': agent.normalizer.max_count,
        'asi_baseline': trainer.asi_baseline,
        'asi_updates': trainer.asi_updates,
        'init_dist': trainer.init_dist.to_dict() if hasattr(trainer.init_dist, 'to_dict') else None,
        'arrays': [{'name': name, 'size': int(arr.size)} for name, arr in arrays],
        'extra': extra or {},
    }
    blob = json.dumps(header).encode('utf-8')
    block = np.concatenate([np.asarray(arr, dtype=float).ravel() for _, arr in arrays]).astype('<f8')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + '.tmp')
    with open(tmp, 'wb') as f:
        f.write(np.array([len(blob)], dtype='<u8').tobytes())
        f.write(blob)
        f.write(block.tobytes())
    tmp.replace(path)
    logger.info(f"Saved checkpoint {path} at iteration {trainer.iteration}")


@dataclass
class Checkpoint:
    header: Dict
    arrays: Dict[str, np.ndarray]

    def agent(self) -> Agent:
        h = self.header
        agent = Agent(h['obs_dim'], h['action_dim'], h['hidden'], 1.0, normalizer_max_count=h['normalizer_max_count'])
        agent.policy.set_params(self.arrays['policy'])
        agent.value.set_params(self.arrays['value'])
        agent.std = self.arrays['std'].copy()
        agent.normalizer.mean = self.arrays['normalizer_mean'].copy()
        agent.normalizer.var = self.arrays['normalizer_var'].copy()
        agent.normalizer.count = h['normalizer_count']
        return agent

    def restore(self, trainer: Trainer, init_dist=None):
        """Load parameters, optimizer state and counters into a trainer."""
        trainer.agent = self.agent()
        trainer.policy_opt.velocity = self.arrays['policy_velocity'].copy()
        trainer.value_opt.velocity = self.arrays['value_velocity'].copy()
        trainer.iteration = self.header['iteration']
        trainer.samples = self.header['samples']
        trainer.asi_baseline = self.header['asi_baseline']
        trainer.asi_updates = self.header['asi_updates']
        if init_dist is not None:
            trainer.init_dist = init_dist


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"Checkpoint not found: {path}")
    if len(raw) < 8:
        raise CheckpointError(f"Checkpoint {path} is truncated")
    size = int(np.frombuffer(raw[:8], dtype='<u8')[0])
    try:
        header = json.loads(raw[8:8 + size].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Checkpoint {path} has a corrupt header: {e}")
    if header.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint file")
    block = np.frombuffer(raw[8 + size:], dtype='<f8')
    expected = sum(entry['size'] for entry in header['arrays'])
    if block.size != expected:
        raise CheckpointError(f"Checkpoint {path} holds {block.size} floats, header declares {expected}")
    arrays, offset = {}, 0
    for entry in header['arrays']:
        arrays[entry['name']] = block[offset:offset + entry['size']].astype(float)
        offset += entry['size']
    return Checkpoint(header, arrays)


# Smoke-test task

@dataclass
class PointState:
    q: np.ndarray
    qdot: np.ndarray


class PointMassReachEnv:
    """1D point mass moved by its action each step; rewarded for reaching a goal."""

    def __init__(self, goal: float = 1.0, steps: int = 20, sharpness: float = 2.0):
        self.goal = goal
        self.steps_per_episode = steps
        self.sharpness = sharpness
        self.obs_dim = 2
        self.action_dim = 1
        self.done = True
        self.terminated = False

    def reset(self, state, phase: float = 0.0) -> np.ndarray:
        self.x = float(np.asarray(state.q)[0])
        self.steps = 0
        self.rewards = []
        self.done = False
        self.terminated = False
        return self._obs()

    def _obs(self) -> np.ndarray:
        return np.array([self.x, self.steps / self.steps_per_episode])

    def step(self, action) -> Tuple[np.ndarray, float, bool]:
        if self.done:
            raise TrainingError("Episode is done")
        self.x += float(np.clip(np.asarray(action, dtype=float)[0], -1.0, 1.0))
        self.steps += 1
        reward = math.exp(-self.sharpness * (self.x - self.goal) ** 2)
        self.rewards.append(reward)
        self.done = self.steps >= self.steps_per_episode
        return self._obs(), reward, self.done

    def normalized_return(self) -> float:
        return float(sum(self.rewards) / self.steps_per_episode)
