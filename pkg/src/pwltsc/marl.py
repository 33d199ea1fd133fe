"""Multi-agent BReLU actor-critic with the EHH influence mechanism.

Data flow for one decision step::

    observations (N, W) --edge MLP + mean--> v_in (N, d)      -> actor_i -> 4 logits
    observations --W--> x~ --EHH--> ANOVA sigma --W^+--> w (N,)
    v_out_i = [v_in_i, sum_j w_j v_in_j]                        -> critic -> value

Actors act on their own ``v_in`` only (decentralised execution); the single
critic sees the influence-weighted aggregate during training. The IPPO
variant replaces the critic by per-agent critics on ``v_in`` and never
touches the EHH module.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .ehh import LinearEhh, fit_linear_ehh
from .env import EnvConfig, TrafficEnv, run_episode
from .errors import ConfigError, DataError, NumericError, ShapeError
from .pwlnet import BreluMlp, Optimizer, OptimizerConfig, build_mlp
from .trafficsim import N_STAGES, TrafficGraph, metrics

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-8


@dataclass
class TrainerConfig:
    gamma: float = 0.99
    l1: float = 1e-4
    clip: float = 0.2
    batch: int = 32
    episodes: int = 100
    lr_critic: float = 0.01
    lr_actor: float = 0.001
    optimizer: str = "adam"
    epochs: int = 4
    embed_dim: int = 16
    hidden: int = 64
    reward_scale: float = 0.01
    normalize_advantage: bool = True
    queue_scale: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.gamma <= 1):
            raise ConfigError("gamma must lie in (0, 1]")
        if not (0 < self.clip < 1):
            raise ConfigError("clip must lie in (0, 1)")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.episodes < 0 or self.epochs < 1:
            raise ConfigError("episodes must be >= 0 and epochs >= 1")
        if self.l1 < 0:
            raise ConfigError("l1 must be >= 0")
        OptimizerConfig(self.optimizer)


# -- node embedding -----------------------------------------------------------


EDGE_FEATURES = 2 * N_STAGES + 2


class NodeEmbedder:
    """Shared one-layer ReLU MLP over incoming-edge features, averaged per node.

    The feature of edge ``j`` into intersection ``i`` is
    ``[stage one-hot of i, q~_j * (stages serving j), q~_j, density_j]`` with
    ``q~_j = q_j / queue_scale``. Routing the queue into the channels of the
    stages that serve it lets the permutation-invariant mean keep track of
    which stage would discharge it, and an empty observation maps to an
    all-zero feature vector.
    """

    def __init__(self, net: BreluMlp, graph: TrafficGraph, queue_scale: float = 10.0):
        self.net = net
        self.membership = graph.membership  # (N, D, 4)
        self.mask = graph.slot_mask  # (N, D)
        self.deg = np.maximum(self.mask.sum(axis=1), 1.0)  # (N,)
        self.D = graph.max_in_degree
        self.queue_scale = queue_scale
        self._shape = None

    @property
    def dim(self) -> int:
        return self.net.out_dim

    def edge_features(self, obs: np.ndarray) -> np.ndarray:
        D = self.D
        stage = obs[..., :N_STAGES]
        q = obs[..., N_STAGES : N_STAGES + D]
        dens = obs[..., N_STAGES + D :]
        lead = obs.shape[:-1]
        feats = np.empty(lead + (D, EDGE_FEATURES))
        feats[..., :N_STAGES] = stage[..., None, :]
        qs = q / self.queue_scale
        feats[..., N_STAGES : 2 * N_STAGES] = self.membership * qs[..., None]
        feats[..., 2 * N_STAGES] = qs
        feats[..., 2 * N_STAGES + 1] = dens
        return feats

    def forward(self, obs: np.ndarray) -> np.ndarray:
        feats = self.edge_features(np.asarray(obs, dtype=np.float64))
        lead = feats.shape[:-1]
        h = self.net.forward(feats.reshape(-1, EDGE_FEATURES)).reshape(lead + (self.dim,))
        self._shape = lead
        return (h * self.mask[..., None]).sum(axis=-2) / self.deg[:, None]

    def backward(self, dv: np.ndarray) -> Dict[str, np.ndarray]:
        dh = dv[..., None, :] * (self.mask / self.deg[:, None])[..., None]
        grads, _ = self.net.backward(dh.reshape(-1, self.dim))
        return grads


def embed_nodes(observations: np.ndarray, embedder: NodeEmbedder) -> np.ndarray:
    """Node embeddings ``v_in`` for observations of shape ``(..., N, W)``."""
    return embedder.forward(observations)


# -- influence mechanism ------------------------------------------------------


@dataclass
class InfluenceModule(LinearEhh):
    """Frozen predictor of next-step queues from the joint observation."""

    n_agents: int = 1
    report: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {**super().to_dict(), "n_agents": self.n_agents, "report": self.report}

    @classmethod
    def from_dict(cls, doc: dict) -> "InfluenceModule":
        base = LinearEhh.from_dict(doc)
        return cls(base.W, base.mean, base.std, base.ehh, int(doc["n_agents"]), doc.get("report", {}))


def influence_weights(sigma_in: np.ndarray, n_agents: int) -> np.ndarray:
    """Average importances per owning agent and normalise to sum 1.

    An all-zero importance vector falls back to uniform weights.
    """
    scores = np.asarray(sigma_in, dtype=np.float64).reshape(n_agents, -1).mean(axis=1)
    total = scores.sum()
    if not total > 0:
        log.warning("all influence importances are zero; using uniform weights")
        return np.full(n_agents, 1.0 / n_agents)
    return scores / total


def influence_aggregate(module: Optional[InfluenceModule], v_in: np.ndarray, observations=None, weights=None):
    """``v_out_i = [v_in_i, sum_j w_j v_in_j]`` for ``v_in`` of shape ``(..., N, d)``.

    ``weights`` can be passed directly; otherwise they are computed from the
    module over ``observations`` (a batch of joint observations).
    Returns ``(v_out, w)``.
    """
    if weights is None:
        weights = influence_weights(module.importance(observations), v_in.shape[-2])
    agg = np.einsum("j,...jd->...d", weights, v_in)
    v_out = np.concatenate([v_in, np.broadcast_to(agg[..., None, :], v_in.shape)], axis=-1)
    return v_out, weights


def random_policy(rng: np.random.Generator):
    def policy(obs, env):
        return rng.integers(0, N_STAGES, size=env.N)

    return policy


def collect_rollouts(env: TrafficEnv, episodes: int, seed: int):
    """Random-policy joint observations ``X`` and next-step queue totals ``Y``."""
    ss = np.random.SeedSequence(seed)
    demand_seeds = ss.generate_state(max(episodes, 1))
    act_rng = np.random.default_rng(ss.spawn(1)[0])
    X, Y = [], []
    D = env.graph.max_in_degree
    for ep in range(episodes):
        _, tr = run_episode(env, random_policy(act_rng), int(demand_seeds[ep]), ep)
        X.append(tr.obs.reshape(len(tr), -1))
        Y.append(tr.next_obs[..., N_STAGES : N_STAGES + D].sum(axis=-1))
    return np.concatenate(X), np.concatenate(Y)


def pretrain_ehh(
    graph: TrafficGraph,
    env_config: EnvConfig,
    episodes: int = 3,
    seed: int = 0,
    d_ehh: int = 8,
    lam: float = 1e-4,
    min_samples: int = 32,
    cap: Optional[int] = 64,
    joint_steps: int = 200,
    holdout: float = 0.2,
) -> InfluenceModule:
    """Fit the influence module on random-policy rollouts.

    The target is each intersection's queue total at the next decision step.
    The last ``holdout`` fraction of samples is kept out of the fit and used
    for the reported validation R^2.
    """
    env = TrafficEnv(graph, env_config)
    X, Y = collect_rollouts(env, episodes, seed)
    if X.shape[0] < min_samples:
        raise DataError(f"pre-training needs at least {min_samples} samples, got {X.shape[0]}")
    n_fit = max(min_samples, int(round(X.shape[0] * (1.0 - holdout))))
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
    fit = fit_linear_ehh(X[:n_fit], Y[:n_fit], d_ehh, lam, rng, cap=cap, steps=joint_steps)
    module = InfluenceModule(fit.W, fit.mean, fit.std, fit.ehh, graph.N)
    report = {"train_samples": int(n_fit), "holdout_samples": int(X.shape[0] - n_fit)}
    for name, sl in (("train", slice(0, n_fit)), ("holdout", slice(n_fit, None))):
        if X[sl].shape[0] == 0:
            continue
        pred = module.predict(X[sl])
        res = np.sum((Y[sl] - pred) ** 2)
        tot = np.sum((Y[sl] - Y[sl].mean()) ** 2)
        report[f"{name}_rmse"] = float(np.sqrt(res / Y[sl].size))
        report[f"{name}_r2"] = float(1.0 - res / tot) if tot > 0 else float("nan")
    report["nonzero_weights"] = module.ehh.nonzero_weights()
    module.report = report
    return module


# -- actor-critic pieces ------------------------------------------------------


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """``G[b] = sum_{b' >= b} gamma^(b'-b) r[b']`` along axis 0."""
    rewards = np.asarray(rewards, dtype=np.float64)
    G = np.empty_like(rewards)
    acc = np.zeros(rewards.shape[1:])
    for b in range(rewards.shape[0] - 1, -1, -1):
        acc = rewards[b] + gamma * acc
        G[b] = acc
    return G


def advantage(rewards: np.ndarray, values: np.ndarray, gamma: float) -> np.ndarray:
    """Discounted return from each step (current reward included) minus the baseline."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape[0] == 0:
        raise DataError("advantage needs a nonempty buffer")
    return discounted_returns(rewards, gamma) - np.asarray(values, dtype=np.float64)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ppo_objective(ratio, adv, clip: float) -> np.ndarray:
    """Per-sample ``min(r * A, clip(r, 1-eps, 1+eps) * A)``.

    >>> ppo_objective(np.array([1.5, 0.5, 1.0]), np.array([1.0, -1.0, 3.0]), 0.2)
    array([ 1.2, -0.8,  3. ])
    """
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)


def ppo_logit_grad(logits, actions, adv, old_prob, clip):
    """Objective and its gradient w.r.t. the logits.

    Where the clipped term is the strict minimum the objective is constant in
    the parameters, so those samples contribute exactly zero gradient.
    """
    probs = softmax(logits)
    idx = np.arange(len(actions))
    ratio = probs[idx, actions] / np.maximum(old_prob, PROB_FLOOR)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    obj = np.minimum(unclipped, clipped)
    active = unclipped <= clipped
    onehot = np.zeros_like(probs)
    onehot[idx, actions] = 1.0
    coef = np.where(active, adv * ratio, 0.0)
    dlogits = coef[:, None] * (onehot - probs)
    return obj, dlogits, ratio


def actor_update(actor: BreluMlp, optimizer: Optimizer, v_in, actions, adv, old_prob, clip: float):
    """One gradient-ascent step on the clipped surrogate.

    Returns ``(objective_sum, dloss_dinput)``; the input gradient is that of
    the minimised loss ``-objective`` and feeds the shared embedding.
    """
    logits = actor.forward(v_in)
    obj, dlogits, _ = ppo_logit_grad(logits, np.asarray(actions), adv, old_prob, clip)
    grads, dx = actor.backward(-dlogits)
    optimizer.step(actor.params(), grads)
    return float(obj.sum()), dx


def critic_loss_and_grad(critic: BreluMlp, v_out, returns, l1: float):
    values = critic.forward(v_out)[..., 0]
    adv = returns - values
    loss = float(np.sum(adv**2) + l1 * sum(np.abs(w).sum() for w in critic.weight_params().values()))
    if not np.isfinite(loss):
        raise NumericError("critic loss is not finite")
    grads, _ = critic.backward((-2.0 * adv)[..., None])
    for name, w in critic.weight_params().items():
        grads[name] = grads[name] + l1 * np.sign(w)
    return loss, grads


def critic_update(critic: BreluMlp, optimizer: Optimizer, v_out, returns, l1: float) -> float:
    """One descent step on ``sum (G - V(v_out))^2 + l1 * |weights|_1``; returns the pre-step loss."""
    v_out = np.asarray(v_out, dtype=np.float64)
    returns = np.asarray(returns, dtype=np.float64)
    flat_in = v_out.reshape(-1, v_out.shape[-1])
    loss, grads = critic_loss_and_grad(critic, flat_in, returns.reshape(-1), l1)
    optimizer.step(critic.params(), grads)
    return loss


# -- agent --------------------------------------------------------------------


class MarlAgent:
    """Embedding, per-agent actors and the critic(s) of one training run."""

    def __init__(self, graph: TrafficGraph, config: TrainerConfig, influence: Optional[InfluenceModule],
                 method: str = "ours", rng: np.random.Generator = None):
        if method not in ("ours", "ippo"):
            raise ConfigError(f"unknown method {method!r}")
        if method == "ours" and influence is None:
            raise ConfigError("method 'ours' needs a pre-trained influence module")
        rng = rng or np.random.default_rng(config.seed)
        self.graph = graph
        self.config = config
        self.method = method
        self.influence = influence if method == "ours" else None
        d, h = config.embed_dim, config.hidden
        emb = build_mlp([EDGE_FEATURES, d], ["relu"], rng)
        emb.layers[0].bias[:] = 0.1  # keep units alive at zero input
        self.embedder = NodeEmbedder(emb, graph, config.queue_scale)
        self.actors = []
        for _ in range(graph.N):
            net = build_mlp([d, h, h, N_STAGES], ["brelu", "relu", "identity"], rng)
            net.layers[-1].weight *= 0.01  # near-uniform initial policy
            self.actors.append(net)
        critic_in = 2 * d if method == "ours" else d
        n_critics = 1 if method == "ours" else graph.N
        self.critics = [build_mlp([critic_in, h, h, 1], ["brelu", "relu", "identity"], rng) for _ in range(n_critics)]
        self._make_optimizers()

    def _make_optimizers(self):
        c = self.config
        self.opt_embed = Optimizer(OptimizerConfig(c.optimizer, c.lr_actor))
        self.opt_actors = [Optimizer(OptimizerConfig(c.optimizer, c.lr_actor)) for _ in self.actors]
        self.opt_critics = [Optimizer(OptimizerConfig(c.optimizer, c.lr_critic)) for _ in self.critics]

    @property
    def critic(self) -> BreluMlp:
        return self.critics[0]

    def action_probs(self, obs: np.ndarray) -> np.ndarray:
        """Policy probabilities ``(..., N, 4)`` from observations ``(..., N, W)``."""
        v = self.embedder.forward(obs)
        return np.stack([softmax(a.forward(v[..., i, :])) for i, a in enumerate(self.actors)], axis=-2)

    def sampling_policy(self, rng: np.random.Generator):
        def policy(obs, env):
            p = self.action_probs(obs)
            u = rng.random(len(p))
            return np.minimum((np.cumsum(p, axis=-1) < u[:, None]).sum(axis=-1), N_STAGES - 1)

        return policy

    def greedy_policy(self):
        def policy(obs, env):
            return self.action_probs(obs).argmax(axis=-1)

        return policy

    def critic_input(self, v_in: np.ndarray, weights):
        if self.method == "ours":
            return influence_aggregate(None, v_in, weights=weights)[0]
        return v_in

    def values(self, v_in, weights) -> np.ndarray:
        x = self.critic_input(v_in, weights)
        if self.method == "ours":
            return self.critic.forward(x)[..., 0]
        return np.stack([c.forward(x[..., i, :])[..., 0] for i, c in enumerate(self.critics)], axis=-1)

    def update(self, buffer, rng: np.random.Generator) -> dict:
        """One update pass over an episode buffer (several epochs of minibatches)."""
        c = self.config
        O, A = buffer.obs, buffer.actions
        T = len(buffer)
        G = discounted_returns(buffer.rewards * c.reward_scale, c.gamma)
        weights = None
        if self.method == "ours":
            weights = influence_weights(self.influence.importance(O), self.graph.N)
        v_all = self.embedder.forward(O)
        adv_all = G - self.values(v_all, weights)
        old = self.action_probs(O)  # snapshot of the pre-update policy
        old_prob = np.take_along_axis(old, A[..., None], axis=-1)[..., 0]
        actor_objs, critic_losses = [], []
        for _ in range(c.epochs):
            perm = rng.permutation(T)
            for start in range(0, T, c.batch):
                mb = perm[start : start + c.batch]
                v_in = self.embedder.forward(O[mb])
                adv = adv_all[mb]
                if c.normalize_advantage and adv.size > 1:
                    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
                dv = np.zeros_like(v_in)
                obj = 0.0
                for i, actor in enumerate(self.actors):
                    o, dv[:, i] = actor_update(actor, self.opt_actors[i], v_in[:, i], A[mb, i], adv[:, i],
                                               old_prob[mb, i], c.clip)
                    obj += o
                actor_objs.append(obj / adv.size)
                self.embedder.forward(O[mb])
                self.opt_embed.step(self.embedder.net.params(), self.embedder.backward(dv))
                x = self.critic_input(v_in, weights)
                if self.method == "ours":
                    critic_losses.append(critic_update(self.critic, self.opt_critics[0], x, G[mb], c.l1))
                else:
                    critic_losses.append(sum(
                        critic_update(cr, self.opt_critics[i], x[:, i], G[mb, i], c.l1)
                        for i, cr in enumerate(self.critics)
                    ))
        return {
            "actor_loss": -float(np.mean(actor_objs)),
            "critic_loss": float(np.mean(critic_losses)),
            "weights": None if weights is None else weights.tolist(),
        }

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "config": asdict(self.config),
            "embedder": self.embedder.net.to_dict(),
            "actors": [a.to_dict() for a in self.actors],
            "critics": [cr.to_dict() for cr in self.critics],
            "influence": None if self.influence is None else self.influence.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict, graph: TrafficGraph) -> "MarlAgent":
        config = TrainerConfig(**doc["config"])
        influence = None if doc.get("influence") is None else InfluenceModule.from_dict(doc["influence"])
        agent = cls.__new__(cls)
        agent.graph, agent.config, agent.method, agent.influence = graph, config, doc["method"], influence
        agent.embedder = NodeEmbedder(BreluMlp.from_dict(doc["embedder"]), graph, config.queue_scale)
        agent.actors = [BreluMlp.from_dict(a) for a in doc["actors"]]
        agent.critics = [BreluMlp.from_dict(cr) for cr in doc["critics"]]
        if len(agent.actors) != graph.N:
            raise ShapeError(f"checkpoint has {len(agent.actors)} actors, network has {graph.N} intersections")
        w = agent.embedder.net.layers[0].weight
        if w.shape[1] != EDGE_FEATURES:
            raise ShapeError(f"embedding layer 0 expects {w.shape[1]} features, network gives {EDGE_FEATURES}")
        if influence is not None and influence.W.shape[1] != graph.N * (N_STAGES + 2 * graph.max_in_degree):
            raise ShapeError("influence layer W does not match the network's joint observation width")
        agent._make_optimizers()
        return agent


CURVE_COLUMNS = ["episode", "global_reward", "AVE", "STA", "actor_loss", "critic_loss"]


@dataclass
class TrainResult:
    agent: MarlAgent
    curve: List[dict]

    def rewards(self) -> np.ndarray:
        return np.array([row["global_reward"] for row in self.curve])

    def write_curve(self, path) -> None:
        write_curve(self.curve, path)


def write_curve(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for row in rows:
            w.writerow([row["episode"]] + [repr(float(row[k])) for k in CURVE_COLUMNS[1:]])


def episode_seeds(seed: int, n: int, stream: int) -> np.ndarray:
    """Demand seeds for ``n`` episodes; streams keep training and evaluation apart."""
    return np.random.SeedSequence([seed, stream]).generate_state(max(n, 1))[:n]


def train(
    graph: TrafficGraph,
    config: TrainerConfig,
    env_config: EnvConfig = None,
    influence: Optional[InfluenceModule] = None,
    method: str = "ours",
    progress=None,
) -> TrainResult:
    """Run the training loop and return the agent plus its learning curve.

    Each episode is rolled out with the sampling policy; if it holds more
    than ``batch`` steps an update pass follows and the buffer is dropped.
    """
    env_config = env_config or EnvConfig()
    ss = np.random.SeedSequence(config.seed)
    init_rng, act_rng, shuffle_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    agent = MarlAgent(graph, config, influence, method, init_rng)
    env = TrafficEnv(graph, env_config)
    seeds = episode_seeds(config.seed, config.episodes, 0)
    curve = []
    policy = agent.sampling_policy(act_rng)
    for ep in range(config.episodes):
        trace, buffer = run_episode(env, policy, int(seeds[ep]), ep)
        stats = {"actor_loss": float("nan"), "critic_loss": float("nan")}
        if len(buffer) > config.batch:
            stats = agent.update(buffer, shuffle_rng)
        m = metrics(trace)
        row = {
            "episode": ep,
            "global_reward": float(buffer.rewards.sum()),
            "AVE": m["AVE"],
            "STA": m["STA"],
            "actor_loss": stats["actor_loss"],
            "critic_loss": stats["critic_loss"],
        }
        curve.append(row)
        if progress is not None:
            progress(row)
    return TrainResult(agent, curve)


def evaluate_policy(graph: TrafficGraph, env_config: EnvConfig, policy, seeds) -> dict:
    """Mean AVE/STA/global reward over episodes with the given demand seeds."""
    env = TrafficEnv(graph, env_config)
    per = []
    for s in seeds:
        trace, tr = run_episode(env, policy, int(s))
        m = metrics(trace)
        per.append({"seed": int(s), "AVE": m["AVE"], "STA": m["STA"], "global_reward": float(tr.rewards.sum())})
    out = {k: float(np.mean([p[k] for p in per])) for k in ("AVE", "STA", "global_reward")}
    out["AVE_var"] = float(np.var([p["AVE"] for p in per]))
    out["episodes"] = per
    return out
