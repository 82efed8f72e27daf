"""Co-training loop: PPO on the locomotion policy, supervised velocity
estimation every iteration, and rebalanced force-estimator updates.

The policy head is a diagonal Gaussian with a state-independent learned
log-std; gradients through the head are written out by hand around the
trunk's reverse pass. The value function is a separate MLP sharing no
weights. A passive ONLY_VEL force estimator (command + ground-truth base
velocity histories) is co-trained on the same rebalanced subsets for the
estimator-comparison experiments.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .controller import HISTORY_LEN, LocomotionController
from .core import ConfigError, ContractViolation, SimConfig, make_rng
from .nnet import Adam, Network, conv1d_regressor, mlp, save_checkpoint, load_checkpoint
from .plant import (
    FORCE_EST_IN_DIM,
    OBS_DIM,
    OBS_VEL_EST_IN,
    Plant,
    REWARD_TERM_NAMES,
)

ONLY_VEL_IN_DIM = 6  # (c, ground-truth v) channel order
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class TrainConfig:
    n_envs: int = 256
    horizon: int = 24
    epochs: int = 5
    minibatches: int = 4
    clip: float = 0.2
    gae_lambda: float = 0.95
    gamma: float = 0.99
    lr: float = 1e-3
    lr_final_frac: float = 0.2
    est_lr: float = 1e-3
    value_coeff: float = 0.5
    entropy_coeff: float = 0.001
    total_iterations: int = 2000
    bound_coeff: float = 1.0
    force_update_period: int = 1
    force_zero_frac: float = 0.2
    use_vel_est: bool = True
    use_force_est: bool = True
    train_only_vel: bool = True
    privileged_warmup_iters: int = 0
    checkpoint_every: int = 500
    log_std_init: float = math.log(0.5)

    def __post_init__(self):
        if self.n_envs < 1:
            raise ConfigError("n_envs must be >= 1")
        if not 0.0 <= self.force_zero_frac <= 1.0:
            raise ConfigError("force_zero_frac must be in [0, 1]")


class GaussianPolicy:
    """MLP trunk producing means, plus a learned global log-std vector."""

    def __init__(self, trunk: Network, act_dim: int, log_std_init: float):
        self.trunk = trunk
        self.log_std = np.full(act_dim, log_std_init)

    @property
    def act_dim(self) -> int:
        return self.log_std.size

    def params(self) -> dict[str, np.ndarray]:
        out = {f"trunk/{k}": v for k, v in self.trunk.params().items()}
        out["log_std"] = self.log_std
        return out

    def mean(self, obs, retain=False) -> np.ndarray:
        return self.trunk.forward(obs, retain=retain)

    def log_prob(self, act, mean) -> np.ndarray:
        var = np.exp(2.0 * self.log_std)
        d = act - mean
        return -0.5 * ((d * d) / var).sum(axis=1) - self.log_std.sum() \
            - 0.5 * self.act_dim * LOG_2PI

    def entropy(self) -> float:
        return float(self.log_std.sum() + 0.5 * self.act_dim * (1.0 + LOG_2PI))


def gae_advantages(rewards, values, values_next, terminated, done,
                   gamma: float, lam: float):
    """Generalized advantage estimation over (H, n) rollout arrays.

    `terminated` masks the bootstrap (falls carry no tail value; timeouts
    do), `done` breaks the advantage recursion at every episode end.
    """
    H = rewards.shape[0]
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1])
    for t in reversed(range(H)):
        delta = rewards[t] + gamma * values_next[t] * (1.0 - terminated[t]) - values[t]
        last = delta + gamma * lam * (1.0 - done[t]) * last
        adv[t] = last
    return adv, adv + values


def ppo_update(policy: GaussianPolicy, value_net: Network, opt_pi: Adam,
               opt_v: Adam, data: dict, tcfg: TrainConfig,
               rng: np.random.Generator) -> dict:
    """Clipped-surrogate PPO pass: epochs x minibatches updates.

    Returns mean losses, an approximate KL, and the clip fraction.
    """
    obs = data["obs"]
    act = data["act"]
    logp_old = data["logp"]
    adv = data["adv"]
    ret = data["ret"]
    N = obs.shape[0]
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    pi_losses, v_losses, kls, clipfracs = [], [], [], []
    mb_size = N // tcfg.minibatches
    for _ in range(tcfg.epochs):
        perm = rng.permutation(N)
        for m in range(tcfg.minibatches):
            idx = perm[m * mb_size:(m + 1) * mb_size]
            o, a = obs[idx], act[idx]
            adv_b, ret_b, lp_old = adv[idx], ret[idx], logp_old[idx]
            B = idx.size

            mean = policy.mean(o, retain=True)
            var = np.exp(2.0 * policy.log_std)
            d = a - mean
            logp = -0.5 * ((d * d) / var).sum(axis=1) - policy.log_std.sum() \
                - 0.5 * policy.act_dim * LOG_2PI
            ratio = np.exp(logp - lp_old)
            s1 = ratio * adv_b
            s2 = np.clip(ratio, 1.0 - tcfg.clip, 1.0 + tcfg.clip) * adv_b
            use1 = s1 <= s2  # the chosen (differentiated) branch
            pi_loss = -np.minimum(s1, s2).mean()

            g_logp = -(adv_b * ratio * use1) / B
            g_mean = g_logp[:, None] * (d / var)
            # soft action-bounds loss keeps means inside the [-1, 1] box;
            # plant clipping otherwise makes reward flat in |mean| > 1 during
            # disturbance recovery and means drift into saturation
            over = np.maximum(np.abs(mean) - 1.0, 0.0)
            g_mean += tcfg.bound_coeff * 2.0 * over * np.sign(mean) / B
            g_log_std = (g_logp[:, None] * ((d * d) / var - 1.0)).sum(axis=0)
            g_log_std -= tcfg.entropy_coeff  # d(-c*entropy)/dlog_std = -c
            trunk_grads = policy.trunk.backward(g_mean)
            grads = {f"trunk/{k}": v for k, v in trunk_grads.items() if k != "__input__"}
            grads["log_std"] = g_log_std
            opt_pi.step(grads)

            v = value_net.forward(o, retain=True)[:, 0]
            v_err = v - ret_b
            v_loss = tcfg.value_coeff * float((v_err * v_err).mean())
            g_v = (tcfg.value_coeff * 2.0 * v_err / B)[:, None]
            vgrads = {k: g for k, g in value_net.backward(g_v).items() if k != "__input__"}
            opt_v.step(vgrads)

            pi_losses.append(float(pi_loss))
            v_losses.append(v_loss)
            kls.append(float((lp_old - logp).mean()))
            clipfracs.append(float((np.abs(ratio - 1.0) > tcfg.clip).mean()))
        if not np.isfinite(pi_losses[-1]) or not np.isfinite(v_losses[-1]):
            raise ContractViolation(
                f"non-finite PPO loss: pi={pi_losses[-1]} v={v_losses[-1]}"
            )
    return {
        "pi_loss": float(np.mean(pi_losses)),
        "v_loss": float(np.mean(v_losses)),
        "entropy": policy.entropy(),
        "kl": float(np.mean(kls)),
        "clip_frac": float(np.mean(clipfracs)),
    }


def _supervised_pass(net: Network, opt: Adam, x: np.ndarray, y: np.ndarray,
                     tcfg: TrainConfig, rng: np.random.Generator) -> float:
    """Epochs x minibatches of MSE regression; returns the mean batch MSE."""
    N = x.shape[0]
    mb = max(1, N // tcfg.minibatches)
    losses = []
    for _ in range(tcfg.epochs):
        perm = rng.permutation(N)
        for m in range(tcfg.minibatches):
            idx = perm[m * mb:(m + 1) * mb] if m < tcfg.minibatches - 1 \
                else perm[m * mb:]
            if idx.size == 0:
                continue
            pred = net.forward(x[idx], retain=True)
            err = pred - y[idx]
            losses.append(float((err * err).mean()))
            g = 2.0 * err / err.size
            grads = {k: v for k, v in net.backward(g).items() if k != "__input__"}
            opt.step(grads)
    return float(np.mean(losses)) if losses else float("nan")


def update_velocity_estimator(est: Network, opt: Adam, obs_post: np.ndarray,
                              v_labels: np.ndarray, tcfg: TrainConfig,
                              rng: np.random.Generator) -> float:
    """One supervised pass against privileged base velocity; the input is
    the observation without the v_hat / F_hat slots."""
    return _supervised_pass(est, opt, obs_post[:, OBS_VEL_EST_IN], v_labels, tcfg, rng)


def rebalance_force_batch(labels: np.ndarray,
                          rng: np.random.Generator) -> np.ndarray | None:
    """SKIP (None) when no nonzero labels; otherwise all K nonzero-label
    samples plus at most floor(K/4) uniformly chosen zero-label samples, so
    zero labels are at most 20% of the subset."""
    nonzero = np.any(labels != 0.0, axis=1)
    K = int(nonzero.sum())
    if K == 0:
        return None
    nz_idx = np.flatnonzero(nonzero)
    z_idx = np.flatnonzero(~nonzero)
    max_zeros = K // 4
    if z_idx.size > max_zeros:
        z_idx = rng.permutation(z_idx)[:max_zeros]
    return np.sort(np.concatenate([nz_idx, z_idx]))


def update_force_estimator(est: Network, opt: Adam, windows: np.ndarray,
                           labels: np.ndarray, tcfg: TrainConfig,
                           rng: np.random.Generator) -> float:
    """Supervised MSE on trailing observation-history windows.

    windows: (B, history, channels) with history == 25 by contract.
    """
    if windows.ndim != 3 or windows.shape[1] != HISTORY_LEN:
        raise ContractViolation(
            f"force-estimator windows must be (B, {HISTORY_LEN}, C), got {windows.shape}"
        )
    x = np.ascontiguousarray(windows.transpose(0, 2, 1))
    return _supervised_pass(est, opt, x, labels, tcfg, rng)


def build_nets(seed: int, tcfg: TrainConfig) -> dict:
    """Policy 3x128, value 2x64, velocity MLP 2x64, force conv1d 3x32(k5)."""
    policy = GaussianPolicy(
        mlp([OBS_DIM, 128, 128, 128, 3], make_rng(seed, "init", "policy"), out_scale=0.01),
        act_dim=3, log_std_init=tcfg.log_std_init,
    )
    value = mlp([OBS_DIM, 64, 64, 1], make_rng(seed, "init", "value"))
    vel = mlp([12, 64, 64, 3], make_rng(seed, "init", "vel_est"))
    force = conv1d_regressor(FORCE_EST_IN_DIM, HISTORY_LEN, 32, 5, 3,
                             make_rng(seed, "init", "force_est"))
    only_vel = conv1d_regressor(ONLY_VEL_IN_DIM, HISTORY_LEN, 32, 5, 3,
                                make_rng(seed, "init", "only_vel_est"))
    return {"policy": policy, "value": value, "vel_est": vel,
            "force_est": force, "only_vel_est": only_vel}


class Trainer:
    """Owns environments, networks, optimizers, and the metrics log."""

    def __init__(self, sim_cfg: SimConfig, tcfg: TrainConfig, out_dir: str | Path,
                 resume_from: str | Path | None = None):
        self.cfg = sim_cfg
        self.tcfg = tcfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        seed = sim_cfg.seed
        self.iteration = 0

        nets = build_nets(seed, tcfg)
        self.policy: GaussianPolicy = nets["policy"]
        self.value: Network = nets["value"]
        self.vel_est: Network = nets["vel_est"]
        self.force_est: Network = nets["force_est"]
        self.only_vel_est: Network = nets["only_vel_est"]
        if resume_from is not None:
            loaded, meta, _ = load_checkpoint(resume_from, sim_cfg.config_hash)
            self.policy.trunk = loaded["policy_trunk"]
            self.policy.log_std = loaded["policy_log_std"]
            self.value = loaded["value"]
            self.vel_est = loaded["vel_est"]
            if "force_est" in loaded:
                self.force_est = loaded["force_est"]
            if "only_vel_est" in loaded:
                self.only_vel_est = loaded["only_vel_est"]
            self.iteration = int(meta["iteration"])

        self.opt_pi = Adam(self.policy.params(), tcfg.lr)
        self.opt_v = Adam(self.value.params(), tcfg.lr)
        self.opt_vel = Adam(self.vel_est.params(), tcfg.est_lr)
        self.opt_force = Adam(self.force_est.params(), tcfg.est_lr)
        self.opt_only_vel = Adam(self.only_vel_est.params(), tcfg.est_lr)

        self.envs = [Plant(sim_cfg, i) for i in range(tcfg.n_envs)]
        self.controller = LocomotionController(
            self.vel_est if tcfg.use_vel_est else None,
            self.force_est if tcfg.use_force_est else None,
            tcfg.n_envs,
        )
        self.rng_act = make_rng(seed, "actions")
        self.rng_ppo = make_rng(seed, "ppo")
        self.rng_vel = make_rng(seed, "velupd")
        self.rng_force = make_rng(seed, "forceupd")
        self.rng_ov = make_rng(seed, "onlyvelupd")
        self.rng_rebal = make_rng(seed, "rebalance")
        self._obs = None
        self._ov_hist = np.zeros((tcfg.n_envs, HISTORY_LEN, ONLY_VEL_IN_DIM))
        self.metrics_path = self.out_dir / "metrics.jsonl"

    # -- rollout -------------------------------------------------------------

    def _priv_kwargs(self):
        if self.iteration < self.tcfg.privileged_warmup_iters:
            return True
        return False

    def _bootstrap_obs(self):
        raw = np.stack([env.reset() for env in self.envs])
        self.controller.reset_all()
        self._ov_hist[:] = 0.0
        privileged = self._priv_kwargs()
        kw = {}
        if privileged:
            kw = {"priv_v": np.zeros((len(self.envs), 3)),
                  "priv_f": np.zeros((len(self.envs), 3))}
        self._obs = self.controller.fill(raw, **kw)
        self._update_ov_hist(np.arange(len(self.envs)), self._obs[:, 0:3],
                             np.zeros((len(self.envs), 3)))

    def _update_ov_hist(self, rows, c3, v3):
        h = self._ov_hist
        h[rows, :-1] = h[rows, 1:]
        h[rows, -1, :3] = c3
        h[rows, -1, 3:] = v3

    def collect_rollout(self) -> dict:
        """One horizon of experience from every env; estimator outputs are
        computed with the current (pre-update) estimator versions."""
        tcfg = self.tcfg
        H, n = tcfg.horizon, tcfg.n_envs
        if self._obs is None:
            self._bootstrap_obs()
        privileged = self._priv_kwargs()

        buf = {
            "obs": np.zeros((H, n, OBS_DIM)),
            "act": np.zeros((H, n, 3)),
            "logp": np.zeros((H, n)),
            "value": np.zeros((H, n)),
            "reward": np.zeros((H, n)),
            "terminated": np.zeros((H, n)),
            "done": np.zeros((H, n)),
            "priv_v": np.zeros((H, n, 3)),
            "priv_f": np.zeros((H, n, 3)),
            "obs_post": np.zeros((H, n, OBS_DIM)),
            "fwin": np.zeros((H, n, HISTORY_LEN, FORCE_EST_IN_DIM)),
            "ovwin": np.zeros((H, n, HISTORY_LEN, ONLY_VEL_IN_DIM)),
            "fhat_version": np.full((H, n), self.controller.force_version, dtype=np.int64),
        }
        term_sums = {k: 0.0 for k in REWARD_TERM_NAMES}
        falls = 0
        episodes = 0
        terminal_rows = []
        log_std = self.policy.log_std
        raw_post = np.zeros((n, OBS_DIM))

        for t in range(H):
            obs = self._obs
            mean = self.policy.mean(obs)
            value = self.value.forward(obs)[:, 0]
            noise = self.rng_act.standard_normal((n, 3))
            act = mean + np.exp(log_std) * noise
            logp = self.policy.log_prob(act, mean)
            if not np.all(np.isfinite(obs)):
                bad = np.argwhere(~np.isfinite(obs))[0]
                raise ContractViolation(
                    f"non-finite observation at step {t}, env {bad[0]}"
                )
            buf["obs"][t] = obs
            buf["act"][t] = act
            buf["logp"][t] = logp
            buf["value"][t] = value

            for i, env in enumerate(self.envs):
                res = env.step(act[i])
                buf["reward"][t, i] = res.reward
                buf["terminated"][t, i] = res.terminated
                buf["done"][t, i] = res.terminated or res.truncated
                buf["priv_v"][t, i] = res.priv_v
                buf["priv_f"][t, i] = res.priv_f
                raw_post[i] = res.obs
                rb = res.reward_breakdown
                for k in REWARD_TERM_NAMES:
                    term_sums[k] += rb[k]

            kw = {}
            if privileged:
                kw = {"priv_v": buf["priv_v"][t], "priv_f": buf["priv_f"][t]}
            filled = self.controller.fill(raw_post, **kw)
            self._update_ov_hist(np.arange(n), filled[:, 0:3], buf["priv_v"][t])
            buf["obs_post"][t] = filled
            buf["fwin"][t] = self.controller.history
            buf["ovwin"][t] = self._ov_hist

            done_idx = np.flatnonzero(buf["done"][t])
            if done_idx.size:
                falls += int(buf["terminated"][t].sum())
                episodes += done_idx.size
                for i in done_idx:
                    terminal_rows.append((t, int(i), filled[i].copy()))
                raw0 = np.stack([self.envs[i].reset() for i in done_idx])
                for i in done_idx:
                    self.controller.reset_env(int(i))
                    self._ov_hist[i] = 0.0
                kw0 = {}
                if privileged:
                    kw0 = {"priv_v": np.zeros((done_idx.size, 3)),
                           "priv_f": np.zeros((done_idx.size, 3))}
                filled0 = self.controller.fill(raw0, rows=done_idx, **kw0)
                self._update_ov_hist(done_idx, filled0[:, 0:3],
                                     np.zeros((done_idx.size, 3)))
                filled = filled.copy()
                filled[done_idx] = filled0
            self._obs = filled.copy() if filled is raw_post else filled

        values_next = np.zeros((H, n))
        values_next[:H - 1] = buf["value"][1:]
        values_next[H - 1] = self.value.forward(self._obs)[:, 0]
        if terminal_rows:
            t_obs = np.stack([o for _, _, o in terminal_rows])
            t_vals = self.value.forward(t_obs)[:, 0]
            for (t, i, _), v in zip(terminal_rows, t_vals):
                values_next[t, i] = v
        buf["values_next"] = values_next
        buf["term_sums"] = term_sums
        buf["falls"] = falls
        buf["episodes"] = episodes
        return buf

    # -- one iteration ---------------------------------------------------

    def iterate(self) -> dict:
        tcfg = self.tcfg
        # linear lr anneal to lr * lr_final_frac over the nominal run length
        frac = min(1.0, self.iteration / max(1, tcfg.total_iterations))
        lr_now = tcfg.lr * (1.0 - (1.0 - tcfg.lr_final_frac) * frac)
        self.opt_pi.lr = lr_now
        self.opt_v.lr = lr_now
        buf = self.collect_rollout()
        H, n = tcfg.horizon, tcfg.n_envs
        N = H * n
        adv, ret = gae_advantages(
            buf["reward"], buf["value"], buf["values_next"],
            buf["terminated"], buf["done"], tcfg.gamma, tcfg.gae_lambda,
        )
        data = {
            "obs": buf["obs"].reshape(N, OBS_DIM),
            "act": buf["act"].reshape(N, 3),
            "logp": buf["logp"].reshape(N),
            "adv": adv.reshape(N),
            "ret": ret.reshape(N),
        }
        stats = ppo_update(self.policy, self.value, self.opt_pi, self.opt_v,
                           data, tcfg, self.rng_ppo)

        vel_mse = None
        if tcfg.use_vel_est:
            vel_mse = update_velocity_estimator(
                self.vel_est, self.opt_vel, buf["obs_post"].reshape(N, OBS_DIM),
                buf["priv_v"].reshape(N, 3), tcfg, self.rng_vel,
            )
            self.controller.vel_version += 1

        force_mse = None
        only_vel_mse = None
        subset_size = 0
        zero_frac = None
        if tcfg.use_force_est and (self.iteration % tcfg.force_update_period == 0):
            labels = buf["priv_f"].reshape(N, 3)
            idx = rebalance_force_batch(labels, self.rng_rebal)
            if idx is not None:
                subset_size = idx.size
                zero_frac = float(np.mean(~np.any(labels[idx] != 0.0, axis=1)))
                force_mse = update_force_estimator(
                    self.force_est, self.opt_force,
                    buf["fwin"].reshape(N, HISTORY_LEN, FORCE_EST_IN_DIM)[idx],
                    labels[idx], tcfg, self.rng_force,
                )
                self.controller.force_version += 1
                if tcfg.train_only_vel:
                    only_vel_mse = update_force_estimator(
                        self.only_vel_est, self.opt_only_vel,
                        buf["ovwin"].reshape(N, HISTORY_LEN, ONLY_VEL_IN_DIM)[idx],
                        labels[idx], tcfg, self.rng_ov,
                    )

        line = {
            "iteration": self.iteration,
            "steps": (self.iteration + 1) * N,
            "reward_mean": float(buf["reward"].mean()),
            "reward_terms": {k: v / N for k, v in buf["term_sums"].items()},
            "pi_loss": stats["pi_loss"],
            "v_loss": stats["v_loss"],
            "entropy": stats["entropy"],
            "kl": stats["kl"],
            "clip_frac": stats["clip_frac"],
            "vel_mse": vel_mse,
            "force_mse": force_mse,
            "only_vel_mse": only_vel_mse,
            "force_subset": subset_size,
            "force_zero_frac": zero_frac,
            "fall_count": buf["falls"],
            "episodes_done": buf["episodes"],
            "fhat_version": int(buf["fhat_version"][0, 0]),
        }
        self.iteration += 1
        return line

    # -- checkpoints ---------------------------------------------------------

    def checkpoint_meta(self) -> dict:
        return {
            "config_hash": self.cfg.config_hash,
            "iteration": self.iteration,
            "seed": self.cfg.seed,
            "obs_version": "v1",
            "flags": {"no_force_est": not self.tcfg.use_force_est},
            "train_config": asdict(self.tcfg),
        }

    def nets_for_checkpoint(self) -> dict:
        nets = {
            "policy_trunk": self.policy.trunk,
            "policy_log_std": self.policy.log_std,
            "value": self.value,
            "vel_est": self.vel_est,
        }
        if self.tcfg.use_force_est:
            nets["force_est"] = self.force_est
            if self.tcfg.train_only_vel:
                nets["only_vel_est"] = self.only_vel_est
        return nets

    def save(self, path: str | Path):
        save_checkpoint(self.nets_for_checkpoint(), self.checkpoint_meta(), path)

    def run(self, iterations: int, log_every: int = 1,
            progress: bool = False) -> list[dict]:
        """Train for `iterations` iterations, appending to metrics.jsonl and
        writing periodic checkpoints. Partial checkpoints are never written
        (save is atomic)."""
        lines = []
        with open(self.metrics_path, "a") as mf:
            for _ in range(iterations):
                line = self.iterate()
                lines.append(line)
                if line["iteration"] % log_every == 0:
                    mf.write(json.dumps(line, sort_keys=True) + "\n")
                    mf.flush()
                if progress and line["iteration"] % 25 == 0:
                    print(
                        f"it {line['iteration']:5d} reward {line['reward_mean']:+.5f} "
                        f"vel_mse {line['vel_mse'] if line['vel_mse'] is None else round(line['vel_mse'], 6)} "
                        f"force_mse {line['force_mse'] if line['force_mse'] is None else round(line['force_mse'], 6)} "
                        f"falls {line['fall_count']}",
                        flush=True,
                    )
                if self.tcfg.checkpoint_every and \
                        line["iteration"] % self.tcfg.checkpoint_every == 0 and \
                        line["iteration"] > 0:
                    self.save(self.out_dir / f"ckpt_{line['iteration']:06d}.tbck")
        return lines
