"""Deployment-side estimator plumbing shared by training, harness, and
the live service: fills the v_hat / F_hat observation slots and keeps the
per-environment sliding observation history the force estimator consumes.

Fill order per step (fixed and documented): the velocity estimate is
computed from the first 12 observation values, written into its slot, the
resulting 15-value frame is appended to the 25-step history, and only then
is the force estimate computed over that history. Histories crossing an
episode boundary are zero-padded at the old end (reset clears them).
"""

from __future__ import annotations

import numpy as np

from .nnet import Network
from .plant import (
    FORCE_EST_IN_DIM,
    OBS_DIM,
    OBS_FHAT,
    OBS_FORCE_EST_IN,
    OBS_VEL_EST_IN,
    OBS_VHAT,
)

HISTORY_LEN = 25


class LocomotionController:
    """Policy-facing observation builder around the two estimators.

    Either estimator may be None (its slot stays zero). `force_version`
    is a tag incremented by the trainer after each force-estimator update;
    rollouts record it so the no-lookahead co-training wiring is testable.
    """

    def __init__(self, vel_est: Network | None, force_est: Network | None,
                 n_envs: int, history_len: int = HISTORY_LEN):
        self.vel_est = vel_est
        self.force_est = force_est
        self.n_envs = n_envs
        self.history_len = history_len
        self.history = np.zeros((n_envs, history_len, FORCE_EST_IN_DIM))
        self.vel_version = 0
        self.force_version = 0

    def reset_all(self):
        self.history[:] = 0.0

    def reset_env(self, i: int):
        self.history[i] = 0.0

    def fill(self, obs: np.ndarray, rows: np.ndarray | None = None,
             priv_v: np.ndarray | None = None,
             priv_f: np.ndarray | None = None) -> np.ndarray:
        """Fill estimator slots of raw observations in place and advance
        the history. `rows` restricts to a subset of environments (used
        right after per-env resets). Passing priv_v/priv_f substitutes
        ground truth (privileged warmup variant)."""
        obs = np.atleast_2d(obs)
        if obs.shape[1] != OBS_DIM:
            raise ValueError(f"expected ({OBS_DIM},) observations, got {obs.shape}")
        idx = np.arange(self.n_envs) if rows is None else np.asarray(rows)
        if priv_v is not None:
            obs[:, OBS_VHAT] = priv_v
        elif self.vel_est is not None:
            obs[:, OBS_VHAT] = self.vel_est.forward(obs[:, OBS_VEL_EST_IN])
        hist = self.history
        hist[idx, :-1] = hist[idx, 1:]
        hist[idx, -1] = obs[:, OBS_FORCE_EST_IN]
        if priv_f is not None:
            obs[:, OBS_FHAT] = priv_f
        elif self.force_est is not None:
            obs[:, OBS_FHAT] = self.force_est.forward(hist[idx].transpose(0, 2, 1))
        return obs

    def history_snapshot(self, rows: np.ndarray | None = None) -> np.ndarray:
        if rows is None:
            return self.history.copy()
        return self.history[rows].copy()
