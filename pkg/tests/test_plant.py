import math

import numpy as np
import pytest

from tugbot.core import CommandVelocity, ContractViolation, SimConfig, make_rng, with_overrides
from tugbot.plant import (
    Plant,
    PushEvent,
    PushRegime,
    REWARD_TERM_NAMES,
    fall_check,
    reward_terms,
    schedule_pushes,
    step_record,
)


def oracle_reward(c, u, wrench, udot_prev, udot, a_prev, a, dt):
    """Straight re-implementation of the adapted reward table."""
    out = {}
    out["linear_velocity_xy"] = math.exp(
        -((c[0] - u[0]) ** 2 + (c[1] - u[1]) ** 2) / 0.25) * 1.0 * dt
    out["linear_velocity_z"] = 0.0
    out["angular_velocity_xy"] = 0.0
    out["angular_velocity_z"] = math.exp(-((c[2] - u[2]) ** 2) / 0.25) * 0.5 * dt
    out["joint_torques"] = -0.0002 * dt * sum(w * w for w in wrench)
    out["joint_accelerations"] = -2.5e-7 * dt * sum(
        ((udot_prev[i] - udot[i]) / dt) ** 2 for i in range(3))
    out["feet_air_time"] = 0.0
    out["action_rate"] = -0.01 * dt * sum((a_prev[i] - a[i]) ** 2 for i in range(3))
    return out


def test_reward_oracle_random_states():
    rng = make_rng(0, "reward-oracle")
    dt = 0.02
    for _ in range(10_000):
        c, u, w, udp, ud, ap, a = (rng.uniform(-2, 2, size=3) for _ in range(7))
        got = reward_terms(c, u, w, udp, ud, ap, a, dt)
        want = oracle_reward(c, u, w, udp, ud, ap, a, dt)
        assert set(got) == set(REWARD_TERM_NAMES)
        for k in want:
            assert got[k] == pytest.approx(want[k], abs=1e-12)
        assert math.fsum(got.values()) == pytest.approx(math.fsum(want.values()), abs=1e-12)
    # planar-zero terms are present and exactly zero
    got = reward_terms([1] * 3, [0] * 3, [1] * 3, [0] * 3, [1] * 3, [0] * 3, [1] * 3, dt)
    assert got["linear_velocity_z"] == 0.0
    assert got["angular_velocity_xy"] == 0.0
    assert got["feet_air_time"] == 0.0


def test_reward_hand_values():
    dt = 0.02
    z = [0.0] * 3
    # perfect tracking, zero wrench, repeated action
    got = reward_terms([0.5, 0, 0.3], [0.5, 0, 0.3], z, z, z, [0.1] * 3, [0.1] * 3, dt)
    assert math.fsum(got.values()) == pytest.approx(0.03, abs=1e-12)
    # c = (0.5, 0, 0) from rest: linear term exp(-1) * 0.02
    got = reward_terms([0.5, 0, 0], z, z, z, z, z, z, dt)
    assert got["linear_velocity_xy"] == pytest.approx(0.0073576, abs=1e-7)
    # angular: c_w = 1, w_z = 0.5
    got = reward_terms([0, 0, 1.0], [0, 0, 0.5], z, z, z, z, z, dt)
    assert got["angular_velocity_z"] == pytest.approx(0.0036788, abs=1e-7)
    # identical actions: zero action-rate
    got = reward_terms(z, z, z, z, z, [0.4, -0.2, 0.1], [0.4, -0.2, 0.1], dt)
    assert got["action_rate"] == 0.0


def test_breakdown_sums_to_total():
    cfg = SimConfig()
    plant = Plant(cfg, 0)
    plant.reset()
    for _ in range(50):
        res = plant.step([0.2, -0.1, 0.05])
        assert res.reward == pytest.approx(math.fsum(res.reward_breakdown.values()), abs=1e-12)
        if plant.done:
            plant.reset()


def test_push_schedule_times():
    cfg = SimConfig()
    rng = make_rng(0, "sched")
    events = schedule_pushes(cfg, rng, 7.0)
    small = [e.start_t for e in events if e.regime is PushRegime.BACKWARD_SMALL]
    large = [e.start_t for e in events if e.regime is PushRegime.DIRECTIONAL_LARGE]
    assert small[:3] == pytest.approx([0.6, 1.2, 1.8])
    assert large == pytest.approx([3.0, 6.0])
    for e in events:
        if e.regime is PushRegime.BACKWARD_SMALL:
            assert (e.fx, e.fy, e.duration) == (-0.25, 0.0, 0.1)


def test_push_samples_within_bounds():
    cfg = SimConfig()
    rng = make_rng(1, "sched-bounds")
    durs, comps = [], []
    for k in range(1700):
        for e in schedule_pushes(cfg, make_rng(k, "sb"), 20.0):
            if e.regime is PushRegime.DIRECTIONAL_LARGE:
                durs.append(e.duration)
                comps += [e.fx, e.fy]
        if len(durs) >= 10_000:
            break
    assert len(durs) >= 10_000
    assert min(durs) >= 0.24 and max(durs) <= 0.48
    assert min(comps) >= -0.75 and max(comps) <= 0.75


def test_reset_state_and_determinism():
    cfg = SimConfig(seed=11)
    a = Plant(cfg, 3)
    a.reset()
    assert np.all(a.state.u == 0.0) and a.state.t == 0.0
    cmd1, pushes1 = a.state.command, a.episode_pushes
    b = Plant(cfg, 3)
    b.reset()
    assert b.state.command == cmd1
    assert b.episode_pushes == pushes1


def test_reset_commands_uniform():
    cfg = SimConfig(seed=2)
    plant = Plant(cfg, 0)
    draws = []
    for _ in range(1000):
        plant.reset()
        c = plant.state.command
        draws.append([c.cx, c.cy, c.cw])
    draws = np.array(draws)
    assert draws.min() >= -1 and draws.max() <= 1
    # KS-style sanity against U[-1, 1]
    for axis in range(3):
        xs = np.sort(draws[:, axis])
        ecdf = np.arange(1, 1001) / 1000
        cdf = (xs + 1) / 2
        assert np.abs(ecdf - cdf).max() < 0.06


def test_step_determinism_bit_identical():
    cfg = SimConfig(seed=9)
    actions = make_rng(0, "acts").uniform(-1, 1, size=(200, 3))
    outs = []
    for _ in range(2):
        plant = Plant(cfg, 1)
        plant.reset()
        tra = []
        for a in actions:
            res = plant.step(a)
            tra.append((res.obs.tobytes(), res.reward, res.terminated, res.truncated))
            if plant.done:
                plant.reset()
        outs.append(tra)
    assert outs[0] == outs[1]


def test_push_overwrite_exact():
    cfg = SimConfig(process_noise_n=0.0, accel_noise_std=0.0, prop_noise_std=0.0)
    plant = Plant(cfg, 0)
    push = PushEvent(0.6, -0.3, 0.2, 0.3, PushRegime.DIRECTIONAL_LARGE)
    plant.reset(command=CommandVelocity(0.5, 0.0, 0.0), pushes=[push])
    # steps 10..24 are fully inside [0.2, 0.5)
    for step in range(30):
        res = plant.step([0.5, 0.0, 0.0])
        t = plant.state.t
        if 0.22 <= t <= 0.48:
            assert plant.state.u[0] == 0.6 and plant.state.u[1] == -0.3
            assert tuple(res.priv_f) == (0.6, -0.3, 0.0)
    assert tuple(res.priv_f) == (0.0, 0.0, 0.0)


def test_label_zero_one_substep_after_window():
    cfg = SimConfig(process_noise_n=0.0)
    plant = Plant(cfg, 0)
    # window [0.1, 0.2): last covered substep index 39; policy step 10 ends at
    # substep 40 whose final substep (39) is inside, step 11 is outside
    push = PushEvent(0.4, 0.2, 0.1, 0.1, PushRegime.DIRECTIONAL_LARGE)
    plant.reset(command=CommandVelocity(0, 0, 0), pushes=[push])
    labels = []
    for _ in range(12):
        labels.append(tuple(plant.step([0, 0, 0]).priv_f))
    assert labels[9] == (0.4, 0.2, 0.0)
    assert labels[10] == (0.0, 0.0, 0.0)


def test_backward_small_never_labeled():
    cfg = SimConfig(process_noise_n=0.0)
    plant = Plant(cfg, 0)
    push = PushEvent(-0.25, 0.0, 0.2, 0.1, PushRegime.BACKWARD_SMALL)
    plant.reset(command=CommandVelocity(0, 0, 0), pushes=[push])
    for _ in range(25):
        res = plant.step([0, 0, 0])
        assert tuple(res.priv_f) == (0.0, 0.0, 0.0)


def test_directional_wins_overlap():
    cfg = SimConfig(process_noise_n=0.0)
    plant = Plant(cfg, 0)
    pushes = [
        PushEvent(-0.25, 0.0, 0.2, 0.3, PushRegime.BACKWARD_SMALL),
        PushEvent(0.5, 0.5, 0.3, 0.1, PushRegime.DIRECTIONAL_LARGE),
    ]
    plant.reset(command=CommandVelocity(0, 0, 0), pushes=pushes)
    seen = {}
    for _ in range(30):
        plant.step([0, 0, 0])
        seen[round(plant.state.t, 2)] = tuple(plant.state.u[:2])
    assert seen[0.26] == (-0.25, 0.0)
    assert seen[0.36] == (0.5, 0.5)
    assert seen[0.46] == (-0.25, 0.0)


def test_step_after_done_raises():
    cfg = SimConfig(episode_max_s=0.1)
    plant = Plant(cfg, 0)
    plant.reset()
    for _ in range(5):
        plant.step([0, 0, 0])
    assert plant.done
    with pytest.raises(ContractViolation):
        plant.step([0, 0, 0])


def test_fall_check_rules():
    cfg = SimConfig()
    assert not fall_check((0.5, 0.0, 0.0), (0.5, 0, 0), 0.0, cfg)
    assert fall_check((3.5, 0.0, 0.0), (0.5, 0, 0), 0.0, cfg)
    assert not fall_check((0.0, 0.0, 0.0), (2.0, 0, 0), 0.40, cfg)
    assert not fall_check((0.0, 0.0, 0.0), (2.0, 0, 0), 0.50, cfg)
    assert fall_check((0.0, 0.0, 0.0), (2.0, 0, 0), 0.52, cfg)


def test_sustained_error_recovery_resets_counter():
    # error 1.6 for 0.4 s then recovered: no fall
    cfg = with_overrides(SimConfig(), process_noise_n=0.0, accel_noise_std=0.0,
                         prop_noise_std=0.0, push_additive=False)
    plant = Plant(cfg, 0)
    # drive error via a held push (1.6 above command 0)
    push = PushEvent(2.1, 0.0, 0.1, 0.4, PushRegime.DIRECTIONAL_LARGE)
    plant.reset(command=CommandVelocity(0.5, 0, 0), pushes=[push], randomize_damping=False)
    fell = False
    for _ in range(120):
        if plant.done:
            fell = plant._terminated
            break
        plant.step([0.5, 0, 0])
    assert not fell


def test_pd_convergence_geometric():
    cfg = with_overrides(SimConfig(), process_noise_n=0.0, accel_noise_std=0.0,
                         prop_noise_std=0.0, damping_x=0.0, damping_y=0.0,
                         damping_w=0.0)
    plant = Plant(cfg, 0)
    plant.reset(command=CommandVelocity(0.8, -0.4, 0.5), pushes=[],
                randomize_damping=False)
    c = np.array([0.8, -0.4, 0.5])
    # per-substep error ratio r = 1 - kp*dt_phys/(m+kd); halving time from config
    r = 1.0 - cfg.kp * cfg.dt_physics / (cfg.mass_kg + cfg.kd)
    per_step = r ** cfg.substeps
    n_half = math.ceil(math.log(0.5) / math.log(per_step))
    err = [np.linalg.norm(c[:2] - plant.state.u[:2])]
    for _ in range(400):
        plant.step(c)  # action equals command
        err.append(np.linalg.norm(c[:2] - plant.state.u[:2]))
    for k in range(0, 350, n_half):
        assert err[k + n_half] <= err[k] * 0.5 + 1e-12
    assert err[-1] < 1e-5


def test_energy_decay_without_action():
    cfg = with_overrides(SimConfig(), process_noise_n=0.0, kp=0.0)
    plant = Plant(cfg, 0)
    plant.reset(command=CommandVelocity(0, 0, 0), pushes=[], randomize_damping=False)
    plant.state.u = np.array([1.0, -0.8, 0.7])
    norms = [np.linalg.norm(plant.state.u)]
    for _ in range(300):
        plant.step([0, 0, 0])
        norms.append(np.linalg.norm(plant.state.u))
    assert all(b <= a + 1e-12 for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 0.8 * norms[0]


def test_step_record_roundtrip():
    import json

    cfg = SimConfig()
    plant = Plant(cfg, 0)
    plant.reset()
    res = plant.step([0.1, 0.2, -0.3])
    rec = step_record(plant, [0.1, 0.2, -0.3], res)
    parsed = json.loads(json.dumps(rec))
    assert parsed["t"] == pytest.approx(0.02)
    assert len(parsed["pose"]) == 3
    assert set(parsed["reward_breakdown"]) == set(REWARD_TERM_NAMES)
