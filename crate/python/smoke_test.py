#!/usr/bin/env python3
"""Smoke test for the vpp_py extension module.

Builds nothing itself: run `cargo build -p vpp-py` (or --release) first.
The script locates the compiled cdylib under target/, exposes it as an
importable `vpp_py` module, and exercises the bound surface end to end:
environment stepping, a tiny training run, checkpoint inference,
evaluation, and the thrust-stand fit.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_vpp_py():
    candidates = [
        REPO / "target" / profile / name
        for profile in ("release", "debug")
        for name in ("libvpp_py.so", "vpp_py.so", "libvpp_py.dylib")
    ]
    built = next((p for p in candidates if p.is_file()), None)
    if built is None:
        sys.exit("vpp_py cdylib not found — run `cargo build -p vpp-py` first")
    stage = Path(tempfile.mkdtemp(prefix="vpp_py_"))
    shutil.copy2(built, stage / "vpp_py.so")
    sys.path.insert(0, str(stage))
    import vpp_py

    return vpp_py


def main():
    vpp = import_vpp_py()

    # --- environment stepping -------------------------------------------
    env = vpp.Env("hover", "All", n_envs=4, seed=1)
    assert env.n_envs == 4 and env.obs_dim == 9
    obs, obs_clean = env.reset()
    assert len(obs) == 4 and len(obs[0]) == 9
    assert all(math.isfinite(x) for row in obs for x in row)

    env.set_difficulty(params=0.0, init=0.0, noise=1.0, level=1.0)
    env.reset()
    hover = env.hover_action()
    total = 0.0
    for _ in range(30):
        out = env.step([list(hover)] * 4)
        assert len(out["rewards"]) == 4
        assert not any(out["crashed"]), "hover from trim must not crash"
        total += sum(out["rewards"])
    assert total / (30 * 4) > 1.5, f"hover reward too low: {total / 120:.3f}"

    state = env.true_state(0)
    assert abs(state["py"] - 1.2) < 0.05, state

    # --- tiny training run + checkpoint inference ------------------------
    with tempfile.TemporaryDirectory() as tmp:
        summary = vpp.train(tmp, task="hover", setup="All", seed=3, envs=8, iterations=2)
        ckpt_path = str(summary["checkpoint"])
        assert Path(ckpt_path).is_file()
        assert Path(summary["curves"]).is_file()
        assert summary["iterations"] == 2

        policy = vpp.Policy.load(ckpt_path)
        assert policy.setup == "All" and policy.obs_dim == 9 and policy.seed == 3
        a = policy.act(obs[0])
        assert all(-1.0 <= x <= 1.0 for x in a), a

        report = vpp.evaluate(ckpt_path, task="hover", episodes=4, seed=5, profile="nominal")
        assert report["episodes"] == 4
        assert 0.0 <= report["crash_rate"] <= 1.0

    # --- analytic-hover evaluation ---------------------------------------
    oracle = vpp.evaluate(None, task="hover", episodes=4, seed=7, profile="trim")
    assert oracle["success_rate"] == 1.0, oracle
    assert oracle["crash_rate"] == 0.0, oracle
    assert oracle["mean_step_reward"] > 2.0, oracle

    # --- thrust-stand fit --------------------------------------------------
    k_t, kq, i0 = 0.04, 104.72, 0.4
    k_d1, k_d2, k_d3 = 6.0e-7, 2.0e-6, 6.0e-4
    samples = []
    for rpm in (4200.0, 4500.0, 4800.0):
        omega = rpm * math.pi / 30.0
        for i in range(24):
            alpha = 0.02 + 0.016 * i
            drag = k_d1 * omega**2 + k_d2 * omega**2 * alpha**2 + k_d3 * omega * alpha
            samples.append((rpm, alpha, k_t * omega * alpha, i0 + kq * drag))
    fit = vpp.fit_thrust(samples)
    assert abs(fit["k_t"] - k_t) / k_t < 1e-6, fit
    assert fit["thrust_rms"] < 1e-9, fit

    # --- angle wrapping -----------------------------------------------------
    assert abs(vpp.wrap_angle(0.3) - 0.3) < 1e-12
    assert abs(abs(vpp.wrap_angle(3.0 * math.pi)) - math.pi) < 1e-9

    print("vpp_py smoke test passed")


if __name__ == "__main__":
    main()
