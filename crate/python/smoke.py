"""Exercises the Python bindings end to end. Run after building the extension."""

import os
import tempfile

import faultarm_py as fa


def main():
    sim = fa.Sim()
    assert sim.joints == 4 and sim.num_tasks == 4

    healthy = fa.expert_episode(sim, 0, 7)
    assert healthy.success and healthy.replay(sim)
    weak = fa.expert_episode(sim, 1, 8, {3: 0.5})
    assert weak.weakness == {3: 0.5}

    h = fa.health_from_weakness(4, {1: 0.5})
    assert h == [1.0, 0.5, 1.0, 1.0]
    lo, hi = sim.limits(h)[1]
    assert lo < hi

    state = sim.reset(2, 3, h)
    for dx, dy, dyaw, grip in healthy.actions[:5]:
        state = sim.step(state, [dx, dy, dyaw, grip], h)
    assert state.tick == 5
    assert all(lo <= q <= hi for q, (lo, hi) in zip(state.q, sim.limits(h)))

    assert fa.quantile([float(i) for i in range(1, 101)], 0.99) == 99.01
    stats = fa.NormStats.fit([healthy, weak])
    a = [lo + 0.3 * (hi - lo) for lo, hi in zip(stats.q_low, stats.q_high)]
    back = stats.denormalize(stats.normalize(a))
    assert all(abs(x - y) < 1e-9 for x, y in zip(a, back))

    base = fa.Policy(sim, "baseline", seed=1)
    cond = base.with_projector(2)
    obs, proprio = sim.observe(state)
    assert base.forward(obs, proprio, h) == cond.forward(obs, proprio, h)
    assert cond.parameter_counts()["projector"] == 4480

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "eps.jsonl")
        fa.save_episodes([healthy, weak], path, sim)
        loaded = fa.load_episodes(path)
        assert [e.seed for e in loaded] == [7, 8]
        assert loaded[0].actions == healthy.actions
        ckpt = os.path.join(d, "p.json")
        cond.save(ckpt)
        again = fa.Policy.load(ckpt)
        assert again.mode == "health"
        assert again.forward(obs, proprio, h) == cond.forward(obs, proprio, h)

    print("python smoke ok")


if __name__ == "__main__":
    main()
