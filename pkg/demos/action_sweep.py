"""Episode reward and full-scene Chamfer-L1 for a few constant actions on one cave.

    python3 demos/action_sweep.py [seed]
"""

import sys

from adaptmesh.env import SimEnvironment, constant_policy
from adaptmesh.field import ActionParams
from adaptmesh.sim import cave

ACTIONS = {
    "default": ActionParams(),
    "sigma 0.05": ActionParams(sigma_s=0.05),
    "sigma 0.2": ActionParams(sigma_s=0.2),
    "no free samples": ActionParams(n_free=0),
    "n_nn 12": ActionParams(n_nn=12),
}


def main(seed=11):
    env = SimEnvironment([cave(14.0, seed=int(seed))])
    print(f"{'action':16s} {'r_sum':>8s} {'C-L1 cm':>8s} {'F %':>6s}")
    for name, action in ACTIONS.items():
        res = env.run_episode(constant_policy(action))
        rep = res.scene_report
        print(f"{name:16s} {res.r_sum:8.2f} {rep.chamfer_cm:8.2f} {rep.fscore_pct:6.1f}")


if __name__ == "__main__":
    main(*sys.argv[1:])
