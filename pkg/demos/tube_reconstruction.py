"""Simulate a tube, reconstruct it block by block with a fixed action, score the mesh.

    python3 demos/tube_reconstruction.py [out.ply]
"""

import sys
import time

from adaptmesh.env import SimEnvironment, constant_policy
from adaptmesh.field import ActionParams
from adaptmesh.mesher import export_mesh
from adaptmesh.sim import straight_tube


def main(out="tube.ply"):
    t0 = time.perf_counter()
    env = SimEnvironment([straight_tube(12.0, noise_amplitude=0.1)])
    res = env.run_episode(constant_policy(ActionParams()))
    for i, (r, rep) in enumerate(zip(res.rewards, res.reports)):
        print(f"block {i}: reward {r:+.3f}  local C-L1 {rep.chamfer_cm:.2f} cm  F {rep.fscore_pct:.1f}%")
    print(res.scene_report.table())
    mesh = env.rec.mesh()
    export_mesh(mesh, out)
    print(f"{len(mesh)} triangles -> {out} ({time.perf_counter() - t0:.0f} s)")


if __name__ == "__main__":
    main(*sys.argv[1:])
