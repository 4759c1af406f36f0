"""Oracle service round trip: start the stub HTTP oracle, query it through
the client backend, and compare its masks with the simulator's ground truth.

    python demos/oracle_service.py
"""
import numpy as np

from dualstream.config import EnvConfig
from dualstream.oracle import ExternalBackend, GroundTruthBackend, OracleError, OracleServer, compute_mask
from dualstream.worldsim import Action, DrivingWorld


def main():
    env = DrivingWorld(EnvConfig(image_size=48))
    obs = env.reset(seed=3)
    for _ in range(5):
        obs, *_ = env.step(Action(accel=0.5))

    with OracleServer() as server:
        print("stub oracle at", server.url)
        remote = ExternalBackend(server.url)
        served = compute_mask(remote, obs, "hazards")
        truth = compute_mask(GroundTruthBackend(), obs, "hazards")
        print("served phrases:", served.phrases)
        print("ground-truth phrases:", truth.phrases)
        agree = np.mean((served.aggregate > 0.5) == (truth.aggregate > 0.5))
        print(f"pixel agreement of thresholded masks: {agree:.3f}")
        print("advisor on hard throttle:", remote.judge(obs, Action(accel=1.0)))
        url = server.url

    # with the service gone, calls fail with a diagnostic error
    try:
        ExternalBackend(url, timeout=1.0).semantics(obs)
    except OracleError as exc:
        print("after shutdown:", exc)


if __name__ == "__main__":
    main()
