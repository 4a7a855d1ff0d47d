import numpy as np
import pytest
import torch

from splatlidar.core import DTYPE, SplatModel


def random_model(n, seed=0, center=(0.0, 0.0, 8.0), spread=(2.0, 2.0, 1.0), log_scale=-2.0, sh_degree=0):
    g = torch.Generator().manual_seed(seed)
    k = (sh_degree + 1) ** 2
    r = lambda *s: torch.randn(*s, generator=g, dtype=DTYPE)  # noqa: E731
    return SplatModel(
        means=r(n, 3) * torch.tensor(spread, dtype=DTYPE) + torch.tensor(center, dtype=DTYPE),
        quats=r(n, 4),
        log_scales=r(n, 3) * 0.3 + log_scale,
        opacity_logits=r(n),
        sh=r(n, k, 3),
        lidar_vis_logits=r(n) + 1.0,
        sh_degree=sh_degree,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_scene(n_bg=40, n_actor=8, frames=3, seed=0):
    """Small background-plus-one-actor scene seen by a 24x16 camera and a 6x64 LiDAR."""
    from splatlidar.camera import CameraIntrinsics
    from splatlidar.lidar import LidarSpec
    from splatlidar.scene import Actor, ActorTrack, Scene, SensorRig
    from splatlidar.scenegen import camera_mount
    from splatlidar.se3 import SE3Pose

    K = CameraIntrinsics(fx=20.0, fy=20.0, cx=12.0, cy=8.0, width=24, height=16)
    spec = LidarSpec.uniform(beams=6, low_deg=-10, high_deg=10, azimuth_bins=64, max_range=30.0)
    ego = [SE3Pose.from_rotvec([0, 0, 0], [0.3 * f, 0, 0]) for f in range(frames)]
    rig = SensorRig(K, spec, ego, ego_from_camera=camera_mount())
    bg = random_model(n_bg, seed, center=(8.0, 0.0, 0.0), spread=(1.0, 2.0, 1.0), log_scale=-1.0)
    actor = random_model(n_actor, seed + 1, center=(0.0, 0.0, 0.0), spread=(0.3, 0.3, 0.3), log_scale=-1.5)
    poses = {f: SE3Pose.from_rotvec([0, 0, 0.1 * f], [6.0, 1.0 - 0.2 * f, 0.0]) for f in range(frames)}
    # unit quaternions so renormalization after a step leaves the scene untouched
    bg = bg.replace(quats=bg.quats / bg.quats.norm(dim=-1, keepdim=True))
    actor = actor.replace(quats=actor.quats / actor.quats.norm(dim=-1, keepdim=True))
    track = ActorTrack.create("car", [1.0, 1.0, 1.0], poses, frames)
    return Scene(bg, [Actor(track, actor)], rig)


def self_observations(scene, config, frames=None):
    """Observations rendered from ``scene`` itself, so it sits at the data-term optimum."""
    from splatlidar.train import Observation, render_frame

    out = {}
    for f in frames if frames is not None else range(scene.frame_count):
        with torch.no_grad():
            r = render_frame(scene, f, config, need_actor_opacity=False)
        lid = r.lidar.detach()
        valid = lid.opacity > 0.5
        out[f] = Observation(
            color=r.camera.color.detach().numpy(),
            ranges=type(lid)(lid.ranges, valid, lid.opacity, lid.uncertainty, lid.spec),
        )
    return out


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
