import json
from pathlib import Path

import numpy as np
import pytest


def person_dict(pose=None, face=None):
    """OpenPose person entry; pose (25, 3) / face (70, 3) default to all-undetected."""
    pose = np.zeros((25, 3)) if pose is None else np.asarray(pose, dtype=float)
    face = np.zeros((70, 3)) if face is None else np.asarray(face, dtype=float)
    return {
        "person_id": [-1],
        "pose_keypoints_2d": pose.reshape(-1).tolist(),
        "face_keypoints_2d": face.reshape(-1).tolist(),
        "hand_left_keypoints_2d": [],
        "hand_right_keypoints_2d": [],
    }


def frame_bytes(*persons) -> bytes:
    return json.dumps({"version": 1.3, "people": list(persons)}).encode()


def class_pose(cls: int, rng: np.random.Generator, noise: float = 3.0) -> tuple:
    """A person whose keypoint layout depends on ``cls``; used to build separable fixtures."""
    base = np.random.default_rng(1000 + cls)
    pose = np.column_stack([base.uniform(100, 500, 25), base.uniform(100, 500, 25), np.ones(25)])
    face = np.column_stack([base.uniform(250, 350, 70), base.uniform(100, 200, 70), np.ones(70)])
    pose[:, :2] += rng.normal(0, noise, (25, 2))
    face[:, :2] += rng.normal(0, noise, (70, 2))
    return pose, face


def write_tree(tmp: Path, n_videos: int = 7, frames: int = 20, seed: int = 0, sentinel_all: bool = False):
    """Keypoint folders plus EXPR and VA label files; video k shows emotion k % 7."""
    rng = np.random.default_rng(seed)
    root, labels = tmp / "keypoints", tmp / "labels"
    root.mkdir()
    labels.mkdir()
    for k in range(n_videos):
        vid = f"video{k:02d}"
        (root / vid).mkdir()
        cls = k % 7
        for i in range(frames):
            pose, face = class_pose(cls, rng)
            (root / vid / f"{vid}_{i:012d}_keypoints.json").write_bytes(frame_bytes(person_dict(pose, face)))
        expr = ["-1"] * frames if sentinel_all else [str(cls)] * frames
        (labels / f"{vid}.expr.txt").write_text("EXPR\n" + "\n".join(expr) + "\n")
        angle = 2 * np.pi * cls / 7
        va = [f"{0.8 * np.cos(angle):.4f},{0.8 * np.sin(angle):.4f}"] * frames
        if sentinel_all:
            va = ["-5,-5"] * frames
        (labels / f"{vid}.va.txt").write_text("VA\n" + "\n".join(va) + "\n")
    return root, labels


@pytest.fixture
def fixture_tree(tmp_path):
    return write_tree(tmp_path)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[0][1:])):
            terminalreporter.write_line(line)
