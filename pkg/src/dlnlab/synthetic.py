"""Synthetic "videos": noisy one-hot frame features with templated captions.

Each video has a subject and an action. Appearance and object streams carry
the subject code, the motion stream carries the action code, every frame
with independent Gaussian noise. Captions read
``a <subject> is <action> <scene>``, where the scene is only partly
predictable from the action, so no model can score perfectly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dlnlab._validation import check_random_state
from dlnlab.text import TokenSeq

SUBJECTS = ("man", "woman", "boy", "girl", "dog", "cat", "chef", "baby", "player", "singer", "horse", "bird")
ACTIONS = ("cooking", "running", "singing", "dancing", "swimming", "reading", "playing", "jumping", "eating",
           "sleeping", "walking", "climbing")
SCENES = ("in the kitchen", "on the street", "in the park", "at home", "on a stage", "in the water",
          "in a room", "on the grass")


@dataclass(frozen=True)
class SyntheticConfig:
    n_subjects: int = 10
    n_actions: int = 10
    n_frames: int = 8
    noise: float = 1.0
    scene_bias: float = 0.6
    refs_per_video: int = 4
    n_train: int = 600
    n_val: int = 50
    n_test: int = 100

    def __post_init__(self):
        if self.n_subjects < 5 or self.n_actions < 5:
            raise ValueError("need at least 5 subjects and 5 actions")
        if self.n_subjects > len(SUBJECTS) or self.n_actions > len(ACTIONS):
            raise ValueError(f"at most {len(SUBJECTS)} subjects and {len(ACTIONS)} actions are available")
        if min(self.n_train, self.n_val, self.n_test, self.n_frames, self.refs_per_video) < 1:
            raise ValueError("sizes must be >= 1")
        if self.noise < 0 or not 0.0 <= self.scene_bias <= 1.0:
            raise ValueError("noise must be >= 0 and scene_bias in [0, 1]")


@dataclass(frozen=True, eq=False)
class SyntheticVideo:
    appearance: np.ndarray
    motion: np.ndarray
    objects: np.ndarray
    references: tuple[TokenSeq, ...]
    subject: int
    action: int

    @property
    def caption(self) -> TokenSeq:
        return self.references[0]

    @property
    def n_frames(self) -> int:
        return self.appearance.shape[0]


def _caption(subject: str, action: str, scene: str) -> TokenSeq:
    return TokenSeq(f"a {subject} is {action} {scene}".split())


def _make_video(cfg: SyntheticConfig, rng: np.random.Generator) -> SyntheticVideo:
    s = int(rng.integers(cfg.n_subjects))
    a = int(rng.integers(cfg.n_actions))
    N = cfg.n_frames
    app = np.zeros((N, cfg.n_subjects))
    app[:, s] = 1.0
    obj = app.copy()
    mot = np.zeros((N, cfg.n_actions))
    mot[:, a] = 1.0
    app += cfg.noise * rng.normal(size=app.shape)
    mot += cfg.noise * rng.normal(size=mot.shape)
    obj += cfg.noise * rng.normal(size=obj.shape)
    refs = []
    for _ in range(cfg.refs_per_video):
        if rng.random() < cfg.scene_bias:
            scene = SCENES[a % len(SCENES)]
        else:
            scene = SCENES[int(rng.integers(len(SCENES)))]
        refs.append(_caption(SUBJECTS[s], ACTIONS[a], scene))
    return SyntheticVideo(app, mot, obj, tuple(refs), s, a)


def generate_synthetic_dataset(config: SyntheticConfig | None = None, seed=0):
    """``(train, val, test)`` lists of :class:`SyntheticVideo`; deterministic per seed."""
    cfg = config or SyntheticConfig()
    rng = check_random_state(seed)
    videos = [_make_video(cfg, rng) for _ in range(cfg.n_train + cfg.n_val + cfg.n_test)]
    a, b = cfg.n_train, cfg.n_train + cfg.n_val
    return videos[:a], videos[a:b], videos[b:]


def caption_corpus(videos) -> list[TokenSeq]:
    """All reference captions of ``videos``, in order."""
    return [ref for v in videos for ref in v.references]


def template_words(config: SyntheticConfig | None = None) -> set[str]:
    cfg = config or SyntheticConfig()
    words = {"a", "is"} | set(SUBJECTS[:cfg.n_subjects]) | set(ACTIONS[:cfg.n_actions])
    for scene in SCENES:
        words.update(scene.split())
    return words
