"""PixelCatch: a falling-ball catching game rendered as grayscale frames.

The game lives on a ``grid x grid`` board of cells, each drawn as a
``cell x cell`` pixel block (16 x 16 cells of 2 x 2 pixels by default, a
32 x 32 frame). A one-cell ball falls one row per step from the top row; a
3-wide paddle on the bottom row moves left, stays, or moves right. Landing on
the paddle pays +1. The ball needs ``grid - 1`` steps to fall and the paddle
moves one column per step, so a policy that always moves toward the ball
catches every drop: the optimal episode reward is ``drops_per_episode``.
"""

import re
from collections import deque
from pathlib import Path

import numpy as np

LEFT, STAY, RIGHT = 0, 1, 2
N_ACTIONS = 3


class UsageError(RuntimeError):
    pass


# ------------------------------------------------------------ preprocessing

def to_grayscale(frame):
    frame = np.asarray(frame)
    if np.issubdtype(frame.dtype, np.integer):
        frame = frame / 255.0
    if frame.ndim == 3:
        frame = frame.mean(axis=-1)
    return frame.astype(np.float64, copy=False)


def _area_weights(src, dst):
    # row i spreads over source interval [i*src/dst, (i+1)*src/dst)
    edges = np.arange(dst + 1) * (src / dst)
    lo, hi = edges[:-1, None], edges[1:, None]
    px = np.arange(src)[None, :]
    overlap = np.clip(np.minimum(hi, px + 1) - np.maximum(lo, px), 0, None)
    return overlap / (src / dst)


def area_resize(frame, height, width):
    """Resize a 2-D frame by averaging the source area under each output pixel."""
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape
    if (h, w) == (height, width):
        return frame
    return _area_weights(h, height) @ frame @ _area_weights(w, width).T


class FramePipeline:
    """Grayscale, area-resize, max-pool over skipped frames, stack the newest ``stack``."""

    def __init__(self, size=None, skip=1, stack=4):
        if skip < 1 or stack < 1:
            raise ValueError("skip and stack must be positive")
        self.size = size
        self.skip = skip
        self.stack = stack
        self.frames = deque(maxlen=stack)

    def _process(self, frame):
        frame = to_grayscale(frame)
        if self.size is not None:
            frame = area_resize(frame, *self.size)
        return np.clip(frame, 0.0, 1.0)

    def reset(self):
        self.frames.clear()

    def push(self, window):
        """Add one kept frame: the pixelwise max over ``window`` (the skipped raw frames)."""
        window = list(window)
        if not window:
            raise ValueError("empty frame window")
        kept = self._process(window[0])
        for f in window[1:]:
            kept = np.maximum(kept, self._process(f))
        self.frames.append(kept)
        return self.observation()

    def observation(self):
        if not self.frames:
            raise ValueError("no frames pushed yet")
        newest = self.frames[-1]
        obs = np.zeros((self.stack,) + newest.shape)
        # oldest first, newest in the last channel; missing history stays zero
        for i, f in enumerate(reversed(self.frames)):
            obs[self.stack - 1 - i] = f
        return obs


def preprocess(raw_frames, size=None, skip=1, stack=4):
    """Observation after feeding ``raw_frames`` in order through a fresh pipeline."""
    raw_frames = list(raw_frames)
    if not raw_frames:
        raise ValueError("preprocess needs at least one frame")
    shapes = {np.shape(f) for f in raw_frames}
    if len(shapes) != 1:
        raise ValueError(f"raw frames disagree in shape: {sorted(shapes)}")
    pipe = FramePipeline(size, skip, stack)
    for i in range(0, len(raw_frames), skip):
        obs = pipe.push(raw_frames[i:i + skip])
    return obs


# ------------------------------------------------------------------- game

class PixelCatchEnv:
    def __init__(self, grid=16, cell=2, paddle_width=3, drops_per_episode=8, frame_skip=1, stack=4,
                 obs_size=None):
        if grid < 4 or cell < 1 or paddle_width < 1 or paddle_width % 2 == 0 or drops_per_episode < 1:
            raise ValueError("invalid PixelCatch geometry")
        self.grid = grid
        self.cell = cell
        self.paddle_width = paddle_width
        self.half = paddle_width // 2
        self.drops_per_episode = drops_per_episode
        self.pipeline = FramePipeline(obs_size, frame_skip, stack)
        self.rng = None
        self.done = True
        self.ball_row = self.ball_col = self.paddle = 0
        self.drops = 0

    @property
    def observation_shape(self):
        h, w = self.pipeline.size or (self.grid * self.cell,) * 2
        return (self.pipeline.stack, h, w)

    @property
    def steps_per_episode(self):
        """Raw frames per episode: each drop falls ``grid - 1`` rows."""
        return self.drops_per_episode * (self.grid - 1)

    def render(self):
        board = np.zeros((self.grid, self.grid))
        board[self.ball_row, self.ball_col] = 1.0
        board[self.grid - 1, self.paddle - self.half:self.paddle + self.half + 1] = 1.0
        return np.kron(board, np.ones((self.cell, self.cell)))

    def _spawn_ball(self):
        self.ball_row = 0
        self.ball_col = int(self.rng.integers(self.grid))

    def reset(self, seed=None):
        self.rng = np.random.default_rng(seed)
        self.paddle = int(self.rng.integers(self.half, self.grid - self.half))
        self._spawn_ball()
        self.drops = 0
        self.done = False
        self.pipeline.reset()
        return self.pipeline.push([self.render()])

    def _raw_step(self, action):
        self.paddle = int(np.clip(self.paddle + action - 1, self.half, self.grid - 1 - self.half))
        self.ball_row += 1
        reward = 0.0
        if self.ball_row == self.grid - 1:
            reward = float(abs(self.ball_col - self.paddle) <= self.half)
            self.drops += 1
            if self.drops == self.drops_per_episode:
                self.done = True
            else:
                self._spawn_ball()
        return reward

    def step(self, action):
        if self.rng is None:
            raise UsageError("call reset() before step()")
        if self.done:
            raise UsageError("episode is over; call reset()")
        action = int(action)
        if action not in (LEFT, STAY, RIGHT):
            raise ValueError(f"invalid action {action}")
        window, total = [], 0.0
        for _ in range(self.pipeline.skip):
            total += self._raw_step(action)
            window.append(self.render())
            if self.done:
                break
        return self.pipeline.push(window), total, self.done

    def optimal_action(self):
        """Move toward the ball column."""
        return int(np.sign(self.ball_col - self.paddle)) + 1


def write_pgm(path, image):
    """Write an 8-bit binary PGM (P5). ``image`` is 2-D with values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = data.shape
    path = Path(path)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())
    return path


def read_pgm(path):
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    data = np.frombuffer(raw[m.end():m.end() + w * h], dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / maxval


def dump_frames(frames, directory, prefix="frame"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [write_pgm(directory / f"{prefix}{i:05d}.pgm", f) for i, f in enumerate(frames)]
