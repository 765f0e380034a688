"""Behavior cloning heads on top of a frozen encoder."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

from ..data import preprocess_frame
from ..layers import MLP, AttentionPool
from .env import PusherEnv, PusherEnvState, scripted_expert

AGGREGATION_MODES = ("pre_aggregation", "post_aggregation_map", "proprio_conditioned_map")
PROPRIO_DIM = 3


class FrozenFeatures:
    """Runs a pre-trained encoder without gradients on raw uint8 frames."""

    def __init__(self, encoder, batch_size: int = 256):
        self.encoder = encoder.eval()
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        self.image_size = encoder.cfg.image_size
        self.dim = encoder.cfg.dim
        self.batch_size = batch_size

    @torch.no_grad()
    def __call__(self, frames):
        """frames: (N, H, W, 3) uint8 -> (v: (N, L, d), v_agg: (N, d))."""
        vs, aggs = [], []
        dtype = next(self.encoder.parameters()).dtype
        for start in range(0, len(frames), self.batch_size):
            x = np.stack([preprocess_frame(f, self.image_size)
                          for f in frames[start:start + self.batch_size]])
            out = self.encoder.encode_observation(torch.from_numpy(x).to(dtype))
            vs.append(out.v)
            aggs.append(out.v_agg)
        return torch.cat(vs), torch.cat(aggs)


class PolicyHead(nn.Module):
    """Maps frozen features (+ proprioception) to a 2-D action in [-1, 1]."""

    def __init__(self, dim: int, mode: str = "proprio_conditioned_map", hidden=(256, 256),
                 heads: int = 4, action_dim: int = 2):
        super().__init__()
        if mode not in AGGREGATION_MODES:
            raise ValueError(f"mode must be one of {AGGREGATION_MODES}")
        self.mode, self.dim = mode, dim
        if mode == "post_aggregation_map":
            self.pool = AttentionPool(dim, heads)
            self.latent = nn.Parameter(torch.randn(dim) * 0.02)
        elif mode == "proprio_conditioned_map":
            self.pool = AttentionPool(dim, heads)
            self.proprio_proj = nn.Linear(PROPRIO_DIM, dim)
        in_dim = dim if mode == "proprio_conditioned_map" else dim + PROPRIO_DIM
        self.input_dim = in_dim
        self.mlp = MLP([in_dim, *hidden, action_dim])

    def features(self, v, v_agg, proprio):
        if v.shape[-1] != self.dim or proprio.shape[-1] != PROPRIO_DIM:
            raise ValueError(f"expected features of width {self.dim} and proprio of width "
                             f"{PROPRIO_DIM}, got {v.shape[-1]} and {proprio.shape[-1]}")
        if self.mode == "pre_aggregation":
            return torch.cat([v_agg, proprio], -1)
        if self.mode == "post_aggregation_map":
            return torch.cat([self.pool(self.latent, v), proprio], -1)
        return self.pool(self.proprio_proj(proprio), v)

    def forward(self, v, v_agg, proprio):
        return torch.tanh(self.mlp(self.features(v, v_agg, proprio)))


def proprio_map_aggregate(head: PolicyHead, v, proprio):
    """The proprio-conditioned pooled feature (B, d) of a policy head."""
    if head.mode != "proprio_conditioned_map":
        raise ValueError("head is not proprio-conditioned")
    return head.pool(head.proprio_proj(proprio), v)


@dataclass
class Demos:
    frames: np.ndarray     # (N, H, W, 3) uint8
    proprio: np.ndarray    # (N, 3) float32
    actions: np.ndarray    # (N, 2) float32
    episode: np.ndarray    # (N,) int

    @property
    def num_episodes(self) -> int:
        return int(self.episode.max()) + 1 if len(self.episode) else 0


def collect_demos(env: PusherEnv, num: int, seed: int, noise: float = 0.0) -> Demos:
    """Scripted-expert episodes on ``env.layouts(num, seed)``.

    With ``noise > 0`` the executed action is perturbed by Gaussian noise while
    the recorded label stays the clean expert action, so the demonstrations
    also cover the off-course states a learned policy drifts into.
    """
    rng = np.random.default_rng(seed)
    frames, proprio, actions, episode = [], [], [], []
    for i, state in enumerate(env.layouts(num, seed)):
        f, p, a = [], [], []
        frame, prop = env.render(state), env.proprio(state)
        while not state.done:
            label = scripted_expert(env, state)
            f.append(frame)
            p.append(prop.as_array())
            a.append(label.astype(np.float32))
            executed = label + noise * rng.standard_normal(2) if noise else label
            state, frame, prop, _, _ = env.step(state, np.clip(executed, -1, 1))
        if not state.success:
            raise RuntimeError(f"expert failed on demo layout {i}")
        frames += f
        proprio += p
        actions += a
        episode += [i] * len(a)
    return Demos(np.stack(frames), np.stack(proprio).astype(np.float32),
                 np.stack(actions).astype(np.float32), np.array(episode))


def save_demos(demos: Demos, directory) -> Path:
    """Per-step PNG frames plus one float32 blob of proprio/action rows."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, frame in enumerate(demos.frames):
        name = f"step_{i:06d}.png"
        Image.fromarray(frame).save(directory / name)
        names.append(name)
    table = np.concatenate([demos.proprio, demos.actions], axis=1).astype("<f4")
    (directory / "steps.bin").write_bytes(table.tobytes())
    manifest = {"frames": names, "episode": demos.episode.tolist(),
                "blob": {"file": "steps.bin", "dtype": "<f4", "shape": list(table.shape),
                         "columns": ["x", "y", "contact", "action_x", "action_y"]}}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_demos(directory) -> Demos:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    shape = manifest["blob"]["shape"]
    table = np.frombuffer((directory / manifest["blob"]["file"]).read_bytes(), dtype="<f4")
    if table.size != shape[0] * shape[1]:
        raise ValueError(f"demo blob size mismatch in {directory}")
    table = table.reshape(shape)
    frames = np.stack([np.asarray(Image.open(directory / n).convert("RGB")) for n in manifest["frames"]])
    return Demos(frames, table[:, :3].copy(), table[:, 3:5].copy(), np.array(manifest["episode"]))


def train_bc_policy(features: FrozenFeatures, demos: Demos, mode: str = "proprio_conditioned_map",
                    steps: int = 2000, batch_size: int = 64, lr: float = 1e-3, seed: int = 0,
                    weight_decay: float = 1e-4):
    """Regress expert actions from frozen features; returns (head, per-step losses)."""
    torch.manual_seed(seed)
    v, v_agg = features(demos.frames)
    proprio = torch.from_numpy(demos.proprio).to(v.dtype)
    actions = torch.from_numpy(demos.actions).to(v.dtype)
    head = PolicyHead(features.dim, mode).to(v.dtype)
    opt = torch.optim.AdamW(head.parameters(), lr=lr, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    gen = torch.Generator().manual_seed(seed)
    losses = []
    for _ in range(steps):
        idx = torch.randint(len(actions), (min(batch_size, len(actions)),), generator=gen)
        loss = ((head(v[idx], v_agg[idx], proprio[idx]) - actions[idx]) ** 2).mean()
        if not torch.isfinite(loss):
            raise RuntimeError("non-finite behavior cloning loss")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
    return head.eval(), losses


class FeaturePolicy:
    """Frozen encoder + trained head, acting on batches of observations."""

    def __init__(self, features: FrozenFeatures, head: PolicyHead):
        self.features, self.head = features, head

    @torch.no_grad()
    def act(self, frames, proprio) -> np.ndarray:
        v, v_agg = self.features(frames)
        p = torch.as_tensor(np.asarray(proprio), dtype=v.dtype)
        return self.head(v, v_agg, p).numpy().astype(np.float64)


class ExpertPolicy:
    def __init__(self, env):
        self.env = env

    def act_states(self, states):
        return np.stack([scripted_expert(self.env, s) for s in states])


class RandomPolicy:
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def act(self, frames, proprio):
        return self.rng.uniform(-1, 1, size=(len(frames), 2))


def evaluate_policy(policy, env: PusherEnv, episodes: int = 50, seed: int = 0) -> float:
    """Success rate over a fixed layout set; all episodes step in lockstep."""
    states: list[PusherEnvState] = env.layouts(episodes, seed)
    frames = [env.render(s) for s in states]
    proprio = [env.proprio(s).as_array() for s in states]
    while True:
        live = [i for i, s in enumerate(states) if not s.done]
        if not live:
            break
        if isinstance(policy, ExpertPolicy):
            actions = policy.act_states([states[i] for i in live])
        else:
            actions = policy.act(np.stack([frames[i] for i in live]),
                                 np.stack([proprio[i] for i in live]))
        for i, a in zip(live, actions):
            states[i], frames[i], p, _, _ = env.step(states[i], a)
            proprio[i] = p.as_array()
    return sum(s.success for s in states) / episodes
