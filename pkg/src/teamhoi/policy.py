"""Teammate-token transformer policy and critic.

Each observation component is tokenized by its own MLP into d_model-wide
tokens; the observing agent's four tokens (learnable embedding, proprio,
object, target) pass through stacked pre-layer-norm blocks of self-attention,
cross-attention over the variable-length teammate token set, and a
feed-forward layer. The updated embedding token feeds the action or value
head. No positional encodings anywhere, so the teammate set order cannot
matter. Policy and critic are fully separate networks of the same shape.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0
CHECKPOINT_VERSION = 1


@dataclass
class ObsSpec:
    proprio_dim: int = 14
    object_dim: int = 201  # center 3 + 64 contact points + 2 hand points
    target_dim: int = 3
    teammate_dim: int = 9


@dataclass
class PolicyConfig:
    obs: ObsSpec = field(default_factory=ObsSpec)
    action_dim: int = 9
    d_model: int = 64
    n_heads: int = 2
    n_blocks: int = 3
    ff_dim: int = 512
    tokenizer_hidden: tuple = (256, 128)
    head_hidden: tuple = (1024, 512)
    log_std_init: float = -1.0

    def __post_init__(self):
        if isinstance(self.obs, dict):
            self.obs = ObsSpec(**self.obs)
        self.tokenizer_hidden = tuple(self.tokenizer_hidden)
        self.head_hidden = tuple(self.head_hidden)
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tokenizer_hidden"] = list(self.tokenizer_hidden)
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        known = {"obs", "action_dim", "d_model", "n_heads", "n_blocks", "ff_dim",
                 "tokenizer_hidden", "head_hidden", "log_std_init"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown PolicyConfig fields: {sorted(unknown)}")
        return cls(**d)


def _mlp(in_dim, hidden, out_dim):
    layers = []
    prev = in_dim
    for h in hidden:
        layers += [nn.Linear(prev, h), nn.ReLU()]
        prev = h
    layers.append(nn.Linear(prev, out_dim))
    return nn.Sequential(*layers)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention; queries from x, keys/values from memory."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        b, tq, d = x.shape
        tk = memory.shape[1]
        q = self.q_proj(x).view(b, tq, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k_proj(memory).view(b, tk, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v_proj(memory).view(b, tk, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, tq, d)
        return self.out_proj(out)


class TransformerBlock(nn.Module):
    """Pre-layer-norm residual block: self-attention over the agent tokens,
    cross-attention to the teammate tokens (skipped when there are none),
    then a feed-forward layer."""

    def __init__(self, d_model: int, n_heads: int, ff_dim: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.norm_self = nn.LayerNorm(d_model)
        self.norm_cross = nn.LayerNorm(d_model)
        self.norm_mem = nn.LayerNorm(d_model)
        self.norm_ff = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, ff_dim), nn.ReLU(),
                                nn.Linear(ff_dim, d_model))

    def forward(self, x: torch.Tensor, teammates: torch.Tensor | None) -> torch.Tensor:
        h = self.norm_self(x)
        x = x + self.self_attn(h, h)
        if teammates is not None and teammates.shape[1] > 0:
            x = x + self.cross_attn(self.norm_cross(x), self.norm_mem(teammates))
        return x + self.ff(self.norm_ff(x))


class TokenBackbone(nn.Module):
    """Tokenization plus the attention stack; returns the updated embedding."""

    def __init__(self, config: PolicyConfig):
        super().__init__()
        c, o = config, config.obs
        # random O(1)-scale init: layer norm is badly conditioned at and near
        # the zero vector
        self.embedding = nn.Parameter(torch.randn(c.d_model) * 0.5)
        self.tok_proprio = _mlp(o.proprio_dim, c.tokenizer_hidden, c.d_model)
        self.tok_object = _mlp(o.object_dim, c.tokenizer_hidden, c.d_model)
        self.tok_target = _mlp(o.target_dim, c.tokenizer_hidden, c.d_model)
        self.tok_teammate = _mlp(o.teammate_dim, c.tokenizer_hidden, c.d_model)
        self.blocks = nn.ModuleList(
            TransformerBlock(c.d_model, c.n_heads, c.ff_dim) for _ in range(c.n_blocks))
        self.norm_out = nn.LayerNorm(c.d_model)

    def tokenize(self, proprio, object_vec, target, teammates, mask_target=False):
        """Component tokens: agent tokens (B, 4, d) and teammate tokens
        (B, K, d); the teammate tokenizer is shared across teammates."""
        tokens = torch.stack([
            self.embedding.expand(proprio.shape[0], -1),
            self.tok_proprio(proprio),
            self.tok_object(object_vec),
            torch.zeros_like(self.tok_target(target)) if mask_target
            else self.tok_target(target),
        ], dim=1)
        mates = None
        if teammates is not None and teammates.shape[1] > 0:
            mates = self.tok_teammate(teammates)
        return tokens, mates

    def forward(self, proprio, object_vec, target, teammates=None,
                mask_target=False) -> torch.Tensor:
        x, mates = self.tokenize(proprio, object_vec, target, teammates, mask_target)
        for block in self.blocks:
            x = block(x, mates)
        return self.norm_out(x[:, 0])


class ActorNetwork(nn.Module):
    """Backbone + action head + state-independent log-std."""

    def __init__(self, config: PolicyConfig):
        super().__init__()
        self.config = config
        self.backbone = TokenBackbone(config)
        self.head = _mlp(config.d_model, config.head_hidden, config.action_dim)
        self.log_std = nn.Parameter(
            torch.full((config.action_dim,), float(config.log_std_init)))

    def forward(self, proprio, object_vec, target, teammates=None,
                mask_target=False) -> torch.Tensor:
        e = self.backbone(proprio, object_vec, target, teammates, mask_target)
        return self.head(e)

    def clamped_log_std(self) -> torch.Tensor:
        return self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)


class CriticNetwork(nn.Module):
    """Backbone + scalar value head; shares no parameters with the actor."""

    def __init__(self, config: PolicyConfig):
        super().__init__()
        self.config = config
        self.backbone = TokenBackbone(config)
        self.head = _mlp(config.d_model, config.head_hidden, 1)

    def forward(self, proprio, object_vec, target, teammates=None,
                mask_target=False) -> torch.Tensor:
        e = self.backbone(proprio, object_vec, target, teammates, mask_target)
        return self.head(e).squeeze(-1)


def gaussian_log_prob(mean: torch.Tensor, log_std: torch.Tensor,
                      action: torch.Tensor) -> torch.Tensor:
    """Diagonal-Gaussian log density, summed over action dimensions."""
    var = torch.exp(2.0 * log_std)
    return (-0.5 * ((action - mean) ** 2 / var)
            - log_std - 0.5 * math.log(2.0 * math.pi)).sum(-1)


def sample_action(mean: torch.Tensor, log_std: torch.Tensor,
                  generator: torch.Generator | None = None):
    """Draw from the diagonal Gaussian; the log-prob is taken before the
    environment clamps the action."""
    std = torch.exp(log_std)
    noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    action = mean + std * noise
    return action, gaussian_log_prob(mean, log_std, action)


def gradients(loss: torch.Tensor, params) -> list:
    """Reverse-mode gradients of a scalar loss; rejects non-finite losses.
    Parameters that do not reach the loss get zero gradients."""
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {float(loss)!r}")
    params = list(params)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def batch_observations(observations, dtype=torch.float32):
    """Stack AgentObservation-like objects (same teammate count) into the
    tensor tuple the networks consume."""
    proprio = torch.as_tensor(np.stack([o.proprio for o in observations]), dtype=dtype)
    object_vec = torch.as_tensor(np.stack([o.object_vec for o in observations]), dtype=dtype)
    target = torch.as_tensor(np.stack([o.target for o in observations]), dtype=dtype)
    mates = torch.as_tensor(np.stack([o.teammates for o in observations]), dtype=dtype)
    return proprio, object_vec, target, mates


def save_checkpoint(path, actor: ActorNetwork, critic: CriticNetwork,
                    extra: dict | None = None) -> None:
    """Versioned checkpoint: config, parameter shapes, and raw tensors.
    Round-trips bit-exactly."""
    blob = {
        "format_version": CHECKPOINT_VERSION,
        "config": actor.config.to_dict(),
        "shapes": {k: list(v.shape) for k, v in actor.state_dict().items()},
        "actor": actor.state_dict(),
        "critic": critic.state_dict(),
    }
    if extra:
        blob["extra"] = extra
    torch.save(blob, path)


def load_checkpoint(path):
    """Returns (actor, critic, extra) reconstructed from a checkpoint."""
    blob = torch.load(path, weights_only=False)
    version = blob.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    config = PolicyConfig.from_dict(blob["config"])
    actor = ActorNetwork(config)
    critic = CriticNetwork(config)
    actor.load_state_dict(blob["actor"])
    critic.load_state_dict(blob["critic"])
    return actor, critic, blob.get("extra", {})
