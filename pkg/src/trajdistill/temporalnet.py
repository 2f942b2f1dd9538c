"""Autoregressive temporal decoder over per-agent, per-timestep tokens.

Each token embeds the agent's previous-step displacement plus its offsets
to the conditioning goal and waypoint.  Blocks interleave agent-aware
causal self-attention across all agents in the scene window, cross-attention
onto patchified (semantic map ++ goal/waypoint heatmap) tokens, and a
feed-forward layer; a linear head decodes a 2-D displacement per step.
Tokens never carry absolute positions, so predictions are translation
robust; absolute location enters only through the condition tokens and
the goal/waypoint offsets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .core import SceneMap, patchify, render_gaussian_heatmap
from .errors import InvalidArgumentError


@dataclass(frozen=True)
class TemporalNetConfig:
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    patch: int = 8
    dropout: float = 0.0
    scene_channels: int = 6
    use_social: bool = True
    use_map_cross_attention: bool = True
    use_gw_heatmap: bool = True
    use_waypoint: bool = True
    sigma: float = 4.0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise InvalidArgumentError(
                f"d_model={self.d_model} must be divisible by heads={self.heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgumentError("dropout must lie in [0, 1)")
        if self.layers < 1 or self.patch < 1:
            raise InvalidArgumentError("layers and patch must be >= 1")

    @property
    def condition_channels(self) -> int:
        return self.scene_channels + (2 if self.use_gw_heatmap else 0)


@dataclass
class AgentTokenBatch:
    """Flattened (agents x steps) token matrix with identity/time metadata."""

    tokens: torch.Tensor  # (B, A*T, d)
    agent_ids: torch.Tensor  # (A*T,)
    step_ids: torch.Tensor  # (A*T,)
    validity: torch.Tensor  # (B, A*T) bool

    def __post_init__(self):
        n = self.tokens.shape[-2]
        if self.agent_ids.shape[-1] != n or self.step_ids.shape[-1] != n:
            raise InvalidArgumentError("agent/step ids must align with token rows")
        if self.validity.shape[-1] != n:
            raise InvalidArgumentError("validity must align with token rows")


def sinusoidal_encoding(ids: torch.Tensor, d_model: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed sinusoidal encoding of integer ids, shape (..., d_model)."""
    half = d_model // 2
    freqs = torch.exp(
        torch.arange(half, dtype=dtype) * (-math.log(10000.0) / max(half - 1, 1))
    )
    ang = ids.to(dtype)[..., None] * freqs
    enc = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if enc.shape[-1] < d_model:  # odd d_model
        enc = torch.cat([enc, torch.zeros(*enc.shape[:-1], 1, dtype=dtype)], dim=-1)
    return enc


def grid_positional_encoding(gh: int, gw: int, d_model: int, dtype=torch.float32) -> torch.Tensor:
    """2-D sinusoidal encoding over a gh x gw patch grid, shape (gh*gw, d)."""
    dy = d_model // 2
    rows = sinusoidal_encoding(torch.arange(gh), dy, dtype)
    cols = sinusoidal_encoding(torch.arange(gw), d_model - dy, dtype)
    enc = torch.cat(
        [
            rows[:, None, :].expand(gh, gw, dy),
            cols[None, :, :].expand(gh, gw, d_model - dy),
        ],
        dim=-1,
    )
    return enc.reshape(gh * gw, d_model)


class AgentAwareAttention(nn.Module):
    """Multi-head attention with distinct q/k projections per id-equality.

    Logits for a (query i, key j) pair use the intra-agent projection pair
    when agent_ids[i] == agent_ids[j] and the inter-agent pair otherwise;
    value and output projections are shared.
    """

    def __init__(self, d_model: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if d_model % heads:
            raise InvalidArgumentError("d_model must be divisible by heads")
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_model // heads
        self.q_intra = nn.Linear(d_model, d_model)
        self.k_intra = nn.Linear(d_model, d_model)
        self.q_inter = nn.Linear(d_model, d_model)
        self.k_inter = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def tie_inter_to_intra(self):
        """Copy intra projections onto the inter pair (identity-test hook)."""
        with torch.no_grad():
            self.q_inter.weight.copy_(self.q_intra.weight)
            self.q_inter.bias.copy_(self.q_intra.bias)
            self.k_inter.weight.copy_(self.k_intra.weight)
            self.k_inter.bias.copy_(self.k_intra.bias)

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.d_head).transpose(1, 2)

    def attention_logits(self, q, k, agent_ids):
        """(B, heads, Nq, Nk) scaled logits before masking/softmax."""
        same = agent_ids[:, None] == agent_ids[None, :]
        qi, ki = self._split(self.q_intra(q)), self._split(self.k_intra(k))
        qx, kx = self._split(self.q_inter(q)), self._split(self.k_inter(k))
        intra = qi @ ki.transpose(-1, -2)
        inter = qx @ kx.transpose(-1, -2)
        logits = torch.where(same, intra, inter) / math.sqrt(self.d_head)
        return logits

    def forward(
        self,
        q: torch.Tensor,
        k: torch.Tensor,
        v: torch.Tensor,
        agent_ids: torch.Tensor,
        step_ids: torch.Tensor | None = None,
        causal: bool = False,
        allow_inter: bool = True,
        validity: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if q.ndim != 3 or k.shape != q.shape or v.shape != q.shape:
            raise InvalidArgumentError("q, k, v must share shape (B, N, d)")
        n = q.shape[1]
        if agent_ids.shape != (n,):
            raise InvalidArgumentError(
                f"agent_ids must have one id per token row ({n}), got {tuple(agent_ids.shape)}"
            )
        logits = self.attention_logits(q, k, agent_ids)
        mask = torch.zeros(n, n, dtype=torch.bool)
        if causal:
            if step_ids is None or step_ids.shape != (n,):
                raise InvalidArgumentError("causal attention needs aligned step_ids")
            mask |= step_ids[None, :] > step_ids[:, None]
        if not allow_inter:
            mask |= agent_ids[:, None] != agent_ids[None, :]
        if validity is not None:
            mask = mask[None, :, :] | ~validity[:, None, :].bool()
            mask = mask[:, None]  # (B, 1, N, N) to broadcast over heads
        logits = logits.masked_fill(mask, float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        attn = self.drop(attn)
        out = attn @ self._split(self.v_proj(v))
        out = out.transpose(1, 2).reshape(q.shape)
        return self.out_proj(out)


def agent_aware_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    agent_ids: torch.Tensor,
    params: AgentAwareAttention,
    causal_mask: bool = False,
    step_ids: torch.Tensor | None = None,
    allow_inter: bool = True,
) -> torch.Tensor:
    """Functional wrapper over :class:`AgentAwareAttention`."""
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = q[None], k[None], v[None]
    out = params(q, k, v, agent_ids, step_ids=step_ids, causal=causal_mask, allow_inter=allow_inter)
    return out[0] if squeeze else out


class CrossAttention(nn.Module):
    """Standard multi-head attention from tokens onto condition tokens."""

    def __init__(self, d_model: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.d_head = d_model // heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        m = cond.shape[-2]
        q = self.q_proj(x).reshape(b, n, self.heads, self.d_head).transpose(1, 2)
        k = self.k_proj(cond).reshape(b, m, self.heads, self.d_head).transpose(1, 2)
        v = self.v_proj(cond).reshape(b, m, self.heads, self.d_head).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d_head), dim=-1)
        out = (self.drop(attn) @ v).transpose(1, 2).reshape(b, n, d)
        return self.out_proj(out)


class ConditionTokenizer(nn.Module):
    """Patchify (scene ++ goal/waypoint heatmaps) and project to d_model."""

    def __init__(self, cfg: TemporalNetConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(cfg.condition_channels * cfg.patch * cfg.patch, cfg.d_model)

    def forward(
        self,
        scene_grid: torch.Tensor,
        goal_heatmap: torch.Tensor | None,
        waypoint_heatmap: torch.Tensor | None,
    ) -> torch.Tensor:
        cfg = self.cfg
        planes = [scene_grid]
        if cfg.use_gw_heatmap:
            if goal_heatmap is None or waypoint_heatmap is None:
                raise InvalidArgumentError("goal/waypoint heatmaps required when use_gw_heatmap")
            if goal_heatmap.shape != scene_grid.shape[1:] or waypoint_heatmap.shape != scene_grid.shape[1:]:
                raise InvalidArgumentError("heatmaps must share the scene H x W")
            planes.append(goal_heatmap[None])
            planes.append(waypoint_heatmap[None])
        stacked = torch.cat(planes)
        tokens = self.proj(patchify(stacked, cfg.patch))
        gh, gw = scene_grid.shape[1] // cfg.patch, scene_grid.shape[2] // cfg.patch
        pos = grid_positional_encoding(gh, gw, cfg.d_model, dtype=tokens.dtype)
        return tokens + pos

    def forward_batch(
        self,
        scene_grids: torch.Tensor,
        goal_heatmaps: torch.Tensor | None,
        waypoint_heatmaps: torch.Tensor | None,
    ) -> torch.Tensor:
        """Batched variant: (B, C, H, W) + (B, H, W) grids -> (B, N, d)."""
        cfg = self.cfg
        planes = [scene_grids]
        if cfg.use_gw_heatmap:
            if goal_heatmaps is None or waypoint_heatmaps is None:
                raise InvalidArgumentError("goal/waypoint heatmaps required when use_gw_heatmap")
            planes.append(goal_heatmaps[:, None])
            planes.append(waypoint_heatmaps[:, None])
        x = torch.cat(planes, dim=1)
        b, c, h, w = x.shape
        p = cfg.patch
        if h % p or w % p:
            raise InvalidArgumentError(f"patch size {p} must divide H={h} and W={w}")
        gh, gw = h // p, w // p
        tiles = x.reshape(b, c, gh, p, gw, p).permute(0, 2, 4, 1, 3, 5)
        tokens = self.proj(tiles.reshape(b, gh * gw, c * p * p))
        pos = grid_positional_encoding(gh, gw, cfg.d_model, dtype=tokens.dtype)
        return tokens + pos


def build_condition_tokens(
    scene: SceneMap,
    goal_heatmap: torch.Tensor | None,
    waypoint_heatmap: torch.Tensor | None,
    cfg: TemporalNetConfig,
    params: ConditionTokenizer,
) -> torch.Tensor:
    """Functional wrapper: (N_patches, d_model) condition tokens."""
    if cfg.scene_channels != scene.channels:
        raise InvalidArgumentError(
            f"expected {cfg.scene_channels} scene channels, got {scene.channels}"
        )
    return params(scene.grid, goal_heatmap, waypoint_heatmap)


class _DecoderBlock(nn.Module):
    def __init__(self, cfg: TemporalNetConfig):
        super().__init__()
        d = cfg.d_model
        self.self_attn = AgentAwareAttention(d, cfg.heads, cfg.dropout)
        self.cross_attn = CrossAttention(d, cfg.heads, cfg.dropout) if cfg.use_map_cross_attention else None
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)
        self.ff = nn.Sequential(
            nn.Linear(d, 4 * d), nn.GELU(), nn.Dropout(cfg.dropout), nn.Linear(4 * d, d)
        )

    def forward(self, x, cond_flat, agent_ids, step_ids, allow_inter, steps, validity=None):
        """x: (B, A*T, d) agent-major; cond_flat: (B*A, N, d) or None."""
        b, n, d = x.shape
        h = self.norm1(x)
        x = x + self.self_attn(
            h, h, h, agent_ids, step_ids=step_ids, causal=True,
            allow_inter=allow_inter, validity=validity,
        )
        if self.cross_attn is not None and cond_flat is not None:
            xq = self.norm2(x).reshape(b * (n // steps), steps, d)
            x = x + self.cross_attn(xq, cond_flat).reshape(b, n, d)
        return x + self.ff(self.norm3(x))


class TemporalNet(nn.Module):
    """Displacement-token decoder; one instance per role (student/teacher).

    Inputs to :meth:`forward_tokens` are per-step feature rows
    [dx, dy, goal_off_x, goal_off_y, wp_off_x, wp_off_y]; the head decodes
    the next-step displacement from each token.
    """

    FEATURES = 6

    def __init__(self, cfg: TemporalNetConfig, role: str = "student"):
        super().__init__()
        if role not in ("student", "teacher"):
            raise InvalidArgumentError(f"temporal net role must be student or teacher, got {role!r}")
        self.cfg = cfg
        self.role = role
        self.tokenizer = ConditionTokenizer(cfg)
        self.input_proj = nn.Linear(self.FEATURES, cfg.d_model)
        self.blocks = nn.ModuleList(_DecoderBlock(cfg) for _ in range(cfg.layers))
        self.norm_out = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, 2)
        # zero-init head: a fresh net predicts constant position
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def token_features(
        self,
        positions: torch.Tensor,
        goal: torch.Tensor,
        waypoint: torch.Tensor | None,
    ) -> torch.Tensor:
        """(B, A, T, 2) positions -> (B, A, T, FEATURES) rows."""
        disp = torch.zeros_like(positions)
        disp[..., 1:, :] = positions[..., 1:, :] - positions[..., :-1, :]
        goal_off = goal[..., None, :] - positions
        if self.cfg.use_waypoint and waypoint is not None:
            wp_off = waypoint[..., None, :] - positions
        else:
            wp_off = torch.zeros_like(positions)
        return torch.cat([disp, goal_off, wp_off], dim=-1)

    def forward_tokens(
        self,
        feats: torch.Tensor,
        cond: torch.Tensor | None,
        validity: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Run the block stack; returns per-token displacement predictions.

        feats: (B, A, T, FEATURES); cond: (B, A, N, d) or None.
        Output: (B, A, T, 2) displacement for the step after each token.
        """
        b, a, t, _ = feats.shape
        x = self.input_proj(feats)
        steps = torch.arange(t)
        x = x + sinusoidal_encoding(steps, self.cfg.d_model, dtype=x.dtype)
        agent_ids = torch.arange(a).repeat_interleave(t)
        step_ids = steps.repeat(a)
        x = x.reshape(b, a * t, self.cfg.d_model)
        flat_validity = validity.reshape(b, a * t) if validity is not None else None
        if cond is not None:
            # one condition set per agent: fold agents into the batch for
            # cross-attention, keep them joint for self-attention
            cond_flat = cond.reshape(b * a, cond.shape[-2], cond.shape[-1])
        else:
            cond_flat = None
        for block in self.blocks:
            x = block(
                x, cond_flat, agent_ids, step_ids,
                allow_inter=self.cfg.use_social, steps=t, validity=flat_validity,
            )
        out = self.head(self.norm_out(x))
        return out.reshape(b, a, t, 2)

    def predict_teacher_forced(
        self,
        positions: torch.Tensor,
        t_in: int,
        cond: torch.Tensor | None,
        goal: torch.Tensor,
        waypoint: torch.Tensor | None,
    ) -> torch.Tensor:
        """One parallel pass over ground-truth positions (training mode).

        positions: (B, A, t_in + horizon, 2) ground truth; returns
        (B, A, horizon, 2) predictions where step i predicts positions[t_in+i].
        """
        total = positions.shape[-2]
        if not 1 <= t_in < total:
            raise InvalidArgumentError("need at least one observed and one future step")
        feats = self.token_features(positions[..., :-1, :], goal, waypoint)
        disp = self.forward_tokens(feats, cond)
        pred = positions[..., t_in - 1 : -1, :] + disp[..., t_in - 1 :, :]
        return pred

    def rollout(
        self,
        observed: torch.Tensor,
        cond: torch.Tensor | None,
        goal: torch.Tensor,
        waypoint: torch.Tensor | None,
        horizon: int,
    ) -> torch.Tensor:
        """Free-running autoregressive prediction.

        observed: (B, A, t_in, 2); returns (B, A, horizon, 2).
        """
        if horizon < 1:
            raise InvalidArgumentError("horizon must be >= 1")
        if observed.ndim != 4 or observed.shape[-2] < 1:
            raise InvalidArgumentError("observed must be (B, A, t_in>=1, 2)")
        positions = observed
        for _ in range(horizon):
            feats = self.token_features(positions, goal, waypoint)
            disp = self.forward_tokens(feats, cond)
            nxt = positions[..., -1, :] + disp[..., -1, :]
            positions = torch.cat([positions, nxt[..., None, :]], dim=-2)
        return positions[..., observed.shape[-2] :, :]
