"""Token layout, block-wise attention masking, and the transformer backbone.

Attention rules, in precedence order:
  (a) absent tokens: their mask rows and columns are entirely false;
  (b) task tokens attend to task tokens only;
  (c) observation tokens at timestep t attend to present task tokens and
      observation tokens of timesteps <= t;
  (d) a readout token attends to present task tokens, observation tokens of
      timesteps <= t, and itself; nothing else ever attends to a readout,
      and readouts do not attend to other readouts.

Rule (d) is enforced structurally, not numerically: the forward pass keeps
non-readout and readout tokens in separate tensors, and each readout group
is processed independently. Removing or adding readout groups therefore
leaves every other embedding bit-identical. Similarly, groups absent across
an entire batch are compacted out of the computation, so adding a new group
and masking it absent reproduces the pre-surgery outputs exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tokenizers import KIND_GOAL, KIND_LANG, KIND_OBS, KIND_READOUT, TASK_KINDS, TokenGroup


@dataclass(frozen=True)
class BackboneConfig:
    layers: int
    d_model: int
    mlp_dim: int
    heads: int

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")


# desk-scale size ladder
SIZES = {
    "tiny-desk": BackboneConfig(layers=2, d_model=32, mlp_dim=128, heads=2),
    "small-desk": BackboneConfig(layers=4, d_model=64, mlp_dim=256, heads=4),
    "base-desk": BackboneConfig(layers=6, d_model=128, mlp_dim=512, heads=4),
}


class TokenLayout:
    """Ordered token groups with their sequence spans.

    Task groups come first, then per timestep the observation groups followed
    by that timestep's readout group. Spans are contiguous and non-overlapping.
    """

    def __init__(self, groups: list[TokenGroup], history: int):
        self._validate(groups, history)
        self.groups = list(groups)
        self.history = history
        spans = {}
        pos = 0
        for g in self.groups:
            spans[g.name] = (pos, pos + g.count)
            pos += g.count
        self.spans = spans
        self.seq_len = pos

    @staticmethod
    def _validate(groups, history):
        names = [g.name for g in groups]
        if len(set(names)) != len(names):
            raise ValueError("duplicate group names in layout")
        stage = -1  # last seen timestep; -1 while in task groups
        saw_readout_at = set()
        for g in groups:
            if g.kind in TASK_KINDS:
                if stage != -1:
                    raise ValueError("task groups must precede all timestep groups")
                continue
            if g.timestep < 0 or g.timestep >= history:
                raise ValueError(f"group {g.name}: timestep {g.timestep} outside history {history}")
            if g.timestep < stage:
                raise ValueError("timestep groups must be ordered by timestep")
            if g.timestep > stage:
                stage = g.timestep
            if g.kind == KIND_OBS and g.timestep in saw_readout_at:
                raise ValueError(f"observation group {g.name} after readout of timestep {g.timestep}")
            if g.kind == KIND_READOUT:
                if g.timestep in saw_readout_at:
                    raise ValueError(f"multiple readout groups at timestep {g.timestep}")
                saw_readout_at.add(g.timestep)

    def group(self, name: str) -> TokenGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def readout_groups(self) -> list[TokenGroup]:
        return [g for g in self.groups if g.kind == KIND_READOUT]

    def nonreadout_groups(self) -> list[TokenGroup]:
        return [g for g in self.groups if g.kind != KIND_READOUT]

    def without_readouts(self) -> "TokenLayout":
        return TokenLayout(self.nonreadout_groups(), self.history)

    def default_presence(self) -> np.ndarray:
        v = np.ones(self.seq_len, dtype=bool)
        for g in self.groups:
            if not g.present:
                lo, hi = self.spans[g.name]
                v[lo:hi] = False
        return v

    # --- serialization (used by checkpoints) ---

    def to_lines(self) -> list[str]:
        lines = [f"layout.history={self.history}", f"layout.groups={len(self.groups)}"]
        for i, g in enumerate(self.groups):
            lines.append(f"layout.group.{i}={g.name}|{g.kind}|{g.timestep}|{g.count}")
        return lines

    @staticmethod
    def from_manifest(kv: dict) -> "TokenLayout":
        n = int(kv["layout.groups"])
        groups = []
        for i in range(n):
            name, kind, ts, count = kv[f"layout.group.{i}"].split("|")
            groups.append(TokenGroup(name, kind, int(ts), int(count)))
        return TokenLayout(groups, int(kv["layout.history"]))


def build_attention_mask(layout: TokenLayout, token_present=None) -> np.ndarray:
    """(S, S) boolean mask; entry (i, j) is True iff token i may attend to j.

    Content-independent: derived from the layout structure and presence flags
    alone. `token_present` defaults to the groups' own present flags.
    """
    s = layout.seq_len
    if token_present is None:
        token_present = layout.default_presence()
    token_present = np.asarray(token_present, dtype=bool)
    if token_present.shape != (s,):
        raise T.ShapeError(f"build_attention_mask: presence {token_present.shape} vs seq {s}")

    kind = np.empty(s, dtype=object)
    ts = np.empty(s, dtype=np.int64)
    for g in layout.groups:
        lo, hi = layout.spans[g.name]
        kind[lo:hi] = g.kind
        ts[lo:hi] = g.timestep

    is_task = np.isin(kind, TASK_KINDS)
    is_obs = kind == KIND_OBS
    is_read = kind == KIND_READOUT

    mask = np.zeros((s, s), dtype=bool)
    # (b) task -> task
    mask |= np.outer(is_task, is_task)
    # (c) obs(t) -> task + obs(<= t)
    causal = ts[:, None] >= ts[None, :]
    mask |= is_obs[:, None] & (is_task[None, :] | (is_obs[None, :] & causal))
    # (d) readout(t) -> task + obs(<= t) + self
    mask |= is_read[:, None] & (is_task[None, :] | (is_obs[None, :] & causal))
    mask |= np.diag(is_read)
    # (a) absent rows/columns win over everything
    mask &= token_present[:, None] & token_present[None, :]
    return mask


def additive_mask(allowed: np.ndarray) -> np.ndarray:
    """Boolean allow-matrix to additive pre-softmax mask (0 or NEG_MASK)."""
    return np.where(allowed, 0.0, T.NEG_MASK)


def init_backbone_params(cfg: BackboneConfig, rng: T.Rng, init_std: float = 0.02) -> dict:
    """Fresh backbone parameters, keyed bb.* in a stable order."""
    p = {}

    def w(name, shape):
        p[name] = T.parameter(rng.normal(shape) * init_std, name)

    def zeros(name, shape):
        p[name] = T.parameter(np.zeros(shape), name)

    def ones(name, shape):
        p[name] = T.parameter(np.ones(shape), name)

    d, m = cfg.d_model, cfg.mlp_dim
    for i in range(cfg.layers):
        pre = f"bb.l{i}"
        ones(f"{pre}.ln1.g", (d,)); zeros(f"{pre}.ln1.b", (d,))
        for proj in ("wq", "wk", "wv", "wo"):
            w(f"{pre}.attn.{proj}", (d, d))
        for bias in ("bq", "bk", "bv", "bo"):
            zeros(f"{pre}.attn.{bias}", (d,))
        ones(f"{pre}.ln2.g", (d,)); zeros(f"{pre}.ln2.b", (d,))
        w(f"{pre}.mlp.w1", (d, m)); zeros(f"{pre}.mlp.b1", (m,))
        w(f"{pre}.mlp.w2", (m, d)); zeros(f"{pre}.mlp.b2", (d,))
    ones("bb.final.g", (d,)); zeros("bb.final.b", (d,))
    return p


class SequenceParts:
    """The split token sequence: one tensor for non-readout tokens, one small
    tensor per readout group, plus the bookkeeping to reassemble full order."""

    def __init__(self, layout: TokenLayout, x_nr, readouts: dict, nr_group_names: list[str]):
        self.layout = layout
        self.x_nr = x_nr                  # Tensor (B, S_nr, D)
        self.readouts = readouts          # name -> Tensor (B, count, D)
        self.nr_group_names = nr_group_names
        offs = {}
        pos = 0
        for name in nr_group_names:
            c = layout.group(name).count
            offs[name] = (pos, pos + c)
            pos += c
        self.nr_spans = offs
        self.nr_len = pos


def split_sequence(tokens, layout: TokenLayout, compact_absent=()) -> SequenceParts:
    """Split a full (B, S, D) token tensor into SequenceParts.

    `compact_absent` lists group names to drop from the computation entirely
    (legal only when the group is absent for the whole batch).
    """
    x = tokens if isinstance(tokens, T.Tensor) else T.constant(tokens)
    dropped = set(compact_absent)
    nr_parts, nr_names, readouts = [], [], {}
    for g in layout.groups:
        if g.name in dropped:
            continue
        lo, hi = layout.spans[g.name]
        piece = T.slice_(x, (slice(None), slice(lo, hi)))
        if g.kind == KIND_READOUT:
            readouts[g.name] = piece
        else:
            nr_parts.append(piece)
            nr_names.append(g.name)
    if not nr_parts:
        raise ValueError("layout has no non-readout groups")
    x_nr = nr_parts[0] if len(nr_parts) == 1 else T.concat(nr_parts, axis=1)
    return SequenceParts(layout, x_nr, readouts, nr_names)


def _part_masks(parts: SequenceParts, presence: np.ndarray):
    """Per-example additive masks for the split computation.

    presence: (B, S) over the *full* layout. Returns (mask_nr, readout_masks)
    where mask_nr is (B, S_nr, S_nr) additive and readout_masks maps group
    name -> (B, count, S_nr + count) additive (self block last).
    """
    layout = parts.layout
    batch = presence.shape[0]
    full_masks = np.stack([build_attention_mask(layout, presence[b]) for b in range(batch)])

    nr_idx = np.concatenate([
        np.arange(*layout.spans[name]) for name in parts.nr_group_names
    ]) if parts.nr_group_names else np.zeros(0, dtype=int)
    mask_nr = additive_mask(full_masks[:, nr_idx[:, None], nr_idx[None, :]])

    readout_masks = {}
    for name in parts.readouts:
        lo, hi = layout.spans[name]
        rows = full_masks[:, lo:hi, :]
        vs_nr = rows[:, :, nr_idx]
        self_diag = np.stack([full_masks[:, lo + i, lo + i] for i in range(hi - lo)], axis=1)
        k = hi - lo
        self_block = np.zeros((batch, k, k), dtype=bool)
        for i in range(k):
            self_block[:, i, i] = self_diag[:, i]
        readout_masks[name] = additive_mask(np.concatenate([vs_nr, self_block], axis=2))
    return mask_nr, readout_masks


def _attend_block(q, k, v, add_mask, scale):
    scores = T.scale(T.matmul(q, k, transpose_b=True), scale)
    probs = T.softmax_lastdim(scores, add_mask)
    return T.matmul(probs, v)


def _layer(parts: SequenceParts, params: dict, cfg: BackboneConfig, i: int,
           mask_nr, readout_masks):
    pre = f"bb.l{i}"
    d, nh = cfg.d_model, cfg.heads
    dh = d // nh
    inv_sqrt = 1.0 / math.sqrt(dh)

    def qkv(x):
        h = T.layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        return tuple(
            T.add(T.matmul(h, params[f"{pre}.attn.w{c}"]), params[f"{pre}.attn.b{c}"])
            for c in "qkv"
        )

    q_nr, k_nr, v_nr = qkv(parts.x_nr)
    r_qkv = {name: qkv(x) for name, x in parts.readouts.items()}

    def head_slice(x, h):
        return T.slice_(x, (slice(None), slice(None), slice(h * dh, (h + 1) * dh)))

    ctx_nr_heads = []
    ctx_r_heads = {name: [] for name in parts.readouts}
    for h in range(nh):
        qh, kh, vh = head_slice(q_nr, h), head_slice(k_nr, h), head_slice(v_nr, h)
        ctx_nr_heads.append(_attend_block(qh, kh, vh, mask_nr, inv_sqrt))
        for name, (qr, kr, vr) in r_qkv.items():
            qg, kg, vg = head_slice(qr, h), head_slice(kr, h), head_slice(vr, h)
            scores_nr = T.scale(T.matmul(qg, kh, transpose_b=True), inv_sqrt)
            self_scores = T.scale(T.matmul(qg, kg, transpose_b=True), inv_sqrt)
            scores = T.concat([scores_nr, self_scores], axis=2)
            probs = T.softmax_lastdim(scores, readout_masks[name])
            n_nr = parts.nr_len
            p_nr = T.slice_(probs, (slice(None), slice(None), slice(0, n_nr)))
            p_self = T.slice_(probs, (slice(None), slice(None), slice(n_nr, None)))
            ctx = T.add(T.matmul(p_nr, vh), T.matmul(p_self, vg))
            ctx_r_heads[name].append(ctx)

    def out_proj(heads_list, x_res):
        ctx = heads_list[0] if len(heads_list) == 1 else T.concat(heads_list, axis=2)
        attn_out = T.add(T.matmul(ctx, params[f"{pre}.attn.wo"]), params[f"{pre}.attn.bo"])
        return T.add(x_res, attn_out)

    def mlp(x):
        h = T.layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        h = T.gelu(T.add(T.matmul(h, params[f"{pre}.mlp.w1"]), params[f"{pre}.mlp.b1"]))
        h = T.add(T.matmul(h, params[f"{pre}.mlp.w2"]), params[f"{pre}.mlp.b2"])
        return T.add(x, h)

    x_nr = mlp(out_proj(ctx_nr_heads, parts.x_nr))
    readouts = {
        name: mlp(out_proj(ctx_r_heads[name], parts.readouts[name]))
        for name in parts.readouts
    }
    return SequenceParts(parts.layout, x_nr, readouts, parts.nr_group_names)


def forward_parts(parts: SequenceParts, presence: np.ndarray, params: dict,
                  cfg: BackboneConfig) -> SequenceParts:
    """Run the pre-layer-norm transformer over split sequence parts."""
    mask_nr, readout_masks = _part_masks(parts, presence)
    for i in range(cfg.layers):
        parts = _layer(parts, params, cfg, i, mask_nr, readout_masks)
    g, b = params["bb.final.g"], params["bb.final.b"]
    x_nr = T.layer_norm(parts.x_nr, g, b)
    readouts = {n: T.layer_norm(x, g, b) for n, x in parts.readouts.items()}
    return SequenceParts(parts.layout, x_nr, readouts, parts.nr_group_names)


def assemble(parts: SequenceParts) -> T.Tensor:
    """Reassemble split parts into full (B, S', D) sequence order, where S'
    covers the groups present in the parts (compacted groups excluded)."""
    pieces = []
    for g in parts.layout.groups:
        if g.kind == KIND_READOUT:
            if g.name in parts.readouts:
                pieces.append(parts.readouts[g.name])
        elif g.name in parts.nr_spans:
            lo, hi = parts.nr_spans[g.name]
            pieces.append(T.slice_(parts.x_nr, (slice(None), slice(lo, hi))))
    return pieces[0] if len(pieces) == 1 else T.concat(pieces, axis=1)


def transformer_forward(tokens, layout: TokenLayout, params: dict, cfg: BackboneConfig,
                        presence=None) -> T.Tensor:
    """Full-sequence transformer: (B, S, D) tokens -> (B, S, D) embeddings.

    presence: optional (B, S) boolean; defaults to the layout's own flags.
    Masked pairs receive exactly zero attention weight.
    """
    x = tokens if isinstance(tokens, T.Tensor) else T.constant(tokens)
    if x.data.ndim != 3 or x.shape[1] != layout.seq_len or x.shape[2] != cfg.d_model:
        raise T.ShapeError(
            f"transformer_forward: tokens {x.shape} vs layout seq {layout.seq_len}, d {cfg.d_model}"
        )
    if presence is None:
        presence = np.broadcast_to(layout.default_presence(), (x.shape[0], layout.seq_len))
    presence = np.asarray(presence, dtype=bool)
    parts = split_sequence(x, layout)
    out = forward_parts(parts, presence, params, cfg)
    return assemble(out)


def readout_embeddings(parts_or_full, layout: TokenLayout) -> T.Tensor:
    """Mean embedding of each readout group, in timestep order: (B, H_r, D)."""
    rg = layout.readout_groups()
    if not rg:
        raise ValueError("layout has no readout groups")
    means = []
    if isinstance(parts_or_full, SequenceParts):
        for g in rg:
            means.append(T.mean(parts_or_full.readouts[g.name], axis=1, keepdims=True))
    else:
        e = parts_or_full if isinstance(parts_or_full, T.Tensor) else T.constant(parts_or_full)
        for g in rg:
            lo, hi = layout.spans[g.name]
            block = T.slice_(e, (slice(None), slice(lo, hi)))
            means.append(T.mean(block, axis=1, keepdims=True))
    return means[0] if len(means) == 1 else T.concat(means, axis=1)


def attention_probabilities(tokens, layout: TokenLayout, params: dict, cfg: BackboneConfig,
                            presence_row=None, layer: int = 0, head: int = 0) -> np.ndarray:
    """Debug view: the full (S, S) attention probability matrix of one layer
    and head for a single example. Rows of blocked pairs hold exact zeros."""
    x = tokens if isinstance(tokens, T.Tensor) else T.constant(tokens)
    if x.data.ndim == 2:
        x = T.reshape(x, (1, *x.shape))
    if presence_row is None:
        presence_row = layout.default_presence()
    presence = np.asarray(presence_row, dtype=bool)[None, :]

    parts = split_sequence(x, layout)
    mask_nr, readout_masks = _part_masks(parts, presence)
    for i in range(layer):
        parts = _layer(parts, params, cfg, i, mask_nr, readout_masks)

    pre = f"bb.l{layer}"
    d, nh = cfg.d_model, cfg.heads
    dh = d // nh
    inv_sqrt = 1.0 / math.sqrt(dh)

    def qk(x_part):
        h = T.layer_norm(x_part, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        q = T.add(T.matmul(h, params[f"{pre}.attn.wq"]), params[f"{pre}.attn.bq"])
        k = T.add(T.matmul(h, params[f"{pre}.attn.wk"]), params[f"{pre}.attn.bk"])
        sl = (slice(None), slice(None), slice(head * dh, (head + 1) * dh))
        return T.slice_(q, sl), T.slice_(k, sl)

    s = layout.seq_len
    probs_full = np.zeros((s, s))
    nr_idx = np.concatenate([np.arange(*layout.spans[n]) for n in parts.nr_group_names])

    q_nr, k_nr = qk(parts.x_nr)
    scores = T.scale(T.matmul(q_nr, k_nr, transpose_b=True), inv_sqrt)
    p = T.softmax_lastdim(scores, mask_nr).data[0]
    probs_full[nr_idx[:, None], nr_idx[None, :]] = p

    for name, x_r in parts.readouts.items():
        lo, hi = layout.spans[name]
        qg, kg = qk(x_r)
        scores_nr = T.scale(T.matmul(qg, k_nr, transpose_b=True), inv_sqrt)
        self_scores = T.scale(T.matmul(qg, kg, transpose_b=True), inv_sqrt)
        cat = T.concat([scores_nr, self_scores], axis=2)
        p = T.softmax_lastdim(cat, readout_masks[name]).data[0]
        n_nr = parts.nr_len
        probs_full[lo:hi, nr_idx] = p[:, :n_nr]
        for i in range(hi - lo):
            probs_full[lo + i, lo + i] = p[i, n_nr + i]
    return probs_full


# ---------------------------------------------------------------------------
# finetuning surgery
# ---------------------------------------------------------------------------

def add_group(layout: TokenLayout, tensors: dict, group: TokenGroup, d_model: int,
              rng: T.Rng, init_std: float = 0.02, tokenizer_patch_dim: int | None = None,
              share_tokenizer_with: str | None = None):
    """Add a token group: new positional embeddings (and, for a new camera
    stream, a fresh patch tokenizer) without touching any existing tensor.

    tensors: name -> float array (checkpoint contents); returns a new
    (layout, tensors) pair. Existing arrays are carried over by reference,
    so preserved entries are bit-identical.
    """
    if any(g.name == group.name for g in layout.groups):
        raise ValueError(f"group name {group.name!r} already in layout")

    if group.kind in TASK_KINDS:
        insert_at = max(
            (i + 1 for i, g in enumerate(layout.groups) if g.kind in TASK_KINDS), default=0
        )
    elif group.kind == KIND_OBS:
        insert_at = None
        for i, g in enumerate(layout.groups):
            if g.timestep == group.timestep and g.kind == KIND_READOUT:
                insert_at = i
                break
        if insert_at is None:
            raise ValueError(f"no timestep {group.timestep} in layout")
    else:
        raise ValueError("add_group supports task and observation groups")

    groups = list(layout.groups)
    groups.insert(insert_at, group)
    new_layout = TokenLayout(groups, layout.history)

    out = dict(tensors)
    pos_name = f"pos.{group.name}"
    if pos_name in out:
        raise ValueError(f"tensor {pos_name!r} already exists")
    out[pos_name] = rng.normal((group.count, d_model)) * init_std

    if tokenizer_patch_dim is not None and share_tokenizer_with is None:
        stream = group.name.split(".")[1] if "." in group.name else group.name
        wname, bname = f"tok.{stream}.w", f"tok.{stream}.b"
        if wname not in out:
            out[wname] = rng.normal((tokenizer_patch_dim, d_model)) * init_std
            out[bname] = np.zeros(d_model)
    return new_layout, out


def add_action_head(tensors: dict, head_params: dict):
    """Merge freshly initialized head tensors into a checkpoint's tensor map.
    Existing tensors are untouched; name collisions are rejected."""
    for name in head_params:
        if name in tensors:
            raise ValueError(f"tensor {name!r} already exists")
    out = dict(tensors)
    out.update(head_params)
    return out
