"""Attention model over a (samples x fields) token grid.

The input stacks the target record with its K retrieved neighbors: sample axis
of size K+1 (target first), field axis of size F+1 (a label token at position
0, then one token per field). Intra-sample attention (ISA) mixes fields within
a sample; cross-sample attention (CSA) mixes samples at a fixed field. Four
block layouts are supported:

  cascade  ISA then CSA then MLP, each with a pre-LN residual
  jm       one joint attention over all (K+1)(F+1) tokens, then MLP
  ce       alternating half-blocks: ISA+MLP, CSA+MLP (2L half-blocks for L)
  pa       ISA and CSA in parallel at width D/2, concatenated, then MLP

Padded neighbor samples are key-masked everywhere the sample axis is mixed,
so their content can never reach the target's prediction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import binio
from . import tensor as T
from .errors import DataError
from .retrieval import RetrievalResult

CHECKPOINT_MAGIC = b"RATM"
CHECKPOINT_VERSION = 1

VARIANTS = ("cascade", "jm", "ce", "pa")

LABEL_UNCLICK = 0
LABEL_CLICK = 1
LABEL_UNKNOWN = 2  # the target's label slot


class AttentionEntryCounter:
    """Counts attention score-matrix entries per example (heads excluded)."""

    def __init__(self):
        self.entries = 0

    def reset(self):
        self.entries = 0


def cascade_entries_per_layer(k: int, num_fields: int) -> int:
    s, t = k + 1, num_fields + 1
    return s * t * t + t * s * s


def jm_entries_per_layer(k: int, num_fields: int) -> int:
    s, t = k + 1, num_fields + 1
    return (s * t) ** 2


@dataclass
class Linear:
    w: T.Tensor
    b: T.Tensor

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.add(T.matmul(x, self.w), self.b)


@dataclass
class LayerNormParams:
    gamma: T.Tensor
    beta: T.Tensor

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


@dataclass
class AttentionParams:
    q: Linear
    k: Linear
    v: Linear
    o: Linear
    n_heads: int


@dataclass
class MlpParams:
    lin1: Linear
    lin2: Linear
    activation: str

    def __call__(self, x: T.Tensor) -> T.Tensor:
        h = self.lin1(x)
        h = T.gelu(h) if self.activation == "gelu" else T.relu(h)
        return self.lin2(h)


@dataclass
class Block:
    kind: str  # cascade | jm | intra | cross | pa
    ln1: LayerNormParams
    ln_mlp: LayerNormParams
    mlp: MlpParams
    isa: AttentionParams | None = None
    csa: AttentionParams | None = None
    ln2: LayerNormParams | None = None  # cascade only: LN before CSA


class EmbeddingSet:
    """Per-field tables (row 0 = missing/OOV), a 3-row label table
    (unclick, click, unknown), and a learned pad row for padded neighbors."""

    def __init__(self, field_tables: list[T.Tensor], label_table: T.Tensor, pad_row: T.Tensor):
        self.field_tables = field_tables
        self.label_table = label_table
        self.pad_row = pad_row

    @property
    def dim(self) -> int:
        return self.label_table.data.shape[1]


def _init_linear(rng, fan_in: int, fan_out: int) -> Linear:
    a = np.sqrt(1.0 / fan_in)
    w = T.Tensor(rng.uniform(-a, a, size=(fan_in, fan_out)), requires_grad=True)
    b = T.Tensor(np.zeros(fan_out), requires_grad=True)
    return Linear(w, b)


def _init_ln(dim: int) -> LayerNormParams:
    return LayerNormParams(T.Tensor(np.ones(dim), requires_grad=True),
                           T.Tensor(np.zeros(dim), requires_grad=True))


def _init_attention(rng, dim_in: int, dim_attn: int, n_heads: int) -> AttentionParams:
    if dim_attn % n_heads != 0:
        raise ValueError(f"attention width {dim_attn} not divisible by {n_heads} heads")
    return AttentionParams(
        q=_init_linear(rng, dim_in, dim_attn),
        k=_init_linear(rng, dim_in, dim_attn),
        v=_init_linear(rng, dim_in, dim_attn),
        o=_init_linear(rng, dim_attn, dim_attn),
        n_heads=n_heads,
    )


def _init_mlp(rng, dim: int, hidden: int, activation: str) -> MlpParams:
    return MlpParams(_init_linear(rng, dim, hidden), _init_linear(rng, hidden, dim), activation)


class CtrModel:
    """Embeddings + L blocks of one variant + a sigmoid head reading the
    target's label token (sample 0, field 0)."""

    def __init__(self, field_num_ids: list[int], embed_dim: int = 16, num_blocks: int = 2,
                 num_heads: int = 2, mlp_ratio: int = 4, variant: str = "cascade",
                 activation: str = "gelu", intra_only: bool = False, seed: int = 42):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
        if activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        if embed_dim % num_heads != 0:
            raise ValueError(f"embed_dim {embed_dim} not divisible by {num_heads} heads")
        if variant == "pa" and not intra_only:
            if embed_dim % 2 != 0 or (embed_dim // 2) % num_heads != 0:
                raise ValueError("pa needs embed_dim/2 divisible by num_heads")

        self.field_num_ids = list(field_num_ids)
        self.embed_dim = embed_dim
        self.num_blocks = num_blocks
        self.num_heads = num_heads
        self.mlp_ratio = mlp_ratio
        self.variant = variant
        self.activation = activation
        self.intra_only = intra_only
        self.seed = seed

        rng = np.random.default_rng(seed)
        d = embed_dim
        tables = [T.Tensor(rng.normal(0.0, 0.01, size=(n, d)), requires_grad=True)
                  for n in self.field_num_ids]
        label = T.Tensor(rng.normal(0.0, 0.01, size=(3, d)), requires_grad=True)
        pad = T.Tensor(rng.normal(0.0, 0.01, size=(d,)), requires_grad=True)
        self.emb = EmbeddingSet(tables, label, pad)

        hidden = mlp_ratio * d
        self.blocks: list[Block] = []
        if intra_only:
            kinds = ["intra"] * num_blocks
        elif variant == "cascade":
            kinds = ["cascade"] * num_blocks
        elif variant == "jm":
            kinds = ["jm"] * num_blocks
        elif variant == "ce":
            kinds = ["intra" if i % 2 == 0 else "cross" for i in range(2 * num_blocks)]
        else:
            kinds = ["pa"] * num_blocks

        for kind in kinds:
            if kind == "cascade":
                self.blocks.append(Block(
                    kind=kind,
                    ln1=_init_ln(d),
                    isa=_init_attention(rng, d, d, num_heads),
                    ln2=_init_ln(d),
                    csa=_init_attention(rng, d, d, num_heads),
                    ln_mlp=_init_ln(d),
                    mlp=_init_mlp(rng, d, hidden, activation),
                ))
            elif kind == "jm":
                self.blocks.append(Block(
                    kind=kind,
                    ln1=_init_ln(d),
                    isa=_init_attention(rng, d, d, num_heads),
                    ln_mlp=_init_ln(d),
                    mlp=_init_mlp(rng, d, hidden, activation),
                ))
            elif kind == "intra":
                self.blocks.append(Block(
                    kind=kind,
                    ln1=_init_ln(d),
                    isa=_init_attention(rng, d, d, num_heads),
                    ln_mlp=_init_ln(d),
                    mlp=_init_mlp(rng, d, hidden, activation),
                ))
            elif kind == "cross":
                self.blocks.append(Block(
                    kind=kind,
                    ln1=_init_ln(d),
                    csa=_init_attention(rng, d, d, num_heads),
                    ln_mlp=_init_ln(d),
                    mlp=_init_mlp(rng, d, hidden, activation),
                ))
            else:  # pa
                half = d // 2
                self.blocks.append(Block(
                    kind=kind,
                    ln1=_init_ln(d),
                    isa=_init_attention(rng, d, half, num_heads),
                    csa=_init_attention(rng, d, half, num_heads),
                    ln_mlp=_init_ln(d),
                    mlp=_init_mlp(rng, d, hidden, activation),
                ))

        self.head_w = T.Tensor(np.zeros((d, 1)), requires_grad=True)
        self.head_b = T.Tensor(np.zeros(1), requires_grad=True)

    def named_parameters(self) -> list[tuple[str, T.Tensor]]:
        out: list[tuple[str, T.Tensor]] = []
        for i, t in enumerate(self.emb.field_tables):
            out.append((f"emb.field.{i}", t))
        out.append(("emb.label", self.emb.label_table))
        out.append(("emb.pad", self.emb.pad_row))
        for bi, blk in enumerate(self.blocks):
            pre = f"block.{bi}"
            def ln_params(name, ln):
                return [(f"{pre}.{name}.gamma", ln.gamma), (f"{pre}.{name}.beta", ln.beta)]
            def att_params(name, att):
                ps = []
                for part, lin in (("q", att.q), ("k", att.k), ("v", att.v), ("o", att.o)):
                    ps.append((f"{pre}.{name}.{part}.w", lin.w))
                    ps.append((f"{pre}.{name}.{part}.b", lin.b))
                return ps
            out.extend(ln_params("ln1", blk.ln1))
            if blk.isa is not None:
                out.extend(att_params("attn" if blk.kind == "jm" else "isa", blk.isa))
            if blk.ln2 is not None:
                out.extend(ln_params("ln2", blk.ln2))
            if blk.csa is not None:
                out.extend(att_params("csa", blk.csa))
            out.extend(ln_params("ln_mlp", blk.ln_mlp))
            out.append((f"{pre}.mlp.lin1.w", blk.mlp.lin1.w))
            out.append((f"{pre}.mlp.lin1.b", blk.mlp.lin1.b))
            out.append((f"{pre}.mlp.lin2.w", blk.mlp.lin2.w))
            out.append((f"{pre}.mlp.lin2.b", blk.mlp.lin2.b))
        out.append(("head.w", self.head_w))
        out.append(("head.b", self.head_b))
        return out

    def parameters(self) -> list[T.Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.parameters())

    # forward pieces -----------------------------------------------------

    def _mha(self, x3: T.Tensor, att: AttentionParams, key_mask: np.ndarray | None,
             query_mask: np.ndarray | None) -> T.Tensor:
        """x3: (G, T, D_in) -> (G, T, D_attn). key_mask/query_mask: (G, T) bool."""
        g, t, _ = x3.shape
        h = att.n_heads
        dh = att.q.w.data.shape[1] // h
        scale = 1.0 / np.sqrt(dh)

        def heads(lin):
            y = lin(x3)
            y = T.reshape(y, (g, t, h, dh))
            return T.transpose(y, (0, 2, 1, 3))

        q, k, v = heads(att.q), heads(att.k), heads(att.v)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
        mask4 = None if key_mask is None else key_mask.reshape(g, 1, 1, t)
        attn = T.softmax_lastdim(scores, mask4)
        ctx = T.matmul(attn, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (g, t, h * dh))
        out = att.o(ctx)
        if query_mask is not None:
            out = T.mul(out, query_mask.reshape(g, t, 1).astype(np.float64))
        return out

    def _isa(self, x: T.Tensor, att: AttentionParams, counter) -> T.Tensor:
        """Attention along the field axis, samples as batch. No mask needed."""
        b, s, t, d = x.shape
        if counter is not None:
            counter.entries += s * t * t
        x3 = T.reshape(x, (b * s, t, d))
        out = self._mha(x3, att, None, None)
        return T.reshape(out, (b, s, t, out.shape[-1]))

    def _csa(self, x: T.Tensor, att: AttentionParams, mask: np.ndarray, counter) -> T.Tensor:
        """Attention along the sample axis, fields as batch. Padded samples are
        key-masked and, as queries, get a zero update (residual pass-through)."""
        b, s, t, d = x.shape
        if counter is not None:
            counter.entries += t * s * s
        xt = T.transpose(x, (0, 2, 1, 3))          # (B, T, S, D)
        x3 = T.reshape(xt, (b * t, s, d))
        m = np.repeat(mask[:, None, :], t, axis=1).reshape(b * t, s)
        out = self._mha(x3, att, m, m)
        out = T.reshape(out, (b, t, s, out.shape[-1]))
        return T.transpose(out, (0, 2, 1, 3))

    def _jm_attn(self, x: T.Tensor, att: AttentionParams, mask: np.ndarray, counter) -> T.Tensor:
        """One attention over all samples-x-fields tokens, padded samples key-masked."""
        b, s, t, d = x.shape
        if counter is not None:
            counter.entries += (s * t) ** 2
        x3 = T.reshape(x, (b, s * t, d))
        m = np.repeat(mask, t, axis=1)             # (B, S*T)
        out = self._mha(x3, att, m, m)
        return T.reshape(out, (b, s, t, d))

    def forward_hidden(self, x: T.Tensor, mask: np.ndarray,
                       counter: AttentionEntryCounter | None = None) -> T.Tensor:
        """Run all blocks. x: (B, S, T, D); mask: (B, S) bool, column 0 true."""
        if mask.dtype != bool:
            mask = mask.astype(bool)
        if not mask[:, 0].all():
            raise ValueError("target sample (row 0) must never be masked")
        for blk in self.blocks:
            if blk.kind == "cascade":
                x = T.add(self._isa(blk.ln1(x), blk.isa, counter), x)
                x = T.add(self._csa(blk.ln2(x), blk.csa, mask, counter), x)
            elif blk.kind == "jm":
                x = T.add(self._jm_attn(blk.ln1(x), blk.isa, mask, counter), x)
            elif blk.kind == "intra":
                x = T.add(self._isa(blk.ln1(x), blk.isa, counter), x)
            elif blk.kind == "cross":
                x = T.add(self._csa(blk.ln1(x), blk.csa, mask, counter), x)
            else:  # pa
                z = blk.ln1(x)
                left = self._isa(z, blk.isa, counter)
                right = self._csa(z, blk.csa, mask, counter)
                x = T.add(T.concat_lastdim([left, right]), x)
            x = T.add(blk.mlp(blk.ln_mlp(x)), x)
        return x

    def predict(self, x: T.Tensor, mask: np.ndarray,
                counter: AttentionEntryCounter | None = None) -> T.Tensor:
        """Click probability from the target's label token. Returns (B,)."""
        h = self.forward_hidden(x, mask, counter)
        tok = T.token_at(h, 0, 0)
        logit = T.add(T.matmul(tok, self.head_w), self.head_b)
        return T.reshape(T.sigmoid(logit), (x.shape[0],))

    def config_dict(self) -> dict:
        return {
            "field_num_ids": self.field_num_ids,
            "embed_dim": self.embed_dim,
            "num_blocks": self.num_blocks,
            "num_heads": self.num_heads,
            "mlp_ratio": self.mlp_ratio,
            "variant": self.variant,
            "activation": self.activation,
            "intra_only": self.intra_only,
            "seed": self.seed,
        }


def build_input_batch(emb: EmbeddingSet, target_ids: np.ndarray,
                      neighbor_indices: np.ndarray, neighbor_mask: np.ndarray,
                      pool_field_ids: np.ndarray, pool_labels: np.ndarray
                      ) -> tuple[T.Tensor, np.ndarray]:
    """Assemble (B, K+1, F+1, D) inputs plus the (B, K+1) sample mask.

    Row 0 is the target with the UNKNOWN label token at field position 0;
    rows 1..K are neighbors with their observed label tokens. Padded slots
    become the learned pad row across all F+1 positions.
    """
    target_ids = np.asarray(target_ids, dtype=np.int64)
    b, nf = target_ids.shape
    neighbor_indices = np.asarray(neighbor_indices, dtype=np.int64).reshape(b, -1)
    neighbor_mask = np.asarray(neighbor_mask, dtype=bool).reshape(b, -1)
    k = neighbor_indices.shape[1]

    real = neighbor_mask
    if real.any():
        used = neighbor_indices[real]
        if used.min() < 0 or used.max() >= len(pool_field_ids):
            raise IndexError("neighbor index out of pool range")
    safe = np.where(real, neighbor_indices, 0)

    if k > 0:
        nb_fields = pool_field_ids[safe]                       # (B, K, F)
        nb_labels = pool_labels[safe].astype(np.int64)         # (B, K)
        all_fields = np.concatenate([target_ids[:, None, :], nb_fields], axis=1)
        label_ids = np.concatenate(
            [np.full((b, 1), LABEL_UNKNOWN, dtype=np.int64), nb_labels], axis=1)
    else:
        all_fields = target_ids[:, None, :]
        label_ids = np.full((b, 1), LABEL_UNKNOWN, dtype=np.int64)

    cols = [T.gather_rows(emb.label_table, label_ids)]
    for f in range(nf):
        cols.append(T.gather_rows(emb.field_tables[f], all_fields[:, :, f]))
    x = T.stack(cols, axis=2)                                  # (B, K+1, F+1, D)

    sample_mask = np.concatenate([np.ones((b, 1), dtype=bool), real], axis=1)
    x = T.where_mask(sample_mask[:, :, None, None], x, emb.pad_row)
    return x, sample_mask


def build_input(emb: EmbeddingSet, target_ids: np.ndarray, neighbors: RetrievalResult,
                pool_field_ids: np.ndarray, pool_labels: np.ndarray
                ) -> tuple[T.Tensor, np.ndarray]:
    """Single-record build_input_batch; returns (K+1, F+1, D) and (K+1,)."""
    x, mask = build_input_batch(emb, np.asarray(target_ids)[None, :],
                                neighbors.neighbor_indices[None, :],
                                neighbors.mask[None, :], pool_field_ids, pool_labels)
    return T.reshape(x, x.shape[1:]), mask[0]


def save_checkpoint(model: CtrModel, path: str, extra_config: dict | None = None) -> None:
    """RATM container: config echo as JSON, then raw float64 parameter payloads."""
    cfg = model.config_dict()
    if extra_config:
        cfg = {**cfg, **extra_config}
    named = model.named_parameters()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        binio.write_u16(f, CHECKPOINT_VERSION)
        binio.write_str(f, json.dumps(cfg, sort_keys=True))
        binio.write_u32(f, len(named))
        for name, t in named:
            binio.write_str(f, name)
            binio.write_u8(f, t.data.ndim)
            for dim in t.data.shape:
                binio.write_u32(f, dim)
            binio.write_array(f, t.data, "<f8")


def load_checkpoint(path: str) -> tuple[CtrModel, dict]:
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise DataError(f"cannot open {path}: {e}") from None
    with fh:
        magic = binio.read_exact(fh, 4)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        version = binio.read_u16(fh)
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        cfg = json.loads(binio.read_str(fh))
        n_params = binio.read_u32(fh)
        payload: dict[str, np.ndarray] = {}
        for _ in range(n_params):
            name = binio.read_str(fh)
            ndim = binio.read_u8(fh)
            shape = tuple(binio.read_u32(fh) for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            payload[name] = binio.read_array(fh, count, "<f8").reshape(shape)
        extra = fh.read(1)
        if extra:
            raise DataError(f"{path}: trailing bytes after checkpoint payload")

    model = CtrModel(
        field_num_ids=cfg["field_num_ids"],
        embed_dim=cfg["embed_dim"],
        num_blocks=cfg["num_blocks"],
        num_heads=cfg["num_heads"],
        mlp_ratio=cfg["mlp_ratio"],
        variant=cfg["variant"],
        activation=cfg["activation"],
        intra_only=cfg.get("intra_only", False),
        seed=cfg.get("seed", 42),
    )
    named = dict(model.named_parameters())
    if set(named) != set(payload):
        raise DataError(f"{path}: checkpoint parameters do not match the model layout")
    for name, arr in payload.items():
        if named[name].data.shape != arr.shape:
            raise DataError(f"{path}: shape mismatch for {name}")
        named[name].data = arr.astype(np.float64)
    return model, cfg
