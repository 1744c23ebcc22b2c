"""Training, evaluation, and the four-variant ablation sweep.

Leakage protocol: while training, each target retrieves only from records
strictly earlier than itself inside the train slice; validation and test
queries retrieve from the whole train slice. Neighbors are precomputed once
per record and reused across epochs.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .data import Dataset
from .errors import DataError, UsageError
from .model import CtrModel, build_input_batch
from .retrieval import RetrievalIndex, retrieve_batch

ABLATION_ORDER = ("jm", "ce", "pa", "cascade")
ABLATION_HEADER = ("variant", "auc", "logloss", "params", "runtime_us")


@dataclass
class TrainConfig:
    k: int = 5
    embed_dim: int = 16
    num_blocks: int = 2
    num_heads: int = 2
    mlp_ratio: int = 4
    variant: str = "cascade"
    activation: str = "gelu"
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 10
    early_stop_patience: int = 2
    seed: int = 42
    logloss_clip_eps: float = 1e-7
    intra_only: bool = False

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EvalReport:
    auc: float
    logloss: float
    n: int
    segments: dict[str, dict] | None = None

    def to_dict(self) -> dict:
        out = {"auc": self.auc, "logloss": self.logloss, "n": self.n}
        if self.segments is not None:
            out["segments"] = self.segments
        return out


def logloss(y_true, p_pred, clip_eps: float = 1e-7) -> float:
    """Mean negative log-likelihood with predictions clipped away from 0/1."""
    y = np.asarray(y_true, dtype=np.float64)
    p = np.asarray(p_pred, dtype=np.float64)
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: labels {y.shape} vs predictions {p.shape}")
    if y.size == 0:
        raise ValueError("logloss of an empty slice")
    pc = np.clip(p, clip_eps, 1.0 - clip_eps)
    return float(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean())


def auc(y_true, scores) -> float:
    """Mann-Whitney AUC via average ranks; ties count half."""
    y = np.asarray(y_true)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise ValueError(f"length mismatch: labels {y.shape} vs scores {s.shape}")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: slice has a single class")
    ranks = rankdata(s)
    r_pos = ranks[pos].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


class Adam:
    """Adam with bias correction; every parameter updates every step."""

    def __init__(self, params: list[T.Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else 0.0
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def precompute_neighbors(ds: Dataset, index: RetrievalIndex, k: int
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Neighbor table for every record: strictly-earlier eligibility inside the
    train slice, whole-train-pool for validation and test rows."""
    n = len(ds)
    if k == 0:
        return np.zeros((n, 0), dtype=np.int64), np.zeros((n, 0), dtype=bool)
    neigh = np.full((n, k), -1, dtype=np.int64)
    mask = np.zeros((n, k), dtype=bool)

    tr = np.arange(ds.train_end)
    res_tr = retrieve_batch(index, ds.field_ids[tr], k, "earlier",
                            query_ts=ds.timestamps[tr], query_index=tr)
    ev = np.arange(ds.train_end, n)
    res_ev = retrieve_batch(index, ds.field_ids[ev], k, "all")
    for i, r in zip(tr, res_tr):
        neigh[i] = r.neighbor_indices
        mask[i] = r.mask
    for i, r in zip(ev, res_ev):
        neigh[i] = r.neighbor_indices
        mask[i] = r.mask
    return neigh, mask


def predict_rows(model: CtrModel, ds: Dataset, rows: np.ndarray,
                 neigh: np.ndarray, neigh_mask: np.ndarray,
                 batch_size: int = 512) -> np.ndarray:
    """Forward the model over rows in chunks; returns probabilities."""
    pool_ids = ds.field_ids[:ds.train_end]
    pool_labels = ds.labels[:ds.train_end]
    out = np.empty(len(rows), dtype=np.float64)
    for lo in range(0, len(rows), batch_size):
        chunk = rows[lo:lo + batch_size]
        x, mask = build_input_batch(model.emb, ds.field_ids[chunk], neigh[chunk],
                                    neigh_mask[chunk], pool_ids, pool_labels)
        out[lo:lo + len(chunk)] = model.predict(x, mask).data
    return out


@dataclass
class TrainResult:
    model: CtrModel
    log: list[dict]
    best_epoch: int
    best_valid_auc: float
    stopped_early: bool
    neighbors: tuple[np.ndarray, np.ndarray] = field(repr=False, default=None)


def train(ds: Dataset, index: RetrievalIndex, cfg: TrainConfig,
          neighbors: tuple[np.ndarray, np.ndarray] | None = None) -> TrainResult:
    """Train one model; early stopping on validation AUC, best weights kept."""
    if ds.train_end >= ds.valid_end:
        raise DataError("training needs a non-empty validation slice")
    if index.pool_size != ds.train_end:
        raise DataError(f"index covers {index.pool_size} records, train slice has {ds.train_end}")
    valid_rows = ds.slice_indices("valid")
    vy = ds.labels[valid_rows]
    if vy.min() == vy.max():
        raise DataError("validation slice has a single class; AUC undefined")

    k = 0 if cfg.intra_only else cfg.k
    if neighbors is None:
        neighbors = precompute_neighbors(ds, index, k)
    neigh, neigh_mask = neighbors

    model = CtrModel(
        field_num_ids=[fs.num_ids for fs in ds.schema],
        embed_dim=cfg.embed_dim, num_blocks=cfg.num_blocks, num_heads=cfg.num_heads,
        mlp_ratio=cfg.mlp_ratio, variant=cfg.variant, activation=cfg.activation,
        intra_only=cfg.intra_only, seed=cfg.seed,
    )
    params = model.parameters()
    opt = Adam(params, lr=cfg.learning_rate, beta1=cfg.adam_beta1,
               beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    shuffle_rng = np.random.default_rng(cfg.seed + 1)

    pool_ids = ds.field_ids[:ds.train_end]
    pool_labels = ds.labels[:ds.train_end]
    train_rows = np.arange(ds.train_end)

    best_auc = -np.inf
    best_epoch = -1
    best_state: dict[str, np.ndarray] | None = None
    since_best = 0
    stopped_early = False
    log: list[dict] = []
    step = 0

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        perm = shuffle_rng.permutation(train_rows)
        loss_sum = 0.0
        for lo in range(0, len(perm), cfg.batch_size):
            chunk = perm[lo:lo + cfg.batch_size]
            x, mask = build_input_batch(model.emb, ds.field_ids[chunk], neigh[chunk],
                                        neigh_mask[chunk], pool_ids, pool_labels)
            p = model.predict(x, mask)
            pc = T.clamp(p, cfg.logloss_clip_eps, 1.0 - cfg.logloss_clip_eps)
            y = np.asarray(ds.labels[chunk], dtype=np.float64)
            nll = T.add(T.mul(y, T.tlog(pc)), T.mul(1.0 - y, T.tlog(T.sub(1.0, pc))))
            loss = T.mul(T.tmean(nll), -1.0)
            loss.backward()
            opt.step()
            T.zero_grads(params)
            step += 1
            loss_sum += float(loss.data) * len(chunk)

        valid_p = predict_rows(model, ds, valid_rows, neigh, neigh_mask)
        v_auc = auc(vy, valid_p)
        v_ll = logloss(vy, valid_p, cfg.logloss_clip_eps)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        log.append({
            "step": step,
            "train_logloss": loss_sum / len(perm),
            "valid_auc": v_auc,
            "valid_logloss": v_ll,
            "wall_ms": wall_ms,
        })

        if v_auc > best_auc:
            best_auc = v_auc
            best_epoch = epoch
            best_state = {name: t.data.copy() for name, t in model.named_parameters()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                stopped_early = True
                break

    if best_state is not None:
        for name, t in model.named_parameters():
            t.data = best_state[name]
    return TrainResult(model, log, best_epoch, float(best_auc), stopped_early,
                       neighbors=neighbors)


def _parse_segment(name: str) -> int:
    if name.startswith("tail"):
        try:
            q = int(name[4:])
        except ValueError:
            raise UsageError(f"bad segment name {name!r}; expected tail<percent>") from None
        if not (0 < q <= 100):
            raise UsageError(f"segment percentile out of range in {name!r}")
        return q
    raise UsageError(f"unknown segment {name!r}; supported: tail<percent>")


def tail_user_ids(ds: Dataset, user_field: str, q: int) -> np.ndarray:
    """Ids of the q% of users with the fewest train-slice records (count asc,
    id asc; at least one user)."""
    try:
        f = [fs.name for fs in ds.schema].index(user_field)
    except ValueError:
        raise UsageError(f"user field {user_field!r} not in schema") from None
    vids = ds.field_ids[:ds.train_end, f]
    uniq, counts = np.unique(vids, return_counts=True)
    order = np.lexsort((uniq, counts))
    n_take = max(1, int(np.ceil(q / 100.0 * len(uniq))))
    return uniq[order[:n_take]]


def evaluate(model: CtrModel, ds: Dataset, index: RetrievalIndex, cfg: TrainConfig,
             split: str = "test", segments: list[str] | None = None,
             user_field: str | None = None,
             neighbors: tuple[np.ndarray, np.ndarray] | None = None) -> EvalReport:
    """Metrics over one split, optionally broken out by user-frequency tail."""
    rows = ds.slice_indices(split)
    if len(rows) == 0:
        raise DataError(f"{split} slice is empty")
    y = ds.labels[rows]
    if y.min() == y.max():
        raise DataError(f"{split} slice has a single class; AUC undefined")

    k = 0 if cfg.intra_only else cfg.k
    if neighbors is None:
        neighbors = precompute_neighbors(ds, index, k)
    neigh, neigh_mask = neighbors
    p = predict_rows(model, ds, rows, neigh, neigh_mask)

    seg_out = None
    if segments:
        if not user_field:
            raise UsageError("segments need a designated user-id field")
        names = [fs.name for fs in ds.schema]
        if user_field not in names:
            raise UsageError(f"user field {user_field!r} not in schema")
        f = names.index(user_field)
        seg_out = {}
        row_users = ds.field_ids[rows, f]
        for name in segments:
            q = _parse_segment(name)
            tail = tail_user_ids(ds, user_field, q)
            sel = np.isin(row_users, tail)
            ys, ps = y[sel], p[sel]
            entry: dict = {"n": int(sel.sum())}
            if sel.any():
                entry["logloss"] = logloss(ys, ps, cfg.logloss_clip_eps)
                entry["auc"] = auc(ys, ps) if ys.min() != ys.max() else None
            seg_out[name] = entry

    return EvalReport(
        auc=auc(y, p),
        logloss=logloss(y, p, cfg.logloss_clip_eps),
        n=len(rows),
        segments=seg_out,
    )


def time_forward_per_example(model: CtrModel, ds: Dataset,
                             neighbors: tuple[np.ndarray, np.ndarray],
                             rows: np.ndarray, repeats: int = 5) -> float:
    """Median per-example forward wall time in microseconds over a fixed batch."""
    neigh, neigh_mask = neighbors
    pool_ids = ds.field_ids[:ds.train_end]
    pool_labels = ds.labels[:ds.train_end]
    x, mask = build_input_batch(model.emb, ds.field_ids[rows], neigh[rows],
                                neigh_mask[rows], pool_ids, pool_labels)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        model.predict(x, mask)
        times.append(time.perf_counter() - t0)
    return float(np.median(times) / len(rows) * 1e6)


@dataclass
class AblationRow:
    variant: str
    auc: float
    logloss: float
    params: int
    runtime_us: float


def ablate(ds: Dataset, index: RetrievalIndex, cfg: TrainConfig) -> list[AblationRow]:
    """Train every variant on identical data and seed; report test metrics,
    parameter counts, and per-example forward runtime."""
    neighbors = precompute_neighbors(ds, index, cfg.k)
    test_rows = ds.slice_indices("test")
    timing_rows = test_rows[:min(256, len(test_rows))]
    out = []
    for variant in ABLATION_ORDER:
        res = train(ds, index, replace(cfg, variant=variant, intra_only=False),
                    neighbors=neighbors)
        report = evaluate(res.model, ds, index, replace(cfg, variant=variant),
                          split="test", neighbors=neighbors)
        rt = time_forward_per_example(res.model, ds, neighbors, timing_rows)
        out.append(AblationRow(variant, report.auc, report.logloss,
                               res.model.parameter_count(), rt))
    return out


def write_ablation_csv(rows: list[AblationRow], path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow([r.variant, repr(r.auc), repr(r.logloss), r.params, repr(r.runtime_us)])
